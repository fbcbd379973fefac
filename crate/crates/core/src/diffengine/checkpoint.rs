//! Parameter checkpoints: a raw binary payload plus a JSON manifest.
//!
//! Binary layout, repeated per entry in name order:
//! `u32` name length, name bytes (UTF-8), `u64` rows, `u64` cols, then
//! `rows * cols` little-endian `f64` values. All integers little-endian.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Array, ParamStore};
use crate::error::{Error, Result};
use crate::rng::KeyedRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub global_step: u64,
    pub rng: KeyedRng,
    /// Free-form metadata (training configuration and the like).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, e) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(e.value.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(e.value.cols() as u64).to_le_bytes());
        for v in e.value.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut cur = bytes;
    fn take<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
        if cur.len() < n {
            return Err(Error::invalid("truncated checkpoint"));
        }
        let (head, tail) = cur.split_at(n);
        *cur = tail;
        Ok(head)
    }
    while !cur.is_empty() {
        let name_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut cur, name_len)?)
            .map_err(|_| Error::invalid("checkpoint name is not UTF-8"))?
            .to_string();
        let rows = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| Error::invalid("checkpoint shape overflow"))?;
        let raw = take(&mut cur, n.checked_mul(8).ok_or_else(|| Error::invalid("checkpoint size overflow"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        store.insert(name, Array::from_vec(rows, cols, data));
    }
    Ok(store)
}

fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes `<path>` (binary) and `<path with .json extension>` (manifest).
pub fn save(path: &Path, store: &ParamStore, global_step: u64, rng: KeyedRng, extra: serde_json::Value) -> Result<()> {
    let manifest = Manifest {
        entries: store
            .iter()
            .map(|(n, e)| ManifestEntry { name: n.to_string(), shape: [e.value.rows(), e.value.cols()] })
            .collect(),
        global_step,
        rng,
        extra,
    };
    fs::write(path, encode_params(store))?;
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, Manifest)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let store = decode_params(&bytes)?;
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
    let listed: Vec<(&str, [usize; 2])> = manifest.entries.iter().map(|e| (e.name.as_str(), e.shape)).collect();
    let stored: Vec<(&str, [usize; 2])> =
        store.iter().map(|(n, e)| (n, [e.value.rows(), e.value.cols()])).collect();
    if listed != stored {
        return Err(Error::invalid("checkpoint manifest does not match binary payload"));
    }
    Ok((store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn binary_round_trip_is_bit_exact(vals in proptest::collection::vec(any::<f64>(), 1..40), rows in 1usize..5) {
            let n = vals.len() / rows * rows;
            prop_assume!(n > 0);
            let mut store = ParamStore::new();
            store.insert("layer.w0", Array::from_vec(rows, n / rows, vals[..n].to_vec()));
            store.insert("k", Array::scalar(vals[0]));
            let back = decode_params(&encode_params(&store)).unwrap();
            let a: Vec<u64> = store.flat_values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.flat_values().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.names().collect::<Vec<_>>(), store.names().collect::<Vec<_>>());
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("a", Array::ones(2, 2));
        let bytes = encode_params(&store);
        assert!(decode_params(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut store = ParamStore::new();
        store.insert("b", Array::row(&[0.1, -2.5e-300, f64::MAX]));
        store.insert("a", Array::scalar(std::f64::consts::PI));
        save(&path, &store, 17, KeyedRng::new(5), serde_json::json!({"note": "x"})).unwrap();
        let (back, manifest) = load(&path).unwrap();
        assert_eq!(back, store);
        assert_eq!(manifest.global_step, 17);
        assert_eq!(manifest.rng, KeyedRng::new(5));
        assert_eq!(manifest.entries[0].name, "a");
    }
}
