//! Counter-based random streams.
//!
//! Every draw is addressed by `(purpose, iteration, index)` under one global
//! seed, so the order in which work items are evaluated never changes the
//! numbers they see.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// What a stream is used for. Distinct purposes never share a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Epsilon = 2,
    TimeSample = 3,
    Theta = 4,
    Batch = 5,
    Forecast = 6,
    DataNoise = 7,
    DataPath = 8,
    Perturb = 9,
    Misc = 10,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyedRng {
    pub seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl KeyedRng {
    pub fn new(seed: u64) -> Self {
        KeyedRng { seed }
    }

    /// Independent generator for one `(purpose, iteration, index)` key.
    pub fn stream(&self, purpose: Purpose, iteration: u64, index: u64) -> ChaCha8Rng {
        let key = splitmix(splitmix(splitmix(purpose as u64) ^ iteration) ^ index.rotate_left(32));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(key);
        rng
    }

    /// Derived generator for a sub-experiment (e.g. one seed of a sweep).
    pub fn child(&self, tag: u64) -> KeyedRng {
        KeyedRng { seed: splitmix(self.seed ^ splitmix(tag)) }
    }
}

pub fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
