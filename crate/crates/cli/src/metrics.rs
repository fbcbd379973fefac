//! Per-iteration training metrics and their CSV form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CliError, Result};

pub const HEADER: &str = "iter,cum_nfe,elbo,ll_term,res_term,kl_theta,lr,kl_weight,val_rmse";

/// One row of the metrics CSV. Fields that do not apply to a method, or
/// validation on iterations without one, are written as empty cells.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub cum_nfe: u64,
    pub elbo: Option<f64>,
    pub ll_term: Option<f64>,
    pub res_term: Option<f64>,
    pub kl_theta: Option<f64>,
    pub lr: f64,
    pub kl_weight: Option<f64>,
    pub val_rmse: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{:?},{},{}",
            r.iter,
            r.cum_nfe,
            cell(r.elbo),
            cell(r.ll_term),
            cell(r.res_term),
            cell(r.kl_theta),
            r.lr,
            cell(r.kl_weight),
            cell(r.val_rmse)
        )
        .unwrap();
    }
    s
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, to_csv(rows)).map_err(CliError::io(path))
}

/// `(iter, cum_nfe, val_rmse)` for the rows that carry a validation value.
pub fn validation_curve(rows: &[MetricsRow]) -> Vec<(u64, u64, f64)> {
    rows.iter().filter_map(|r| r.val_rmse.map(|v| (r.iter, r.cum_nfe, v))).collect()
}

/// A CSV table with a header row; empty cells become `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or("empty CSV")?;
        let columns: Vec<String> = header.split(',').map(|c| c.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns.len() {
                return Err(format!("row {}: expected {} fields, found {}", i + 2, columns.len(), fields.len()));
            }
            let row = fields
                .iter()
                .map(|f| {
                    let f = f.trim();
                    if f.is_empty() {
                        Ok(None)
                    } else {
                        f.parse::<f64>().map(Some).map_err(|_| format!("row {}: '{f}' is not a number", i + 2))
                    }
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err("CSV has no data rows".into());
        }
        Ok(Table { columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}
