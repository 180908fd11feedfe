//! Magnitudes of the bilinear coupling matrices for external plotting.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::domain::INPUT_NAMES;
use crate::error::{Error, Result};
use crate::harness::report::csv_error;
use crate::io::{ensure_dir, matrix_csv};
use crate::koopman::BilinearKoopmanModel;

/// One of the largest `|H_i|` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HEntry {
    pub input: String,
    pub row: usize,
    pub col: usize,
    pub value: f64,
    pub magnitude: f64,
}

/// `|H_i|` per input channel; a linear model yields zero matrices.
pub fn h_magnitudes(model: &BilinearKoopmanModel<f64>) -> Vec<DMatrix<f64>> {
    let p = model.p();
    (0..model.input_dim())
        .map(|i| model.h.get(i).map_or_else(|| DMatrix::zeros(p, p), |h| h.abs()))
        .collect()
}

/// The `k` largest entries over all channels, largest first; ties keep
/// channel, row, column order.
pub fn top_entries(model: &BilinearKoopmanModel<f64>, k: usize) -> Vec<HEntry> {
    let mut all = Vec::new();
    for (i, h) in model.h.iter().enumerate() {
        for c in 0..h.ncols() {
            for r in 0..h.nrows() {
                let v = h[(r, c)];
                all.push(HEntry { input: INPUT_NAMES[i].to_string(), row: r, col: c, value: v, magnitude: v.abs() });
            }
        }
    }
    all.sort_by(|a, b| {
        b.magnitude
            .total_cmp(&a.magnitude)
            .then_with(|| INPUT_NAMES.iter().position(|n| *n == a.input).cmp(&INPUT_NAMES.iter().position(|n| *n == b.input)))
            .then(a.row.cmp(&b.row))
            .then(a.col.cmp(&b.col))
    });
    all.truncate(k);
    all
}

/// Writes `h_<input>.csv` (dense `p × p`) per channel and `h_top.csv`;
/// returns the written paths.
pub fn export_h(model: &BilinearKoopmanModel<f64>, dir: &Path, top_k: usize) -> Result<Vec<PathBuf>> {
    let dir = ensure_dir(dir)?;
    let mut written = Vec::new();
    for (i, m) in h_magnitudes(model).iter().enumerate() {
        let path = dir.join(format!("h_{}.csv", INPUT_NAMES[i]));
        std::fs::write(&path, matrix_csv(m)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let path = dir.join("h_top.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for e in top_entries(model, top_k) {
        w.serialize(e).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}
