//! Report tables: per-state RMSE, model-ordering verdicts and timing.
//!
//! Every table here is a pure function of the logs written by the open-
//! and closed-loop evaluators, so a report can be regenerated offline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::STATE_DIM;
use crate::error::{Error, Result};

/// Display unit and the factor from SI to that unit, per state.
pub const STATE_UNITS: [(&str, f64); STATE_DIM] = [
    ("m/s", 1.0),
    ("m/s", 1.0),
    ("deg/s", 180.0 / std::f64::consts::PI),
    ("m", 1.0),
    ("m", 1.0),
    ("deg", 180.0 / std::f64::consts::PI),
];

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Parse { path: path.into(), offset, msg: format!("{kind:?}") },
    }
}

/// One model (or controller) and one state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub name: String,
    pub state: String,
    pub unit: String,
    /// In `unit`.
    pub rmse: f64,
    pub rmse_normalized: f64,
    /// Samples entering the mean.
    pub samples: usize,
    pub runs: usize,
    /// Runs excluded (diverged rollouts or failed closed loops).
    pub failed: usize,
}

fn write_rows<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<S>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

pub fn write_rmse_csv(path: &Path, rows: &[RmseRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_rmse_csv(path: &Path) -> Result<Vec<RmseRow>> {
    read_rows(path)
}

/// Normalized RMSE of `name` per state, in state order.
pub fn normalized_by_state(rows: &[RmseRow], name: &str) -> Option<[f64; STATE_DIM]> {
    let mut out = [f64::NAN; STATE_DIM];
    let mut seen = 0;
    for r in rows.iter().filter(|r| r.name == name) {
        let i = crate::domain::STATE_NAMES.iter().position(|s| *s == r.state)?;
        out[i] = r.rmse_normalized;
        seen += 1;
    }
    (seen == STATE_DIM).then_some(out)
}

/// A checked ordering property.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

fn le(a: f64, b: f64) -> bool {
    a <= b
}

/// Open-loop ordering: `best ≤ mid ≤ worst` on at least `min_states`
/// states, and `best` strictly below both others on every state in
/// `strict`. `NaN` (all rollouts diverged) never satisfies a comparison.
pub fn open_loop_verdicts(
    rows: &[RmseRow],
    [best, mid, worst]: [&str; 3],
    min_states: usize,
    strict: &[usize],
) -> Vec<Verdict> {
    let (Some(b), Some(m), Some(w)) =
        (normalized_by_state(rows, best), normalized_by_state(rows, mid), normalized_by_state(rows, worst))
    else {
        return vec![Verdict { check: "open-loop ordering".into(), passed: false, detail: "missing rows".into() }];
    };
    let ordered: Vec<usize> = (0..STATE_DIM).filter(|&i| le(b[i], m[i]) && le(m[i], w[i])).collect();
    let names: Vec<&str> = ordered.iter().map(|i| crate::domain::STATE_NAMES[*i]).collect();
    let mut out = vec![Verdict {
        check: format!("{best} <= {mid} <= {worst} on >= {min_states} states"),
        passed: ordered.len() >= min_states,
        detail: format!("{} states: {}", ordered.len(), names.join(" ")),
    }];
    for &i in strict {
        out.push(Verdict {
            check: format!("{best} strictly best on {}", crate::domain::STATE_NAMES[i]),
            passed: b[i] < m[i] && b[i] < w[i],
            detail: format!("{best} {:?}, {mid} {:?}, {worst} {:?}", b[i], m[i], w[i]),
        });
    }
    out
}

/// Closed-loop ordering on the physical RMSE of one state:
/// strictly increasing along `order`.
pub fn closed_loop_ordering(rows: &[RmseRow], state: &str, order: &[&str]) -> Verdict {
    let vals: Vec<f64> = order
        .iter()
        .map(|n| rows.iter().find(|r| r.name == *n && r.state == state).map_or(f64::NAN, |r| r.rmse))
        .collect();
    Verdict {
        check: format!("{state}: {}", order.join(" < ")),
        passed: vals.windows(2).all(|w| w[0] < w[1]),
        detail: format!("{vals:?}"),
    }
}

/// `rmse(a) < fraction · rmse(b)` on one state.
pub fn closed_loop_ratio(rows: &[RmseRow], state: &str, a: &str, b: &str, fraction: f64) -> Verdict {
    let get = |n: &str| rows.iter().find(|r| r.name == n && r.state == state).map_or(f64::NAN, |r| r.rmse);
    let (va, vb) = (get(a), get(b));
    Verdict {
        check: format!("{state}: {a} < {fraction} x {b}"),
        passed: va < fraction * vb,
        detail: format!("ratio {:?}", va / vb),
    }
}

pub fn write_verdicts(path: &Path, verdicts: &[Verdict]) -> Result<()> {
    write_rows(path, verdicts)
}

pub fn read_verdicts(path: &Path) -> Result<Vec<Verdict>> {
    read_rows(path)
}

/// Wall time of `mpc_step` for one controller, milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub controller: String,
    pub steps: usize,
    pub mean_ms: f64,
    pub max_ms: f64,
    pub held_steps: usize,
}

pub fn write_timing(path: &Path, rows: &[TimingRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_timing(path: &Path) -> Result<Vec<TimingRow>> {
    read_rows(path)
}
