//! Multi-step open-loop prediction error on held-out trajectories.

use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::data::Segment;
use crate::domain::{NormalizedTrajectory, STATE_DIM, STATE_NAMES};
use crate::error::{Error, Result};
use crate::harness::report::{csv_error, RmseRow, STATE_UNITS};
use crate::koopman::BilinearKoopmanModel;

/// Lifted components beyond this magnitude mark a rollout as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Squared prediction errors of one rollout, summed over its steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutError {
    pub episode: usize,
    pub segment: usize,
    pub steps: usize,
    pub diverged: bool,
    /// Normalized units.
    pub sse_norm: [f64; STATE_DIM],
    /// Physical SI units.
    pub sse_phys: [f64; STATE_DIM],
}

/// Lifts the first state, rolls `horizon` steps with the recorded inputs
/// and compares the projected states with the recorded ones.
pub fn rollout_error(model: &BilinearKoopmanModel<f64>, seg: &Segment, horizon: usize) -> Result<RolloutError> {
    let traj = &seg.trajectory;
    if traj.len() < horizon {
        return Err(Error::Dimension(format!(
            "segment ({}, {}) has {} steps, horizon is {horizon}",
            seg.episode,
            seg.index,
            traj.len()
        )));
    }
    let norm = NormalizedTrajectory::<f64>::from_trajectory(traj, &model.stats);
    let z0 = model.lift(&norm.states.column(0).into_owned());
    let pred = model.rollout(&z0, &norm.inputs, horizon)?;
    let mut out = RolloutError {
        episode: seg.episode,
        segment: seg.index,
        steps: horizon,
        diverged: false,
        sse_norm: [0.0; STATE_DIM],
        sse_phys: [0.0; STATE_DIM],
    };
    if pred.iter().any(|z| z.iter().any(|v| !(v.abs() <= DIVERGENCE_LIMIT))) {
        out.diverged = true;
        return Ok(out);
    }
    for (k, z) in pred.iter().enumerate() {
        let x_n: DVector<f64> = model.project(z);
        let x_p = model.stats.denormalize_state(x_n.as_slice()).to_array();
        let truth = traj.states[k + 1].to_array();
        for i in 0..STATE_DIM {
            let dn = x_n[i] - norm.states[(i, k + 1)];
            let dp = x_p[i] - truth[i];
            out.sse_norm[i] += dn * dn;
            out.sse_phys[i] += dp * dp;
        }
    }
    Ok(out)
}

/// Rollouts over every test segment, evaluated in parallel and returned
/// in input order.
pub fn open_loop_errors(
    model: &BilinearKoopmanModel<f64>,
    test: &[Segment],
    horizon: usize,
) -> Result<Vec<RolloutError>> {
    test.par_iter().map(|s| rollout_error(model, s, horizon)).collect()
}

/// Per-state RMSE over the non-diverged rollouts of one model.
pub fn open_loop_report(model: &str, errors: &[RolloutError]) -> Vec<RmseRow> {
    let kept: Vec<&RolloutError> = errors.iter().filter(|e| !e.diverged).collect();
    let count: usize = kept.iter().map(|e| e.steps).sum();
    let diverged = errors.len() - kept.len();
    (0..STATE_DIM)
        .map(|i| {
            let norm: f64 = kept.iter().map(|e| e.sse_norm[i]).sum();
            let phys: f64 = kept.iter().map(|e| e.sse_phys[i]).sum();
            let (rmse_norm, rmse_phys) = if count == 0 {
                (f64::NAN, f64::NAN)
            } else {
                ((norm / count as f64).sqrt(), (phys / count as f64).sqrt())
            };
            RmseRow {
                name: model.to_string(),
                state: STATE_NAMES[i].to_string(),
                unit: STATE_UNITS[i].0.to_string(),
                rmse: rmse_phys * STATE_UNITS[i].1,
                rmse_normalized: rmse_norm,
                samples: count,
                runs: errors.len(),
                failed: diverged,
            }
        })
        .collect()
}

fn log_header() -> Vec<String> {
    let mut h: Vec<String> = ["model", "episode", "segment", "steps", "diverged"].map(String::from).to_vec();
    h.extend(STATE_NAMES.iter().map(|n| format!("sse_norm_{n}")));
    h.extend(STATE_NAMES.iter().map(|n| format!("sse_phys_{n}")));
    h
}

pub fn write_open_loop_log(path: &Path, model: &str, errors: &[RolloutError]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(log_header()).map_err(|e| csv_error(path, e))?;
    for e in errors {
        let mut rec = vec![
            model.to_string(),
            e.episode.to_string(),
            e.segment.to_string(),
            e.steps.to_string(),
            e.diverged.to_string(),
        ];
        rec.extend(e.sse_norm.iter().chain(&e.sse_phys).map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a log written by [`write_open_loop_log`]; returns the model name
/// and the rollouts.
pub fn read_open_loop_log(path: &Path) -> Result<(String, Vec<RolloutError>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| csv_error(path, e))?.iter().map(String::from).collect();
    if header != log_header() {
        return Err(Error::Parse { path: path.into(), offset: 0, msg: "unexpected open-loop log header".into() });
    }
    let mut model = String::new();
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let bad = |msg: String| Error::Parse {
            path: path.into(),
            offset: rec.position().map_or(0, |p| p.byte() as usize),
            msg: format!("row {}: {msg}", line + 1),
        };
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(format!("column {i}: {e}")));
        let int = |i: usize| rec[i].parse::<usize>().map_err(|e| bad(format!("column {i}: {e}")));
        model = rec[0].to_string();
        let mut sse_norm = [0.0; STATE_DIM];
        let mut sse_phys = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            sse_norm[i] = num(5 + i)?;
            sse_phys[i] = num(5 + STATE_DIM + i)?;
        }
        out.push(RolloutError {
            episode: int(1)?,
            segment: int(2)?,
            steps: int(3)?,
            diverged: rec[4].parse().map_err(|e| bad(format!("diverged: {e}")))?,
            sse_norm,
            sse_phys,
        });
    }
    Ok((model, out))
}
