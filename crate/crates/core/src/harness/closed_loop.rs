//! Receding-horizon runs on the plant and their tracking statistics.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::control::{HorizonRefs, MpcController};
use crate::domain::{CombinedInput, NormStats, VehicleState, STATE_DIM, STATE_NAMES};
use crate::error::{Error, Result};
use crate::harness::report::{csv_error, RmseRow, TimingRow, STATE_UNITS};
use crate::harness::scenario::Scenario;
use crate::plant::BicyclePlant;

/// One closed-loop sample: the measured state before the input is
/// applied, its reference, and what the controller did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopRow {
    pub step: usize,
    pub time: f64,
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
    pub ds: f64,
    pub ey: f64,
    pub epsi: f64,
    pub vx_ref: f64,
    pub vy_ref: f64,
    pub yaw_rate_ref: f64,
    pub ds_ref: f64,
    pub ey_ref: f64,
    pub epsi_ref: f64,
    /// Hand-wheel angle, rad.
    pub delta_w: f64,
    pub u_zeta: f64,
    pub kappa: f64,
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    pub qp_iterations: usize,
    pub kkt_residual: f64,
    pub held: bool,
    pub guard_breached: bool,
    /// Wall time of the controller step alone, ms.
    pub solve_ms: f64,
}

impl ClosedLoopRow {
    pub fn state(&self) -> [f64; STATE_DIM] {
        [self.vx, self.vy, self.yaw_rate, self.ds, self.ey, self.epsi]
    }

    pub fn reference(&self) -> [f64; STATE_DIM] {
        [self.vx_ref, self.vy_ref, self.yaw_rate_ref, self.ds_ref, self.ey_ref, self.epsi_ref]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopRun {
    pub controller: String,
    pub rows: Vec<ClosedLoopRow>,
    /// Set when the plant or the controller raised an error; the rows
    /// stop at that step.
    pub failure: Option<String>,
}

impl ClosedLoopRun {
    pub fn timing(&self) -> TimingRow {
        let n = self.rows.len();
        let (sum, max) = self.rows.iter().fold((0.0, 0.0f64), |(s, m), r| (s + r.solve_ms, m.max(r.solve_ms)));
        TimingRow {
            controller: self.controller.clone(),
            steps: n,
            mean_ms: if n == 0 { f64::NAN } else { sum / n as f64 },
            max_ms: max,
            held_steps: self.rows.iter().filter(|r| r.held).count(),
        }
    }

    /// Largest KKT residual over the run; `NaN` when any step was held.
    pub fn worst_kkt(&self) -> f64 {
        self.rows.iter().map(|r| r.kkt_residual).fold(0.0, |m, r| if r.is_nan() || m.is_nan() { f64::NAN } else { m.max(r) })
    }
}

/// Runs `ctrl` on `plant` through `scenario` from its initial state. The
/// timer wraps only the controller step.
pub fn run_closed_loop(ctrl: &mut MpcController, scenario: &Scenario, plant: &BicyclePlant) -> Result<ClosedLoopRun> {
    scenario.validate()?;
    ctrl.reset();
    let n_h = ctrl.cfg.horizon;
    let mut x = scenario.initial_state();
    let mut rows = Vec::with_capacity(scenario.steps());
    let mut failure = None;
    for k in 0..scenario.steps() {
        let (refs, kappa) = scenario.horizon(k, n_h);
        let started = Instant::now();
        let out = ctrl.step(&x, &HorizonRefs { states: &refs, kappa: &kappa });
        let solve_ms = started.elapsed().as_secs_f64() * 1e3;
        let out = match out {
            Ok(o) => o,
            Err(e) => {
                failure = Some(format!("step {k}: controller: {e}"));
                break;
            }
        };
        let input = CombinedInput::new(out.input.delta_w, out.input.u_zeta, kappa[0]);
        let next = plant.step(&x, &input, scenario.dt);
        let r = &refs[0];
        rows.push(ClosedLoopRow {
            step: k,
            time: scenario.time(k),
            vx: x.vx,
            vy: x.vy,
            yaw_rate: x.yaw_rate,
            ds: x.ds,
            ey: x.ey,
            epsi: x.epsi,
            vx_ref: r.vx,
            vy_ref: r.vy,
            yaw_rate_ref: r.yaw_rate,
            ds_ref: r.ds,
            ey_ref: r.ey,
            epsi_ref: r.epsi,
            delta_w: out.input.delta_w,
            u_zeta: out.input.u_zeta,
            kappa: kappa[0],
            e1: out.e[0],
            e2: out.e[1],
            e3: out.e[2],
            qp_iterations: out.qp_iterations,
            kkt_residual: out.kkt_residual,
            held: out.held,
            guard_breached: next.as_ref().map_or(false, |s| s.guard_breached),
            solve_ms,
        });
        match next {
            Ok(s) => x = s.state,
            Err(e) => {
                failure = Some(format!("step {k}: plant: {e}"));
                break;
            }
        }
    }
    if let Some(f) = &failure {
        log::warn!("{} closed loop failed at {f}", ctrl.kind);
    }
    Ok(ClosedLoopRun { controller: ctrl.kind.name().to_string(), rows, failure })
}

/// Per-state tracking RMSE of each run. A failed run keeps its partial
/// statistics and is counted in `failed`.
pub fn closed_loop_report(runs: &[ClosedLoopRun], stats: &NormStats) -> Vec<RmseRow> {
    let mut out = Vec::new();
    for run in runs {
        let mut sse_p = [0.0; STATE_DIM];
        let mut sse_n = [0.0; STATE_DIM];
        for r in &run.rows {
            let (x, x_ref) = (r.state(), r.reference());
            for i in 0..STATE_DIM {
                let d = x[i] - x_ref[i];
                let dn = stats.normalize_component(i, x[i]) - stats.normalize_component(i, x_ref[i]);
                sse_p[i] += d * d;
                sse_n[i] += dn * dn;
            }
        }
        let n = run.rows.len();
        for i in 0..STATE_DIM {
            let mean = |s: f64| if n == 0 { f64::NAN } else { (s / n as f64).sqrt() };
            out.push(RmseRow {
                name: run.controller.clone(),
                state: STATE_NAMES[i].to_string(),
                unit: STATE_UNITS[i].0.to_string(),
                rmse: mean(sse_p[i]) * STATE_UNITS[i].1,
                rmse_normalized: mean(sse_n[i]),
                samples: n,
                runs: 1,
                failed: usize::from(run.failure.is_some()),
            });
        }
    }
    out
}

/// Per-step log of one run. A failure message goes to a `.failure.txt`
/// sidecar so the CSV stays rectangular.
pub fn write_closed_loop_log(path: &Path, run: &ClosedLoopRun) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in &run.rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let side = failure_path(path);
    match &run.failure {
        Some(f) => std::fs::write(&side, format!("{f}\n")).map_err(|e| Error::io(&side, e)),
        None if side.exists() => std::fs::remove_file(&side).map_err(|e| Error::io(&side, e)),
        None => Ok(()),
    }
}

fn failure_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("failure.txt")
}

pub fn read_closed_loop_log(path: &Path, controller: &str) -> Result<ClosedLoopRun> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let rows = r
        .deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect::<Result<Vec<ClosedLoopRow>>>()?;
    let side = failure_path(path);
    let failure = if side.exists() {
        Some(std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?.trim_end().to_string())
    } else {
        None
    };
    Ok(ClosedLoopRun { controller: controller.to_string(), rows, failure })
}

/// The state at the start of `row`, as a plant state.
pub fn row_state(row: &ClosedLoopRow) -> VehicleState {
    VehicleState::from_array(row.state())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{ControllerKind, ModelSource, MpcConfig};
    use crate::harness::scenario::{dlc_reference, Profile};

    fn stats() -> NormStats {
        NormStats {
            state_mean: [20.0, 0.0, 0.0, 0.5, 0.0, 0.0],
            state_std: [5.0, 0.4, 0.1, 0.12, 1.5, 0.05],
            input_mean: [0.0, 0.0, 0.0],
            input_std: [0.2, 0.4, 2e-3],
        }
    }

    fn short_dlc() -> Scenario {
        let mut s = dlc_reference();
        s.duration = 1.0;
        s
    }

    fn plant_controller() -> MpcController {
        let plant = BicyclePlant::default();
        let src = ModelSource::Plant { plant, dt: 0.025, stats: stats() };
        MpcController::new(ControllerKind::PlantLinearized, src, MpcConfig::default()).unwrap()
    }

    #[test]
    fn run_records_every_step() {
        let s = short_dlc();
        let run = run_closed_loop(&mut plant_controller(), &s, &BicyclePlant::default()).unwrap();
        assert!(run.failure.is_none());
        assert_eq!(run.rows.len(), s.steps());
        assert!(run.worst_kkt() <= 1e-8);
        assert_eq!(run.rows[0].state(), s.initial_state().to_array());
        assert_eq!(row_state(&run.rows[3]).to_array(), run.rows[3].state());
        let t = run.timing();
        assert_eq!(t.steps, s.steps());
        assert!(t.mean_ms > 0.0 && t.max_ms >= t.mean_ms);
    }

    #[test]
    fn straight_road_at_reference_stays_close() {
        // Already on the reference at constant speed: the plant-linearized
        // controller should barely move.
        let mut s = short_dlc();
        s.ey_ref = Profile::constant(0.0);
        s.kappa = Profile::constant(0.0);
        let run = run_closed_loop(&mut plant_controller(), &s, &BicyclePlant::default()).unwrap();
        let report = closed_loop_report(&[run], &stats());
        let ey = report.iter().find(|r| r.state == "ey").unwrap();
        assert!(ey.rmse < 0.05, "{ey:?}");
    }

    #[test]
    fn report_matches_hand_rmse() {
        let row = |k: usize, ey: f64| ClosedLoopRow {
            step: k,
            time: 0.0,
            vx: 20.0,
            vy: 0.0,
            yaw_rate: 0.0,
            ds: 0.5,
            ey,
            epsi: 0.0,
            vx_ref: 20.0,
            vy_ref: 0.0,
            yaw_rate_ref: 0.0,
            ds_ref: 0.5,
            ey_ref: 0.0,
            epsi_ref: 0.0,
            delta_w: 0.0,
            u_zeta: 0.0,
            kappa: 0.0,
            e1: 0.0,
            e2: 0.0,
            e3: 0.0,
            qp_iterations: 1,
            kkt_residual: 0.0,
            held: false,
            guard_breached: false,
            solve_ms: 1.0,
        };
        let run = ClosedLoopRun { controller: "c".into(), rows: vec![row(0, 3.0), row(1, -4.0)], failure: None };
        let rep = closed_loop_report(&[run], &stats());
        let ey = &rep[4];
        assert_eq!(ey.state, "ey");
        assert!((ey.rmse - (12.5f64).sqrt()).abs() < 1e-15);
        assert!((ey.rmse_normalized - (12.5f64).sqrt() / 1.5).abs() < 1e-15);
        assert_eq!(rep[0].rmse, 0.0);
    }

    #[test]
    fn log_round_trip_reproduces_report() {
        let s = short_dlc();
        let mut run = run_closed_loop(&mut plant_controller(), &s, &BicyclePlant::default()).unwrap();
        run.failure = Some("step 9: plant: boom".into());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.csv");
        write_closed_loop_log(&p, &run).unwrap();
        let back = read_closed_loop_log(&p, &run.controller).unwrap();
        assert_eq!(back, run);
        assert_eq!(closed_loop_report(&[back], &stats()), closed_loop_report(&[run.clone()], &stats()));
        run.failure = None;
        write_closed_loop_log(&p, &run).unwrap();
        assert_eq!(read_closed_loop_log(&p, &run.controller).unwrap().failure, None);
    }
}
