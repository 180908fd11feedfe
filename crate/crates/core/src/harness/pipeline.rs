//! The desk-scale experiment end to end: data, four models, open-loop
//! table, DLC closed loop, verdicts.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/        manifest, norm stats, binary segments
//! models/      mdbk.json mdk.json edmdk.json lti.json
//! logs/        training logs, per-rollout and per-step CSVs
//! reports/     open_loop_rmse.csv closed_loop_rmse.csv verdicts.csv
//! h/           |H_i| of the bilinear model
//! timing.csv   mpc_step wall time (kept out of reports/)
//! ```
//!
//! Everything in `reports/` is a pure function of `logs/` and depends on
//! the seeds only.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::control::{fit_lti_baseline, ControllerKind, ModelSource, MpcConfig, MpcController};
use crate::data::{generate_episodes, segment_and_split, GenConfig, SplitDataset};
use crate::domain::{compute_norm_stats, NormStats, NormalizedTrajectory, Trajectory};
use crate::edmd::{fit_lifted_linear, EdmdDictionary};
use crate::error::Result;
use crate::harness::closed_loop::{
    closed_loop_report, read_closed_loop_log, run_closed_loop, write_closed_loop_log, ClosedLoopRun,
};
use crate::harness::export::export_h;
use crate::harness::open_loop::{open_loop_errors, open_loop_report, read_open_loop_log, write_open_loop_log};
use crate::harness::report::{
    closed_loop_ordering, closed_loop_ratio, open_loop_verdicts, write_rmse_csv, write_timing, write_verdicts,
    RmseRow, TimingRow, Verdict,
};
use crate::harness::scenario::{dlc_reference, Scenario};
use crate::io::{ensure_dir, save_checkpoint, save_dataset};
use crate::koopman::{BilinearKoopmanModel, Observables};
use crate::plant::{BicyclePlant, PlantParams};
use crate::training::{train_model, write_train_log, TrainConfig, TrainMode, TrainOutcome};

/// Open-loop model names in table order.
pub const MODEL_NAMES: [&str; 4] = ["mdbk", "mdk", "edmdk", "lti"];

/// Controllers of the closed-loop comparison, in run order.
pub const CONTROLLERS: [ControllerKind; 5] = [
    ControllerKind::CerMdbk,
    ControllerKind::CerMdk,
    ControllerKind::Edmdk,
    ControllerKind::Lti,
    ControllerKind::PlantLinearized,
];

/// Spectral-radius tolerance of a trained `A`.
pub const SPECTRAL_TOLERANCE: f64 = 1.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub gen: GenConfig,
    pub plant: PlantParams,
    pub train: TrainConfig,
    pub mpc: MpcConfig,
    pub edmd_lambda: f64,
    pub lti_lambda: f64,
    /// Open-loop prediction horizon, steps.
    pub horizon: usize,
    /// Entries listed in `h/h_top.csv`.
    pub top_k: usize,
    pub scenario: Scenario,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            plant: PlantParams::default(),
            train: TrainConfig::default(),
            mpc: MpcConfig::default(),
            edmd_lambda: 1e-6,
            lti_lambda: 1e-6,
            horizon: 80,
            top_k: 20,
            scenario: dlc_reference(),
        }
    }
}

impl PipelineConfig {
    /// One seed for everything: data generation and encoder/batch sampling.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.gen.seed = seed;
        self.train.seed = seed ^ 0x7a11;
        self
    }
}

/// Generated data and its normalization.
pub struct PreparedData {
    pub split: SplitDataset,
    pub stats: NormStats,
}

pub fn prepare_data(cfg: &PipelineConfig, data_dir: Option<&Path>) -> Result<PreparedData> {
    let plant = BicyclePlant { params: cfg.plant };
    let episodes = generate_episodes(&cfg.gen, &plant)?;
    let split = segment_and_split(&episodes, &cfg.gen)?;
    let trajs: Vec<Trajectory> = split.train.iter().map(|s| s.trajectory.clone()).collect();
    let stats = compute_norm_stats(&trajs)?.stats;
    if let Some(dir) = data_dir {
        save_dataset(&ensure_dir(dir)?, &split, &episodes, &cfg.gen, &cfg.plant, &stats)?;
    }
    Ok(PreparedData { split, stats })
}

pub fn normalize_all(segs: &[crate::data::Segment], stats: &NormStats) -> Vec<NormalizedTrajectory<f64>> {
    segs.iter().map(|s| NormalizedTrajectory::from_trajectory(&s.trajectory, stats)).collect()
}

/// Ridge EDMD on the fixed RBF dictionary.
pub fn fit_edmdk(train: &[NormalizedTrajectory<f64>], stats: &NormStats, lambda: f64) -> Result<BilinearKoopmanModel<f64>> {
    let dict = EdmdDictionary::<f64>::standard();
    let fit = fit_lifted_linear(train, |x: &DVector<f64>| dict.lift(x), lambda)?;
    Ok(BilinearKoopmanModel { observables: Observables::Edmd(dict), a: fit.a, b: fit.b, h: Vec::new(), stats: stats.clone() })
}

pub struct FittedModels {
    pub mdbk: TrainOutcome<f64>,
    pub mdk: TrainOutcome<f64>,
    pub edmdk: BilinearKoopmanModel<f64>,
    pub lti: BilinearKoopmanModel<f64>,
}

impl FittedModels {
    pub fn named(&self) -> [(&'static str, &BilinearKoopmanModel<f64>); 4] {
        [("mdbk", &self.mdbk.model), ("mdk", &self.mdk.model), ("edmdk", &self.edmdk), ("lti", &self.lti)]
    }
}

pub fn fit_models(cfg: &PipelineConfig, data: &PreparedData) -> Result<FittedModels> {
    let train = normalize_all(&data.split.train, &data.stats);
    let val = normalize_all(&data.split.val, &data.stats);
    let fit_deep = |mode| {
        let tc = TrainConfig { mode, ..cfg.train.clone() };
        let started = Instant::now();
        let out = train_model(&tc, &data.stats, &train, &val)?;
        log::info!(
            "{mode:?} training: {:?} after {} iterations, best val {:.4e} at {} ({:.0?})",
            out.status,
            out.iterations,
            out.best_val_loss,
            out.best_iteration,
            started.elapsed()
        );
        Ok::<_, crate::Error>(out)
    };
    let mdbk = fit_deep(TrainMode::Bilinear)?;
    let mdk = fit_deep(TrainMode::Linear)?;
    Ok(FittedModels {
        mdbk,
        mdk,
        edmdk: fit_edmdk(&train, &data.stats, cfg.edmd_lambda)?,
        lti: fit_lti_baseline(&train, &data.stats, cfg.lti_lambda)?,
    })
}

pub fn controller_for(
    kind: ControllerKind,
    models: &FittedModels,
    cfg: &PipelineConfig,
    stats: &NormStats,
) -> Result<MpcController> {
    let source = match kind {
        ControllerKind::CerMdbk => ModelSource::Koopman(models.mdbk.model.clone()),
        ControllerKind::CerMdk => ModelSource::Koopman(models.mdk.model.clone()),
        ControllerKind::Edmdk => ModelSource::Koopman(models.edmdk.clone()),
        ControllerKind::Lti => ModelSource::Koopman(models.lti.clone()),
        ControllerKind::PlantLinearized => ModelSource::Plant {
            plant: BicyclePlant { params: cfg.plant },
            dt: cfg.scenario.dt,
            stats: stats.clone(),
        },
    };
    MpcController::new(kind, source, cfg.mpc.clone())
}

/// Closed-loop and open-loop verdicts plus the spectral property.
pub fn build_verdicts(open: &[RmseRow], closed: &[RmseRow], runs: &[ClosedLoopRun], radii: &[(&str, f64)]) -> Vec<Verdict> {
    let mut v = open_loop_verdicts(open, ["mdbk", "mdk", "edmdk"], 4, &[1, 2]);
    let order = ["cer-mdbk", "cer-mdk", "lti"];
    v.push(closed_loop_ordering(closed, "ey", &order));
    v.push(closed_loop_ordering(closed, "epsi", &order));
    v.push(closed_loop_ratio(closed, "ey", "cer-mdbk", "cer-mdk", 0.5));
    v.push(closed_loop_ordering(closed, "ey", &["plant-linearized", "lti"]));
    for (name, rho) in radii {
        v.push(Verdict {
            check: format!("spectral radius of {name} <= {SPECTRAL_TOLERANCE}"),
            passed: *rho <= SPECTRAL_TOLERANCE,
            detail: format!("{rho:?}"),
        });
    }
    for run in runs {
        let held = run.rows.iter().filter(|r| r.held).count();
        let worst = run.rows.iter().map(|r| r.kkt_residual).fold(0.0f64, |m, r| if r.is_nan() { m } else { m.max(r) });
        v.push(Verdict {
            check: format!("{}: every QP passes the KKT check", run.controller),
            passed: held == 0 && run.failure.is_none(),
            detail: format!("held {held}, worst residual {worst:?}"),
        });
    }
    v
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub open_loop: Vec<RmseRow>,
    pub closed_loop: Vec<RmseRow>,
    pub verdicts: Vec<Verdict>,
    pub timing: Vec<TimingRow>,
    /// Spectral radii of the trained `A` matrices.
    pub spectral_radii: Vec<(String, f64)>,
    pub reports: PathBuf,
}

/// Runs the whole desk experiment into `out`.
pub fn run_desk_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineSummary> {
    cfg.scenario.validate()?;
    cfg.mpc.validate()?;
    let out = ensure_dir(out)?;
    let logs = ensure_dir(&out.join("logs"))?;
    let models_dir = ensure_dir(&out.join("models"))?;
    let reports = ensure_dir(&out.join("reports"))?;

    let started = Instant::now();
    let data = prepare_data(cfg, Some(&out.join("data")))?;
    log::info!(
        "data: {} train / {} val / {} test segments ({:.1?})",
        data.split.train.len(),
        data.split.val.len(),
        data.split.test.len(),
        started.elapsed()
    );
    let models = fit_models(cfg, &data)?;
    let cfg_json = serde_json::to_value(cfg).map_err(|e| crate::Error::Config(e.to_string()))?;
    for (name, m) in models.named() {
        save_checkpoint(&models_dir.join(format!("{name}.json")), m, cfg_json.clone())?;
    }
    write_train_log(&logs.join("train_mdbk.csv"), &models.mdbk.log)?;
    write_train_log(&logs.join("train_mdk.csv"), &models.mdk.log)?;
    export_h(&models.mdbk.model, &out.join("h"), cfg.top_k)?;

    let mut open = Vec::new();
    for (name, m) in models.named() {
        let errs = open_loop_errors(m, &data.split.test, cfg.horizon)?;
        write_open_loop_log(&logs.join(format!("open_loop_{name}.csv")), name, &errs)?;
        open.extend(open_loop_report(name, &errs));
    }
    write_rmse_csv(&reports.join("open_loop_rmse.csv"), &open)?;

    let plant = BicyclePlant { params: cfg.plant };
    let mut runs = Vec::new();
    for kind in CONTROLLERS {
        let mut ctrl = controller_for(kind, &models, cfg, &data.stats)?;
        let run = run_closed_loop(&mut ctrl, &cfg.scenario, &plant)?;
        write_closed_loop_log(&logs.join(format!("closed_loop_{}.csv", kind.name())), &run)?;
        runs.push(run);
    }
    let closed = closed_loop_report(&runs, &data.stats);
    write_rmse_csv(&reports.join("closed_loop_rmse.csv"), &closed)?;
    let timing: Vec<TimingRow> = runs.iter().map(ClosedLoopRun::timing).collect();
    write_timing(&out.join("timing.csv"), &timing)?;

    let radii = vec![
        ("mdbk".to_string(), models.mdbk.model.spectral_radius()?),
        ("mdk".to_string(), models.mdk.model.spectral_radius()?),
    ];
    let radii_ref: Vec<(&str, f64)> = radii.iter().map(|(n, r)| (n.as_str(), *r)).collect();
    let verdicts = build_verdicts(&open, &closed, &runs, &radii_ref);
    write_verdicts(&reports.join("verdicts.csv"), &verdicts)?;
    log::info!("pipeline finished in {:.1?}", started.elapsed());
    Ok(PipelineSummary { open_loop: open, closed_loop: closed, verdicts, timing, spectral_radii: radii, reports })
}

/// Rebuilds both RMSE tables from the logs of a finished run.
pub fn reports_from_logs(out: &Path, stats: &NormStats) -> Result<(Vec<RmseRow>, Vec<RmseRow>)> {
    let logs = out.join("logs");
    let mut open = Vec::new();
    for name in MODEL_NAMES {
        let (model, errs) = read_open_loop_log(&logs.join(format!("open_loop_{name}.csv")))?;
        open.extend(open_loop_report(&model, &errs));
    }
    let runs = CONTROLLERS
        .iter()
        .map(|k| read_closed_loop_log(&logs.join(format!("closed_loop_{}.csv", k.name())), k.name()))
        .collect::<Result<Vec<_>>>()?;
    Ok((open, closed_loop_report(&runs, stats)))
}
