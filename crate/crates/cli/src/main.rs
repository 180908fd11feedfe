use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use frenet_koopman::control::{ControllerKind, ModelSource, MpcController};
use frenet_koopman::data::{generate_episodes, segment_and_split};
use frenet_koopman::domain::compute_norm_stats;
use frenet_koopman::harness::closed_loop::{read_closed_loop_log, write_closed_loop_log};
use frenet_koopman::harness::export::export_h;
use frenet_koopman::harness::open_loop::write_open_loop_log;
use frenet_koopman::harness::pipeline::{fit_edmdk, normalize_all, run_desk_pipeline, PipelineConfig};
use frenet_koopman::harness::report::{write_rmse_csv, write_timing};
use frenet_koopman::harness::{closed_loop_report, open_loop_errors, open_loop_report, run_closed_loop, Scenario};
use frenet_koopman::io::{ensure_dir, load_checkpoint, load_dataset, load_norm_stats, read_json, save_checkpoint, save_dataset};
use frenet_koopman::plant::BicyclePlant;
use frenet_koopman::training::{train_model, write_train_log, TrainMode};

#[derive(Parser, Debug)]
#[command(name = "frenet-koopman", version, about = "Bilinear Koopman models and MPC for Frenet vehicle dynamics")]
struct Cli {
    /// TOML file with a (partial) pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate episodes and write a segmented dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train a deep Koopman model on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "bilinear")]
        mode: TrainMode,
        /// Checkpoint path; the training log goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the EDMD or state-space baseline.
    FitBaseline {
        #[arg(long)]
        data: PathBuf,
        /// `edmdk` or `lti`.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-step prediction error of checkpoints on the test split.
    EvalOpenLoop {
        #[arg(long)]
        data: PathBuf,
        /// One or more checkpoints; the file stem names the model.
        #[arg(long, required = true, num_args = 1..)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Report CSV; per-rollout logs go next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one controller on a scenario against the plant.
    RunMpc {
        /// Prediction model (for `plant-linearized` only its normalization
        /// is used).
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        controller: ControllerKind,
        /// Scenario JSON; defaults to the configured double lane change.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop RMSE and timing tables from `run-mpc` logs.
    EvalClosedLoop {
        /// Logs named `<controller>.csv`.
        #[arg(long, required = true, num_args = 1..)]
        logs: Vec<PathBuf>,
        /// `norm_stats.json` used for the normalized column.
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write |H_i| of a checkpoint as CSV.
    ExportH {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Checkpoint inspection.
    Model {
        #[command(subcommand)]
        command: ModelCommand,
    },
    /// Data, training, baselines, open and closed loop in one go.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum ModelCommand {
    /// Dimensions, spectral radius of A and Frobenius norms of H_i.
    Info { ckpt: PathBuf },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn config_echo(cfg: &PipelineConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

fn model_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = model_name(path);
    path.with_file_name(format!("{stem}{suffix}"))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::GenData { out, episodes } => {
            if let Some(n) = episodes {
                cfg.gen.n_episodes = n;
            }
            let plant = BicyclePlant::new(cfg.plant);
            let eps = generate_episodes(&cfg.gen, &plant)?;
            let split = segment_and_split(&eps, &cfg.gen)?;
            let trajs: Vec<_> = split.train.iter().map(|s| s.trajectory.clone()).collect();
            let report = compute_norm_stats(&trajs)?;
            let manifest = save_dataset(&ensure_dir(&out)?, &split, &eps, &cfg.gen, &cfg.plant, &report.stats)?;
            println!(
                "{} episodes: {} train / {} val / {} test segments in {}",
                manifest.counts.episodes,
                manifest.counts.train,
                manifest.counts.val,
                manifest.counts.test,
                out.display()
            );
        }
        Command::Train { data, mode, out } => {
            let ds = load_dataset(&data)?;
            let train = normalize_all(&ds.split.train, &ds.stats);
            let val = normalize_all(&ds.split.val, &ds.stats);
            cfg.train.mode = mode;
            let outcome = train_model(&cfg.train, &ds.stats, &train, &val)?;
            create_parent(&out)?;
            save_checkpoint(&out, &outcome.model, config_echo(&cfg)?)?;
            write_train_log(&sibling(&out, "_train.csv"), &outcome.log)?;
            println!(
                "{:?} after {} iterations; best validation loss {:e} at {}",
                outcome.status, outcome.iterations, outcome.best_val_loss, outcome.best_iteration
            );
        }
        Command::FitBaseline { data, kind, out } => {
            let ds = load_dataset(&data)?;
            let train = normalize_all(&ds.split.train, &ds.stats);
            let model = match kind.as_str() {
                "edmdk" => fit_edmdk(&train, &ds.stats, cfg.edmd_lambda)?,
                "lti" => frenet_koopman::control::fit_lti_baseline(&train, &ds.stats, cfg.lti_lambda)?,
                other => bail!("unknown baseline `{other}` (expected edmdk or lti)"),
            };
            create_parent(&out)?;
            save_checkpoint(&out, &model, config_echo(&cfg)?)?;
            println!("{kind}: p = {}, spectral radius {:.6}", model.p(), model.spectral_radius()?);
        }
        Command::EvalOpenLoop { data, ckpt, horizon, out } => {
            let ds = load_dataset(&data)?;
            let horizon = horizon.unwrap_or(cfg.horizon);
            let mut rows = Vec::new();
            create_parent(&out)?;
            for path in &ckpt {
                let (model, _) = load_checkpoint(path)?;
                let name = model_name(path);
                let errs = open_loop_errors(&model, &ds.split.test, horizon)?;
                write_open_loop_log(&out.with_file_name(format!("open_loop_{name}.csv")), &name, &errs)?;
                rows.extend(open_loop_report(&name, &errs));
            }
            write_rmse_csv(&out, &rows)?;
            for r in &rows {
                println!("{:<10} {:<9} {:>12.5e} {:<6} (normalized {:.5e})", r.name, r.state, r.rmse, r.unit, r.rmse_normalized);
            }
        }
        Command::RunMpc { ckpt, controller, scenario, out } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let scenario: Scenario = match scenario {
                Some(p) => read_json(&p)?,
                None => cfg.scenario.clone(),
            };
            scenario.validate()?;
            let source = match controller {
                ControllerKind::PlantLinearized => ModelSource::Plant {
                    plant: BicyclePlant::new(cfg.plant),
                    dt: scenario.dt,
                    stats: model.stats.clone(),
                },
                _ => ModelSource::Koopman(model),
            };
            let mut ctrl = MpcController::new(controller, source, cfg.mpc.clone())?;
            let run = run_closed_loop(&mut ctrl, &scenario, &BicyclePlant::new(cfg.plant))?;
            create_parent(&out)?;
            write_closed_loop_log(&out, &run)?;
            let t = run.timing();
            println!("{controller}: {} steps, mean mpc_step {:.3} ms, max {:.3} ms, held {}", t.steps, t.mean_ms, t.max_ms, t.held_steps);
            if let Some(f) = &run.failure {
                bail!("closed loop stopped early: {f}");
            }
        }
        Command::EvalClosedLoop { logs, stats, out } => {
            let stats = load_norm_stats(&stats)?;
            let runs = logs
                .iter()
                .map(|p| read_closed_loop_log(p, &model_name(p)))
                .collect::<frenet_koopman::Result<Vec<_>>>()?;
            create_parent(&out)?;
            let rows = closed_loop_report(&runs, &stats);
            write_rmse_csv(&out, &rows)?;
            write_timing(&sibling(&out, "_timing.csv"), &runs.iter().map(|r| r.timing()).collect::<Vec<_>>())?;
            for r in &rows {
                println!("{:<17} {:<9} {:>12.5e} {}", r.name, r.state, r.rmse, r.unit);
            }
        }
        Command::ExportH { ckpt, out, top_k } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            for p in export_h(&model, &out, top_k.unwrap_or(cfg.top_k))? {
                println!("{}", p.display());
            }
        }
        Command::Model { command: ModelCommand::Info { ckpt } } => {
            let (model, file) = load_checkpoint(&ckpt)?;
            println!("kind            {:?}", file.kind);
            println!("n, p, inputs    {}, {}, {}", model.n(), model.p(), model.input_dim());
            if !file.layer_sizes.is_empty() {
                println!("layers          {:?}", file.layer_sizes);
            }
            println!("rho(A)          {:.6}", model.spectral_radius()?);
            for (i, h) in model.h.iter().enumerate() {
                println!("|H_{}|_F         {:.6e}", i + 1, h.norm());
            }
        }
        Command::Pipeline { out } => {
            let summary = run_desk_pipeline(&cfg, &out)?;
            for v in &summary.verdicts {
                println!("{} {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.check, v.detail);
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
