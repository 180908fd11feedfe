//! Fixtures shared by the integration tests: finite-difference gradient
//! checks and a known bilinear system.
#![allow(dead_code)]

use frenet_koopman::autodiff::Tape;
use frenet_koopman::domain::{NormStats, NormalizedTrajectory};
use frenet_koopman::encoder::Encoder;
use frenet_koopman::koopman::{BilinearKoopmanModel, Observables};
use frenet_koopman::training::{
    build_loss_graph, flatten_params, unflatten_params, Batch, LossGraph, LossWeights, ModelInit, Precision, TrainConfig,
    TrainMode,
};
use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Ssl,
    Msl,
    Stability,
    Reg,
    Total,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::Ssl, Term::Msl, Term::Stability, Term::Reg, Term::Total];

    fn pick(self, g: &LossGraph) -> frenet_koopman::autodiff::Var {
        match self {
            Term::Ssl => g.ssl,
            Term::Msl => g.msl,
            Term::Stability => g.sl,
            Term::Reg => g.reg,
            Term::Total => g.total,
        }
    }

    /// Acceptance bound on the relative error.
    pub fn tolerance(self) -> f64 {
        if self == Term::Stability {
            1e-3
        } else {
            1e-4
        }
    }
}

/// Small encoder model (hidden `[8, 8]`, 10 features, `p = 16`) with
/// non-zero biases, bilinear terms and an `A` whose spectrum straddles the
/// unit circle, plus a batch of 4 random trajectories of 10 steps.
pub fn gradient_fixture(seed: u64) -> (BilinearKoopmanModel<f64>, Batch<f64>, LossWeights) {
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut enc = Encoder::<f64>::new(6, &[8, 8], 10, seed ^ 0xabc);
    for b in &mut enc.biases {
        b.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
    let p = 16;
    // Distinct diagonal spread across [0.6, 1.3] plus a small perturbation.
    let a = DMatrix::from_fn(p, p, |i, j| {
        let off: f64 = rng.random_range(-0.02..0.02);
        if i == j { 0.6 + 0.7 * i as f64 / (p - 1) as f64 + off } else { off }
    });
    let b = DMatrix::from_fn(p, 3, |_, _| rng.random_range(-0.3..0.3));
    let h = (0..3).map(|_| DMatrix::from_fn(p, p, |_, _| rng.random_range(-0.05..0.05))).collect();
    let model = BilinearKoopmanModel { observables: Observables::Encoder(enc), a, b, h, stats: NormStats::identity() };
    let data: Vec<NormalizedTrajectory<f64>> = (0..4)
        .map(|_| NormalizedTrajectory {
            states: DMatrix::from_fn(6, 11, |_, _| rng.random_range(-1.5..1.5)),
            inputs: DMatrix::from_fn(3, 10, |_, _| rng.random_range(-1.0..1.0)),
        })
        .collect();
    let batch = Batch::assemble(&data, &[0, 1, 2, 3]).unwrap();
    let w = LossWeights { horizon: 10, ..LossWeights::default() };
    (model, batch, w)
}

fn term_value(model: &BilinearKoopmanModel<f64>, batch: &Batch<f64>, w: &LossWeights, term: Term) -> f64 {
    let mut tape = Tape::new();
    let g = build_loss_graph(&mut tape, model, true, batch, w, false).unwrap();
    tape.scalar(term.pick(&g))
}

/// ReLU on/off pattern of every hidden unit over the batch.
fn relu_pattern(model: &BilinearKoopmanModel<f64>, batch: &Batch<f64>) -> Vec<bool> {
    let Observables::Encoder(e) = &model.observables else { return Vec::new() };
    let mut out = Vec::new();
    let mut act = batch.states.clone();
    for l in 0..e.n_layers() - 1 {
        let mut pre = &e.weights[l] * &act;
        for mut c in pre.column_iter_mut() {
            c += &e.biases[l];
        }
        out.extend(pre.iter().map(|v| *v > 0.0));
        act = pre.map(|v| v.max(0.0));
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
}

/// Compares the analytic gradient of `term` with central differences at
/// `h = 1e-5` on `coords` random parameter entries (entries of `A` for the
/// stability term, the only parameter it depends on). Entries whose ±h
/// perturbation flips a ReLU are skipped, since the loss is not
/// differentiable across the kink, as are entries where both derivatives
/// vanish; further entries are drawn in their place.
pub fn check_gradient(term: Term, coords: usize, seed: u64) -> GradReport {
    let (model, batch, w) = gradient_fixture(seed);
    let mut tape = Tape::new();
    let g = build_loss_graph(&mut tape, &model, true, &batch, &w, true).unwrap();
    tape.backward(term.pick(&g)).unwrap();
    let grads: Vec<DMatrix<f64>> = g.params.iter().map(|v| tape.grad(*v)).collect();
    let params = flatten_params(&model, true).unwrap();
    let base_pattern = relu_pattern(&model, &batch);

    let a_index = params.len() - 5;
    let (first, total) = if term == Term::Stability {
        (params[..a_index].iter().map(|p| p.len()).sum(), params[a_index].len())
    } else {
        (0, params.iter().map(|p| p.len()).sum())
    };
    let mut rng = Pcg64::seed_from_u64(seed ^ 0x9e37);
    let h = 1e-5;
    let mut report = GradReport { checked: 0, skipped: 0, worst: 0.0 };
    let mut attempts = 0;
    while report.checked < coords && attempts < 20 * coords {
        attempts += 1;
        let mut flat = first + rng.random_range(0..total);
        let mut which = 0;
        while flat >= params[which].len() {
            flat -= params[which].len();
            which += 1;
        }
        let eval = |delta: f64| {
            let mut p = params.clone();
            p[which][flat] += delta;
            let mut m = model.clone();
            unflatten_params(&mut m, &p, true);
            (term_value(&m, &batch, &w, term), relu_pattern(&m, &batch))
        };
        let (fp, pat_p) = eval(h);
        let (fm, pat_m) = eval(-h);
        if pat_p != base_pattern || pat_m != base_pattern {
            report.skipped += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * h);
        let an = grads[which][flat];
        let scale = an.abs().max(fd.abs());
        if scale < 1e-9 {
            report.skipped += 1;
            continue;
        }
        report.worst = report.worst.max((an - fd).abs() / scale);
        report.checked += 1;
    }
    report
}

/// A fixed, contracting bilinear system on `p = 4` with identity
/// observables, and trajectories it generates from random states and
/// inputs.
pub fn bilinear_system() -> BilinearKoopmanModel<f64> {
    let a = DMatrix::from_row_slice(4, 4, &[
        0.90, 0.05, 0.00, -0.02, //
        -0.04, 0.85, 0.03, 0.00, //
        0.00, 0.02, 0.92, 0.04, //
        0.01, 0.00, -0.03, 0.88,
    ]);
    let b = DMatrix::from_row_slice(4, 3, &[
        0.10, 0.00, 0.02, //
        0.00, 0.08, 0.00, //
        0.03, 0.00, 0.05, //
        0.00, 0.04, 0.01,
    ]);
    let h = vec![
        DMatrix::from_fn(4, 4, |i, j| if i == j { 0.04 } else { 0.0 }),
        DMatrix::from_fn(4, 4, |i, j| if (i + 1) % 4 == j { 0.03 } else { 0.0 }),
        DMatrix::zeros(4, 4),
    ];
    BilinearKoopmanModel { observables: Observables::Identity { n: 4, constant: false }, a, b, h, stats: NormStats::identity() }
}

pub fn simulate(system: &BilinearKoopmanModel<f64>, n: usize, steps: usize, seed: u64) -> Vec<NormalizedTrajectory<f64>> {
    let mut rng = Pcg64::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let p = system.p();
            let mut z = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
            let mut states = DMatrix::zeros(p, steps + 1);
            let mut inputs = DMatrix::zeros(3, steps);
            states.set_column(0, &z);
            for k in 0..steps {
                let u = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
                z = system.step(&z, &u);
                states.set_column(k + 1, &z);
                inputs.set_column(k, &u);
            }
            NormalizedTrajectory { states, inputs }
        })
        .collect()
}

/// One-step RMSE of `model` over every pair in `data`.
pub fn one_step_rmse(model: &BilinearKoopmanModel<f64>, data: &[NormalizedTrajectory<f64>]) -> f64 {
    let (mut sse, mut n) = (0.0, 0);
    for t in data {
        for k in 0..t.steps() {
            let z = t.states.column(k).into_owned();
            let u = t.inputs.column(k).into_owned();
            sse += (model.step(&z, &u) - t.states.column(k + 1)).norm_squared();
            n += t.states.nrows();
        }
    }
    (sse / n as f64).sqrt()
}

pub fn synthetic_config() -> TrainConfig {
    TrainConfig {
        max_iterations: 6000,
        batch_size: 32,
        validation_every: 100,
        // Regularization pulls the optimum off the true system, so it is
        // switched off to make exact recovery the minimizer.
        alpha: [0.1, 1.0, 1.6, 0.0],
        msl_horizon: 20,
        mode: TrainMode::Bilinear,
        init: ModelInit::Persistence,
        precision: Precision::F64,
        ..TrainConfig::default()
    }
}
