//! Loss terms, optimizer and the training loop.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::domain::{NormStats, NormalizedTrajectory, STATE_DIM};
use crate::eigen;
use crate::encoder::{Encoder, DEFAULT_HIDDEN};
use crate::error::{Error, Result};
use crate::koopman::{BilinearKoopmanModel, Observables};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Learns `A`, `B` and `H_i`.
    Bilinear,
    /// `H_i` pinned to zero.
    Linear,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(TrainMode::Bilinear),
            "linear" => Ok(TrainMode::Linear),
            other => Err(Error::Config(format!("unknown training mode `{other}`"))),
        }
    }
}

/// Starting point for `A` and `B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelInit {
    /// `A = I`, `B = 0`.
    Persistence,
    /// Ridge fit of `z' = A z + B U` on the lift of the initial encoder.
    LeastSquares,
}

/// Arithmetic used inside the training loop; the result is always
/// returned in 64-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Batch iterations (one "epoch" = one batch update).
    #[serde(alias = "max_epochs")]
    pub max_iterations: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub lr_factor: f64,
    /// The step size ramps linearly from `lr / warmup` to `lr` over the
    /// first `warmup_iterations` updates; 0 disables the ramp.
    pub warmup_iterations: usize,
    pub patience: usize,
    pub validation_every: usize,
    pub beta: f64,
    /// Weights of `[ssl, msl, stability, reg]`.
    pub alpha: [f64; 4],
    pub lambda_theta: f64,
    pub lambda_ab: f64,
    pub lambda_h: f64,
    pub msl_horizon: usize,
    pub mode: TrainMode,
    pub hidden: Vec<usize>,
    /// Encoder output width (`p − n`).
    pub lifted_features: usize,
    pub init: ModelInit,
    /// Ridge weight of the least-squares start.
    pub init_lambda: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 4000,
            batch_size: 128,
            lr_init: 1e-3,
            lr_min: 5e-7,
            lr_factor: 0.5,
            warmup_iterations: 200,
            patience: 2,
            validation_every: 500,
            beta: 0.9,
            alpha: [0.1, 1.0, 1.6, 1e-4],
            lambda_theta: 10.0,
            lambda_ab: 1.0,
            lambda_h: 100.0,
            msl_horizon: 80,
            mode: TrainMode::Bilinear,
            hidden: DEFAULT_HIDDEN.to_vec(),
            lifted_features: 60,
            init: ModelInit::LeastSquares,
            init_lambda: 1e-6,
            precision: Precision::F32,
            seed: 0x7a11,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.validation_every == 0 || self.msl_horizon == 0 {
            return bad("batch size, validation interval and horizon must be positive");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta must lie in (0, 1)");
        }
        if !(self.lr_init > 0.0 && self.lr_min > 0.0 && self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("learning-rate settings must be positive with factor < 1");
        }
        if self.alpha.iter().chain([&self.lambda_theta, &self.lambda_ab, &self.lambda_h]).any(|v| *v < 0.0) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            lambda_theta: self.lambda_theta,
            lambda_ab: self.lambda_ab,
            lambda_h: self.lambda_h,
            horizon: self.msl_horizon,
        }
    }

    /// Encoder-based model at its initial point: He-uniform encoder,
    /// `A = I`, `B = 0`, `H = 0`.
    pub fn init_model<T: Real>(&self, stats: NormStats) -> BilinearKoopmanModel<T> {
        let enc = Encoder::new(STATE_DIM, &self.hidden, self.lifted_features, self.seed ^ 0xe4c0);
        let mut m = BilinearKoopmanModel::persistence(Observables::Encoder(enc), stats, true);
        if self.mode == TrainMode::Linear {
            for h in &mut m.h {
                h.fill(T::zero());
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: [f64; 4],
    pub beta: f64,
    pub lambda_theta: f64,
    pub lambda_ab: f64,
    pub lambda_h: f64,
    pub horizon: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        TrainConfig::default().loss_weights()
    }
}

/// Normalized msl weights `β^j / Σ_i β^i`, `j = 1..=horizon`.
pub fn msl_weights(beta: f64, horizon: usize) -> Vec<f64> {
    let raw: Vec<f64> = (1..=horizon).map(|j| beta.powi(j as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// A set of equal-length trajectories stored time-major: column
/// `k · size + b` holds step `k` of trajectory `b`.
#[derive(Debug, Clone)]
pub struct Batch<T: Real> {
    pub states: DMatrix<T>,
    pub inputs: DMatrix<T>,
    pub size: usize,
    pub steps: usize,
}

impl<T: Real> Batch<T> {
    pub fn assemble(data: &[NormalizedTrajectory<T>], indices: &[usize]) -> Result<Self> {
        let first = indices.first().map(|i| &data[*i]).ok_or(Error::EmptyDataset)?;
        let (n, m, k, size) = (first.state_dim(), first.input_dim(), first.steps(), indices.len());
        let mut states = DMatrix::zeros(n, (k + 1) * size);
        let mut inputs = DMatrix::zeros(m, k * size);
        for (b, &i) in indices.iter().enumerate() {
            let t = &data[i];
            if t.steps() != k || t.state_dim() != n || t.input_dim() != m {
                return Err(Error::Dimension("batch trajectories differ in shape".into()));
            }
            for s in 0..=k {
                states.set_column(s * size + b, &t.states.column(s));
            }
            for s in 0..k {
                inputs.set_column(s * size + b, &t.inputs.column(s));
            }
        }
        Ok(Self { states, inputs, size, steps: k })
    }
}

/// Nodes of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub total: Var,
    pub ssl: Var,
    pub msl: Var,
    pub sl: Var,
    pub reg: Var,
    /// Trainable leaves in [`param_names`] order.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub ssl: f64,
    pub msl: f64,
    pub sl: f64,
    pub reg: f64,
    pub total: f64,
}

fn encoder_of<T: Real>(model: &BilinearKoopmanModel<T>) -> Result<Option<&Encoder<T>>> {
    match &model.observables {
        Observables::Encoder(e) => Ok(Some(e)),
        Observables::Identity { .. } => Ok(None),
        Observables::Edmd(_) => Err(Error::Config("EDMD dictionaries are not trainable".into())),
    }
}

/// Names of the trainable parameters, in the order used everywhere in
/// this module.
pub fn param_names<T: Real>(model: &BilinearKoopmanModel<T>, train_h: bool) -> Result<Vec<String>> {
    let mut names = Vec::new();
    if let Some(e) = encoder_of(model)? {
        for l in 0..e.n_layers() {
            names.push(format!("encoder.W{l}"));
            names.push(format!("encoder.b{l}"));
        }
    }
    names.push("A".into());
    names.push("B".into());
    if train_h {
        names.extend((1..=model.h.len()).map(|i| format!("H{i}")));
    }
    Ok(names)
}

pub fn flatten_params<T: Real>(model: &BilinearKoopmanModel<T>, train_h: bool) -> Result<Vec<DMatrix<T>>> {
    let mut out = Vec::new();
    if let Some(e) = encoder_of(model)? {
        for (w, b) in e.weights.iter().zip(&e.biases) {
            out.push(w.clone());
            out.push(DMatrix::from_column_slice(b.len(), 1, b.as_slice()));
        }
    }
    out.push(model.a.clone());
    out.push(model.b.clone());
    if train_h {
        out.extend(model.h.iter().cloned());
    }
    Ok(out)
}

pub fn unflatten_params<T: Real>(model: &mut BilinearKoopmanModel<T>, params: &[DMatrix<T>], train_h: bool) {
    let mut it = params.iter();
    if let Observables::Encoder(e) = &mut model.observables {
        for l in 0..e.weights.len() {
            e.weights[l] = it.next().expect("weight").clone();
            e.biases[l] = DVector::from_column_slice(it.next().expect("bias").as_slice());
        }
    }
    model.a = it.next().expect("A").clone();
    model.b = it.next().expect("B").clone();
    if train_h {
        for h in &mut model.h {
            *h = it.next().expect("H").clone();
        }
    }
}

/// Builds every loss term for `batch` on `tape`. The lifted targets are
/// produced by the same encoder leaves, so gradients flow through them.
/// With `stability_grad = false` the stability term is a constant.
pub fn build_loss_graph<T: Real>(
    tape: &mut Tape<T>,
    model: &BilinearKoopmanModel<T>,
    train_h: bool,
    batch: &Batch<T>,
    w: &LossWeights,
    stability_grad: bool,
) -> Result<LossGraph> {
    let (bsz, k) = (batch.size, batch.steps);
    let horizon = w.horizon.min(k);
    if horizon == 0 {
        return Err(Error::Dimension("trajectories need at least one step".into()));
    }
    let values = flatten_params(model, train_h)?;
    let params: Vec<Var> = values.into_iter().map(|v| tape.leaf(v, true)).collect();
    let n_enc = encoder_of(model)?.map_or(0, |e| 2 * e.n_layers());
    let a = params[n_enc];
    let b = params[n_enc + 1];
    let h: Vec<Var> = if train_h {
        params[n_enc + 2..].to_vec()
    } else if model.h.iter().all(|m| m.iter().all(|v| *v == T::zero())) {
        Vec::new()
    } else {
        // Pinned but non-zero bilinear terms still act, as constants.
        model.h.iter().map(|m| tape.leaf(m.clone(), false)).collect()
    };

    // Lift every state of every trajectory at once.
    let x = tape.leaf(batch.states.clone(), false);
    let z = match &model.observables {
        Observables::Encoder(e) => {
            let mut act = x;
            let last = e.n_layers() - 1;
            for l in 0..e.n_layers() {
                act = tape.affine(params[2 * l], Some(params[2 * l + 1]), act);
                if l < last {
                    act = tape.relu(act);
                }
            }
            tape.vstack(&[x, act])
        }
        Observables::Identity { constant: true, .. } => {
            let ones = tape.leaf(DMatrix::from_element(1, batch.states.ncols(), T::one()), false);
            tape.vstack(&[x, ones])
        }
        _ => x,
    };

    // Single-step loss over all K pairs.
    let cur = tape.columns(z, 0, k * bsz);
    let next = tape.columns(z, bsz, k * bsz);
    let pred = tape.bilinear(a, b, &h, cur, batch.inputs.clone());
    let d = tape.sub(pred, next);
    let ssl = tape.sum_squares(d, T::one() / T::lit((k * bsz) as f64));

    // Recursive multi-step loss seeded at the first lifted state.
    let weights = msl_weights(w.beta, horizon);
    let mut zhat = tape.columns(z, 0, bsz);
    let mut terms = Vec::with_capacity(horizon);
    for (j, wj) in weights.iter().enumerate() {
        let u = batch.inputs.columns(j * bsz, bsz).into_owned();
        zhat = tape.bilinear(a, b, &h, zhat, u);
        let target = tape.columns(z, (j + 1) * bsz, bsz);
        let dj = tape.sub(zhat, target);
        terms.push((tape.sum_squares(dj, T::one() / T::lit(bsz as f64)), T::lit(*wj)));
    }
    let msl = tape.weighted_sum(&terms);

    let a_val = tape.value(a).clone();
    let sl = if stability_grad {
        let (v, g) = eigen::stability_loss_grad(&a_val)?;
        tape.linearized(v, vec![(a, g)])
    } else {
        let v = eigen::stability_loss(&a_val)?;
        tape.linearized(v, Vec::new())
    };

    let mut reg_terms = Vec::new();
    for p in &params[..n_enc] {
        reg_terms.push((tape.sum_squares(*p, T::one()), T::lit(w.lambda_theta)));
    }
    for p in [a, b] {
        reg_terms.push((tape.sum_squares(p, T::one()), T::lit(w.lambda_ab)));
    }
    if train_h {
        for p in &params[n_enc + 2..] {
            reg_terms.push((tape.sum_squares(*p, T::one()), T::lit(w.lambda_h)));
        }
    }
    let reg = tape.weighted_sum(&reg_terms);

    let al = w.alpha.map(T::lit);
    let total = tape.weighted_sum(&[(ssl, al[0]), (msl, al[1]), (sl, al[2]), (reg, al[3])]);
    Ok(LossGraph { total, ssl, msl, sl, reg, params })
}

fn read_values<T: Real>(tape: &Tape<T>, g: &LossGraph) -> LossValues {
    LossValues {
        ssl: tape.scalar(g.ssl).to_f64_lossy(),
        msl: tape.scalar(g.msl).to_f64_lossy(),
        sl: tape.scalar(g.sl).to_f64_lossy(),
        reg: tape.scalar(g.reg).to_f64_lossy(),
        total: tape.scalar(g.total).to_f64_lossy(),
    }
}

/// Loss terms on `data`, evaluated in chunks. Data-dependent terms are
/// means over all trajectories; the stability and regularization terms
/// depend on the parameters only.
pub fn evaluate_loss<T: Real>(
    model: &BilinearKoopmanModel<T>,
    data: &[NormalizedTrajectory<T>],
    w: &LossWeights,
    chunk: usize,
) -> Result<LossValues> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let train_h = !model.h.is_empty();
    let (mut ssl, mut msl) = (0.0, 0.0);
    let mut last = LossValues::default();
    let idx: Vec<usize> = (0..data.len()).collect();
    for c in idx.chunks(chunk.max(1)) {
        let batch = Batch::assemble(data, c)?;
        let mut tape = Tape::new();
        let g = build_loss_graph(&mut tape, model, train_h, &batch, w, false)?;
        last = read_values(&tape, &g);
        ssl += last.ssl * c.len() as f64;
        msl += last.msl * c.len() as f64;
    }
    let n = data.len() as f64;
    let (ssl, msl) = (ssl / n, msl / n);
    let total = w.alpha[0] * ssl + w.alpha[1] * msl + w.alpha[2] * last.sl + w.alpha[3] * last.reg;
    Ok(LossValues { ssl, msl, sl: last.sl, reg: last.reg, total })
}

/// Loss values and parameter gradients of the total loss on one batch.
pub fn loss_and_gradients<T: Real>(
    model: &BilinearKoopmanModel<T>,
    train_h: bool,
    batch: &Batch<T>,
    w: &LossWeights,
) -> Result<(LossValues, Vec<DMatrix<T>>)> {
    let mut tape = Tape::new();
    let g = build_loss_graph(&mut tape, model, train_h, batch, w, true)?;
    let values = read_values(&tape, &g);
    tape.backward(g.total)?;
    let names = param_names(model, train_h)?;
    let mut grads = Vec::with_capacity(g.params.len());
    for (v, name) in g.params.iter().zip(names) {
        let grad = tape.grad(*v);
        if grad.iter().any(|x| !x.is_finite_value()) {
            return Err(Error::NonFiniteGradient { layer: name });
        }
        grads.push(grad);
    }
    Ok((values, grads))
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<DMatrix<T>>,
    v: Vec<DMatrix<T>>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(shapes: &[DMatrix<T>]) -> Self {
        let zeros: Vec<DMatrix<T>> = shapes.iter().map(|p| DMatrix::zeros(p.nrows(), p.ncols())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [DMatrix<T>], grads: &[DMatrix<T>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub spectral_radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    MaxIterations,
    LearningRateFloor,
    Diverged(String),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    /// Parameters with the lowest validation loss seen.
    pub model: BilinearKoopmanModel<T>,
    pub best_val_loss: f64,
    pub best_iteration: usize,
    pub log: Vec<TrainLogRow>,
    pub status: TrainStatus,
    pub iterations: usize,
}

const EVAL_CHUNK: usize = 128;

/// The training loop: random batch, total-loss gradient, Adam update;
/// every `validation_every` iterations (and before the first) the total
/// loss on the full validation set is evaluated. After `patience`
/// consecutive increases the learning rate is multiplied by `lr_factor`;
/// training stops at `lr_min` or `max_iterations`.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    initial: BilinearKoopmanModel<T>,
    train_set: &[NormalizedTrajectory<T>],
    val_set: &[NormalizedTrajectory<T>],
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    initial.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let train_h = cfg.mode == TrainMode::Bilinear && !initial.h.is_empty();
    let mut model = initial;
    if !train_h {
        for h in &mut model.h {
            h.fill(T::zero());
        }
    }
    let w = cfg.loss_weights();
    let mut params = flatten_params(&model, train_h)?;
    let mut adam = Adam::new(&params);
    let mut rng = Pcg64::seed_from_u64(cfg.seed);
    let batch_size = cfg.batch_size.min(train_set.len());

    let mut lr = cfg.lr_init;
    let mut log = Vec::new();
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_iteration = 0;
    let mut prev_val = f64::INFINITY;
    let mut increases = 0;
    let mut interval_loss = 0.0;
    let mut interval_count = 0usize;
    let mut status = TrainStatus::MaxIterations;
    let mut iteration = 0;

    loop {
        let at_end = iteration >= cfg.max_iterations;
        let mut batch_loss = None;
        if !at_end {
            let idx = rand::seq::index::sample(&mut rng, train_set.len(), batch_size).into_vec();
            let batch = Batch::assemble(train_set, &idx)?;
            match loss_and_gradients(&model, train_h, &batch, &w) {
                Ok((values, grads)) if values.total.is_finite() => batch_loss = Some((values, grads)),
                Ok(_) => {
                    status = TrainStatus::Diverged(format!("non-finite loss at iteration {iteration}"));
                }
                Err(e @ (Error::NonFiniteGradient { .. } | Error::Eigen(_))) => {
                    status = TrainStatus::Diverged(format!("iteration {iteration}: {e}"));
                }
                Err(e) => return Err(e),
            }
            if batch_loss.is_none() {
                break;
            }
            let total = batch_loss.as_ref().map(|(v, _)| v.total).unwrap_or(f64::NAN);
            interval_loss += total;
            interval_count += 1;
        }

        if iteration % cfg.validation_every == 0 || at_end {
            let val = evaluate_loss(&model, val_set, &w, EVAL_CHUNK)?.total;
            let rho = model.spectral_radius().map(|r| r.to_f64_lossy()).unwrap_or(f64::NAN);
            let train_loss = if interval_count > 0 { interval_loss / interval_count as f64 } else { f64::NAN };
            log.push(TrainLogRow { iteration, train_loss, val_loss: val, lr, spectral_radius: rho });
            log::info!("iter {iteration}: train {train_loss:.6e} val {val:.6e} lr {lr:.2e} rho {rho:.4}");
            interval_loss = 0.0;
            interval_count = 0;
            if !val.is_finite() {
                status = TrainStatus::Diverged(format!("non-finite validation loss at iteration {iteration}"));
                break;
            }
            if val < best_val {
                best_val = val;
                best = model.clone();
                best_iteration = iteration;
            }
            if val > prev_val {
                increases += 1;
            } else {
                increases = 0;
            }
            prev_val = val;
            if increases >= cfg.patience {
                lr *= cfg.lr_factor;
                increases = 0;
                if lr <= cfg.lr_min {
                    status = TrainStatus::LearningRateFloor;
                    break;
                }
            }
        }
        if at_end {
            break;
        }
        let (_, grads) = batch_loss.expect("batch computed");
        let ramp = if iteration < cfg.warmup_iterations {
            (iteration + 1) as f64 / cfg.warmup_iterations as f64
        } else {
            1.0
        };
        adam.step(&mut params, &grads, lr * ramp);
        unflatten_params(&mut model, &params, train_h);
        iteration += 1;
    }

    if let TrainStatus::Diverged(msg) = &status {
        log::warn!("training diverged: {msg}; keeping the best checkpoint");
    }
    Ok(TrainOutcome {
        model: best,
        best_val_loss: best_val,
        best_iteration,
        log,
        status,
        iterations: iteration,
    })
}

/// Initial model per `cfg.init`, training in `cfg.precision`, and the
/// best checkpoint returned in 64-bit.
pub fn train_model(
    cfg: &TrainConfig,
    stats: &NormStats,
    train_set: &[NormalizedTrajectory<f64>],
    val_set: &[NormalizedTrajectory<f64>],
) -> Result<TrainOutcome<f64>> {
    fn run<T: Real>(
        cfg: &TrainConfig,
        stats: &NormStats,
        train_set: &[NormalizedTrajectory<f64>],
        val_set: &[NormalizedTrajectory<f64>],
    ) -> Result<TrainOutcome<f64>> {
        let train_t: Vec<NormalizedTrajectory<T>> = train_set.iter().map(NormalizedTrajectory::cast).collect();
        let val_t: Vec<NormalizedTrajectory<T>> = val_set.iter().map(NormalizedTrajectory::cast).collect();
        let mut initial = cfg.init_model::<T>(stats.clone());
        if cfg.init == ModelInit::LeastSquares {
            let obs = initial.observables.clone();
            let fit = crate::edmd::fit_lifted_linear(&train_t, |x: &DVector<T>| obs.lift(x), T::lit(cfg.init_lambda))?;
            initial.a = fit.a;
            initial.b = fit.b;
        }
        let out = train(cfg, initial, &train_t, &val_t)?;
        Ok(TrainOutcome {
            model: out.model.cast(),
            best_val_loss: out.best_val_loss,
            best_iteration: out.best_iteration,
            log: out.log,
            status: out.status,
            iterations: out.iterations,
        })
    }
    match cfg.precision {
        Precision::F32 => run::<f32>(cfg, stats, train_set, val_set),
        Precision::F64 => run::<f64>(cfg, stats, train_set, val_set),
    }
}

/// Writes the training log as CSV.
pub fn write_train_log(path: &std::path::Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut s = String::from("iteration,train_loss,val_loss,lr,spectral_radius\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:?},{:?},{:?},{:?}\n",
            r.iteration, r.train_loss, r.val_loss, r.lr, r.spectral_radius
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    fn identity_model(p: usize, bilinear: bool) -> BilinearKoopmanModel<f64> {
        BilinearKoopmanModel::persistence(Observables::Identity { n: p, constant: false }, NormStats::identity(), bilinear)
    }

    fn traj(states: DMatrix<f64>, inputs: DMatrix<f64>) -> NormalizedTrajectory<f64> {
        NormalizedTrajectory { states, inputs }
    }

    fn only(alpha: [f64; 4], horizon: usize) -> LossWeights {
        LossWeights { alpha, horizon, ..LossWeights::default() }
    }

    #[test]
    fn msl_weights_are_normalized_powers() {
        let w = msl_weights(0.5, 3);
        let total = 0.5 + 0.25 + 0.125;
        assert!((w[0] - 0.5 / total).abs() < 1e-15);
        assert!((w[2] - 0.125 / total).abs() < 1e-15);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_data_under_persistence_has_zero_prediction_loss() {
        let s = DMatrix::from_fn(2, 4, |i, _| i as f64 + 0.5);
        let u = DMatrix::from_element(3, 3, 0.2);
        let data = vec![traj(s, u)];
        let mut m = identity_model(2, true);
        m.a = DMatrix::identity(2, 2);
        let v = evaluate_loss(&m, &data, &only([1.0, 1.0, 0.0, 0.0], 3), 8).unwrap();
        assert_eq!(v.ssl, 0.0);
        assert_eq!(v.msl, 0.0);
    }

    #[test]
    fn single_pair_hand_values() {
        // p = 2, A = [[1, 2], [0, 1]], B = 0, H = 0, z0 = [1, 1], z1 = [0, 0]:
        // prediction [3, 1], squared error 10.
        let s = DMatrix::from_column_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let data = vec![traj(s, DMatrix::zeros(3, 1))];
        let mut m = identity_model(2, false);
        m.a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let v = evaluate_loss(&m, &data, &only([1.0, 1.0, 0.0, 0.0], 1), 8).unwrap();
        assert!((v.ssl - 10.0).abs() < 1e-12);
        // With K = 1 the multi-step loss reduces to the single-step loss.
        assert!((v.msl - v.ssl).abs() < 1e-12);
    }

    #[test]
    fn msl_is_beta_weighted_mean_of_step_errors() {
        // A = 0 on 1-D data: predicted ẑ_j = 0 for every j, so the error at
        // step j is z_j², giving Σ β^j z_j² / Σ β^j.
        let z = [1.0, 2.0, -1.0, 3.0];
        let s = DMatrix::from_row_slice(1, 4, &z);
        let data = vec![traj(s, DMatrix::zeros(3, 3))];
        let mut m = identity_model(1, false);
        m.a.fill(0.0);
        let beta = 0.9f64;
        let w = LossWeights { beta, ..only([0.0, 1.0, 0.0, 0.0], 3) };
        let v = evaluate_loss(&m, &data, &w, 8).unwrap();
        let num: f64 = (1..=3).map(|j| beta.powi(j) * z[j as usize] * z[j as usize]).sum();
        let den: f64 = (1..=3).map(|j| beta.powi(j)).sum();
        assert!((v.msl - num / den).abs() < 1e-12);
        // Reversing the weight order gives a different value.
        let rev: f64 = (1..=3).map(|j| beta.powi(4 - j) * z[j as usize] * z[j as usize]).sum();
        assert!((v.msl - rev / den).abs() > 1e-3);
        // Equal errors at every step reduce to that common error.
        let s = DMatrix::from_row_slice(1, 4, &[5.0, 2.0, 2.0, -2.0]);
        let v = evaluate_loss(&m, &[traj(s, DMatrix::zeros(3, 3))], &w, 8).unwrap();
        assert!((v.msl - 4.0).abs() < 1e-12);
    }

    #[test]
    fn regularization_values() {
        let data = vec![traj(DMatrix::zeros(3, 2), DMatrix::zeros(3, 1))];
        let m = identity_model(3, true);
        let w = only([0.0, 0.0, 0.0, 1.0], 1);
        let v = evaluate_loss(&m, &data, &w, 8).unwrap();
        assert!((v.reg - 3.0 * w.lambda_ab).abs() < 1e-12);
        let mut zero = m.clone();
        zero.a.fill(0.0);
        assert_eq!(evaluate_loss(&zero, &data, &w, 8).unwrap().reg, 0.0);
        let mut doubled = m.clone();
        doubled.a *= 2.0;
        doubled.b.fill(0.5);
        doubled.h[1].fill(-0.1);
        let r1 = evaluate_loss(&doubled, &data, &w, 8).unwrap().reg;
        let mut quad = doubled.clone();
        quad.a *= 2.0;
        quad.b *= 2.0;
        quad.h[1] *= 2.0;
        let r2 = evaluate_loss(&quad, &data, &w, 8).unwrap().reg;
        assert!((r2 - 4.0 * r1).abs() < 1e-9 * r2);
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut rng = Pcg64::seed_from_u64(5);
        let s = DMatrix::from_fn(2, 5, |_, _| rng.random_range(-1.0..1.0));
        let u = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let data = vec![traj(s, u)];
        let mut m = identity_model(2, true);
        m.a = DMatrix::from_row_slice(2, 2, &[1.3, 0.1, 0.0, 0.4]);
        m.h[0][(0, 1)] = 0.2;
        let w = LossWeights { horizon: 4, ..LossWeights::default() };
        let v = evaluate_loss(&m, &data, &w, 8).unwrap();
        let expected = 0.1 * v.ssl + v.msl + 1.6 * v.sl + 1e-4 * v.reg;
        assert!((v.total - expected).abs() < 1e-14);
        assert!((v.sl - 0.3).abs() < 1e-12);
        let only_sl = LossValues { ssl: 0.0, msl: 0.0, sl: 1.0, reg: 0.0, total: 0.0 };
        assert_eq!(w.alpha[2] * only_sl.sl, 1.6);
    }

    #[test]
    fn chunked_evaluation_matches_single_batch() {
        let mut rng = Pcg64::seed_from_u64(6);
        let data: Vec<_> = (0..7)
            .map(|_| {
                traj(
                    DMatrix::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0)),
                    DMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0)),
                )
            })
            .collect();
        let mut m = identity_model(3, true);
        m.a *= 0.9;
        m.h[2][(1, 1)] = 0.3;
        let w = LossWeights { horizon: 5, ..LossWeights::default() };
        let a = evaluate_loss(&m, &data, &w, 3).unwrap();
        let b = evaluate_loss(&m, &data, &w, 100).unwrap();
        assert!((a.total - b.total).abs() < 1e-13);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![DMatrix::<f64>::from_element(1, 2, 1.0)];
        let g = vec![DMatrix::from_row_slice(1, 2, &[3.0, -0.5])];
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &g, 0.1);
        assert!((p[0][0] - 0.9).abs() < 1e-7);
        assert!((p[0][1] - 1.1).abs() < 1e-7);
    }

    #[test]
    fn param_round_trip() {
        let cfg = TrainConfig { hidden: vec![4, 5], lifted_features: 3, ..TrainConfig::default() };
        let m: BilinearKoopmanModel<f64> = cfg.init_model(NormStats::identity());
        let names = param_names(&m, true).unwrap();
        let flat = flatten_params(&m, true).unwrap();
        assert_eq!(names.len(), flat.len());
        assert_eq!(names[0], "encoder.W0");
        assert_eq!(names.last().unwrap(), "H3");
        let mut copy = m.clone();
        copy.a.fill(0.0);
        unflatten_params(&mut copy, &flat, true);
        assert_eq!(copy, m);
        assert_eq!(param_names(&m, false).unwrap().len(), names.len() - 3);
    }
}
