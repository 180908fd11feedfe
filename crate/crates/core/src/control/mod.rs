//! Cumulative-error-regulated (CER) convex MPC on identified Koopman
//! models, plus the plain-output variant used by the EDMDK and LTI
//! baselines.

pub mod qp;

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{
    CombinedInput, DriverInput, NormStats, NormalizedTrajectory, VehicleState, DRIVER_DIM, DRIVE_LIMIT,
    INPUT_DIM, KAPPA, STATE_DIM, STEER_LIMIT, TRACKED_OUTPUTS,
};
use crate::edmd::fit_lifted_linear;
use crate::error::{Error, Result};
use crate::koopman::{BilinearKoopmanModel, Observables};
use crate::plant::BicyclePlant;
use crate::scalar::Real;

pub use qp::{kkt_residual, solve_box_qp, BoxQp, QpSolution};

/// Number of tracked outputs carried in the cumulative error state.
pub const N_TRACKED: usize = TRACKED_OUTPUTS.len();

/// `Ã = [[A, 0], [Ĉ, I]]`, `B̃ = [[B, 0], [0, −I]]` acting on
/// `[U; y_ref]`, `C̃ = blockdiag(C, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedModel<T: Real> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    /// Selects the tracked outputs from a lifted state, `3 × p`.
    pub c_hat: DMatrix<T>,
    /// `(n + 3) × (p + 3)`.
    pub c: DMatrix<T>,
    /// Bilinear blocks padded to `(p + 3) × (p + 3)` with zero rows and
    /// columns for the error states.
    pub h: Vec<DMatrix<T>>,
    pub p: usize,
    pub n: usize,
}

pub fn tracked_selector<T: Real>(p: usize) -> DMatrix<T> {
    let mut c = DMatrix::zeros(N_TRACKED, p);
    for (r, idx) in TRACKED_OUTPUTS.iter().enumerate() {
        c[(r, *idx)] = T::one();
    }
    c
}

pub fn augment<T: Real>(model: &BilinearKoopmanModel<T>) -> AugmentedModel<T> {
    let (p, n, m) = (model.p(), model.n(), model.input_dim());
    let d = p + N_TRACKED;
    let c_hat = tracked_selector::<T>(p);

    let mut a = DMatrix::zeros(d, d);
    a.view_mut((0, 0), (p, p)).copy_from(&model.a);
    a.view_mut((p, 0), (N_TRACKED, p)).copy_from(&c_hat);
    a.view_mut((p, p), (N_TRACKED, N_TRACKED)).fill_with_identity();

    let mut b = DMatrix::zeros(d, m + N_TRACKED);
    b.view_mut((0, 0), (p, m)).copy_from(&model.b);
    for i in 0..N_TRACKED {
        b[(p + i, m + i)] = -T::one();
    }

    let mut c = DMatrix::zeros(n + N_TRACKED, d);
    c.view_mut((0, 0), (n, n)).fill_with_identity();
    c.view_mut((n, p), (N_TRACKED, N_TRACKED)).fill_with_identity();

    let h = model
        .h
        .iter()
        .map(|hi| {
            let mut padded = DMatrix::zeros(d, d);
            padded.view_mut((0, 0), (p, p)).copy_from(hi);
            padded
        })
        .collect();
    AugmentedModel { a, b, c_hat, c, h, p, n }
}

impl<T: Real> AugmentedModel<T> {
    /// Exact bilinear step of the augmented state `[z; e]` under input
    /// `U` and tracked reference `y_ref`.
    pub fn step(&self, state: &DVector<T>, u: &DVector<T>, y_ref: &DVector<T>) -> DVector<T> {
        let mut input = DVector::zeros(u.len() + N_TRACKED);
        input.rows_mut(0, u.len()).copy_from(u);
        input.rows_mut(u.len(), N_TRACKED).copy_from(y_ref);
        let mut next = &self.a * state + &self.b * input;
        for (h, ui) in self.h.iter().zip(u.iter()) {
            next.gemv(*ui, h, state, T::one());
        }
        next
    }
}

/// Input matrix seen by the driver channels once the lifted state is
/// frozen at `z_t`, plus the curvature feedthrough.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLift<T: Real> {
    /// `p × 2`: `B_u + [H_1 z_t | H_2 z_t]`.
    pub b_eff: DMatrix<T>,
    /// `p`: multiplies the normalized curvature, `B_w + H_3 z_t` (or `B_w`
    /// alone when the curvature bilinear term is dropped).
    pub kappa_gain: DVector<T>,
}

pub fn linearize_bilinear<T: Real>(
    model: &BilinearKoopmanModel<T>,
    z_t: &DVector<T>,
    keep_curvature_bilinear: bool,
) -> FrozenLift<T> {
    let mut b_eff = model.b.columns(0, DRIVER_DIM).into_owned();
    let mut kappa_gain = model.b.column(KAPPA).into_owned();
    for (i, h) in model.h.iter().enumerate() {
        let hz = h * z_t;
        if i < DRIVER_DIM {
            let mut col = b_eff.column_mut(i);
            col += &hz;
        } else if i == KAPPA && keep_curvature_bilinear {
            kappa_gain += &hz;
        }
    }
    FrozenLift { b_eff, kappa_gain }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Output weights over `[vx, vy, yaw_rate, ds, ey, epsi, e1, e2, e3]`
    /// (normalized units). Controllers without CER use the first six.
    pub q: Vec<f64>,
    /// `Q_N = terminal_scale · Q`.
    pub terminal_scale: f64,
    pub r: [f64; DRIVER_DIM],
    /// Physical lower/upper bounds on `[delta_w (deg), u_zeta]`.
    pub u_min: [f64; DRIVER_DIM],
    pub u_max: [f64; DRIVER_DIM],
    pub qp_tol: f64,
    /// Keep the curvature bilinear term (frozen at `z_t`). `false` gives the
    /// driver-only sum.
    pub curvature_bilinear: bool,
    /// Optional bound on the per-step change of each input, physical units
    /// (degrees for steering). Applied by tightening the first-step box.
    pub rate_limit: Option<[f64; DRIVER_DIM]>,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            // Tuned on the desk double lane change with the default seeds.
            q: vec![0.55, 0.0, 0.0, 18.0, 105.0, 63.0, 0.0077, 0.025, 0.022],
            terminal_scale: 17.0,
            r: [0.078, 0.81],
            u_min: [-STEER_LIMIT.to_degrees(), -DRIVE_LIMIT],
            u_max: [STEER_LIMIT.to_degrees(), DRIVE_LIMIT],
            qp_tol: 1e-8,
            curvature_bilinear: true,
            rate_limit: None,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("MPC horizon must be at least 1".into()));
        }
        if self.q.len() != STATE_DIM + N_TRACKED {
            return Err(Error::Config(format!("Q needs {} weights", STATE_DIM + N_TRACKED)));
        }
        if self.q.iter().any(|q| !(*q >= 0.0)) || !(self.terminal_scale >= 0.0) {
            return Err(Error::Config("Q and Q_N must be positive semidefinite".into()));
        }
        if self.r.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("R must be positive definite".into()));
        }
        if (0..DRIVER_DIM).any(|i| !(self.u_min[i] <= self.u_max[i])) {
            return Err(Error::Config("input lower bound exceeds upper bound".into()));
        }
        if !(self.qp_tol > 0.0) {
            return Err(Error::Config("QP tolerance must be positive".into()));
        }
        if let Some(rate) = self.rate_limit {
            if rate.iter().any(|r| !(*r >= 0.0)) {
                return Err(Error::Config("rate limit must be non-negative".into()));
            }
        }
        Ok(())
    }

    /// Physical bounds in SI units (steering in radians).
    pub fn bounds_si(&self) -> ([f64; DRIVER_DIM], [f64; DRIVER_DIM]) {
        (
            [self.u_min[0].to_radians(), self.u_min[1]],
            [self.u_max[0].to_radians(), self.u_max[1]],
        )
    }
}

/// Linear prediction model over the horizon: `s_{k+1} = F s_k + G u_k + c_k`,
/// outputs `y_k = C s_k`.
#[derive(Debug, Clone)]
pub struct Predictor<T: Real> {
    pub f: DMatrix<T>,
    pub g: DMatrix<T>,
    /// One known offset per step, `N` of them.
    pub offsets: Vec<DVector<T>>,
    pub c: DMatrix<T>,
}

/// Condenses `Σ_{k=1}^{N-1} ‖y_k − r_k‖²_Q + ‖y_N − r_N‖²_{Q_N} + Σ_{k=0}^{N-1} ‖u_k‖²_R`
/// into `½ Uᵀ H U + gᵀ U` over the stacked inputs. `refs[k]` is the output
/// reference at step `k` (index 0 is unused).
pub fn condense<T: Real>(
    pred: &Predictor<T>,
    s0: &DVector<T>,
    refs: &[DVector<T>],
    q: &DVector<T>,
    q_terminal: &DVector<T>,
    r: &DVector<T>,
    lower: &DVector<T>,
    upper: &DVector<T>,
) -> Result<BoxQp<T>> {
    let n_steps = pred.offsets.len();
    let (d, m) = (pred.f.nrows(), pred.g.ncols());
    let nu = m * n_steps;
    if refs.len() < n_steps + 1 {
        return Err(Error::Dimension(format!("{} references for horizon {n_steps}", refs.len())));
    }
    if lower.len() != nu || upper.len() != nu || r.len() != m {
        return Err(Error::Dimension("input weights or bounds do not match the horizon".into()));
    }
    let mut hess = DMatrix::zeros(nu, nu);
    let mut lin = DVector::zeros(nu);
    for k in 0..n_steps {
        for i in 0..m {
            hess[(k * m + i, k * m + i)] = r[i];
        }
    }
    // Free response and input sensitivity, advanced one step at a time.
    let mut free = s0.clone();
    let mut sens = DMatrix::zeros(d, nu);
    for k in 1..=n_steps {
        free = &pred.f * &free + &pred.offsets[k - 1];
        sens = &pred.f * &sens;
        sens.columns_mut((k - 1) * m, m).copy_from(&pred.g);
        let w = if k == n_steps { q_terminal } else { q };
        if w.iter().all(|v| *v == T::zero()) {
            continue;
        }
        let ys = &pred.c * &sens;
        let resid = &pred.c * &free - &refs[k];
        let wys = DMatrix::from_fn(ys.nrows(), ys.ncols(), |i, j| w[i] * ys[(i, j)]);
        hess.gemm_tr(T::one(), &ys, &wys, T::one());
        lin.gemv_tr(T::one(), &wys, &resid, T::one());
    }
    // The cost is Uᵀ H U + 2 gᵀ U; the QP form carries the factor ½.
    hess *= T::lit(2.0);
    lin *= T::lit(2.0);
    let hess = (&hess + hess.transpose()) * T::lit(0.5);
    Ok(BoxQp { hessian: hess, linear: lin, lower: lower.clone(), upper: upper.clone() })
}

/// Which controller a [`MpcController`] implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    CerMdbk,
    CerMdk,
    Edmdk,
    Lti,
    /// MPC on the true plant, re-linearized at every step.
    PlantLinearized,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 5] = [
        ControllerKind::CerMdbk,
        ControllerKind::CerMdk,
        ControllerKind::Edmdk,
        ControllerKind::Lti,
        ControllerKind::PlantLinearized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::CerMdbk => "cer-mdbk",
            ControllerKind::CerMdk => "cer-mdk",
            ControllerKind::Edmdk => "edmdk",
            ControllerKind::Lti => "lti",
            ControllerKind::PlantLinearized => "plant-linearized",
        }
    }

    pub fn uses_cer(self) -> bool {
        matches!(self, ControllerKind::CerMdbk | ControllerKind::CerMdk)
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ControllerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown controller `{s}`")))
    }
}

/// Reference and preview for one horizon, physical units. Both slices hold
/// at least `N + 1` entries starting at the current step.
#[derive(Debug, Clone, Copy)]
pub struct HorizonRefs<'a> {
    pub states: &'a [VehicleState],
    pub kappa: &'a [f64],
}

/// Result of one receding-horizon step.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcStep {
    /// Physical input to apply (steering in radians).
    pub input: DriverInput,
    pub qp_iterations: usize,
    /// Independent KKT residual of the accepted solution; `NaN` on failure.
    pub kkt_residual: f64,
    /// The QP failed and the previous input was held.
    pub held: bool,
    pub failure: Option<String>,
    /// Cumulative error state after the update (normalized).
    pub e: [f64; N_TRACKED],
}

/// Where the controller's prediction model comes from.
#[derive(Debug, Clone)]
pub enum ModelSource {
    Koopman(BilinearKoopmanModel<f64>),
    /// Finite-difference linearization of the plant around the measured
    /// state and the previous input, redone every step.
    Plant { plant: BicyclePlant, dt: f64, stats: NormStats },
}

#[derive(Debug, Clone)]
pub struct MpcController {
    pub kind: ControllerKind,
    pub cfg: MpcConfig,
    source: ModelSource,
    e: DVector<f64>,
    u_prev: DriverInput,
}

impl MpcController {
    pub fn new(kind: ControllerKind, source: ModelSource, cfg: MpcConfig) -> Result<Self> {
        cfg.validate()?;
        if let ModelSource::Koopman(m) = &source {
            m.validate()?;
            if m.n() != STATE_DIM || m.input_dim() != INPUT_DIM {
                return Err(Error::Dimension("controller model must map 6 states and 3 inputs".into()));
            }
            if kind.uses_cer() && m.p() < STATE_DIM {
                return Err(Error::Dimension("CER needs the state in the lifted vector".into()));
            }
        }
        Ok(Self {
            kind,
            cfg,
            source,
            e: DVector::zeros(N_TRACKED),
            u_prev: DriverInput::zeros(),
        })
    }

    pub fn stats(&self) -> &NormStats {
        match &self.source {
            ModelSource::Koopman(m) => &m.stats,
            ModelSource::Plant { stats, .. } => stats,
        }
    }

    pub fn cumulative_error(&self) -> [f64; N_TRACKED] {
        [self.e[0], self.e[1], self.e[2]]
    }

    pub fn previous_input(&self) -> DriverInput {
        self.u_prev
    }

    pub fn reset(&mut self) {
        self.e.fill(0.0);
        self.u_prev = DriverInput::zeros();
    }

    /// Normalized output reference `[x_ref; 0]` and tracked reference.
    fn normalized_refs(&self, refs: &HorizonRefs) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let stats = self.stats();
        let full: Vec<DVector<f64>> = refs.states.iter().map(|s| stats.normalize_state(s)).collect();
        let tracked = full
            .iter()
            .map(|x| DVector::from_iterator(N_TRACKED, TRACKED_OUTPUTS.iter().map(|i| x[*i])))
            .collect();
        (full, tracked)
    }

    fn build_model(&self, x: &VehicleState, kappa_now: f64) -> Result<BilinearKoopmanModel<f64>> {
        match &self.source {
            ModelSource::Koopman(m) => Ok(m.clone()),
            ModelSource::Plant { plant, dt, stats } => {
                linearized_plant_model(plant, x, &self.u_prev, kappa_now, *dt, stats)
            }
        }
    }

    /// Assembles the condensed QP for the current measurement.
    pub fn build_qp(&self, x: &VehicleState, refs: &HorizonRefs) -> Result<(BoxQp<f64>, DVector<f64>)> {
        let n_h = self.cfg.horizon;
        if refs.states.len() < n_h + 1 || refs.kappa.len() < n_h {
            return Err(Error::Dimension(format!("references shorter than horizon {n_h}")));
        }
        let model = self.build_model(x, refs.kappa[0])?;
        let stats = &model.stats;
        let z = model.lift_state(x);
        let p = model.p();
        let frozen = linearize_bilinear(&model, &z, self.cfg.curvature_bilinear);
        let kappa_n: Vec<f64> = refs.kappa[..n_h].iter().map(|k| stats.normalize_channel(KAPPA, *k)).collect();
        let (full_refs, tracked_refs) = self.normalized_refs(refs);

        let z_tracked = DVector::from_iterator(N_TRACKED, TRACKED_OUTPUTS.iter().map(|i| z[*i]));
        let cer = self.kind.uses_cer();
        let (pred, s0, out_refs, q) = if cer {
            let aug = augment(&model);
            let d = p + N_TRACKED;
            let mut g = DMatrix::zeros(d, DRIVER_DIM);
            g.view_mut((0, 0), (p, DRIVER_DIM)).copy_from(&frozen.b_eff);
            let offsets = (0..n_h)
                .map(|k| {
                    let mut c = DVector::zeros(d);
                    c.rows_mut(0, p).copy_from(&(&frozen.kappa_gain * kappa_n[k]));
                    c.rows_mut(p, N_TRACKED).copy_from(&(-&tracked_refs[k]));
                    c
                })
                .collect();
            let mut s0 = DVector::zeros(d);
            s0.rows_mut(0, p).copy_from(&z);
            s0.rows_mut(p, N_TRACKED).copy_from(&self.e);
            let out_refs: Vec<DVector<f64>> = full_refs
                .iter()
                .map(|r| {
                    let mut v = DVector::zeros(STATE_DIM + N_TRACKED);
                    v.rows_mut(0, STATE_DIM).copy_from(r);
                    v
                })
                .collect();
            let q = DVector::from_column_slice(&self.cfg.q);
            (Predictor { f: aug.a, g, offsets, c: aug.c }, s0, out_refs, q)
        } else {
            let offsets = (0..n_h).map(|k| &frozen.kappa_gain * kappa_n[k]).collect();
            let mut c = DMatrix::zeros(STATE_DIM, p);
            c.view_mut((0, 0), (STATE_DIM, STATE_DIM)).fill_with_identity();
            let q = DVector::from_column_slice(&self.cfg.q[..STATE_DIM]);
            (Predictor { f: model.a.clone(), g: frozen.b_eff, offsets, c }, z, full_refs, q)
        };

        let q_terminal = &q * self.cfg.terminal_scale;
        let r = DVector::from_column_slice(&self.cfg.r);
        let (lower, upper) = self.normalized_bounds(stats);
        let qp = condense(&pred, &s0, &out_refs, &q, &q_terminal, &r, &lower, &upper)?;
        let e_next = &self.e + z_tracked - &tracked_refs[0];
        Ok((qp, e_next))
    }

    fn normalized_bounds(&self, stats: &NormStats) -> (DVector<f64>, DVector<f64>) {
        let n_h = self.cfg.horizon;
        let (lo, hi) = self.cfg.bounds_si();
        let mut lower = DVector::zeros(DRIVER_DIM * n_h);
        let mut upper = DVector::zeros(DRIVER_DIM * n_h);
        let prev = [self.u_prev.delta_w, self.u_prev.u_zeta];
        for k in 0..n_h {
            for i in 0..DRIVER_DIM {
                let (mut l, mut h) = (lo[i], hi[i]);
                if let (0, Some(rate)) = (k, self.cfg.rate_limit) {
                    let step = if i == 0 { rate[0].to_radians() } else { rate[1] };
                    l = l.max(prev[i] - step).min(h);
                    h = h.min(prev[i] + step).max(l);
                }
                lower[k * DRIVER_DIM + i] = stats.normalize_channel(i, l);
                upper[k * DRIVER_DIM + i] = stats.normalize_channel(i, h);
            }
        }
        (lower, upper)
    }

    /// One receding-horizon step: returns the physical input to apply and
    /// advances the cumulative error with the measured output.
    pub fn step(&mut self, x: &VehicleState, refs: &HorizonRefs) -> Result<MpcStep> {
        let (qp, e_next) = self.build_qp(x, refs)?;
        let outcome = solve_box_qp(&qp, self.cfg.qp_tol, qp::default_max_iter(qp.dim())).and_then(|sol| {
            // Independent certificate before the solution is used.
            let res = kkt_residual(&qp, &sol.x);
            if res <= self.cfg.qp_tol {
                Ok((sol, res))
            } else {
                Err(Error::QpIterationCap { iterations: sol.iterations, residual: res })
            }
        });
        let stats = self.stats().clone();
        if self.kind.uses_cer() {
            self.e = e_next;
        }
        let e = self.cumulative_error();
        match outcome {
            Ok((sol, res)) => {
                let input = DriverInput {
                    delta_w: stats.denormalize_channel(0, sol.x[0]),
                    u_zeta: stats.denormalize_channel(1, sol.x[1]),
                };
                let (lo, hi) = self.cfg.bounds_si();
                let input = DriverInput {
                    delta_w: input.delta_w.clamp(lo[0], hi[0]),
                    u_zeta: input.u_zeta.clamp(lo[1], hi[1]),
                }
                .clamped();
                self.u_prev = input;
                Ok(MpcStep {
                    input,
                    qp_iterations: sol.iterations,
                    kkt_residual: res,
                    held: false,
                    failure: None,
                    e,
                })
            }
            Err(err) => {
                log::warn!("{} QP failed, holding previous input: {err}", self.kind);
                Ok(MpcStep {
                    input: self.u_prev,
                    qp_iterations: 0,
                    kkt_residual: f64::NAN,
                    held: true,
                    failure: Some(err.to_string()),
                    e,
                })
            }
        }
    }
}

/// Affine model of the sampled plant around `(x̄, ū, κ)` in normalized
/// coordinates, carried by the identity observables with a constant:
/// `z = [x_n; 1]`, `z' = [[J_x, f̄ − J_x x̄ − J_u ū], [0, 1]] z + [J_u; 0] U`.
/// The curvature column of `B` is zero because `κ` enters the offset.
pub fn linearized_plant_model(
    plant: &BicyclePlant,
    x: &VehicleState,
    u: &DriverInput,
    kappa: f64,
    dt: f64,
    stats: &NormStats,
) -> Result<BilinearKoopmanModel<f64>> {
    let x_n = stats.normalize_state(x);
    let u_n = DVector::from_vec(vec![
        stats.normalize_channel(0, u.delta_w),
        stats.normalize_channel(1, u.u_zeta),
    ]);
    let f = |xn: &DVector<f64>, un: &DVector<f64>| -> Result<DVector<f64>> {
        let xs = stats.denormalize_state(xn.as_slice());
        let input = CombinedInput::new(stats.denormalize_channel(0, un[0]), stats.denormalize_channel(1, un[1]), kappa);
        Ok(stats.normalize_state(&plant.step(&xs, &input, dt)?.state))
    };
    let h = 1e-6;
    let f0 = f(&x_n, &u_n)?;
    let mut jx = DMatrix::zeros(STATE_DIM, STATE_DIM);
    for j in 0..STATE_DIM {
        let (mut xp, mut xm) = (x_n.clone(), x_n.clone());
        xp[j] += h;
        xm[j] -= h;
        jx.set_column(j, &((f(&xp, &u_n)? - f(&xm, &u_n)?) / (2.0 * h)));
    }
    let mut ju = DMatrix::zeros(STATE_DIM, DRIVER_DIM);
    for j in 0..DRIVER_DIM {
        let (mut up, mut um) = (u_n.clone(), u_n.clone());
        up[j] += h;
        um[j] -= h;
        ju.set_column(j, &((f(&x_n, &up)? - f(&x_n, &um)?) / (2.0 * h)));
    }
    let offset = &f0 - &jx * &x_n - &ju * &u_n;
    let p = STATE_DIM + 1;
    let mut a = DMatrix::zeros(p, p);
    a.view_mut((0, 0), (STATE_DIM, STATE_DIM)).copy_from(&jx);
    a.view_mut((0, STATE_DIM), (STATE_DIM, 1)).copy_from(&offset);
    a[(STATE_DIM, STATE_DIM)] = 1.0;
    let mut b = DMatrix::zeros(p, INPUT_DIM);
    b.view_mut((0, 0), (STATE_DIM, DRIVER_DIM)).copy_from(&ju);
    Ok(BilinearKoopmanModel {
        observables: Observables::Identity { n: STATE_DIM, constant: true },
        a,
        b,
        h: Vec::new(),
        stats: stats.clone(),
    })
}

/// One-step ridge fit `x_{k+1} = A₀ x_k + B₀ U_k` on normalized data.
pub fn fit_lti_baseline(
    data: &[NormalizedTrajectory<f64>],
    stats: &NormStats,
    lambda: f64,
) -> Result<BilinearKoopmanModel<f64>> {
    let fit = fit_lifted_linear(data, |x: &DVector<f64>| x.clone(), lambda)?;
    Ok(BilinearKoopmanModel {
        observables: Observables::Identity { n: STATE_DIM, constant: false },
        a: fit.a,
        b: fit.b,
        h: Vec::new(),
        stats: stats.clone(),
    })
}
