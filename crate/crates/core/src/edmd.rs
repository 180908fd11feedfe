//! Fixed-dictionary lifting and ridge least-squares fits (EDMDK and the LTI
//! baseline).

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;

use crate::domain::{NormalizedTrajectory, STATE_DIM};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const EDMD_DIM: usize = 66;
pub const N_MONOMIALS: usize = STATE_DIM * (STATE_DIM + 1) / 2;
pub const N_RBF: usize = EDMD_DIM - STATE_DIM - N_MONOMIALS;
pub const RBF_SEED: u64 = 0xEDD0;

/// Dictionary `[x; x_i x_j (i <= j, row-major); exp(-|x - c_k|^2 / 2σ^2)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdmdDictionary<T: Real> {
    pub centers: Vec<DVector<T>>,
    pub sigma: T,
}

impl<T: Real> EdmdDictionary<T> {
    /// 39 centers uniform in [-2, 2]^6 from a fixed seed, σ = 1.
    pub fn standard() -> Self {
        Self::with_rbf(N_RBF, RBF_SEED, 2.0, T::one())
    }

    pub fn with_rbf(count: usize, seed: u64, half_width: f64, sigma: T) -> Self {
        let mut rng = Pcg64::seed_from_u64(seed);
        let centers = (0..count)
            .map(|_| {
                DVector::from_fn(STATE_DIM, |_, _| {
                    T::lit(rng.random_range(-half_width..half_width))
                })
            })
            .collect();
        Self { centers, sigma }
    }

    pub fn dim(&self) -> usize {
        STATE_DIM + N_MONOMIALS + self.centers.len()
    }

    pub fn lift(&self, x: &DVector<T>) -> DVector<T> {
        let mut z = Vec::with_capacity(self.dim());
        z.extend(x.iter().copied());
        for i in 0..STATE_DIM {
            for j in i..STATE_DIM {
                z.push(x[i] * x[j]);
            }
        }
        let denom = T::lit(2.0) * self.sigma * self.sigma;
        for c in &self.centers {
            z.push((-(x - c).norm_squared() / denom).exp());
        }
        DVector::from_vec(z)
    }
}

/// Ridge least squares: the `W` minimizing `‖W X − Y‖² + λ‖W‖²` for
/// column-sample matrices `X` (d × N) and `Y` (q × N).
///
/// Works on the transposed system `[Xᵀ; √λ I] Wᵀ = [Yᵀ; 0]`, reducing it
/// with Householder QR applied to row chunks so the full sample matrix is
/// never held at once.
pub struct RidgeAccumulator<T: Real> {
    d: usize,
    q: usize,
    /// Current triangular factor stacked with the reduced right-hand side,
    /// `(d) × (d + q)`.
    r: Option<DMatrix<T>>,
    pending: Vec<T>,
    pending_rows: usize,
    samples: usize,
}

const CHUNK_ROWS: usize = 2048;

impl<T: Real> RidgeAccumulator<T> {
    pub fn new(d: usize, q: usize) -> Self {
        Self {
            d,
            q,
            r: None,
            pending: Vec::new(),
            pending_rows: 0,
            samples: 0,
        }
    }

    /// Adds one sample `(x, y)`.
    pub fn push(&mut self, x: &[T], y: &[T]) {
        debug_assert_eq!(x.len(), self.d);
        debug_assert_eq!(y.len(), self.q);
        self.pending.extend_from_slice(x);
        self.pending.extend_from_slice(y);
        self.pending_rows += 1;
        self.samples += 1;
        if self.pending_rows >= CHUNK_ROWS {
            self.flush();
        }
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    fn absorb(&mut self, rows: DMatrix<T>) {
        let stacked = match self.r.take() {
            Some(r) => {
                let mut m = DMatrix::zeros(r.nrows() + rows.nrows(), self.d + self.q);
                m.rows_mut(0, r.nrows()).copy_from(&r);
                m.rows_mut(r.nrows(), rows.nrows()).copy_from(&rows);
                m
            }
            None => rows,
        };
        let keep = stacked.nrows().min(self.d);
        let r = stacked.qr().r();
        self.r = Some(r.rows(0, keep).into_owned());
    }

    fn flush(&mut self) {
        if self.pending_rows == 0 {
            return;
        }
        let w = self.d + self.q;
        let rows = DMatrix::from_row_slice(self.pending_rows, w, &self.pending);
        self.pending.clear();
        self.pending_rows = 0;
        self.absorb(rows);
    }

    /// Solves for `W` (q × d).
    pub fn solve(mut self, lambda: T) -> Result<DMatrix<T>> {
        if self.samples == 0 {
            return Err(Error::EmptyDataset);
        }
        if lambda < T::zero() {
            return Err(Error::Config("ridge parameter must be non-negative".into()));
        }
        self.flush();
        if lambda > T::zero() {
            let mut reg = DMatrix::zeros(self.d, self.d + self.q);
            let s = lambda.sqrt();
            for i in 0..self.d {
                reg[(i, i)] = s;
            }
            self.absorb(reg);
        }
        let r = self.r.expect("at least one chunk absorbed");
        let (d, q) = (self.d, self.q);
        if r.nrows() < d {
            return Err(Error::Singular(format!("{} samples for {d} unknowns", r.nrows())));
        }
        let rx = r.view((0, 0), (d, d));
        let ry = r.view((0, d), (d, q));
        let scale = rx.diagonal().iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let tiny = scale * T::lit(1e-13) * T::lit(d as f64);
        if scale == T::zero() || rx.diagonal().iter().any(|v| v.abs() <= tiny) {
            return Err(Error::Singular("rank-deficient regressor matrix".into()));
        }
        let wt = rx
            .solve_upper_triangular(&ry)
            .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
        Ok(wt.transpose())
    }
}

/// Dense convenience wrapper around [`RidgeAccumulator`].
pub fn ridge_fit<T: Real>(x: &DMatrix<T>, y: &DMatrix<T>, lambda: T) -> Result<DMatrix<T>> {
    if x.ncols() != y.ncols() {
        return Err(Error::Dimension("X and Y need the same sample count".into()));
    }
    let mut acc = RidgeAccumulator::new(x.nrows(), y.nrows());
    for j in 0..x.ncols() {
        let xc: Vec<T> = x.column(j).iter().copied().collect();
        let yc: Vec<T> = y.column(j).iter().copied().collect();
        acc.push(&xc, &yc);
    }
    acc.solve(lambda)
}

/// Fitted `z' = A z + B U`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit<T: Real> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
}

/// Fits `lift(x_{k+1}) = A lift(x_k) + B U_k` over every one-step pair of
/// every trajectory.
pub fn fit_lifted_linear<T: Real>(
    data: &[NormalizedTrajectory<T>],
    lift: impl Fn(&DVector<T>) -> DVector<T>,
    lambda: T,
) -> Result<LinearFit<T>> {
    let first = data.first().ok_or(Error::EmptyDataset)?;
    let p = lift(&first.states.column(0).into_owned()).len();
    let m = first.input_dim();
    let mut acc = RidgeAccumulator::new(p + m, p);
    let mut regressor = vec![T::zero(); p + m];
    for traj in data {
        let lifted: Vec<DVector<T>> = (0..=traj.steps())
            .map(|k| lift(&traj.states.column(k).into_owned()))
            .collect();
        for k in 0..traj.steps() {
            regressor[..p].copy_from_slice(lifted[k].as_slice());
            for (i, u) in traj.inputs.column(k).iter().enumerate() {
                regressor[p + i] = *u;
            }
            acc.push(&regressor, lifted[k + 1].as_slice());
        }
    }
    let w = acc.solve(lambda)?;
    Ok(LinearFit {
        a: w.columns(0, p).into_owned(),
        b: w.columns(p, m).into_owned(),
    })
}
