//! Dense box-constrained strictly convex QP:
//! `min ½ xᵀ H x + gᵀ x  s.t.  lo ≤ x ≤ hi`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct BoxQp<T: Real> {
    pub hessian: DMatrix<T>,
    pub linear: DVector<T>,
    pub lower: DVector<T>,
    pub upper: DVector<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<T: Real> {
    pub x: DVector<T>,
    pub iterations: usize,
    /// Relative KKT residual from [`kkt_residual`].
    pub residual: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

impl<T: Real> BoxQp<T> {
    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.hessian.shape() != (n, n) || self.lower.len() != n || self.upper.len() != n {
            return Err(Error::Dimension("QP blocks disagree in size".into()));
        }
        if self.lower.iter().zip(self.upper.iter()).any(|(l, u)| !(l <= u)) {
            return Err(Error::Config("QP lower bound exceeds upper bound".into()));
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<T>) -> T {
        (x.dot(&(&self.hessian * x)) * T::lit(0.5)) + self.linear.dot(x)
    }

    pub fn gradient(&self, x: &DVector<T>) -> DVector<T> {
        &self.hessian * x + &self.linear
    }
}

/// Relative KKT residual of a candidate point, computed independently of
/// any solver state.
///
/// Infeasible points get `+∞`. Otherwise each coordinate contributes its
/// gradient magnitude when strictly inside the box and the wrong-signed
/// part of the gradient when on a bound (a lower bound needs `∂f ≥ 0`,
/// an upper bound `∂f ≤ 0`). The maximum is divided by
/// `max(1, ‖g‖∞, ‖H x‖∞)`.
pub fn kkt_residual<T: Real>(qp: &BoxQp<T>, x: &DVector<T>) -> T {
    let n = qp.dim();
    if x.len() != n {
        return T::lit(f64::INFINITY);
    }
    for i in 0..n {
        if !x[i].is_finite_value() || x[i] < qp.lower[i] || x[i] > qp.upper[i] {
            return T::lit(f64::INFINITY);
        }
    }
    let hx = &qp.hessian * x;
    let grad = &hx + &qp.linear;
    let mut worst = T::zero();
    for i in 0..n {
        let g = grad[i];
        let at_lo = x[i] == qp.lower[i];
        let at_hi = x[i] == qp.upper[i];
        let r = match (at_lo, at_hi) {
            (true, true) => T::zero(),
            (true, false) => (-g).max(T::zero()),
            (false, true) => g.max(T::zero()),
            (false, false) => g.abs(),
        };
        worst = worst.max(r);
    }
    let scale = T::one().max(qp.linear.amax()).max(hx.amax());
    worst / scale
}

/// Primal active-set method. Each iteration solves the equality-
/// constrained subproblem on the free variables by Cholesky, then either
/// blocks on the first bound hit along the step or releases the bound
/// with the most negative multiplier.
pub fn solve_box_qp<T: Real>(qp: &BoxQp<T>, tol: T, max_iter: usize) -> Result<QpSolution<T>> {
    qp.validate()?;
    let n = qp.dim();
    let mut x = DVector::zeros(n);
    let mut set = vec![Bound::Free; n];
    for i in 0..n {
        x[i] = T::zero().max(qp.lower[i]).min(qp.upper[i]);
        if qp.lower[i] == qp.upper[i] {
            set[i] = Bound::Lower;
        }
    }
    let mut last_residual = T::lit(f64::INFINITY);

    for iter in 1..=max_iter {
        let free: Vec<usize> = (0..n).filter(|i| set[*i] == Bound::Free).collect();
        // Minimizer over the free variables with the others held fixed.
        let mut target = x.clone();
        if !free.is_empty() {
            let nf = free.len();
            let hff = DMatrix::from_fn(nf, nf, |r, c| qp.hessian[(free[r], free[c])]);
            let mut rhs = DVector::from_fn(nf, |r, _| -qp.linear[free[r]]);
            for (r, &i) in free.iter().enumerate() {
                for j in 0..n {
                    if set[j] != Bound::Free {
                        rhs[r] -= qp.hessian[(i, j)] * x[j];
                    }
                }
            }
            let chol = hff.cholesky().ok_or(Error::QpNotConvex)?;
            let sol = chol.solve(&rhs);
            for (r, &i) in free.iter().enumerate() {
                target[i] = sol[r];
            }
        }

        // Longest feasible fraction of the step.
        let mut alpha = T::one();
        let mut blocking = None;
        for &i in &free {
            let d = target[i] - x[i];
            if d < T::zero() && target[i] < qp.lower[i] {
                let a = (qp.lower[i] - x[i]) / d;
                if a < alpha {
                    alpha = a;
                    blocking = Some((i, Bound::Lower));
                }
            } else if d > T::zero() && target[i] > qp.upper[i] {
                let a = (qp.upper[i] - x[i]) / d;
                if a < alpha {
                    alpha = a;
                    blocking = Some((i, Bound::Upper));
                }
            }
        }
        if let Some((i, b)) = blocking {
            for &j in &free {
                let moved = x[j] + alpha * (target[j] - x[j]);
                x[j] = moved.max(qp.lower[j]).min(qp.upper[j]);
            }
            set[i] = b;
            x[i] = if b == Bound::Lower { qp.lower[i] } else { qp.upper[i] };
            continue;
        }
        for &j in &free {
            x[j] = target[j];
        }

        // Multipliers of the fixed variables.
        let grad = qp.gradient(&x);
        let mut release = None;
        let mut most = T::zero();
        for i in 0..n {
            if qp.lower[i] == qp.upper[i] {
                continue;
            }
            let violation = match set[i] {
                Bound::Lower => -grad[i],
                Bound::Upper => grad[i],
                Bound::Free => continue,
            };
            if violation > most {
                most = violation;
                release = Some(i);
            }
        }
        last_residual = kkt_residual(qp, &x);
        match release {
            Some(i) if last_residual > tol || most > T::zero() => set[i] = Bound::Free,
            _ => {
                return Ok(QpSolution {
                    x,
                    iterations: iter,
                    residual: last_residual,
                })
            }
        }
    }
    Err(Error::QpIterationCap {
        iterations: max_iter,
        residual: last_residual.to_f64_lossy(),
    })
}

/// Default iteration cap for a problem of `n` variables.
pub fn default_max_iter(n: usize) -> usize {
    10 * n + 50
}
