//! Eigenvalues of the Koopman matrix and the spectral hinge penalty.

use nalgebra::{Complex, ComplexField, DMatrix, DVector, Schur};

use crate::error::{Error, Result};
use crate::scalar::Real;

const SCHUR_MAX_ITER: usize = 10_000;
/// Deflation tolerances tried in turn, in multiples of `f64::EPSILON`.
const SCHUR_EPS_LADDER: [f64; 4] = [1.0, 16.0, 256.0, 4096.0];
/// Eigenvalues closer than this are treated as repeated.
pub const REPEATED_GAP: f64 = 1e-8;
/// Size of the diagonal perturbation applied when eigenvalues repeat.
pub const REPEATED_SHIFT: f64 = 1e-10;

fn to_f64<T: Real>(a: &DMatrix<T>) -> DMatrix<f64> {
    a.map(|v| v.to_f64_lossy())
}

/// Eigenvalues of `a`, always computed in 64-bit: the 32-bit Schur
/// iteration can stall at `f32::EPSILON`, and the repeated-eigenvalue
/// shift is below `f32` resolution.
pub fn eigenvalues<T: Real>(a: &DMatrix<T>) -> Result<Vec<Complex<T>>> {
    Ok(eigenvalues_f64(&to_f64(a))?.into_iter().map(|l| Complex::new(T::lit(l.re), T::lit(l.im))).collect())
}

fn eigenvalues_f64(a: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    if !a.is_square() {
        return Err(Error::Dimension("eigenvalues need a square matrix".into()));
    }
    if a.iter().any(|v| !v.is_finite_value()) {
        return Err(Error::Eigen("matrix has non-finite entries".into()));
    }
    // The tightest deflation test occasionally cycles on nearly defective
    // spectra; a looser one still resolves eigenvalues far below any
    // tolerance used downstream.
    for eps in SCHUR_EPS_LADDER {
        if let Some(schur) = Schur::try_new(a.clone(), eps * f64::EPSILON, SCHUR_MAX_ITER) {
            return Ok(schur.complex_eigenvalues().iter().copied().collect());
        }
    }
    Err(Error::Eigen("Schur iteration did not converge".into()))
}

pub fn spectral_radius<T: Real>(a: &DMatrix<T>) -> Result<T> {
    Ok(eigenvalues(a)?
        .iter()
        .map(|l| l.modulus())
        .fold(T::zero(), |m, v| m.max(v)))
}

/// `Σ max(0, |λ| − 1)` over the eigenvalues of `a`.
pub fn stability_loss<T: Real>(a: &DMatrix<T>) -> Result<T> {
    Ok(eigenvalues(a)?
        .iter()
        .map(|l| (l.modulus() - T::one()).max(T::zero()))
        .fold(T::zero(), |s, v| s + v))
}

/// Loss value and its gradient with respect to `a`. Only eigenvalues
/// strictly outside the unit circle contribute; each contributes
/// `Re(conj(λ)/|λ| · y vᵀ / (yᵀ v))` where `A v = λ v` and `Aᵀ y = λ y`.
pub fn stability_loss_grad<T: Real>(a: &DMatrix<T>) -> Result<(T, DMatrix<T>)> {
    let (loss, grad) = stability_loss_grad_f64(&to_f64(a))?;
    Ok((T::lit(loss), grad.map(T::lit)))
}

fn stability_loss_grad_f64(a: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    let p = a.nrows();
    let mut lams = eigenvalues_f64(a)?;
    let mut work = a.clone();
    if has_repeated(&lams, REPEATED_GAP) {
        for i in 0..p {
            work[(i, i)] += REPEATED_SHIFT * (i + 1) as f64;
        }
        lams = eigenvalues_f64(&work)?;
    }
    let mut loss = 0.0;
    let mut grad: DMatrix<f64> = DMatrix::zeros(p, p);
    let ac = work.map(|v| Complex::new(v, 0.0));
    let atc = ac.transpose();
    for lam in lams {
        let mag = lam.modulus();
        if !(mag > 1.0) {
            continue;
        }
        loss += mag - 1.0;
        let v = inverse_iteration(&ac, lam)?;
        let y = inverse_iteration(&atc, lam)?;
        let denom = y.transpose() * &v;
        let denom = denom[(0, 0)];
        if denom.modulus() <= 1e-300 {
            return Err(Error::Eigen("defective eigenvalue".into()));
        }
        let coef = lam.conj() / Complex::new(mag, 0.0) / denom;
        for i in 0..p {
            let yi = y[i] * coef;
            for j in 0..p {
                grad[(i, j)] += (yi * v[j]).re;
            }
        }
    }
    if grad.iter().any(|v| !v.is_finite_value()) {
        return Err(Error::NonFiniteGradient { layer: "A (stability loss)".into() });
    }
    Ok((loss, grad))
}

fn has_repeated<T: Real>(lams: &[Complex<T>], gap: T) -> bool {
    lams.iter()
        .enumerate()
        .any(|(i, a)| lams[i + 1..].iter().any(|b| (*a - *b).modulus() < gap))
}

/// Null vector of `m − λI` by a few steps of complex inverse iteration.
fn inverse_iteration<T: Real>(m: &DMatrix<Complex<T>>, lam: Complex<T>) -> Result<DVector<Complex<T>>> {
    let p = m.nrows();
    let scale = T::one() + lam.modulus();
    let mut shift = lam;
    for attempt in 0..4 {
        let mut shifted = m.clone();
        for i in 0..p {
            shifted[(i, i)] -= shift;
        }
        let lu = shifted.lu();
        let mut x = DVector::from_fn(p, |i, _| {
            Complex::new(T::one() + T::lit(0.1 * i as f64 / p as f64), T::lit(0.01 * i as f64))
        });
        let mut ok = true;
        for _ in 0..3 {
            match lu.solve(&x) {
                Some(next) if next.iter().all(|c| c.re.is_finite_value() && c.im.is_finite_value()) => {
                    let nrm = next.norm();
                    if nrm == T::zero() {
                        ok = false;
                        break;
                    }
                    x = next.unscale(nrm);
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok(x);
        }
        // Exactly singular factorization: nudge the shift off the eigenvalue.
        let nudge = T::lit(1e-14 * 10f64.powi(attempt)) * scale;
        shift = lam + Complex::new(nudge, nudge);
    }
    Err(Error::Eigen("inverse iteration failed".into()))
}
