//! Lifted states and bilinear Koopman propagation.

use nalgebra::{DMatrix, DVector};

use crate::domain::{NormStats, VehicleState, INPUT_DIM, STATE_DIM};
use crate::edmd::EdmdDictionary;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// How a normalized state is mapped to the lifted space. The original
/// state always occupies the leading block.
#[derive(Debug, Clone, PartialEq)]
pub enum Observables<T: Real> {
    /// `[x; Φθ(x)]`.
    Encoder(Encoder<T>),
    /// Fixed EDMD dictionary (already contains `x` first).
    Edmd(EdmdDictionary<T>),
    /// `x` itself, optionally followed by a constant 1.
    Identity { n: usize, constant: bool },
}

impl<T: Real> Observables<T> {
    pub fn state_dim(&self) -> usize {
        match self {
            Observables::Encoder(e) => e.input_dim(),
            Observables::Edmd(_) => STATE_DIM,
            Observables::Identity { n, .. } => *n,
        }
    }

    pub fn lifted_dim(&self) -> usize {
        match self {
            Observables::Encoder(e) => e.input_dim() + e.output_dim(),
            Observables::Edmd(d) => d.dim(),
            Observables::Identity { n, constant } => n + usize::from(*constant),
        }
    }

    pub fn lift(&self, x: &DVector<T>) -> DVector<T> {
        match self {
            Observables::Encoder(e) => {
                let phi = e.forward(x);
                let mut z = DVector::zeros(x.len() + phi.len());
                z.rows_mut(0, x.len()).copy_from(x);
                z.rows_mut(x.len(), phi.len()).copy_from(&phi);
                z
            }
            Observables::Edmd(d) => d.lift(x),
            Observables::Identity { n, constant } => {
                let mut z = DVector::zeros(n + usize::from(*constant));
                z.rows_mut(0, *n).copy_from(x);
                if *constant {
                    z[*n] = T::one();
                }
                z
            }
        }
    }
}

/// `z' = A z + B U + Σ_i H_i (U_i z)`; with `h` empty it is the linear
/// model `A z + B U`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearKoopmanModel<T: Real> {
    pub observables: Observables<T>,
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    /// One matrix per input channel, or empty for a linear model.
    pub h: Vec<DMatrix<T>>,
    pub stats: NormStats,
}

impl<T: Real> BilinearKoopmanModel<T> {
    /// Persistence dynamics: `A = I`, `B = 0`, `H = 0`.
    pub fn persistence(observables: Observables<T>, stats: NormStats, bilinear: bool) -> Self {
        let p = observables.lifted_dim();
        Self {
            observables,
            a: DMatrix::identity(p, p),
            b: DMatrix::zeros(p, INPUT_DIM),
            h: if bilinear {
                vec![DMatrix::zeros(p, p); INPUT_DIM]
            } else {
                Vec::new()
            },
            stats,
        }
    }

    /// The same model in another precision.
    pub fn cast<U: Real>(&self) -> BilinearKoopmanModel<U> {
        let m = |x: &DMatrix<T>| x.map(|v| U::lit(v.to_f64_lossy()));
        let observables = match &self.observables {
            Observables::Encoder(e) => Observables::Encoder(e.cast()),
            Observables::Edmd(d) => Observables::Edmd(EdmdDictionary {
                centers: d.centers.iter().map(|c| c.map(|v| U::lit(v.to_f64_lossy()))).collect(),
                sigma: U::lit(d.sigma.to_f64_lossy()),
            }),
            Observables::Identity { n, constant } => Observables::Identity { n: *n, constant: *constant },
        };
        BilinearKoopmanModel {
            observables,
            a: m(&self.a),
            b: m(&self.b),
            h: self.h.iter().map(m).collect(),
            stats: self.stats.clone(),
        }
    }

    pub fn p(&self) -> usize {
        self.a.nrows()
    }

    pub fn n(&self) -> usize {
        self.observables.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn is_bilinear(&self) -> bool {
        !self.h.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.observables.lifted_dim();
        let dim = |what: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Dimension(format!("{what} does not match p = {p}")))
            }
        };
        dim("A", self.a.nrows() == p && self.a.ncols() == p)?;
        dim("B", self.b.nrows() == p)?;
        dim("H count", self.h.is_empty() || self.h.len() == self.b.ncols())?;
        for h in &self.h {
            dim("H_i", h.nrows() == p && h.ncols() == p)?;
        }
        if let Observables::Encoder(e) = &self.observables {
            e.validate()?;
        }
        self.stats.validate()
    }

    pub fn lift(&self, x_norm: &DVector<T>) -> DVector<T> {
        self.observables.lift(x_norm)
    }

    /// Normalizes a physical state and lifts it.
    pub fn lift_state(&self, x: &VehicleState<T>) -> DVector<T> {
        self.lift(&self.stats.normalize_state(x))
    }

    /// Leading `n` components.
    pub fn project(&self, z: &DVector<T>) -> DVector<T> {
        z.rows(0, self.n()).into_owned()
    }

    pub fn step(&self, z: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        let mut next = &self.a * z + &self.b * u;
        for (h, ui) in self.h.iter().zip(u.iter()) {
            next.gemv(*ui, h, z, T::one());
        }
        next
    }

    /// `K` steps from `z0` with inputs taken from the columns of `inputs`.
    /// Returns `[z_1, ..., z_K]`.
    pub fn rollout(&self, z0: &DVector<T>, inputs: &DMatrix<T>, k: usize) -> Result<Vec<DVector<T>>> {
        if inputs.ncols() < k {
            return Err(Error::Dimension(format!("{} inputs for a {k}-step rollout", inputs.ncols())));
        }
        let mut out = Vec::with_capacity(k);
        let mut z = z0.clone();
        for j in 0..k {
            z = self.step(&z, &inputs.column(j).into_owned());
            out.push(z.clone());
        }
        Ok(out)
    }

    /// `[H_1 | H_2 | ...]`, the block form acting on `U ⊗ z`.
    pub fn h_stacked(&self) -> DMatrix<T> {
        let p = self.p();
        let mut hs = DMatrix::zeros(p, p * self.input_dim());
        for (i, h) in self.h.iter().enumerate() {
            hs.columns_mut(i * p, p).copy_from(h);
        }
        hs
    }

    pub fn spectral_radius(&self) -> Result<T> {
        crate::eigen::spectral_radius(&self.a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::DEFAULT_HIDDEN;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_pcg::Pcg64;

    fn random_matrix(r: usize, c: usize, rng: &mut Pcg64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_model(p: usize, seed: u64) -> BilinearKoopmanModel<f64> {
        let mut rng = Pcg64::seed_from_u64(seed);
        BilinearKoopmanModel {
            observables: Observables::Identity { n: p, constant: false },
            a: random_matrix(p, p, &mut rng),
            b: random_matrix(p, 3, &mut rng),
            h: (0..3).map(|_| random_matrix(p, p, &mut rng)).collect(),
            stats: NormStats::identity(),
        }
    }

    /// Dense Kronecker form `A z + B U + [H_1 .. H_m] (U ⊗ z)`.
    fn kron_step(m: &BilinearKoopmanModel<f64>, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let uz = u.kronecker(z);
        &m.a * z + &m.b * u + m.h_stacked() * uz
    }

    #[test]
    fn cast_round_trip_through_f32_is_close() {
        let m = random_model(5, 4);
        let back: BilinearKoopmanModel<f64> = m.cast::<f32>().cast();
        assert!((&back.a - &m.a).amax() < 1e-7);
        assert_eq!(back.h.len(), 3);
        assert_eq!(m.cast::<f64>(), m);
    }

    #[test]
    fn bilinear_step_matches_kronecker_oracle() {
        let mut rng = Pcg64::seed_from_u64(99);
        for p in 1..=6 {
            let m = random_model(p, p as u64);
            for _ in 0..20 {
                let z = DVector::from_fn(p, |_, _| rng.random_range(-2.0..2.0));
                let u = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
                let diff = (m.step(&z, &u) - kron_step(&m, &z, &u)).amax();
                assert!(diff <= 1e-12, "p={p} diff={diff}");
            }
        }
    }

    #[test]
    fn persistence_model_is_identity_map() {
        let m = BilinearKoopmanModel::persistence(
            Observables::<f64>::Identity { n: 4, constant: false },
            NormStats::identity(),
            true,
        );
        let z = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
        let u = DVector::from_vec(vec![0.3, 0.1, -4.0]);
        assert_eq!(m.step(&z, &u), z);
        let traj = m.rollout(&z, &DMatrix::from_element(3, 5, 0.7), 5).unwrap();
        assert!(traj.iter().all(|zk| *zk == z));
    }

    #[test]
    fn zero_h_equals_linear_model() {
        let mut m = random_model(5, 4);
        for h in &mut m.h {
            h.fill(0.0);
        }
        let mut lin = m.clone();
        lin.h.clear();
        let z = DVector::from_element(5, 0.3);
        let u = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        assert_eq!(m.step(&z, &u), lin.step(&z, &u));
        assert_eq!(lin.step(&z, &u), &m.a * &z + &m.b * &u);
    }

    #[test]
    fn rollout_is_iterated_step() {
        let m = random_model(4, 11);
        let z0 = DVector::from_vec(vec![0.1, 0.2, -0.3, 0.05]);
        let u = DMatrix::from_fn(3, 3, |i, j| 0.1 * (i as f64 - j as f64));
        let r = m.rollout(&z0, &u, 3).unwrap();
        let manual = m.step(&m.step(&m.step(&z0, &u.column(0).into()), &u.column(1).into()), &u.column(2).into());
        assert!((&r[2] - manual).amax() <= 1e-13);
        assert_eq!(m.rollout(&z0, &u, 1).unwrap()[0], m.step(&z0, &u.column(0).into()));
        assert!(m.rollout(&z0, &u, 4).is_err());
    }

    #[test]
    fn dead_encoder_lifts_to_output_bias() {
        let mut e = Encoder::<f64>::new(6, &DEFAULT_HIDDEN, 60, 5);
        for w in &mut e.weights {
            w.fill(0.0);
        }
        e.biases.last_mut().unwrap().fill(0.25);
        let m = BilinearKoopmanModel::persistence(Observables::Encoder(e), NormStats::identity(), true);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let z = m.lift(&x);
        assert_eq!(z.len(), 66);
        assert_eq!(z.rows(0, 6), x.rows(0, 6));
        assert!(z.rows(6, 60).iter().all(|v| *v == 0.25));
    }

    proptest! {
        #[test]
        fn project_lift_is_exact(x in proptest::collection::vec(-50.0f64..50.0, 6), seed in 0u64..50) {
            let e = Encoder::<f64>::new(6, &DEFAULT_HIDDEN, 60, seed);
            let m = BilinearKoopmanModel::persistence(Observables::Encoder(e), NormStats::identity(), true);
            let xv = DVector::from_vec(x);
            let z = m.lift(&xv);
            prop_assert_eq!(m.project(&z), xv.clone());
            prop_assert_eq!(m.lift(&xv), z);
            let edmd = BilinearKoopmanModel::persistence(
                Observables::Edmd(EdmdDictionary::standard()), NormStats::identity(), false);
            prop_assert_eq!(edmd.project(&edmd.lift(&xv)), xv);
        }
    }
}
