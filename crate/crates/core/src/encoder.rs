//! MLP encoder producing the learned observables.

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Hidden layer widths of the default encoder.
pub const DEFAULT_HIDDEN: [usize; 5] = [32, 64, 128, 128, 64];

/// Fully connected network: ReLU on hidden layers, linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T: Real> {
    /// `weights[l]` maps layer `l` to layer `l + 1` (rows = output width).
    pub weights: Vec<DMatrix<T>>,
    pub biases: Vec<DVector<T>>,
}

impl<T: Real> Encoder<T> {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn new(input: usize, hidden: &[usize], output: usize, seed: u64) -> Self {
        let mut rng = Pcg64::seed_from_u64(seed);
        let sizes: Vec<usize> = std::iter::once(input)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(output))
            .collect();
        let mut weights = Vec::with_capacity(sizes.len() - 1);
        let mut biases = Vec::with_capacity(sizes.len() - 1);
        for w in sizes.windows(2) {
            let bound = (6.0 / w[0] as f64).sqrt();
            weights.push(DMatrix::from_fn(w[1], w[0], |_, _| {
                T::lit(rng.random_range(-bound..bound))
            }));
            biases.push(DVector::zeros(w[1]));
        }
        Self { weights, biases }
    }

    /// Layer widths including input and output.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.weights.iter().map(|w| w.nrows()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.weights.first().map_or(0, |w| w.ncols())
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map_or(0, |w| w.nrows())
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.biases.len() {
            return Err(Error::Dimension("encoder needs matching weights and biases".into()));
        }
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.nrows() != b.len() {
                return Err(Error::Dimension(format!("layer {l}: bias length {} vs {} rows", b.len(), w.nrows())));
            }
            if l > 0 && w.ncols() != self.weights[l - 1].nrows() {
                return Err(Error::Dimension(format!("layer {l}: shape chain broken")));
            }
            if w.iter().chain(b.iter()).any(|v| !v.is_finite_value()) {
                return Err(Error::Config(format!("layer {l}: non-finite parameter")));
            }
        }
        Ok(())
    }

    /// Forward pass on a batch stored column-wise.
    pub fn forward_batch(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let last = self.weights.len() - 1;
        let mut h = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut next = w * &h;
            for mut col in next.column_iter_mut() {
                col += b;
            }
            if l < last {
                next.apply(|v| {
                    if !(*v > T::zero()) {
                        *v = T::zero()
                    }
                });
            }
            h = next;
        }
        h
    }

    pub fn forward(&self, x: &DVector<T>) -> DVector<T> {
        let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        let out = self.forward_batch(&m);
        DVector::from_column_slice(out.as_slice())
    }

    /// Sum of squared weights and biases over all layers.
    pub fn squared_norm(&self) -> T {
        self.weights
            .iter()
            .map(|w| w.norm_squared())
            .chain(self.biases.iter().map(|b| b.norm_squared()))
            .fold(T::zero(), |a, b| a + b)
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            weights: self.weights.iter().map(|w| w.map(|v| U::lit(v.to_f64_lossy()))).collect(),
            biases: self.biases.iter().map(|b| b.map(|v| U::lit(v.to_f64_lossy()))).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_follow_layer_sizes() {
        let e = Encoder::<f64>::new(6, &DEFAULT_HIDDEN, 60, 1);
        assert_eq!(e.layer_sizes(), vec![6, 32, 64, 128, 128, 64, 60]);
        e.validate().unwrap();
        let y = e.forward(&DVector::from_element(6, 0.3));
        assert_eq!(y.len(), 60);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = Encoder::<f64>::new(6, &DEFAULT_HIDDEN, 60, 7);
        let b = Encoder::<f64>::new(6, &DEFAULT_HIDDEN, 60, 7);
        assert_eq!(a, b);
        for w in &a.weights {
            let bound = (6.0 / w.ncols() as f64).sqrt();
            assert!(w.iter().all(|v| v.abs() <= bound));
        }
        assert!(a.biases.iter().all(|b| b.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn dead_network_outputs_last_bias() {
        let mut e = Encoder::<f64>::new(6, &[4, 5], 3, 0);
        for w in &mut e.weights {
            w.fill(0.0);
        }
        e.biases[0].fill(0.7);
        e.biases[2] = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let y = e.forward(&DVector::from_element(6, 1.3));
        assert_eq!(y.as_slice(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn relu_on_hidden_only() {
        // One hidden unit computing x, then the output computes -h.
        let e = Encoder::<f64> {
            weights: vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, -1.0)],
            biases: vec![DVector::zeros(1), DVector::zeros(1)],
        };
        assert_eq!(e.forward(&DVector::from_element(1, 2.0))[0], -2.0);
        assert_eq!(e.forward(&DVector::from_element(1, -2.0))[0], 0.0);
    }

    #[test]
    fn batch_matches_single() {
        let e = Encoder::<f64>::new(6, &DEFAULT_HIDDEN, 60, 3);
        let x = DMatrix::from_fn(6, 5, |i, j| (i as f64 - 2.5) * 0.3 + j as f64 * 0.1);
        let batch = e.forward_batch(&x);
        for j in 0..5 {
            let single = e.forward(&x.column(j).into_owned());
            assert_eq!(batch.column(j).into_owned(), single);
        }
    }

    #[test]
    fn f32_encoder_tracks_f64() {
        let e = Encoder::<f64>::new(6, &DEFAULT_HIDDEN, 60, 3);
        let x = DVector::from_element(6, 0.4);
        let y64 = e.forward(&x);
        let y32 = e.cast::<f32>().forward(&x.map(|v| v as f32));
        for (a, b) in y64.iter().zip(y32.iter()) {
            assert!((a - *b as f64).abs() < 1e-4);
        }
    }
}
