//! Bilinear Koopman identification of Frenet-frame vehicle dynamics and a
//! cumulative-error-regulated MPC built on the identified models.
//!
//! Numerical kernels are generic over [`Real`] (`f32` or `f64`); the
//! aliases at the crate root fix the 64-bit variants used by the pipeline.

pub mod autodiff;
pub mod control;
pub mod data;
pub mod domain;
pub mod edmd;
pub mod eigen;
pub mod harness;
pub mod encoder;
pub mod error;
pub mod io;
pub mod koopman;
pub mod plant;
pub mod training;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type KoopmanModel = koopman::BilinearKoopmanModel<f64>;
pub type KoopmanModelF32 = koopman::BilinearKoopmanModel<f32>;
pub type Encoder = encoder::Encoder<f64>;
pub type EncoderF32 = encoder::Encoder<f32>;
