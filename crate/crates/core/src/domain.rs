//! Vehicle states, inputs, trajectories and normalization statistics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Number of physical vehicle states.
pub const STATE_DIM: usize = 6;
/// Number of driver commands (steering wheel, longitudinal drive).
pub const DRIVER_DIM: usize = 2;
/// Number of exogenous road inputs (curvature).
pub const EXOGENOUS_DIM: usize = 1;
/// Width of the flattened combined input.
pub const INPUT_DIM: usize = DRIVER_DIM + EXOGENOUS_DIM;

/// Fixed component order of [`VehicleState`] everywhere in the crate.
pub const STATE_NAMES: [&str; STATE_DIM] = ["vx", "vy", "yaw_rate", "ds", "ey", "epsi"];
/// Fixed flattening order of [`CombinedInput`].
pub const INPUT_NAMES: [&str; INPUT_DIM] = ["delta_w", "u_zeta", "kappa"];

pub const VX: usize = 0;
pub const VY: usize = 1;
pub const YAW_RATE: usize = 2;
pub const DS: usize = 3;
pub const EY: usize = 4;
pub const EPSI: usize = 5;

/// Indices of the tracked outputs `[ds, ey, epsi]` inside the state vector.
pub const TRACKED_OUTPUTS: [usize; 3] = [DS, EY, EPSI];

pub const DELTA_W: usize = 0;
pub const U_ZETA: usize = 1;
pub const KAPPA: usize = 2;

/// Hand-wheel steering limit, radians (±40°).
pub const STEER_LIMIT: f64 = 40.0 * std::f64::consts::PI / 180.0;
/// Longitudinal drive command limit.
pub const DRIVE_LIMIT: f64 = 1.0;

/// Physical Frenet-frame vehicle state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState<T = f64> {
    /// Longitudinal velocity, m/s.
    pub vx: T,
    /// Lateral velocity, m/s.
    pub vy: T,
    /// Yaw rate, rad/s.
    pub yaw_rate: T,
    /// Progress along the path gained over the last sample step, m.
    pub ds: T,
    /// Lateral deviation from the path, m.
    pub ey: T,
    /// Heading error, rad.
    pub epsi: T,
}

impl<T: Real> VehicleState<T> {
    pub fn zeros() -> Self {
        Self::from_array([T::zero(); STATE_DIM])
    }

    pub fn from_array(a: [T; STATE_DIM]) -> Self {
        Self {
            vx: a[VX],
            vy: a[VY],
            yaw_rate: a[YAW_RATE],
            ds: a[DS],
            ey: a[EY],
            epsi: a[EPSI],
        }
    }

    pub fn to_array(&self) -> [T; STATE_DIM] {
        [self.vx, self.vy, self.yaw_rate, self.ds, self.ey, self.epsi]
    }

    pub fn from_slice(s: &[T]) -> Self {
        let mut a = [T::zero(); STATE_DIM];
        a.copy_from_slice(&s[..STATE_DIM]);
        Self::from_array(a)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite_value())
    }

    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.to_array()
            .iter()
            .position(|v| !v.is_finite_value())
            .map(|i| STATE_NAMES[i])
    }

    pub fn cast<U: Real>(&self) -> VehicleState<U> {
        let a = self.to_array();
        VehicleState::from_array(std::array::from_fn(|i| U::lit(a[i].to_f64_lossy())))
    }
}

/// Driver commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverInput<T = f64> {
    /// Hand-wheel steering angle, rad, within ±40°.
    pub delta_w: T,
    /// Longitudinal drive command in [-1, 1]; positive throttle, negative brake.
    pub u_zeta: T,
}

impl<T: Real> DriverInput<T> {
    pub fn zeros() -> Self {
        Self {
            delta_w: T::zero(),
            u_zeta: T::zero(),
        }
    }

    /// Clamps both channels to their physical ranges.
    pub fn clamped(&self) -> Self {
        let s = T::lit(STEER_LIMIT);
        let d = T::lit(DRIVE_LIMIT);
        Self {
            delta_w: self.delta_w.clamp(-s, s),
            u_zeta: self.u_zeta.clamp(-d, d),
        }
    }
}

/// Exogenous road input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExogenousInput<T = f64> {
    /// Road curvature, 1/m.
    pub kappa: T,
}

/// Driver commands concatenated with the exogenous input, flattened as
/// `[delta_w, u_zeta, kappa]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombinedInput<T = f64> {
    pub u: DriverInput<T>,
    pub w: ExogenousInput<T>,
}

impl<T: Real> CombinedInput<T> {
    pub fn new(delta_w: T, u_zeta: T, kappa: T) -> Self {
        Self {
            u: DriverInput { delta_w, u_zeta },
            w: ExogenousInput { kappa },
        }
    }

    pub fn from_array(a: [T; INPUT_DIM]) -> Self {
        Self::new(a[DELTA_W], a[U_ZETA], a[KAPPA])
    }

    pub fn to_array(&self) -> [T; INPUT_DIM] {
        [self.u.delta_w, self.u.u_zeta, self.w.kappa]
    }
}

/// A simulated or recorded trajectory: `K + 1` states and `K` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T = f64> {
    pub states: Vec<VehicleState<T>>,
    pub inputs: Vec<CombinedInput<T>>,
    /// Sample time, s.
    pub dt: T,
}

impl<T: Real> Trajectory<T> {
    /// Number of transitions `K`.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.len() != self.inputs.len() + 1 {
            return Err(Error::Dimension(format!(
                "trajectory has {} states and {} inputs",
                self.states.len(),
                self.inputs.len()
            )));
        }
        Ok(())
    }

    /// Sub-trajectory covering transitions `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Self {
        Self {
            states: self.states[start..=start + len].to_vec(),
            inputs: self.inputs[start..start + len].to_vec(),
            dt: self.dt,
        }
    }
}

/// Per-component mean and standard deviation of states and inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub state_mean: [f64; STATE_DIM],
    pub state_std: [f64; STATE_DIM],
    pub input_mean: [f64; INPUT_DIM],
    pub input_std: [f64; INPUT_DIM],
}

/// Standard deviations below this are replaced by one.
pub const STD_FLOOR: f64 = 1e-8;

/// Outcome of [`compute_norm_stats`]: the statistics plus the names of
/// components whose standard deviation was clamped.
#[derive(Debug, Clone)]
pub struct NormStatsReport {
    pub stats: NormStats,
    pub clamped: Vec<&'static str>,
}

/// Population mean/std of every state and input component over all time
/// steps of all trajectories.
pub fn compute_norm_stats(dataset: &[Trajectory]) -> Result<NormStatsReport> {
    let n_states: usize = dataset.iter().map(|t| t.states.len()).sum();
    let n_inputs: usize = dataset.iter().map(|t| t.inputs.len()).sum();
    if n_states == 0 || n_inputs == 0 {
        return Err(Error::EmptyDataset);
    }
    let states = dataset.iter().flat_map(|t| t.states.iter().map(|s| s.to_array()));
    let (state_mean, mut state_std) = mean_std::<STATE_DIM>(states.clone(), n_states);
    let inputs = dataset.iter().flat_map(|t| t.inputs.iter().map(|u| u.to_array()));
    let (input_mean, mut input_std) = mean_std::<INPUT_DIM>(inputs, n_inputs);

    let mut clamped = Vec::new();
    for (std, name) in state_std.iter_mut().zip(STATE_NAMES) {
        if *std < STD_FLOOR {
            log::warn!("standard deviation of `{name}` is {std:e}; clamped to 1");
            *std = 1.0;
            clamped.push(name);
        }
    }
    for (std, name) in input_std.iter_mut().zip(INPUT_NAMES) {
        if *std < STD_FLOOR {
            log::warn!("standard deviation of `{name}` is {std:e}; clamped to 1");
            *std = 1.0;
            clamped.push(name);
        }
    }
    Ok(NormStatsReport {
        stats: NormStats {
            state_mean,
            state_std,
            input_mean,
            input_std,
        },
        clamped,
    })
}

fn mean_std<const D: usize>(
    rows: impl Iterator<Item = [f64; D]> + Clone,
    count: usize,
) -> ([f64; D], [f64; D]) {
    let n = count as f64;
    let mut mean = [0.0; D];
    for r in rows.clone() {
        for i in 0..D {
            mean[i] += r[i];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; D];
    for r in rows {
        for i in 0..D {
            let d = r[i] - mean[i];
            var[i] += d * d;
        }
    }
    (mean, var.map(|v| (v / n).sqrt()))
}

impl NormStats {
    /// Statistics that leave values unchanged.
    pub fn identity() -> Self {
        Self {
            state_mean: [0.0; STATE_DIM],
            state_std: [1.0; STATE_DIM],
            input_mean: [0.0; INPUT_DIM],
            input_std: [1.0; INPUT_DIM],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .state_mean
            .iter()
            .chain(&self.state_std)
            .chain(&self.input_mean)
            .chain(&self.input_std);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::Config("normalization statistics are not finite".into()));
        }
        if self.state_std.iter().chain(&self.input_std).any(|s| *s <= 0.0) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }

    pub fn normalize_state<T: Real>(&self, x: &VehicleState<T>) -> DVector<T> {
        let a = x.to_array();
        DVector::from_fn(STATE_DIM, |i, _| {
            (a[i] - T::lit(self.state_mean[i])) / T::lit(self.state_std[i])
        })
    }

    pub fn denormalize_state<T: Real>(&self, x: &[T]) -> VehicleState<T> {
        VehicleState::from_array(std::array::from_fn(|i| {
            x[i] * T::lit(self.state_std[i]) + T::lit(self.state_mean[i])
        }))
    }

    pub fn normalize_input<T: Real>(&self, u: &CombinedInput<T>) -> DVector<T> {
        let a = u.to_array();
        DVector::from_fn(INPUT_DIM, |i, _| {
            (a[i] - T::lit(self.input_mean[i])) / T::lit(self.input_std[i])
        })
    }

    pub fn denormalize_input<T: Real>(&self, u: &[T]) -> CombinedInput<T> {
        CombinedInput::from_array(std::array::from_fn(|i| {
            u[i] * T::lit(self.input_std[i]) + T::lit(self.input_mean[i])
        }))
    }

    /// Normalizes a single input channel.
    pub fn normalize_channel<T: Real>(&self, channel: usize, value: T) -> T {
        (value - T::lit(self.input_mean[channel])) / T::lit(self.input_std[channel])
    }

    pub fn denormalize_channel<T: Real>(&self, channel: usize, value: T) -> T {
        value * T::lit(self.input_std[channel]) + T::lit(self.input_mean[channel])
    }

    /// Normalizes a single state component.
    pub fn normalize_component<T: Real>(&self, index: usize, value: T) -> T {
        (value - T::lit(self.state_mean[index])) / T::lit(self.state_std[index])
    }
}

/// A trajectory in normalized coordinates, stored column-wise:
/// `states` is `n × (K + 1)`, `inputs` is `(m + l) × K`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTrajectory<T> {
    pub states: DMatrix<T>,
    pub inputs: DMatrix<T>,
}

impl<T: Real> NormalizedTrajectory<T> {
    pub fn from_trajectory(traj: &Trajectory, stats: &NormStats) -> Self {
        let k = traj.len();
        let mut states = DMatrix::zeros(STATE_DIM, k + 1);
        for (j, s) in traj.states.iter().enumerate() {
            states.set_column(j, &stats.normalize_state(&s.cast::<T>()));
        }
        let mut inputs = DMatrix::zeros(INPUT_DIM, k);
        for (j, u) in traj.inputs.iter().enumerate() {
            let a = u.to_array();
            let c = CombinedInput::from_array(a.map(T::lit));
            inputs.set_column(j, &stats.normalize_input(&c));
        }
        Self { states, inputs }
    }

    pub fn cast<U: Real>(&self) -> NormalizedTrajectory<U> {
        NormalizedTrajectory {
            states: self.states.map(|v| U::lit(v.to_f64_lossy())),
            inputs: self.inputs.map(|v| U::lit(v.to_f64_lossy())),
        }
    }

    pub fn steps(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn state_dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.nrows()
    }
}
