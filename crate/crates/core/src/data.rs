//! Episode generation, segmentation and train/val/test splitting.

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::domain::{CombinedInput, Trajectory, VehicleState};
use crate::error::{Error, Result};
use crate::plant::BicyclePlant;

/// Data-generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_episodes: usize,
    pub episode_len_steps: usize,
    /// Sample time, s.
    pub dt: f64,
    pub segment_len_steps: usize,
    /// Curvature range, 1/m.
    pub kappa_range: [f64; 2],
    /// Hand-wheel range, degrees.
    pub steer_range_deg: [f64; 2],
    pub steer_key_points: usize,
    pub steer_poly_degree: usize,
    /// Length of one constant-target pedal segment, s.
    pub pedal_segment_len: f64,
    /// Maximum change of `u_zeta` per sample step.
    pub pedal_rate_limit: f64,
    /// Initial longitudinal speed range, m/s.
    pub init_speed_range: [f64; 2],
    pub seed: u64,
    /// Fraction of episodes held out for testing.
    pub test_fraction: f64,
    /// Fraction of the remaining episodes held out for validation.
    pub val_fraction: f64,
    /// Redraw episodes whose simulation breached the curvature guard.
    pub regenerate_breaches: bool,
    pub max_regen_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_episodes: 500,
            episode_len_steps: 400,
            dt: 0.025,
            segment_len_steps: 80,
            kappa_range: [-4e-3, 4e-3],
            steer_range_deg: [-40.0, 40.0],
            steer_key_points: 6,
            steer_poly_degree: 5,
            pedal_segment_len: 1.0,
            pedal_rate_limit: 0.05,
            init_speed_range: [8.0, 33.0],
            seed: 0x5eed,
            test_fraction: 0.1,
            val_fraction: 0.1,
            regenerate_breaches: true,
            max_regen_attempts: 20,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_episodes == 0 || self.episode_len_steps == 0 || self.segment_len_steps == 0 {
            return bad("episode and segment lengths must be positive");
        }
        if self.episode_len_steps % self.segment_len_steps != 0 {
            return bad("episode length must be a multiple of the segment length");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        for (name, r) in [
            ("kappa_range", self.kappa_range),
            ("steer_range_deg", self.steer_range_deg),
            ("init_speed_range", self.init_speed_range),
        ] {
            if !(r[0] <= r[1]) {
                return Err(Error::Config(format!("{name} is not ordered")));
            }
        }
        if self.steer_poly_degree >= self.steer_key_points {
            return bad("polynomial degree must be below the number of key points");
        }
        if !(self.pedal_rate_limit > 0.0) || !(self.pedal_segment_len > 0.0) {
            return bad("pedal segment length and rate limit must be positive");
        }
        if !(0.0..1.0).contains(&self.test_fraction) || !(0.0..1.0).contains(&self.val_fraction) {
            return bad("split fractions must lie in [0, 1)");
        }
        Ok(())
    }

    fn steer_range_rad(&self) -> [f64; 2] {
        self.steer_range_deg.map(f64::to_radians)
    }

    /// Sample steps per pedal segment.
    pub fn pedal_segment_steps(&self) -> usize {
        ((self.pedal_segment_len / self.dt).round() as usize).max(1)
    }
}

/// Independent generator for one episode. Streams differ per episode so
/// episodes can be produced in any order with identical results.
pub fn episode_rng(seed: u64, episode: usize) -> Pcg64 {
    let state = (u128::from(seed) << 64) ^ 0x9e37_79b9_7f4a_7c15_f39c_c060_5ced_c834;
    Pcg64::new(state, episode as u128)
}

/// Least-squares polynomial coefficients (lowest order first) through
/// `(t, y)` samples.
pub fn fit_polynomial(t: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    if t.len() != y.len() || t.len() <= degree {
        return Err(Error::Dimension("not enough samples for the polynomial degree".into()));
    }
    let v = DMatrix::from_fn(t.len(), degree + 1, |i, j| t[i].powi(j as i32));
    let rhs = DVector::from_column_slice(y);
    let svd = v.svd(true, true);
    let c = svd
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::Singular(e.to_string()))?;
    Ok(c.iter().copied().collect())
}

pub fn eval_polynomial(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

/// Normalized key-point abscissae in [-1, 1], uniformly spaced.
fn key_times(count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![0.0];
    }
    (0..count).map(|j| -1.0 + 2.0 * j as f64 / (count - 1) as f64).collect()
}

fn step_time(k: usize, len: usize) -> f64 {
    if len <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * k as f64 / (len - 1) as f64
    }
}

/// Smooth steering profile through explicit key values (rad): polynomial
/// least-squares fit, evaluated at every step and clamped to `range`.
pub fn steering_profile_from_key_points(
    key_values: &[f64],
    degree: usize,
    len: usize,
    range: [f64; 2],
) -> Result<Vec<f64>> {
    let coeffs = fit_polynomial(&key_times(key_values.len()), key_values, degree)?;
    Ok((0..len)
        .map(|k| eval_polynomial(&coeffs, step_time(k, len)).clamp(range[0], range[1]))
        .collect())
}

/// Hand-wheel profile (rad) from uniformly drawn key points.
pub fn gen_steering_profile<R: rand::Rng>(rng: &mut R, cfg: &GenConfig, len: usize) -> Result<Vec<f64>> {
    let range = cfg.steer_range_rad();
    let keys: Vec<f64> = (0..cfg.steer_key_points)
        .map(|_| uniform(rng, range))
        .collect();
    steering_profile_from_key_points(&keys, cfg.steer_poly_degree, len, range)
}

/// Slew-limited pedal profile chasing one target per segment, starting from 0.
pub fn longitudinal_profile_from_targets(
    targets: &[f64],
    segment_steps: usize,
    len: usize,
    rate_limit: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut u = 0.0_f64;
    for k in 0..len {
        let target = targets[(k / segment_steps).min(targets.len() - 1)];
        u += (target - u).clamp(-rate_limit, rate_limit);
        out.push(u.clamp(-1.0, 1.0));
    }
    out
}

/// Longitudinal command profile with one uniform target per pedal segment.
pub fn gen_longitudinal_profile<R: rand::Rng>(rng: &mut R, cfg: &GenConfig, len: usize) -> Vec<f64> {
    let seg = cfg.pedal_segment_steps();
    let n_targets = len.div_ceil(seg).max(1);
    let targets: Vec<f64> = (0..n_targets).map(|_| uniform(rng, [-1.0, 1.0])).collect();
    longitudinal_profile_from_targets(&targets, seg, len, cfg.pedal_rate_limit)
}

fn uniform<R: rand::Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

/// One simulated episode plus its metadata.
#[derive(Debug, Clone)]
pub struct Episode {
    pub index: usize,
    pub kappa: f64,
    pub trajectory: Trajectory,
    /// Steps at which the curvature guard was breached (empty when clean).
    pub guard_breaches: Vec<usize>,
    /// Number of redraws needed before accepting this episode.
    pub redraws: usize,
}

/// Simulates an episode from explicit inputs.
pub fn simulate_episode(
    plant: &BicyclePlant,
    index: usize,
    initial_speed: f64,
    inputs: Vec<CombinedInput>,
    dt: f64,
) -> Result<Episode> {
    let mut x0 = VehicleState::zeros();
    x0.vx = initial_speed;
    let kappa = inputs.first().map(|u| u.w.kappa).unwrap_or(0.0);
    let sim = plant.simulate(x0, &inputs, dt)?;
    Ok(Episode {
        index,
        kappa,
        trajectory: sim.trajectory,
        guard_breaches: sim.guard_breaches,
        redraws: 0,
    })
}

/// Draws curvature, initial speed and both driver profiles, then simulates.
pub fn sample_episode<R: rand::Rng>(
    rng: &mut R,
    index: usize,
    cfg: &GenConfig,
    plant: &BicyclePlant,
) -> Result<Episode> {
    let len = cfg.episode_len_steps;
    let mut redraws = 0;
    loop {
        let kappa = uniform(rng, cfg.kappa_range);
        let v0 = uniform(rng, cfg.init_speed_range);
        let steer = gen_steering_profile(rng, cfg, len)?;
        let pedal = gen_longitudinal_profile(rng, cfg, len);
        let inputs = steer
            .iter()
            .zip(&pedal)
            .map(|(d, p)| CombinedInput::new(*d, *p, kappa))
            .collect();
        let mut ep = simulate_episode(plant, index, v0, inputs, cfg.dt)?;
        ep.redraws = redraws;
        let retry = cfg.regenerate_breaches && !ep.guard_breaches.is_empty();
        if !retry || redraws >= cfg.max_regen_attempts {
            if !ep.guard_breaches.is_empty() {
                log::warn!("episode {index} kept with {} guard breaches", ep.guard_breaches.len());
            }
            return Ok(ep);
        }
        redraws += 1;
    }
}

/// Generates all episodes of a configuration.
pub fn generate_episodes(cfg: &GenConfig, plant: &BicyclePlant) -> Result<Vec<Episode>> {
    cfg.validate()?;
    (0..cfg.n_episodes)
        .map(|i| sample_episode(&mut episode_rng(cfg.seed, i), i, cfg, plant))
        .collect()
}

/// A fixed-length window of an episode.
#[derive(Debug, Clone)]
pub struct Segment {
    pub episode: usize,
    pub index: usize,
    pub kappa: f64,
    pub trajectory: Trajectory,
}

/// Segments grouped by split.
#[derive(Debug, Clone, Default)]
pub struct SplitDataset {
    pub train: Vec<Segment>,
    pub val: Vec<Segment>,
    pub test: Vec<Segment>,
}

impl SplitDataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cuts an episode into consecutive non-overlapping windows of
/// `segment_len` transitions. Neighbouring windows share their boundary
/// state.
pub fn segment_episode(ep: &Episode, segment_len: usize) -> Result<Vec<Segment>> {
    let k = ep.trajectory.len();
    if segment_len == 0 || k % segment_len != 0 {
        return Err(Error::Config(format!(
            "episode of {k} steps cannot be cut into {segment_len}-step segments"
        )));
    }
    Ok((0..k / segment_len)
        .map(|j| Segment {
            episode: ep.index,
            index: j,
            kappa: ep.kappa,
            trajectory: ep.trajectory.window(j * segment_len, segment_len),
        })
        .collect())
}

/// Episode-level split: a seeded shuffle assigns whole episodes to test,
/// then validation, then training.
pub fn segment_and_split(episodes: &[Episode], cfg: &GenConfig) -> Result<SplitDataset> {
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut rng = Pcg64::seed_from_u64(cfg.seed ^ 0x5711_7000);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n = episodes.len();
    let n_test = (n as f64 * cfg.test_fraction).round() as usize;
    let n_val = ((n - n_test) as f64 * cfg.val_fraction).round() as usize;

    let mut out = SplitDataset::default();
    for (rank, &e) in order.iter().enumerate() {
        let segs = segment_episode(&episodes[e], cfg.segment_len_steps)?;
        let bucket = if rank < n_test {
            &mut out.test
        } else if rank < n_test + n_val {
            &mut out.val
        } else {
            &mut out.train
        };
        bucket.extend(segs);
    }
    for bucket in [&mut out.train, &mut out.val, &mut out.test] {
        bucket.sort_by_key(|s| (s.episode, s.index));
    }
    Ok(out)
}
