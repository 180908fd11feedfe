//! Nonlinear bicycle model in the Frenet frame with a linear tire model,
//! all-wheel drive with a power cap, and proportional braking.
//!
//! The continuous dynamics integrate `[vx, vy, yaw_rate, s, ey, epsi]`; the
//! sampled state reports the progress gained over the step (`ds`) instead of
//! the absolute arc length.

use serde::{Deserialize, Serialize};

use crate::domain::{CombinedInput, Trajectory, VehicleState};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Physical parameters of the substitute plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantParams {
    /// Vehicle mass, kg.
    pub mass: f64,
    /// Yaw moment of inertia, kg·m².
    pub yaw_inertia: f64,
    /// CG to front axle, m.
    pub lf: f64,
    /// CG to rear axle, m.
    pub lr: f64,
    /// Front axle cornering stiffness, N/rad.
    pub cf: f64,
    /// Rear axle cornering stiffness, N/rad.
    pub cr: f64,
    /// Hand-wheel to road-wheel ratio.
    pub steer_ratio: f64,
    /// Maximum total drive force, N.
    pub drive_force_max: f64,
    /// Maximum drive power, W.
    pub drive_power_max: f64,
    /// Maximum total brake force, N.
    pub brake_force_max: f64,
    /// Aerodynamic drag coefficient, N·s²/m².
    pub drag_coeff: f64,
    /// Rolling resistance, N.
    pub rolling_resistance: f64,
    /// Low-speed guard used in slip-angle and power formulas, m/s.
    pub v_min: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            mass: 1400.0,
            yaw_inertia: 2200.0,
            lf: 1.10,
            lr: 1.58,
            cf: 8.0e4,
            cr: 8.0e4,
            steer_ratio: 16.0,
            drive_force_max: 6000.0,
            drive_power_max: 1.5e5,
            brake_force_max: 1.2e4,
            drag_coeff: 0.38,
            rolling_resistance: 180.0,
            v_min: 0.5,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.mass,
            self.yaw_inertia,
            self.lf,
            self.lr,
            self.cf,
            self.cr,
            self.steer_ratio,
            self.drive_force_max,
            self.drive_power_max,
            self.brake_force_max,
            self.v_min,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("plant parameters must be positive".into()));
        }
        if self.drag_coeff < 0.0 || self.rolling_resistance < 0.0 {
            return Err(Error::Config("resistance coefficients must be non-negative".into()));
        }
        Ok(())
    }
}

/// Front/rear axle forces in the wheel frames, N.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TireForces<T> {
    pub fxf: T,
    pub fyf: T,
    pub fxr: T,
    pub fyr: T,
}

/// Continuous-time Frenet state with absolute progress `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrenetState<T> {
    pub vx: T,
    pub vy: T,
    pub yaw_rate: T,
    pub s: T,
    pub ey: T,
    pub epsi: T,
}

impl<T: Real> FrenetState<T> {
    pub fn from_vehicle(x: &VehicleState<T>, s: T) -> Self {
        Self {
            vx: x.vx,
            vy: x.vy,
            yaw_rate: x.yaw_rate,
            s,
            ey: x.ey,
            epsi: x.epsi,
        }
    }

    pub fn to_array(&self) -> [T; 6] {
        [self.vx, self.vy, self.yaw_rate, self.s, self.ey, self.epsi]
    }

    pub fn from_array(a: [T; 6]) -> Self {
        Self {
            vx: a[0],
            vy: a[1],
            yaw_rate: a[2],
            s: a[3],
            ey: a[4],
            epsi: a[5],
        }
    }
}

/// Time derivatives of a [`FrenetState`], plus whether the curvature
/// singularity guard `|kappa * ey| <= 0.95` was breached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrenetDerivatives<T> {
    pub d: FrenetState<T>,
    pub guard_breached: bool,
}

/// `|kappa * ey|` above this is reported as a guard breach.
pub const CURVATURE_GUARD: f64 = 0.95;
/// Lower clamp of `1 - kappa * ey` in the progress-rate denominator.
pub const PROGRESS_DENOMINATOR_MIN: f64 = 0.05;

/// Front road-wheel angle produced by a hand-wheel angle.
pub fn road_wheel_angle<T: Real>(delta_w: T, params: &PlantParams) -> T {
    delta_w / T::lit(params.steer_ratio)
}

/// Linear tire forces plus drive/brake distribution.
pub fn tire_forces<T: Real>(
    vx: T,
    vy: T,
    yaw_rate: T,
    delta_f: T,
    u_zeta: T,
    params: &PlantParams,
) -> TireForces<T> {
    let p = |v: f64| T::lit(v);
    let v_guard = vx.max(p(params.v_min));
    let alpha_f = delta_f - (vy + p(params.lf) * yaw_rate).atan2(v_guard);
    let alpha_r = -(vy - p(params.lr) * yaw_rate).atan2(v_guard);
    let fyf = p(params.cf) * alpha_f;
    let fyr = p(params.cr) * alpha_r;

    let (fxf, mut fxr) = if u_zeta >= T::zero() {
        let traction = u_zeta * p(params.drive_force_max);
        let power_limited = p(params.drive_power_max) / v_guard;
        let total = traction.min(power_limited);
        (total * p(0.5), total * p(0.5))
    } else {
        // Fades braking out below v_min so it cannot push the car backwards.
        let fade = (vx / p(params.v_min)).clamp(T::zero(), T::one());
        let total = u_zeta * p(params.brake_force_max) * fade;
        (total * p(0.6), total * p(0.4))
    };
    fxr -= p(params.drag_coeff) * vx * vx + p(params.rolling_resistance);
    TireForces { fxf, fyf, fxr, fyr }
}

/// Continuous-time Frenet-frame bicycle dynamics.
pub fn frenet_derivatives<T: Real>(
    x: &FrenetState<T>,
    delta_f: T,
    u_zeta: T,
    kappa: T,
    params: &PlantParams,
) -> FrenetDerivatives<T> {
    let p = |v: f64| T::lit(v);
    let f = tire_forces(x.vx, x.vy, x.yaw_rate, delta_f, u_zeta, params);
    let (sd, cd) = (delta_f.sin(), delta_f.cos());
    let m = p(params.mass);

    let vx_dot = (f.fxf * cd - f.fyf * sd + f.fxr) / m + x.yaw_rate * x.vy;
    let vy_dot = (f.fxf * sd + f.fyf * cd + f.fyr) / m - x.yaw_rate * x.vx;
    let r_dot = (p(params.lf) * f.fxf * sd + p(params.lf) * f.fyf * cd - p(params.lr) * f.fyr)
        / p(params.yaw_inertia);

    let ke = kappa * x.ey;
    let guard_breached = ke.abs() > p(CURVATURE_GUARD);
    let denom = (T::one() - ke).max(p(PROGRESS_DENOMINATOR_MIN));
    let (se, ce) = (x.epsi.sin(), x.epsi.cos());
    let s_dot = (x.vx * ce - x.vy * se) / denom;
    let ey_dot = x.vx * se + x.vy * ce;
    let epsi_dot = x.yaw_rate - s_dot * kappa;

    FrenetDerivatives {
        d: FrenetState {
            vx: vx_dot,
            vy: vy_dot,
            yaw_rate: r_dot,
            s: s_dot,
            ey: ey_dot,
            epsi: epsi_dot,
        },
        guard_breached,
    }
}

/// One sampled step of the plant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantStep<T> {
    pub state: VehicleState<T>,
    pub guard_breached: bool,
}

/// A simulated trajectory and the step indices at which the curvature guard
/// was breached.
#[derive(Debug, Clone)]
pub struct Simulation<T> {
    pub trajectory: Trajectory<T>,
    pub guard_breaches: Vec<usize>,
}

/// The substitute plant: parameters plus fixed-step RK4 integration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BicyclePlant {
    pub params: PlantParams,
}

impl BicyclePlant {
    pub fn new(params: PlantParams) -> Self {
        Self { params }
    }

    /// Integrates the continuous dynamics over `dt` with inputs held
    /// constant (classical RK4). The returned state's `ds` is the progress
    /// gained over the step.
    pub fn step<T: Real>(
        &self,
        state: &VehicleState<T>,
        input: &CombinedInput<T>,
        dt: T,
    ) -> Result<PlantStep<T>> {
        if !(dt > T::zero()) {
            return Err(Error::Config("sample time must be positive".into()));
        }
        let start = FrenetState::from_vehicle(state, T::zero());
        let (end, guard_breached) = self.rk4(&start, input, dt);
        let next = VehicleState {
            vx: end.vx,
            vy: end.vy,
            yaw_rate: end.yaw_rate,
            ds: end.s,
            ey: end.ey,
            epsi: end.epsi,
        };
        if let Some(component) = next.first_non_finite() {
            return Err(Error::NonFinite { component });
        }
        Ok(PlantStep {
            state: next,
            guard_breached,
        })
    }

    /// RK4 on the continuous Frenet state.
    pub fn rk4<T: Real>(
        &self,
        x: &FrenetState<T>,
        input: &CombinedInput<T>,
        dt: T,
    ) -> (FrenetState<T>, bool) {
        let delta_f = road_wheel_angle(input.u.delta_w, &self.params);
        let eval = |s: &FrenetState<T>| {
            frenet_derivatives(s, delta_f, input.u.u_zeta, input.w.kappa, &self.params)
        };
        let axpy = |a: &FrenetState<T>, h: T, d: &FrenetState<T>| {
            let (a, d) = (a.to_array(), d.to_array());
            FrenetState::from_array(std::array::from_fn(|i| a[i] + h * d[i]))
        };
        let half = dt * T::lit(0.5);
        let k1 = eval(x);
        let k2 = eval(&axpy(x, half, &k1.d));
        let k3 = eval(&axpy(x, half, &k2.d));
        let k4 = eval(&axpy(x, dt, &k3.d));
        let (a, d1, d2, d3, d4) = (
            x.to_array(),
            k1.d.to_array(),
            k2.d.to_array(),
            k3.d.to_array(),
            k4.d.to_array(),
        );
        let sixth = dt / T::lit(6.0);
        let two = T::lit(2.0);
        let out = FrenetState::from_array(std::array::from_fn(|i| {
            a[i] + sixth * (d1[i] + two * d2[i] + two * d3[i] + d4[i])
        }));
        let breached = k1.guard_breached || k2.guard_breached || k3.guard_breached || k4.guard_breached;
        (out, breached)
    }

    /// Folds [`BicyclePlant::step`] over an input sequence.
    pub fn simulate<T: Real>(
        &self,
        initial: VehicleState<T>,
        inputs: &[CombinedInput<T>],
        dt: T,
    ) -> Result<Simulation<T>> {
        let mut states = Vec::with_capacity(inputs.len() + 1);
        let mut guard_breaches = Vec::new();
        states.push(initial);
        let mut x = initial;
        for (k, u) in inputs.iter().enumerate() {
            let step = self.step(&x, u, dt)?;
            if step.guard_breached {
                guard_breaches.push(k);
            }
            x = step.state;
            states.push(x);
        }
        Ok(Simulation {
            trajectory: Trajectory {
                states,
                inputs: inputs.to_vec(),
                dt,
            },
            guard_breaches,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::VehicleState;

    fn deg(x: f64) -> f64 {
        x.to_radians()
    }

    fn frictionless() -> PlantParams {
        PlantParams {
            drag_coeff: 0.0,
            rolling_resistance: 0.0,
            ..PlantParams::default()
        }
    }

    #[test]
    fn road_wheel_angle_is_linear_and_odd() {
        let p = PlantParams::default();
        assert_eq!(road_wheel_angle(0.0, &p), 0.0);
        assert!((road_wheel_angle(deg(16.0), &p) - deg(1.0)).abs() < 1e-15);
        for x in [0.1, 0.3, -0.2] {
            assert_eq!(road_wheel_angle(-x, &p), -road_wheel_angle(x, &p));
        }
    }

    #[test]
    fn coasting_has_only_resistance() {
        let p = PlantParams::default();
        let f = tire_forces(20.0, 0.0, 0.0, 0.0, 0.0, &p);
        assert_eq!(f.fyf, 0.0);
        assert_eq!(f.fyr, 0.0);
        assert_eq!(f.fxf, 0.0);
        assert_eq!(f.fxr, -(0.38 * 400.0 + 180.0));
    }

    #[test]
    fn small_slip_is_linear() {
        let p = PlantParams::default();
        let (vx, vy, r, delta) = (25.0, 0.01, 0.004, 0.0009);
        let f = tire_forces(vx, vy, r, delta, 0.0, &p);
        let alpha_lin = delta - (vy + p.lf * r) / vx;
        assert!(alpha_lin.abs() <= 1e-3);
        assert!((f.fyf - p.cf * alpha_lin).abs() <= 1e-3 * (p.cf * alpha_lin).abs());
    }

    #[test]
    fn drive_force_is_power_capped() {
        let p = PlantParams::default();
        let mut q = p;
        q.drag_coeff = 0.0;
        q.rolling_resistance = 0.0;
        let f = tire_forces(30.0, 0.0, 0.0, 0.0, 1.0, &q);
        let expected = p.drive_force_max.min(p.drive_power_max / 30.0);
        assert!((f.fxf + f.fxr - expected).abs() < 1e-9);
        assert!((f.fxf - f.fxr).abs() < 1e-12);
    }

    #[test]
    fn braking_split_and_low_speed_fade() {
        let mut p = PlantParams::default();
        p.drag_coeff = 0.0;
        p.rolling_resistance = 0.0;
        let f = tire_forces(10.0, 0.0, 0.0, 0.0, -0.5, &p);
        assert!((f.fxf - (-0.5 * p.brake_force_max * 0.6)).abs() < 1e-9);
        assert!((f.fxr - (-0.5 * p.brake_force_max * 0.4)).abs() < 1e-9);
        let stopped = tire_forces(0.0, 0.0, 0.0, 0.0, -1.0, &p);
        assert_eq!(stopped.fxf + stopped.fxr, 0.0);
    }

    #[test]
    fn zero_state_derivatives() {
        let p = PlantParams::default();
        let x = FrenetState::from_array([0.0; 6]);
        let d = frenet_derivatives(&x, 0.0, 0.0, 0.0, &p);
        let a = d.d.to_array();
        assert!((a[0] + p.rolling_resistance / p.mass).abs() < 1e-15);
        assert!(a[1..].iter().all(|v| *v == 0.0));
        assert!(!d.guard_breached);
    }

    #[test]
    fn straight_road_kinematics() {
        let p = PlantParams::default();
        let x = FrenetState::from_array([17.0, 0.3, 0.12, 5.0, 1.5, 0.0]);
        let d = frenet_derivatives(&x, 0.01, 0.2, 0.0, &p);
        assert_eq!(d.d.s, 17.0);
        assert_eq!(d.d.epsi, 0.12);
    }

    #[test]
    fn guard_breach_is_flagged_and_clamped() {
        let p = PlantParams::default();
        let x = FrenetState::from_array([10.0, 0.0, 0.0, 0.0, 300.0, 0.0]);
        let d = frenet_derivatives(&x, 0.0, 0.0, 4e-3, &p);
        assert!(d.guard_breached);
        assert!((d.d.s - 10.0 / PROGRESS_DENOMINATOR_MIN).abs() < 1e-9);
    }

    /// Newton iteration on (vy, yaw_rate, u_zeta) for v̇x = v̇y = ṙ = 0 at a
    /// fixed speed and road-wheel angle, using a finite-difference Jacobian.
    fn steady_turn(p: &PlantParams, vx: f64, delta_f: f64) -> [f64; 3] {
        let residual = |v: [f64; 3]| {
            let x = FrenetState::from_array([vx, v[0], v[1], 0.0, 0.0, 0.0]);
            let d = frenet_derivatives(&x, delta_f, v[2], 0.0, p).d;
            nalgebra::Vector3::new(d.vx, d.vy, d.yaw_rate)
        };
        let mut v = [0.0, 0.0, 0.1];
        for _ in 0..50 {
            let f0 = residual(v);
            if f0.norm() < 1e-12 {
                break;
            }
            let mut j = nalgebra::Matrix3::zeros();
            for c in 0..3 {
                let h = 1e-7;
                let mut vp = v;
                vp[c] += h;
                let mut vm = v;
                vm[c] -= h;
                j.set_column(c, &((residual(vp) - residual(vm)) / (2.0 * h)));
            }
            let step = j.lu().solve(&f0).unwrap();
            for c in 0..3 {
                v[c] -= step[c];
            }
        }
        v
    }

    #[test]
    fn steady_circular_motion_is_an_equilibrium() {
        let p = PlantParams::default();
        let (vx, delta_f) = (20.0, 0.01);
        let [vy, r, u] = steady_turn(&p, vx, delta_f);

        // Linear-bicycle closed form, independent of the root finder.
        let l = p.lf + p.lr;
        let k_us = p.mass / l * (p.lr / p.cf - p.lf / p.cr);
        let r_lin = vx * delta_f / (l + k_us * vx * vx);
        assert!((r - r_lin).abs() < 0.02 * r_lin.abs(), "r={r} r_lin={r_lin}");

        // Choose the path so the vehicle circles it with constant offset.
        let epsi = -(vy / vx).atan();
        let speed = (vx * vx + vy * vy).sqrt();
        let kappa = r / speed;
        let x = FrenetState::from_array([vx, vy, r, 0.0, 0.0, epsi]);
        let d = frenet_derivatives(&x, delta_f, u, kappa, &p).d;
        for v in [d.vx, d.vy, d.yaw_rate, d.ey, d.epsi] {
            assert!(v.abs() < 1e-9, "{d:?}");
        }
        assert!((d.s - speed).abs() < 1e-9);
    }

    #[test]
    fn zero_dynamics_state_is_fixed() {
        let plant = BicyclePlant::new(frictionless());
        let x = VehicleState::zeros();
        let out = plant.step(&x, &CombinedInput::new(0.0, 0.0, 0.0), 0.025).unwrap();
        assert_eq!(out.state, x);
    }

    #[test]
    fn non_positive_dt_is_rejected() {
        let plant = BicyclePlant::default();
        let x = VehicleState::zeros();
        assert!(plant.step(&x, &CombinedInput::new(0.0, 0.0, 0.0), 0.0).is_err());
    }

    fn maneuver_end(plant: &BicyclePlant, dt: f64, t_end: f64) -> [f64; 6] {
        let steps = (t_end / dt).round() as usize;
        let mut x = FrenetState::from_array([22.0, 0.0, 0.0, 0.0, 0.2, 0.01]);
        for k in 0..steps {
            let t = k as f64 * dt;
            // smooth but not polynomial inputs, sampled per step (zero-order hold)
            let u = CombinedInput::new(0.3 * (0.7 * t).sin(), 0.4, 2e-3);
            x = plant.rk4(&x, &u, dt).0;
        }
        x.to_array()
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        // Hold inputs constant over the whole window so ZOH switching does not
        // pollute the order estimate.
        let plant = BicyclePlant::default();
        let run = |dt: f64| {
            let steps = (1.0 / dt).round() as usize;
            let mut x = FrenetState::from_array([22.0, 0.5, 0.1, 0.0, 0.2, 0.05]);
            let u = CombinedInput::new(0.35, 0.6, 3e-3);
            for _ in 0..steps {
                x = plant.rk4(&x, &u, dt).0;
            }
            x.to_array()
        };
        let reference = run(0.2 / 256.0);
        let err = |dt: f64| {
            let a = run(dt);
            a.iter().zip(&reference).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let (e1, e2) = (err(0.2), err(0.1));
        let order = (e1 / e2).log2();
        assert!((3.5..=4.5).contains(&order), "observed order {order} ({e1:e} / {e2:e})");
        // also exercise the time-varying maneuver for finiteness
        assert!(maneuver_end(&plant, 0.025, 2.0).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn straight_full_throttle() {
        let plant = BicyclePlant::default();
        let inputs = vec![CombinedInput::new(0.0, 1.0, 0.0); 80];
        let mut x0 = VehicleState::zeros();
        x0.vx = 20.0;
        let sim = plant.simulate(x0, &inputs, 0.025).unwrap();
        let states = &sim.trajectory.states;
        for w in states.windows(2) {
            assert!(w[1].vx > w[0].vx);
        }
        assert!(states.iter().all(|s| s.ey == 0.0 && s.epsi == 0.0));
        assert!(sim.guard_breaches.is_empty());
    }

    #[test]
    fn coasting_never_speeds_up() {
        let plant = BicyclePlant::default();
        let inputs = vec![CombinedInput::new(0.0, 0.0, 0.0); 200];
        let mut x0 = VehicleState::zeros();
        x0.vx = 30.0;
        let sim = plant.simulate(x0, &inputs, 0.025).unwrap();
        for w in sim.trajectory.states.windows(2) {
            assert!(w[1].vx <= w[0].vx);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn mirrored_inputs_give_mirrored_trajectories(
            vx in 5.0f64..30.0,
            vy in -1.0f64..1.0,
            r in -0.3f64..0.3,
            ey in -3.0f64..3.0,
            epsi in -0.3f64..0.3,
            kappa in -4e-3f64..4e-3,
            steer in proptest::collection::vec(-0.6f64..0.6, 40),
            pedal in proptest::collection::vec(-1.0f64..1.0, 40),
        ) {
            let plant = BicyclePlant::default();
            let x0 = VehicleState { vx, vy, yaw_rate: r, ds: 0.0, ey, epsi };
            let xm = VehicleState { vx, vy: -vy, yaw_rate: -r, ds: 0.0, ey: -ey, epsi: -epsi };
            let u: Vec<_> = steer.iter().zip(&pedal).map(|(d, p)| CombinedInput::new(*d, *p, kappa)).collect();
            let um: Vec<_> = steer.iter().zip(&pedal).map(|(d, p)| CombinedInput::new(-*d, *p, -kappa)).collect();
            let a = plant.simulate(x0, &u, 0.025).unwrap().trajectory;
            let b = plant.simulate(xm, &um, 0.025).unwrap().trajectory;
            for (s, m) in a.states.iter().zip(&b.states) {
                let (s, m) = (s.to_array(), m.to_array());
                let sign = [1.0, -1.0, -1.0, 1.0, -1.0, -1.0];
                for i in 0..6 {
                    proptest::prop_assert!((s[i] - sign[i] * m[i]).abs() <= 1e-9 * s[i].abs().max(1.0));
                }
            }
        }
    }
}
