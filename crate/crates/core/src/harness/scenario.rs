//! Closed-loop scenarios: curvature, speed and lateral-offset references.

use serde::{Deserialize, Serialize};

use crate::domain::VehicleState;
use crate::error::{Error, Result};

/// Move from the current level to `to` over `[start, end]` along a quintic
/// smoothstep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub start: f64,
    pub end: f64,
    pub to: f64,
}

/// A piecewise-constant level joined by quintic transitions, so the
/// profile is C² everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub initial: f64,
    #[serde(default)]
    pub transitions: Vec<Transition>,
}

/// `6s⁵ − 15s⁴ + 10s³`, zero first and second derivatives at both ends.
pub fn smoothstep5(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (s * (6.0 * s - 15.0) + 10.0)
}

/// `30 s² (1 − s)²`, zero outside `[0, 1]`.
pub fn smoothstep5_slope(s: f64) -> f64 {
    if !(0.0..=1.0).contains(&s) {
        return 0.0;
    }
    30.0 * s * s * (1.0 - s) * (1.0 - s)
}

impl Profile {
    pub fn constant(value: f64) -> Self {
        Self { initial: value, transitions: Vec::new() }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        let mut last_end = f64::NEG_INFINITY;
        for t in &self.transitions {
            if !(t.start < t.end) || !t.to.is_finite() {
                return Err(Error::Config(format!("{what}: transition must have start < end")));
            }
            if t.start < last_end {
                return Err(Error::Config(format!("{what}: transitions overlap or are unordered")));
            }
            last_end = t.end;
        }
        if !self.initial.is_finite() {
            return Err(Error::Config(format!("{what}: initial value is not finite")));
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> f64 {
        let mut level = self.initial;
        for tr in &self.transitions {
            if t <= tr.start {
                break;
            }
            if t >= tr.end {
                level = tr.to;
                continue;
            }
            level += (tr.to - level) * smoothstep5((t - tr.start) / (tr.end - tr.start));
            break;
        }
        level
    }

    /// Time derivative of [`Profile::eval`].
    pub fn rate(&self, t: f64) -> f64 {
        let mut level = self.initial;
        for tr in &self.transitions {
            if t <= tr.start {
                break;
            }
            if t >= tr.end {
                level = tr.to;
                continue;
            }
            let width = tr.end - tr.start;
            return (tr.to - level) * smoothstep5_slope((t - tr.start) / width) / width;
        }
        0.0
    }

    fn extremes(&self) -> (f64, f64) {
        self.transitions
            .iter()
            .fold((self.initial, self.initial), |(lo, hi), t| (lo.min(t.to), hi.max(t.to)))
    }
}

/// Missing fields in a scenario file take their double-lane-change value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    /// Seconds.
    pub duration: f64,
    /// Sample time, s.
    pub dt: f64,
    /// Road curvature, 1/m.
    pub kappa: Profile,
    /// Speed reference, m/s.
    pub vx_ref: Profile,
    /// Lateral offset reference, m. The heading-error reference follows
    /// its slope.
    pub ey_ref: Profile,
}

impl Default for Scenario {
    fn default() -> Self {
        dlc_reference()
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || !(self.dt > 0.0) {
            return Err(Error::Config("scenario duration and dt must be positive".into()));
        }
        self.kappa.validate("kappa")?;
        self.vx_ref.validate("vx_ref")?;
        self.ey_ref.validate("ey_ref")?;
        let (k_lo, k_hi) = self.kappa.extremes();
        let (e_lo, e_hi) = self.ey_ref.extremes();
        let worst = [k_lo * e_lo, k_lo * e_hi, k_hi * e_lo, k_hi * e_hi]
            .into_iter()
            .fold(0.0f64, |m, v| m.max(v));
        if worst >= 0.5 {
            return Err(Error::Config("reference offset too close to the curvature centre".into()));
        }
        if self.vx_ref.extremes().0 <= 0.0 {
            return Err(Error::Config("speed reference must stay positive".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn kappa_at(&self, k: usize) -> f64 {
        self.kappa.eval(self.time(k))
    }

    /// Reference state at step `k`. Progress per step follows the path
    /// geometry at the reference offset, `ds = vx·cos(eψ)·dt / (1 − κ·ey)`,
    /// and the heading error is the one that moves the car along the
    /// offset profile without side slip, `sin(eψ) = ėy / vx`.
    pub fn reference(&self, k: usize) -> VehicleState {
        let t = self.time(k);
        let (vx, ey, kappa) = (self.vx_ref.eval(t), self.ey_ref.eval(t), self.kappa.eval(t));
        let epsi = if vx > 0.0 { (self.ey_ref.rate(t) / vx).clamp(-1.0, 1.0).asin() } else { 0.0 };
        let scale = 1.0 / (1.0 - kappa * ey);
        VehicleState {
            vx,
            vy: 0.0,
            yaw_rate: kappa * vx * epsi.cos() * scale,
            ds: vx * epsi.cos() * self.dt * scale,
            ey,
            epsi,
        }
    }

    /// References for steps `k..=k + n` and curvature for `k..k + n`;
    /// profiles hold their final level past the end of the scenario.
    pub fn horizon(&self, k: usize, n: usize) -> (Vec<VehicleState>, Vec<f64>) {
        ((k..=k + n).map(|j| self.reference(j)).collect(), (k..k + n).map(|j| self.kappa_at(j)).collect())
    }

    /// Starting state: on the reference with no lateral motion.
    pub fn initial_state(&self) -> VehicleState {
        self.reference(0)
    }
}

/// Double lane change on a constant-curvature road: 3.5 m out over
/// 2–3.5 s, back over 5–6.5 s, 9.5 s total at 20 m/s.
pub fn dlc_reference() -> Scenario {
    Scenario {
        name: "dlc".into(),
        duration: 9.5,
        dt: 0.025,
        kappa: Profile::constant(1e-3),
        vx_ref: Profile::constant(20.0),
        ey_ref: Profile {
            initial: 0.0,
            transitions: vec![
                Transition { start: 2.0, end: 3.5, to: 3.5 },
                Transition { start: 5.0, end: 6.5, to: 0.0 },
            ],
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dlc_offsets_at_key_times() {
        let s = dlc_reference();
        assert_eq!(s.ey_ref.eval(0.0), 0.0);
        assert_eq!(s.ey_ref.eval(4.0), 3.5);
        assert_eq!(s.ey_ref.eval(9.0), 0.0);
        assert!((s.ey_ref.eval(2.75) - 1.75).abs() < 1e-12);
        assert_eq!(s.steps(), 380);
        s.validate().unwrap();
    }

    #[test]
    fn dlc_curvature_is_constant() {
        let s = dlc_reference();
        assert!((0..=s.steps() + 25).all(|k| s.kappa_at(k) == 1e-3));
    }

    #[test]
    fn offset_reference_is_c1() {
        // One-sided difference quotients agree on both sides of every
        // sample, knots included; a kink would leave an O(1) gap.
        let s = dlc_reference();
        let h = 1e-7;
        let gap = |t: f64| {
            let right = (s.ey_ref.eval(t + h) - s.ey_ref.eval(t)) / h;
            let left = (s.ey_ref.eval(t) - s.ey_ref.eval(t - h)) / h;
            (right - left).abs()
        };
        let mut worst: f64 = 0.0;
        for i in 0..=9500 {
            worst = worst.max(gap(i as f64 * 1e-3));
        }
        for knot in [2.0, 3.5, 5.0, 6.5] {
            worst = worst.max(gap(knot));
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn progress_reference_accounts_for_curvature() {
        let s = dlc_reference();
        let r = s.reference(160);
        assert_eq!(r.ey, 3.5);
        assert!((r.ds - 20.0 * 0.025 / (1.0 - 1e-3 * 3.5)).abs() < 1e-15);
        assert_eq!(s.reference(0).ds, 0.5);
    }

    #[test]
    fn rate_matches_central_differences() {
        let s = dlc_reference();
        let h = 1e-6;
        for i in 0..=950 {
            let t = i as f64 * 0.01 + 0.003;
            let fd = (s.ey_ref.eval(t + h) - s.ey_ref.eval(t - h)) / (2.0 * h);
            assert!((s.ey_ref.rate(t) - fd).abs() < 1e-6, "t = {t}");
        }
        assert_eq!(s.vx_ref.rate(3.0), 0.0);
    }

    #[test]
    fn heading_reference_follows_offset_slope() {
        // Peak slope of the quintic is 30/16 at mid-transition:
        // 3.5 m · 1.875 / 1.5 s = 4.375 m/s, sideways at 20 m/s.
        let s = dlc_reference();
        let mid_out = s.reference(110);
        assert!((mid_out.epsi - (4.375f64 / 20.0).asin()).abs() < 1e-12);
        let mid_back = s.reference(230);
        assert!((mid_back.epsi + (4.375f64 / 20.0).asin()).abs() < 1e-12);
        assert_eq!(s.reference(0).epsi, 0.0);
        assert_eq!(s.reference(160).epsi, 0.0);
        assert!((mid_out.ds - 0.5 * mid_out.epsi.cos() / (1.0 - 1e-3 * 1.75)).abs() < 1e-15);
    }

    #[test]
    fn horizon_extends_past_the_end() {
        let s = dlc_reference();
        let (refs, kappa) = s.horizon(375, 20);
        assert_eq!(refs.len(), 21);
        assert_eq!(kappa.len(), 20);
        assert_eq!(refs[20].ey, 0.0);
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut s = dlc_reference();
        s.ey_ref.transitions[1].start = 3.0;
        assert!(s.validate().is_err());
        let mut s = dlc_reference();
        s.kappa = Profile::constant(0.2);
        assert!(s.validate().is_err());
        let mut s = dlc_reference();
        s.dt = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn scenario_json_round_trip() {
        let s = dlc_reference();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<Scenario>(&text).unwrap(), s);
    }
}
