//! Continuous-time benchmark: a slow van der Pol oscillator `x` driving a fast Duffing
//! oscillator `y`, with an actuator `w` under PI control tracking the set point `u`.
//!
//! The fast subsystem runs `epsilon_rate` times faster than the slow one; the slow
//! grid step `dt_slow` is split into `m` fast steps of length `tau`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magnitude beyond which an integration is declared divergent.
pub const DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Slow `x` and fast `y` only; no actuator or control.
    TssOnly,
    /// Fast `y` with PI actuator `w` and constant set point `u`; no slow states.
    HierOnly,
    /// All of `x`, `y`, `w`, `u`.
    Combined,
}

impl Variant {
    pub fn has_slow(self) -> bool {
        !matches!(self, Variant::HierOnly)
    }

    pub fn has_actuator(self) -> bool {
        !matches!(self, Variant::TssOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::TssOnly => "tss",
            Variant::HierOnly => "hier",
            Variant::Combined => "comb",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tss" | "tss_only" => Some(Variant::TssOnly),
            "hier" | "hier_only" => Some(Variant::HierOnly),
            "comb" | "combined" => Some(Variant::Combined),
            _ => None,
        }
    }

    /// Number of free state coordinates (x, y, w) sampled for initial conditions.
    pub fn state_dim(self) -> usize {
        match self {
            Variant::TssOnly => 4,
            Variant::HierOnly => 3,
            Variant::Combined => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Couplings {
    /// `0.5·x₂²` forcing of the Duffing oscillator.
    pub slow_to_fast: bool,
    /// `y₁` forcing of the van der Pol oscillator.
    pub fast_to_slow: bool,
    /// `−2w` actuator force on the Duffing oscillator.
    pub actuator_to_fast: bool,
}

impl Default for Couplings {
    fn default() -> Self {
        Couplings {
            slow_to_fast: true,
            fast_to_slow: true,
            actuator_to_fast: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub variant: Variant,
    pub epsilon_rate: f64,
    /// PI proportional gain.
    pub k1: f64,
    /// PI integral gain.
    pub k2: f64,
    pub couplings: Couplings,
}

impl SystemConfig {
    pub fn new(variant: Variant) -> Self {
        let epsilon_rate = 100.0;
        SystemConfig {
            variant,
            epsilon_rate,
            k1: 1.0 / epsilon_rate,
            k2: 1.0,
            couplings: Couplings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_rate >= 1.0) || !self.epsilon_rate.is_finite() {
            return Err(Error::config(format!(
                "epsilon_rate must be >= 1, got {}",
                self.epsilon_rate
            )));
        }
        if !self.k1.is_finite() || !self.k2.is_finite() {
            return Err(Error::config("PI gains must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt_slow: f64,
    /// Fast steps per slow step.
    pub m: usize,
    /// RK4 substeps per fast step.
    pub substeps: usize,
}

impl Default for TimeGrid {
    fn default() -> Self {
        TimeGrid {
            dt_slow: 0.1,
            m: 100,
            substeps: 5,
        }
    }
}

impl TimeGrid {
    pub fn tau(&self) -> f64 {
        self.dt_slow / self.m as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.substeps == 0 || !(self.dt_slow > 0.0) {
            return Err(Error::config("time grid needs dt_slow > 0, m >= 1, substeps >= 1"));
        }
        Ok(())
    }
}

/// Full benchmark state. Components that a variant does not have are held at zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScaleState {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub w: f64,
    pub u: f64,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateDerivative {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub w: f64,
}

impl ScaleState {
    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.y.iter()).all(|v| v.is_finite())
            && self.w.is_finite()
            && self.u.is_finite()
            && self.t.is_finite()
    }

    pub fn validate(&self, variant: Variant) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::NonFinite("benchmark state"));
        }
        if !variant.has_slow() && self.x != [0.0; 2] {
            return Err(Error::config("hierarchical-only states carry no slow component"));
        }
        if !variant.has_actuator() && (self.w != 0.0 || self.u != 0.0) {
            return Err(Error::config("TSS-only states carry no actuator or control"));
        }
        Ok(())
    }

    fn packed(&self) -> [f64; 5] {
        [self.x[0], self.x[1], self.y[0], self.y[1], self.w]
    }

    fn unpack(&mut self, s: &[f64; 5]) {
        self.x = [s[0], s[1]];
        self.y = [s[2], s[3]];
        self.w = s[4];
    }

    fn max_abs(&self) -> f64 {
        self.packed().iter().fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

fn rhs_packed(s: &[f64; 5], u: f64, cfg: &SystemConfig) -> [f64; 5] {
    let [x1, x2, y1, y2, w] = *s;
    let r = cfg.epsilon_rate;
    let c = &cfg.couplings;
    let has_slow = cfg.variant.has_slow();
    let has_w = cfg.variant.has_actuator();

    let (dx1, dx2) = if has_slow {
        let force = if c.fast_to_slow { y1 } else { 0.0 };
        (x2, -0.5 * (1.0 - x1 * x1) * x2 - x1 + force)
    } else {
        (0.0, 0.0)
    };
    let kinetic = if has_slow && c.slow_to_fast { 0.5 * x2 * x2 } else { 0.0 };
    let actuator = if has_w && c.actuator_to_fast { 2.0 * w } else { 0.0 };
    let dy1 = r * y2;
    let dy2 = r * (-2.0 * y2 - y1 - y1 * y1 * y1 + kinetic - actuator);
    let dw = if has_w {
        r * cfg.k1 * y2 + cfg.k2 * (y1 - u)
    } else {
        0.0
    };
    [dx1, dx2, dy1, dy2, dw]
}

/// Time derivative of the benchmark state. `u` is piecewise constant, so `u̇ = 0`.
pub fn rhs(state: &ScaleState, config: &SystemConfig) -> Result<StateDerivative> {
    if !state.is_finite() {
        return Err(Error::NonFinite("rhs state"));
    }
    let d = rhs_packed(&state.packed(), state.u, config);
    Ok(StateDerivative {
        x: [d[0], d[1]],
        y: [d[2], d[3]],
        w: d[4],
    })
}

fn rk4_step(s: &mut [f64; 5], u: f64, h: f64, cfg: &SystemConfig, freeze_w: bool) {
    let rhs = |s: &[f64; 5]| {
        let mut d = rhs_packed(s, u, cfg);
        if freeze_w {
            d[4] = 0.0;
        }
        d
    };
    let add = |a: &[f64; 5], b: &[f64; 5], k: f64| -> [f64; 5] {
        let mut o = *a;
        for i in 0..5 {
            o[i] += k * b[i];
        }
        o
    };
    let k1 = rhs(s);
    let k2 = rhs(&add(s, &k1, 0.5 * h));
    let k3 = rhs(&add(s, &k2, 0.5 * h));
    let k4 = rhs(&add(s, &k3, h));
    for i in 0..5 {
        s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Advances `state` by one fast step `tau` with constant `u`, using `substeps` RK4 steps.
pub(crate) fn advance_fast(state: &mut ScaleState, grid: &TimeGrid, config: &SystemConfig) {
    step_fast_inner(state, grid, config, false);
}

/// Like [`advance_fast`] but with the actuator held at its current value, as
/// when an external feedback law overrides the PI loop for one fast step.
pub(crate) fn advance_fast_held(state: &mut ScaleState, grid: &TimeGrid, config: &SystemConfig) {
    step_fast_inner(state, grid, config, true);
}

fn step_fast_inner(state: &mut ScaleState, grid: &TimeGrid, config: &SystemConfig, freeze_w: bool) {
    let h = grid.tau() / grid.substeps as f64;
    let mut s = state.packed();
    for _ in 0..grid.substeps {
        rk4_step(&mut s, state.u, h, config, freeze_w);
    }
    state.unpack(&s);
    state.t += grid.tau();
}

/// Applies a set-point change at a slow-step boundary. The PI law carries the
/// proportional jump `K₁·Δu` into `w`.
pub(crate) fn apply_setpoint(state: &mut ScaleState, u: f64, config: &SystemConfig) {
    if config.variant.has_actuator() {
        state.w += config.k1 * (u - state.u);
        state.u = u;
    }
}

pub(crate) fn check_bounded(state: &ScaleState) -> Result<()> {
    if !state.is_finite() || state.max_abs() > DIVERGENCE_BOUND {
        return Err(Error::Divergence {
            time: state.t,
            context: "benchmark integration",
        });
    }
    Ok(())
}

/// Samples every fast step `tau`; `samples[k·m]` is the state at the k-th slow instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub m: usize,
    pub samples: Vec<ScaleState>,
}

impl Trajectory {
    pub fn fast_samples(&self) -> &[ScaleState] {
        &self.samples
    }

    pub fn slow_samples(&self) -> impl Iterator<Item = &ScaleState> + '_ {
        self.samples.iter().step_by(self.m)
    }

    pub fn n_slow(&self) -> usize {
        (self.samples.len() - 1) / self.m
    }

    /// `(t, u)` at the start of each slow interval.
    pub fn controls(&self) -> Vec<(f64, f64)> {
        (0..self.n_slow())
            .map(|k| {
                let s = &self.samples[k * self.m + 1];
                (self.samples[k * self.m].t, s.u)
            })
            .collect()
    }

    pub fn last(&self) -> &ScaleState {
        self.samples.last().expect("trajectory always holds the initial sample")
    }
}

/// Fixed-step RK4 integration over `n_slow` slow steps with piecewise-constant control.
pub fn integrate(
    initial: &ScaleState,
    u_signal: &[f64],
    grid: &TimeGrid,
    n_slow: usize,
    config: &SystemConfig,
) -> Result<Trajectory> {
    config.validate()?;
    grid.validate()?;
    initial.validate(config.variant)?;
    if u_signal.len() < n_slow {
        return Err(Error::DimensionMismatch {
            context: "control signal length",
            expected: n_slow,
            found: u_signal.len(),
        });
    }
    let mut state = *initial;
    if config.variant.has_actuator() {
        state.u = u_signal.first().copied().unwrap_or(0.0);
    }
    let mut samples = Vec::with_capacity(n_slow * grid.m + 1);
    samples.push(state);
    for (k, &u) in u_signal.iter().take(n_slow).enumerate() {
        if k > 0 {
            apply_setpoint(&mut state, u, config);
        }
        for _ in 0..grid.m {
            advance_fast(&mut state, grid, config);
            check_bounded(&state)?;
            samples.push(state);
        }
    }
    Ok(Trajectory { m: grid.m, samples })
}

/// Benchmark running cost `x₁² + x₂² + y₁² + y₂² + w²`, restricted to the variant's components.
pub fn running_cost(state: &ScaleState, variant: Variant) -> f64 {
    let mut c = state.y[0] * state.y[0] + state.y[1] * state.y[1];
    if variant.has_slow() {
        c += state.x[0] * state.x[0] + state.x[1] * state.x[1];
    }
    if variant.has_actuator() {
        c += state.w * state.w;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn comb() -> SystemConfig {
        SystemConfig::new(Variant::Combined)
    }

    #[test]
    fn origin_is_equilibrium() {
        let d = rhs(&ScaleState::default(), &comb()).unwrap();
        assert_eq!(d, StateDerivative::default());
    }

    #[test]
    fn kinetic_coupling_enters_fast_equation() {
        let s = ScaleState {
            x: [0.0, 1.0],
            ..Default::default()
        };
        let d = rhs(&s, &comb()).unwrap();
        assert!((d.y[1] - 100.0 * 0.5).abs() < 1e-12);
        assert_eq!(d.x, [1.0, -0.5]);
    }

    #[test]
    fn generic_state_matches_hand_evaluation() {
        let s = ScaleState {
            x: [0.3, -0.2],
            y: [0.1, 0.4],
            w: 0.05,
            u: 0.2,
            t: 0.0,
        };
        let d = rhs(&s, &comb()).unwrap();
        // ẋ₂ = -0.5(1 - 0.09)(-0.2) - 0.3 + 0.1
        // ẏ₂ = 100(-0.8 - 0.1 - 0.001 + 0.02 - 0.1)
        // ẇ  = 100·0.01·0.4 + (0.1 - 0.2)
        let expected = [-0.2, -0.109, 40.0, -98.1, 0.3];
        let got = [d.x[0], d.x[1], d.y[0], d.y[1], d.w];
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn non_finite_state_rejected() {
        let s = ScaleState {
            y: [f64::NAN, 0.0],
            ..Default::default()
        };
        assert!(matches!(rhs(&s, &comb()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_state_stays_zero() {
        let traj = integrate(&ScaleState::default(), &[0.0; 3], &TimeGrid::default(), 3, &comb()).unwrap();
        assert!(traj.samples.iter().all(|s| s.x == [0.0; 2] && s.y == [0.0; 2] && s.w == 0.0));
    }

    #[test]
    fn one_slow_step_records_every_fast_step() {
        let s0 = ScaleState {
            x: [0.5, -0.5],
            y: [0.2, 0.1],
            w: -0.3,
            ..Default::default()
        };
        let grid = TimeGrid::default();
        let traj = integrate(&s0, &[0.4], &grid, 1, &comb()).unwrap();
        assert_eq!(traj.samples.len() - 1, 100);
        assert_eq!(traj.slow_samples().count(), 2);
        for (n, s) in traj.samples.iter().enumerate() {
            assert!((s.t - n as f64 * grid.tau()).abs() < 1e-12);
        }
    }

    #[test]
    fn setpoint_jump_moves_actuator_by_proportional_gain() {
        let cfg = comb();
        let traj = integrate(&ScaleState::default(), &[0.0, 0.5], &TimeGrid::default(), 2, &cfg).unwrap();
        // After the jump the actuator starts from w = K₁·0.5.
        let before = traj.samples[100];
        assert_eq!(before.w, 0.0);
        let mut probe = before;
        apply_setpoint(&mut probe, 0.5, &cfg);
        assert!((probe.w - 0.005).abs() < 1e-15);
    }

    #[test]
    fn divergence_reports_time() {
        let cfg = SystemConfig {
            epsilon_rate: 1.0,
            ..SystemConfig::new(Variant::TssOnly)
        };
        // Far outside the van der Pol's unstable limit cycle the state escapes.
        let s0 = ScaleState {
            x: [6.0, 6.0],
            ..Default::default()
        };
        let err = integrate(&s0, &vec![0.0; 200], &TimeGrid::default(), 200, &cfg).unwrap_err();
        match err {
            Error::Divergence { time, .. } => assert!(time > 0.0 && time < 20.0),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn variant_states_are_validated() {
        let s = ScaleState {
            w: 0.1,
            ..Default::default()
        };
        assert!(s.validate(Variant::TssOnly).is_err());
        assert!(s.validate(Variant::Combined).is_ok());
    }
}
