//! Supervisory optimal control on the lifted linear dynamics, and evaluation
//! of the resulting control sequences on the true benchmark.
//!
//! The lifted dynamics are affine in the control sequence, so the whole
//! trajectory is propagated as an affine function of the decision vector and
//! the cost becomes a dense quadratic in it. Box constraints on `u` are kept
//! exact; bounds on the physical slow states become escalating quadratic
//! penalties.

use nalgebra::Cholesky;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::{
    advance_fast, advance_fast_held, apply_setpoint, check_bounded, running_cost, ScaleState, SystemConfig, TimeGrid,
    Variant,
};
use crate::cost::{CostQuadratic, Group};
use crate::error::{Error, Result};
use crate::koopman::KoopmanModel;
use crate::linalg::{sym, Mat, Vector};
use crate::lqr::LqrPolicy;
use crate::model::{KoopmanBlocks, LiftedDims, LiftedState, LimitModel, Provenance};

pub const MAX_ITERATIONS: usize = 10_000;
pub const KKT_TOLERANCE: f64 = 1e-6;
const PENALTY_START: f64 = 10.0;
const PENALTY_MAX: f64 = 1e6;
const PENALTY_GROWTH: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    /// Multirate model with explicit fast trajectories.
    Full,
    /// Collapsed slow-scale model.
    Collapsed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actuation {
    /// Learned actuator dynamics (the PI loop).
    Pi,
    /// LQR feedback substituted for the actuator dynamics.
    Lqr,
}

impl Actuation {
    pub fn name(self) -> &'static str {
        match self {
            Actuation::Pi => "pi",
            Actuation::Lqr => "lqr",
        }
    }
}

/// Dynamics the optimizer sees.
#[derive(Debug, Clone, Copy)]
pub enum Plant<'a> {
    Full {
        blocks: &'a KoopmanBlocks,
        m: usize,
        /// Replaces the actuator update when present.
        policy: Option<&'a LqrPolicy>,
    },
    Collapsed(&'a LimitModel),
}

impl Plant<'_> {
    pub fn dynamics(&self) -> Dynamics {
        match self {
            Plant::Full { .. } => Dynamics::Full,
            Plant::Collapsed(_) => Dynamics::Collapsed,
        }
    }

    pub fn actuation(&self) -> Actuation {
        match self {
            Plant::Full { policy: Some(_), .. } => Actuation::Lqr,
            Plant::Full { policy: None, .. } => Actuation::Pi,
            Plant::Collapsed(l) => match l.provenance {
                Provenance::FromPi => Actuation::Pi,
                Provenance::FromLqr => Actuation::Lqr,
            },
        }
    }

    fn dims(&self) -> LiftedDims {
        match self {
            Plant::Full { blocks, .. } => blocks.dims,
            Plant::Collapsed(l) => LiftedDims {
                x: l.b_xx.nrows(),
                y: l.b_yx.nrows(),
                w: l.b_wx.nrows(),
                u: l.b_xu.ncols().max(l.b_yu.ncols()),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct OcpSpec {
    /// Slow steps.
    pub horizon: usize,
    /// Bound on each physical slow-state entry, as a soft penalty.
    pub x_bound: f64,
    /// Bound on each control entry, exact.
    pub u_bound: f64,
    pub dynamics: Dynamics,
    pub actuation: Actuation,
    /// Running cost charged at every step of the plant's resolution.
    pub cost: CostQuadratic,
    pub initial: LiftedState,
    /// Optimize a single control held over the whole horizon.
    pub constant_u: bool,
}

impl OcpSpec {
    pub fn validate(&self, plant: &Plant<'_>) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("OCP horizon must be at least one step"));
        }
        if !(self.x_bound.is_finite() && self.x_bound > 0.0 && self.u_bound.is_finite() && self.u_bound > 0.0) {
            return Err(Error::config("OCP bounds must be finite and positive"));
        }
        if plant.dynamics() != self.dynamics || plant.actuation() != self.actuation {
            return Err(Error::config("OCP dynamics source does not match the supplied plant"));
        }
        let d = plant.dims();
        if self.cost.dims != d {
            return Err(Error::config("OCP cost dimensions do not match the plant"));
        }
        self.cost.validate()?;
        if self.initial.x.len() != d.x
            || (self.dynamics == Dynamics::Full && (self.initial.y.len() != d.y || self.initial.w.len() != d.w))
        {
            return Err(Error::config("OCP initial state dimensions do not match the plant"));
        }
        if d.u == 0 {
            return Err(Error::config("OCP needs a control input"));
        }
        Ok(())
    }
}

/// Benchmark running cost `x₁² + x₂² + y₁² + y₂² + w²` (restricted to the
/// variant) as a Riemann weight `dt` on the state-inclusive entries.
pub fn system_cost(dims: LiftedDims, variant: Variant, dt: f64) -> CostQuadratic {
    let mut cost = CostQuadratic::zeros(dims);
    if variant.has_slow() {
        cost.add_diagonal(Group::X, 0, dt);
        cost.add_diagonal(Group::X, 1, dt);
    }
    cost.add_diagonal(Group::Y, 0, dt);
    cost.add_diagonal(Group::Y, 1, dt);
    if variant.has_actuator() {
        cost.add_diagonal(Group::W, 0, dt);
    }
    cost
}

/// Lifted state at one slow instant as affine functions of the decision vector:
/// each matrix has one column per decision entry plus a trailing constant column.
#[derive(Debug, Clone)]
pub struct AffineState {
    pub x: Mat,
    pub y: Mat,
    pub w: Mat,
}

impl AffineState {
    fn eval(m: &Mat, u: &Vector) -> Vector {
        let n = u.len();
        m.columns(0, n) * u + m.column(n)
    }

    pub fn at(&self, u: &Vector) -> LiftedState {
        LiftedState {
            x: Self::eval(&self.x, u),
            y: Self::eval(&self.y, u),
            w: Self::eval(&self.w, u),
        }
    }
}

/// Objective `½ uᵀHu + gᵀu + c` plus penalties on the affine slow-state rows.
#[derive(Debug, Clone)]
pub struct Transcription {
    pub n: usize,
    pub nu: usize,
    pub hessian: Mat,
    pub gradient: Vector,
    pub constant: f64,
    bound_rows: Mat,
    bound_offsets: Vector,
    x_bound: f64,
    /// Lifted states at slow instants `0..=T`.
    pub slow_states: Vec<AffineState>,
}

struct CostSupport {
    idx: Vec<usize>,
    q: Mat,
    c: Vector,
    c0: f64,
}

impl CostSupport {
    fn new(cost: &CostQuadratic) -> Self {
        let q = sym(&cost.q);
        let idx: Vec<usize> = (0..q.nrows())
            .filter(|&i| cost.c[i] != 0.0 || q.row(i).iter().any(|v| *v != 0.0))
            .collect();
        let k = idx.len();
        CostSupport {
            q: Mat::from_fn(k, k, |a, b| q[(idx[a], idx[b])]),
            c: Vector::from_fn(k, |a, _| cost.c[idx[a]]),
            c0: cost.c0,
            idx,
        }
    }
}

struct Accumulator<'a> {
    support: &'a CostSupport,
    dims: LiftedDims,
    n: usize,
    hessian: Mat,
    gradient: Vector,
    constant: f64,
}

impl Accumulator<'_> {
    /// Adds the cost at `z = [u; w; y; x]`, each given in affine-column form.
    fn add(&mut self, u: &Mat, w: &Mat, y: &Mat, x: &Mat) {
        let d = self.dims;
        let k = self.support.idx.len();
        if k == 0 {
            self.constant += self.support.c0;
            return;
        }
        let mut z = Mat::zeros(k, self.n + 1);
        for (r, &i) in self.support.idx.iter().enumerate() {
            let src = if i < d.u {
                u.row(i)
            } else if i < d.u + d.w {
                w.row(i - d.u)
            } else if i < d.u + d.w + d.y {
                y.row(i - d.u - d.w)
            } else {
                x.row(i - d.u - d.w - d.y)
            };
            z.row_mut(r).copy_from(&src);
        }
        let a = z.columns(0, self.n);
        let b = z.column(self.n);
        let qa = &self.support.q * a;
        self.hessian += a.transpose() * &qa * 2.0;
        let qb = &self.support.q * b;
        self.gradient += a.transpose() * (qb.clone() * 2.0 + &self.support.c);
        self.constant += b.dot(&qb) + self.support.c.dot(&b) + self.support.c0;
    }
}

fn control_columns(d: LiftedDims, n: usize, k: usize, constant_u: bool) -> Mat {
    let mut u = Mat::zeros(d.u, n + 1);
    for j in 0..d.u {
        let col = if constant_u { j } else { k * d.u + j };
        u[(j, col)] = 1.0;
    }
    u
}

fn constant_column(v: &Vector, n: usize) -> Mat {
    let mut m = Mat::zeros(v.len(), n + 1);
    m.column_mut(n).copy_from(v);
    m
}

fn policy_actuation(policy: &LqrPolicy, y: &Mat, x: &Mat, u: &Mat, n: usize) -> Mat {
    let da = &policy.d_affine;
    let mut w = -(&policy.f * y + &da.x * x + &da.u * u);
    let mut c = w.column_mut(n);
    c -= &da.c;
    w
}

/// Propagates the plant as an affine function of the control sequence and
/// assembles the quadratic objective.
pub fn transcribe(spec: &OcpSpec, plant: &Plant<'_>) -> Result<Transcription> {
    spec.validate(plant)?;
    let d = plant.dims();
    let t = spec.horizon;
    let n = if spec.constant_u { d.u } else { t * d.u };
    let support = CostSupport::new(&spec.cost);
    let mut acc = Accumulator {
        support: &support,
        dims: d,
        n,
        hessian: Mat::zeros(n, n),
        gradient: Vector::zeros(n),
        constant: 0.0,
    };
    let mut x = constant_column(&spec.initial.x, n);
    let mut slow_states = Vec::with_capacity(t + 1);
    let n_phys = d.x.min(2);
    let mut bound_rows = Mat::zeros(t * n_phys, n);
    let mut bound_offsets = Vector::zeros(t * n_phys);
    match plant {
        Plant::Full { blocks, m, policy } => {
            let fm = blocks.fast_map();
            let sm = blocks.slow_map();
            let mut y = constant_column(&spec.initial.y, n);
            let mut w = constant_column(&spec.initial.w, n);
            for k in 0..t {
                let u = control_columns(d, n, k, spec.constant_u);
                if let Some(p) = policy {
                    w = policy_actuation(p, &y, &x, &u, n);
                }
                slow_states.push(AffineState { x: x.clone(), y: y.clone(), w: w.clone() });
                let drive_y = &fm.yx * &x;
                let drive_w = &fm.wx * &x + &fm.wu * &u;
                let mut y_sum = Mat::zeros(d.y, n + 1);
                let mut w_sum = Mat::zeros(d.w, n + 1);
                for _ in 0..*m {
                    acc.add(&u, &w, &y, &x);
                    let y_next = &fm.yy * &y + &fm.yw * &w + &drive_y;
                    w = match policy {
                        Some(p) => policy_actuation(p, &y_next, &x, &u, n),
                        None => &fm.ww * &w + &fm.wy * &y + &drive_w,
                    };
                    y = y_next;
                    y_sum += &y;
                    w_sum += &w;
                }
                let inv_m = 1.0 / *m as f64;
                x = &sm.xx * &x + &sm.xy * (y_sum * inv_m) + &sm.xw * (w_sum * inv_m);
                record_bounds(&x, k, n_phys, n, &mut bound_rows, &mut bound_offsets);
            }
            let u = control_columns(d, n, t.saturating_sub(1), spec.constant_u);
            if let Some(p) = policy {
                w = policy_actuation(p, &y, &x, &u, n);
            }
            slow_states.push(AffineState { x: x.clone(), y, w });
        }
        Plant::Collapsed(limit) => {
            let star = |x: &Mat, u: &Mat| {
                let mut y = &limit.b_yx * x + &limit.b_yu * u;
                let mut w = &limit.b_wx * x + &limit.b_wu * u;
                let mut cy = y.column_mut(n);
                cy += &limit.b_y;
                let mut cw = w.column_mut(n);
                cw += &limit.b_w;
                (y, w)
            };
            for k in 0..t {
                let u = control_columns(d, n, k, spec.constant_u);
                let (y, w) = star(&x, &u);
                acc.add(&u, &w, &y, &x);
                slow_states.push(AffineState { x: x.clone(), y, w });
                let mut next = &limit.b_xx * &x + &limit.b_xu * &u;
                let mut c = next.column_mut(n);
                c += &limit.b_x;
                x = next;
                record_bounds(&x, k, n_phys, n, &mut bound_rows, &mut bound_offsets);
            }
            let u = control_columns(d, n, t - 1, spec.constant_u);
            let (y, w) = star(&x, &u);
            slow_states.push(AffineState { x, y, w });
        }
    }
    let Accumulator { hessian, gradient, constant, .. } = acc;
    if !(hessian.iter().all(|v| v.is_finite()) && gradient.iter().all(|v| v.is_finite()) && constant.is_finite()) {
        return Err(Error::NonFinite("OCP transcription"));
    }
    Ok(Transcription {
        n,
        nu: d.u,
        hessian: sym(&hessian),
        gradient,
        constant,
        bound_rows,
        bound_offsets,
        x_bound: spec.x_bound,
        slow_states,
    })
}

fn record_bounds(x: &Mat, k: usize, n_phys: usize, n: usize, rows: &mut Mat, offsets: &mut Vector) {
    for i in 0..n_phys {
        rows.row_mut(k * n_phys + i).copy_from(&x.view((i, 0), (1, n)));
        offsets[k * n_phys + i] = x[(i, n)];
    }
}

impl Transcription {
    /// Quadratic cost and bound-violation penalty (without weight) at `u`.
    pub fn evaluate(&self, u: &Vector) -> (f64, f64) {
        let cost = 0.5 * u.dot(&(&self.hessian * u)) + self.gradient.dot(u) + self.constant;
        let s = &self.bound_rows * u + &self.bound_offsets;
        let penalty = s.iter().map(|v| (v.abs() - self.x_bound).max(0.0).powi(2)).sum();
        (cost, penalty)
    }

    pub fn objective(&self, u: &Vector, mu: f64) -> f64 {
        let (c, p) = self.evaluate(u);
        c + mu * p
    }

    pub fn max_violation(&self, u: &Vector) -> f64 {
        let s = &self.bound_rows * u + &self.bound_offsets;
        s.iter().map(|v| (v.abs() - self.x_bound).max(0.0)).fold(0.0, f64::max)
    }

    /// Gradient and generalized Hessian of the penalized objective.
    fn derivatives(&self, u: &Vector, mu: f64) -> (Vector, Mat) {
        let mut g = &self.hessian * u + &self.gradient;
        let mut h = self.hessian.clone();
        let s = &self.bound_rows * u + &self.bound_offsets;
        for (r, v) in s.iter().enumerate() {
            let excess = v.abs() - self.x_bound;
            if excess > 0.0 {
                let a = self.bound_rows.row(r).transpose();
                g += &a * (2.0 * mu * excess * v.signum());
                h += &a * a.transpose() * (2.0 * mu);
            }
        }
        (g, h)
    }

    /// Expands the decision vector into one control vector per slow step.
    pub fn controls(&self, u: &Vector, horizon: usize) -> Vec<Vector> {
        (0..horizon)
            .map(|k| {
                let start = if self.n == self.nu { 0 } else { k * self.nu };
                u.rows(start, self.nu).into_owned()
            })
            .collect()
    }
}

fn clamp(u: &Vector, b: f64) -> Vector {
    u.map(|v| v.clamp(-b, b))
}

fn kkt_residual(u: &Vector, g: &Vector, b: f64) -> f64 {
    (u - clamp(&(u - g), b)).amax()
}

struct BoxSolve {
    u: Vector,
    iterations: usize,
    kkt: f64,
    stalled: bool,
}

/// Projected Newton on the free variables with a projected-gradient fallback
/// (exact step along the masked steepest descent direction).
fn solve_box(tr: &Transcription, mu: f64, bound: f64, start: Vector, budget: usize) -> BoxSolve {
    let mut u = clamp(&start, bound);
    let mut f = tr.objective(&u, mu);
    let mut iterations = 0;
    let mut stalled = false;
    loop {
        let (g, h) = tr.derivatives(&u, mu);
        let kkt = kkt_residual(&u, &g, bound);
        if kkt < KKT_TOLERANCE || iterations >= budget {
            return BoxSolve { u, iterations, kkt, stalled };
        }
        iterations += 1;
        let eps = 1e-12 * bound;
        let free: Vec<usize> = (0..u.len())
            .filter(|&i| !((u[i] <= -bound + eps && g[i] > 0.0) || (u[i] >= bound - eps && g[i] < 0.0)))
            .collect();
        let mut accepted = None;
        if !free.is_empty() {
            let k = free.len();
            let hff = Mat::from_fn(k, k, |a, b| h[(free[a], free[b])]);
            if let Some(chol) = Cholesky::new(hff) {
                let gf = Vector::from_fn(k, |a, _| g[free[a]]);
                let step = chol.solve(&gf);
                let mut dir = Vector::zeros(u.len());
                for (a, &i) in free.iter().enumerate() {
                    dir[i] = -step[a];
                }
                accepted = line_search(tr, mu, bound, &u, f, &g, &dir, 1.0);
            }
        }
        if accepted.is_none() {
            let mut dir = -&g;
            for i in 0..u.len() {
                if !free.contains(&i) {
                    dir[i] = 0.0;
                }
            }
            let curv = dir.dot(&(&h * &dir));
            let dd = dir.dot(&dir);
            if dd > 0.0 {
                let alpha = if curv > 0.0 { dd / curv } else { 4.0 * bound / dir.amax() };
                accepted = line_search(tr, mu, bound, &u, f, &g, &dir, alpha);
            }
        }
        match accepted {
            Some((next, fn_)) => {
                u = next;
                f = fn_;
            }
            None => {
                stalled = true;
                let (g, _) = tr.derivatives(&u, mu);
                return BoxSolve {
                    kkt: kkt_residual(&u, &g, bound),
                    u,
                    iterations,
                    stalled,
                };
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn line_search(
    tr: &Transcription,
    mu: f64,
    bound: f64,
    u: &Vector,
    f: f64,
    g: &Vector,
    dir: &Vector,
    alpha: f64,
) -> Option<(Vector, f64)> {
    let mut t = alpha;
    for _ in 0..60 {
        let cand = clamp(&(u + dir * t), bound);
        let fc = tr.objective(&cand, mu);
        let decrease = g.dot(&(&cand - u));
        if fc <= f + 1e-4 * decrease && fc < f {
            return Some((cand, fc));
        }
        t *= 0.5;
    }
    None
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    /// One control vector per slow step.
    pub u: Vec<Vector>,
    /// Lifted states at slow instants `0..=T`.
    pub trajectory: Vec<LiftedState>,
    /// Predicted running cost over the horizon (without penalties).
    pub cost: f64,
    /// Penalized objective at the final penalty weight.
    pub objective: f64,
    pub penalty_weight: f64,
    pub max_x_violation: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// Set when the solver stopped before meeting the KKT tolerance.
    pub warning: bool,
}

/// Solves the box-constrained transcription, raising the state-bound penalty
/// weight until the bounds hold or the weight reaches its cap.
pub fn solve_ocp(spec: &OcpSpec, plant: &Plant<'_>) -> Result<OcpSolution> {
    let tr = transcribe(spec, plant)?;
    solve_transcription(&tr, spec)
}

pub fn solve_transcription(tr: &Transcription, spec: &OcpSpec) -> Result<OcpSolution> {
    let mut mu = PENALTY_START;
    let mut u = Vector::zeros(tr.n);
    let mut iterations = 0;
    let (kkt, stalled) = loop {
        let r = solve_box(tr, mu, spec.u_bound, u, MAX_ITERATIONS - iterations);
        u = r.u;
        iterations += r.iterations;
        if tr.max_violation(&u) == 0.0 || mu >= PENALTY_MAX || iterations >= MAX_ITERATIONS {
            break (r.kkt, r.stalled);
        }
        mu = (mu * PENALTY_GROWTH).min(PENALTY_MAX);
    };
    let warning = kkt >= KKT_TOLERANCE;
    if warning {
        log::warn!("OCP stopped with KKT residual {kkt:.3e} after {iterations} iterations (stalled: {stalled})");
    }
    let (cost, _) = tr.evaluate(&u);
    Ok(OcpSolution {
        u: tr.controls(&u, spec.horizon),
        trajectory: tr.slow_states.iter().map(|s| s.at(&u)).collect(),
        cost,
        objective: tr.objective(&u, mu),
        penalty_weight: mu,
        max_x_violation: tr.max_violation(&u),
        iterations,
        kkt_residual: kkt,
        warning,
    })
}

/// Exhaustive scan over constant controls on a grid of the given resolution
/// within the bounds, scored by the penalized objective at the largest
/// penalty weight. Vector controls use coordinate descent over the grid.
pub fn best_constant_policy(spec: &OcpSpec, plant: &Plant<'_>, resolution: f64) -> Result<(Vector, f64)> {
    if !(resolution.is_finite() && resolution > 0.0) {
        return Err(Error::config("scan resolution must be positive"));
    }
    let constant = OcpSpec { constant_u: true, ..spec.clone() };
    let tr = transcribe(&constant, plant)?;
    let steps = (2.0 * spec.u_bound / resolution).round() as usize;
    let grid: Vec<f64> = (0..=steps)
        .map(|i| (-spec.u_bound + i as f64 * resolution).min(spec.u_bound))
        .collect();
    let mut u = Vector::zeros(tr.n);
    let mut best = tr.objective(&u, PENALTY_MAX);
    for _sweep in 0..if tr.n == 1 { 1 } else { 50 } {
        let before = best;
        for j in 0..tr.n {
            for &v in &grid {
                let mut cand = u.clone();
                cand[j] = v;
                let f = tr.objective(&cand, PENALTY_MAX);
                if f < best {
                    best = f;
                    u = cand;
                }
            }
        }
        if best >= before {
            break;
        }
    }
    Ok((u, best))
}

/// Actuator law used when running a control sequence on the true benchmark.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    /// The benchmark's own PI loop.
    Pi,
    /// Actuator set every fast step from the state-inclusive entry of the
    /// LQR actuation and held over the step.
    Lqr { model: &'a KoopmanModel, policy: &'a LqrPolicy },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Left Riemann sum of the running cost at the fast resolution; infinite on divergence.
    pub cost: f64,
    pub diverged: bool,
}

/// Runs a piecewise-constant control sequence on the true benchmark and
/// accumulates the running cost.
pub fn evaluate_policy(
    u: &[f64],
    initial: &ScaleState,
    system: &SystemConfig,
    grid: &TimeGrid,
    controller: Controller<'_>,
) -> Result<Evaluation> {
    system.validate()?;
    grid.validate()?;
    initial.validate(system.variant)?;
    if u.is_empty() {
        return Err(Error::config("control sequence is empty"));
    }
    let tau = grid.tau();
    let mut s = *initial;
    s.u = u[0];
    let mut cost = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        if k > 0 {
            match controller {
                Controller::Pi => apply_setpoint(&mut s, uk, system),
                Controller::Lqr { .. } => s.u = uk,
            }
        }
        for _ in 0..grid.m {
            match controller {
                Controller::Pi => {
                    cost += tau * running_cost(&s, system.variant);
                    advance_fast(&mut s, grid, system);
                }
                Controller::Lqr { model, policy } => {
                    let act = policy.actuation(&model.lift_y(&s.y), &model.lift_x(&s.x), &model.lift_u(s.u));
                    s.w = act[0];
                    cost += tau * running_cost(&s, system.variant);
                    advance_fast_held(&mut s, grid, system);
                }
            }
            if check_bounded(&s).is_err() || !cost.is_finite() {
                return Ok(Evaluation { cost: f64::INFINITY, diverged: true });
            }
        }
    }
    Ok(Evaluation { cost, diverged: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub n_starts: usize,
    /// Slow steps of the optimization and evaluation horizon.
    pub horizon: usize,
    pub x_bound: f64,
    pub u_bound: f64,
    /// Resolution of constant-control scans.
    pub scan_resolution: f64,
    /// Coarse resolution of the true-benchmark scan, refined to `scan_resolution`.
    pub coarse_resolution: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_starts: 100,
            horizon: 100,
            x_bound: 1.0,
            u_bound: 1.0,
            scan_resolution: 1e-3,
            coarse_resolution: 0.05,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_starts == 0 || self.horizon == 0 {
            return Err(Error::config("study needs at least one start and one step"));
        }
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.x_bound) && ok(self.u_bound) && ok(self.scan_resolution) && ok(self.coarse_resolution)) {
            return Err(Error::config("study bounds and resolutions must be positive"));
        }
        Ok(())
    }
}

/// Everything a study needs about the learned model.
#[derive(Debug, Clone, Copy)]
pub struct StudyModel<'a> {
    pub model: &'a KoopmanModel,
    pub policy: &'a LqrPolicy,
    /// Collapsed models from the learned actuator and from the LQR law (combined only).
    pub limit_pi: Option<&'a LimitModel>,
    pub limit_lqr: Option<&'a LimitModel>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StartResult {
    pub start: usize,
    pub initial: ScaleState,
    pub pi_cost: f64,
    pub lqr_cost: f64,
    /// Realized cost of the best constant control under each actuation (combined only).
    pub pi_constant_cost: f64,
    pub lqr_constant_cost: f64,
    /// Best realized cost over a scan of constant controls on the true benchmark (hierarchical only).
    pub pi_scan_cost: f64,
    pub lqr_scan_cost: f64,
    pub pi_predicted: f64,
    pub lqr_predicted: f64,
    pub pi_seconds: f64,
    pub lqr_seconds: f64,
    pub warnings: usize,
}

impl StartResult {
    pub const CSV_HEADER: &'static str = "start,x1,x2,y1,y2,w,pi_cost,lqr_cost,pi_constant_cost,lqr_constant_cost,pi_scan_cost,lqr_scan_cost,pi_predicted,lqr_predicted,warnings";

    pub fn csv_row(&self) -> String {
        let s = &self.initial;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.start,
            s.x[0],
            s.x[1],
            s.y[0],
            s.y[1],
            s.w,
            self.pi_cost,
            self.lqr_cost,
            self.pi_constant_cost,
            self.lqr_constant_cost,
            self.pi_scan_cost,
            self.lqr_scan_cost,
            self.pi_predicted,
            self.lqr_predicted,
            self.warnings
        )
    }

    /// `(PI − LQR) / PI`.
    pub fn lqr_improvement(&self) -> f64 {
        (self.pi_cost - self.lqr_cost) / self.pi_cost
    }

    pub fn pi_gap(&self) -> f64 {
        (self.pi_cost - self.pi_scan_cost) / self.pi_scan_cost
    }

    pub fn lqr_gap(&self) -> f64 {
        (self.lqr_cost - self.lqr_scan_cost) / self.lqr_scan_cost
    }

    pub fn pi_over_constant(&self) -> f64 {
        (self.pi_constant_cost - self.pi_cost) / self.pi_constant_cost
    }

    pub fn lqr_over_constant(&self) -> f64 {
        (self.lqr_constant_cost - self.lqr_cost) / self.lqr_constant_cost
    }

    /// `LQR / PI − 1`.
    pub fn lqr_vs_pi(&self) -> f64 {
        self.lqr_cost / self.pi_cost - 1.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Self {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return Quartiles { q1: f64::NAN, median: f64::NAN, q3: f64::NAN };
        }
        v.sort_by(f64::total_cmp);
        let at = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Quartiles { q1: at(0.25), median: at(0.5), q3: at(0.75) }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub variant: Variant,
    pub seed: u64,
    pub starts: Vec<StartResult>,
    /// Starts dropped because a solve or evaluation failed.
    pub failures: usize,
    pub lqr_improvement: Quartiles,
    pub lqr_vs_pi: Quartiles,
    pub pi_gap: Option<Quartiles>,
    pub lqr_gap: Option<Quartiles>,
    pub pi_over_constant: Option<Quartiles>,
    pub lqr_over_constant: Option<Quartiles>,
    pub median_pi_seconds: f64,
    pub median_lqr_seconds: f64,
}

impl StudyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(StartResult::CSV_HEADER);
        s.push('\n');
        for r in &self.starts {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Random start: every state component of the variant uniform in `[−1, 1]`.
pub fn random_start<R: Rng>(variant: Variant, rng: &mut R) -> ScaleState {
    let mut s = crate::training::dataset::sample_initial(variant, rng);
    s.u = 0.0;
    s
}

/// Best realized cost over constant controls: a coarse grid, then grids ten
/// times finer around the incumbent down to the scan resolution.
pub fn scan_true_cost(
    start: &ScaleState,
    system: &SystemConfig,
    grid: &TimeGrid,
    controller: Controller<'_>,
    cfg: &StudyConfig,
) -> Result<f64> {
    let eval = |u: f64| -> Result<f64> {
        Ok(evaluate_policy(&vec![u; cfg.horizon], start, system, grid, controller)?.cost)
    };
    let b = cfg.u_bound;
    let coarse = (2.0 * b / cfg.coarse_resolution).round() as usize;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=coarse {
        let u = (-b + i as f64 * cfg.coarse_resolution).min(b);
        let c = eval(u)?;
        if c < best.0 {
            best = (c, u);
        }
    }
    let mut step = cfg.coarse_resolution;
    while step > cfg.scan_resolution {
        let next = (step / 10.0).max(cfg.scan_resolution);
        let centre = best.1;
        let n = (step / next).round() as i64;
        for i in -n..=n {
            let u = centre + i as f64 * next;
            if i == 0 || u.abs() > b + 1e-12 {
                continue;
            }
            let c = eval(u.clamp(-b, b))?;
            if c < best.0 {
                best = (c, u);
            }
        }
        step = next;
    }
    Ok(best.0)
}

/// Initial condition of start `i`, drawn from its own stream of `seed`.
pub fn study_start(variant: Variant, seed: u64, i: usize) -> ScaleState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    random_start(variant, &mut rng)
}

/// Optimal-control problem posed for one start of a policy study: constant `u`
/// on the multirate model for the hierarchical case, time-varying `u` on the
/// collapsed model for the combined case.
pub fn study_spec(sm: &StudyModel<'_>, start: &ScaleState, grid: &TimeGrid, cfg: &StudyConfig, actuation: Actuation) -> OcpSpec {
    let model = sm.model;
    let variant = model.variant();
    let hier = variant == Variant::HierOnly;
    OcpSpec {
        horizon: cfg.horizon,
        x_bound: cfg.x_bound,
        u_bound: cfg.u_bound,
        dynamics: if hier { Dynamics::Full } else { Dynamics::Collapsed },
        actuation,
        cost: system_cost(model.dims(), variant, if hier { grid.tau() } else { grid.dt_slow }),
        initial: model.lift(start),
        constant_u: hier,
    }
}

/// Plant matching [`study_spec`].
pub fn study_plant<'a>(sm: &StudyModel<'a>, grid: &TimeGrid, actuation: Actuation) -> Result<Plant<'a>> {
    let policy = match actuation {
        Actuation::Pi => None,
        Actuation::Lqr => Some(sm.policy),
    };
    if sm.model.variant() == Variant::HierOnly {
        return Ok(Plant::Full { blocks: &sm.model.blocks, m: grid.m, policy });
    }
    let limit = if policy.is_some() { sm.limit_lqr } else { sm.limit_pi };
    limit
        .map(Plant::Collapsed)
        .ok_or_else(|| Error::config("combined study needs both collapsed models"))
}

fn run_start(
    i: usize,
    variant: Variant,
    sm: &StudyModel<'_>,
    system: &SystemConfig,
    grid: &TimeGrid,
    cfg: &StudyConfig,
    seed: u64,
) -> Result<StartResult> {
    if variant == Variant::TssOnly {
        return Err(Error::WrongForm("run_policy_study"));
    }
    let start = study_start(variant, seed, i);
    let mut res = StartResult { start: i, initial: start, ..Default::default() };
    let hier = variant == Variant::HierOnly;
    let mut outcomes = Vec::with_capacity(2);
    for (actuation, controller) in [
        (Actuation::Pi, Controller::Pi),
        (Actuation::Lqr, Controller::Lqr { model: sm.model, policy: sm.policy }),
    ] {
        let spec = study_spec(sm, &start, grid, cfg, actuation);
        let plant = study_plant(sm, grid, actuation)?;
        let t0 = std::time::Instant::now();
        let sol = solve_ocp(&spec, &plant)?;
        let seconds = t0.elapsed().as_secs_f64();
        let u: Vec<f64> = sol.u.iter().map(|v| v[0]).collect();
        let cost = evaluate_policy(&u, &start, system, grid, controller)?.cost;
        let (constant, scan) = if hier {
            (cost, scan_true_cost(&start, system, grid, controller, cfg)?)
        } else {
            let (c, _) = best_constant_policy(&spec, &plant, cfg.scan_resolution)?;
            let constant = evaluate_policy(&vec![c[0]; cfg.horizon], &start, system, grid, controller)?.cost;
            (constant, f64::NAN)
        };
        outcomes.push((cost, constant, scan, sol.cost, seconds, usize::from(sol.warning)));
    }
    let (pi, lqr) = (outcomes[0], outcomes[1]);
    res.pi_cost = pi.0;
    res.lqr_cost = lqr.0;
    res.pi_constant_cost = pi.1;
    res.lqr_constant_cost = lqr.1;
    res.pi_scan_cost = pi.2;
    res.lqr_scan_cost = lqr.2;
    res.pi_predicted = pi.3;
    res.lqr_predicted = lqr.3;
    res.pi_seconds = pi.4;
    res.lqr_seconds = lqr.4;
    res.warnings = pi.5 + lqr.5;
    Ok(res)
}

/// Solves and evaluates both actuation modes from `n_starts` random initial
/// conditions. Starts are independent and run in parallel; each owns a
/// random stream derived from `seed` and its index.
pub fn run_policy_study(
    sm: &StudyModel<'_>,
    system: &SystemConfig,
    grid: &TimeGrid,
    cfg: &StudyConfig,
    seed: u64,
) -> Result<StudyReport> {
    cfg.validate()?;
    let variant = sm.model.variant();
    if !variant.has_actuator() {
        return Err(Error::WrongForm("run_policy_study"));
    }
    if system.variant != variant {
        return Err(Error::config("study system variant does not match the model"));
    }
    let results: Vec<Result<StartResult>> = (0..cfg.n_starts)
        .into_par_iter()
        .map(|i| run_start(i, variant, sm, system, grid, cfg, seed))
        .collect();
    let mut starts = Vec::new();
    let mut failures = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) if s.pi_cost.is_finite() && s.lqr_cost.is_finite() => starts.push(s),
            Ok(_) => {
                log::warn!("start {i}: realized cost diverged; excluded");
                failures += 1;
            }
            Err(e) => {
                log::warn!("start {i} failed: {e}; excluded");
                failures += 1;
            }
        }
    }
    let col = |f: fn(&StartResult) -> f64| -> Vec<f64> { starts.iter().map(f).collect() };
    let hier = variant == Variant::HierOnly;
    Ok(StudyReport {
        variant,
        seed,
        failures,
        lqr_improvement: Quartiles::of(&col(StartResult::lqr_improvement)),
        lqr_vs_pi: Quartiles::of(&col(StartResult::lqr_vs_pi)),
        pi_gap: hier.then(|| Quartiles::of(&col(StartResult::pi_gap))),
        lqr_gap: hier.then(|| Quartiles::of(&col(StartResult::lqr_gap))),
        pi_over_constant: (!hier).then(|| Quartiles::of(&col(StartResult::pi_over_constant))),
        lqr_over_constant: (!hier).then(|| Quartiles::of(&col(StartResult::lqr_over_constant))),
        median_pi_seconds: Quartiles::of(&col(|s| s.pi_seconds)).median,
        median_lqr_seconds: Quartiles::of(&col(|s| s.lqr_seconds)).median,
        starts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{combined_limit, ModelForm};

    fn scalar_limit(a: f64, b: f64) -> LimitModel {
        LimitModel {
            provenance: Provenance::FromPi,
            b_xx: Mat::from_element(1, 1, a),
            b_xu: Mat::from_element(1, 1, b),
            b_x: Vector::zeros(1),
            b_yx: Mat::zeros(0, 1),
            b_yu: Mat::zeros(0, 1),
            b_y: Vector::zeros(0),
            b_wx: Mat::zeros(0, 1),
            b_wu: Mat::zeros(0, 1),
            b_w: Vector::zeros(0),
        }
    }

    fn scalar_spec(x0: f64, horizon: usize, qx: f64, qu: f64) -> OcpSpec {
        let dims = LiftedDims { x: 1, y: 0, w: 0, u: 1 };
        let mut cost = CostQuadratic::zeros(dims);
        cost.add_diagonal(Group::X, 0, qx);
        cost.add_diagonal(Group::U, 0, qu);
        OcpSpec {
            horizon,
            x_bound: 100.0,
            u_bound: 1.0,
            dynamics: Dynamics::Collapsed,
            actuation: Actuation::Pi,
            cost,
            initial: LiftedState {
                x: Vector::from_element(1, x0),
                y: Vector::zeros(0),
                w: Vector::zeros(0),
            },
            constant_u: false,
        }
    }

    #[test]
    fn one_step_closed_form() {
        // Cost qx·x₀² + qu·u² at step 0 only; the control has no effect on it.
        // Horizon 2 makes u₀ matter through x₁: qx(a x₀ + b u₀)² + qu u₀² + qu u₁².
        let (a, b, x0, qx, qu) = (0.9, 0.5, 0.6, 1.0, 0.3);
        let limit = scalar_limit(a, b);
        let sol = solve_ocp(&scalar_spec(x0, 2, qx, qu), &Plant::Collapsed(&limit)).unwrap();
        let u0 = -qx * a * b * x0 / (qx * b * b + qu);
        assert!((sol.u[0][0] - u0).abs() < 1e-8);
        assert!(sol.u[1][0].abs() < 1e-8);
        assert!(sol.kkt_residual < KKT_TOLERANCE && !sol.warning);
    }

    #[test]
    fn bounds_are_exact_and_kkt_holds() {
        let limit = scalar_limit(1.0, 0.05);
        let sol = solve_ocp(&scalar_spec(5.0, 20, 1.0, 1e-3), &Plant::Collapsed(&limit)).unwrap();
        assert!(sol.u.iter().all(|v| v[0].abs() <= 1.0));
        assert!(sol.u.iter().any(|v| v[0] == -1.0));
        assert!(sol.kkt_residual < KKT_TOLERANCE);
    }

    #[test]
    fn origin_start_gives_zero() {
        let dims = LiftedDims { x: 3, y: 4, w: 2, u: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let blocks = KoopmanBlocks::random(ModelForm::Combined, dims, 0.8, &mut rng).unwrap();
        let limit = combined_limit(&blocks, None).unwrap();
        let spec = OcpSpec {
            horizon: 10,
            x_bound: 1.0,
            u_bound: 1.0,
            dynamics: Dynamics::Collapsed,
            actuation: Actuation::Pi,
            cost: system_cost(dims, Variant::Combined, 0.1),
            initial: LiftedState { x: Vector::zeros(3), y: Vector::zeros(4), w: Vector::zeros(2) },
            constant_u: false,
        };
        let sol = solve_ocp(&spec, &Plant::Collapsed(&limit)).unwrap();
        assert!(sol.cost.abs() < 1e-14);
        assert!(sol.u.iter().all(|v| v[0].abs() < 1e-12));
        let (u, c) = best_constant_policy(&spec, &Plant::Collapsed(&limit), 1e-3).unwrap();
        assert_eq!(u[0], 0.0);
        assert!(c.abs() < 1e-14);
    }

    #[test]
    fn state_penalty_keeps_state_near_bound() {
        // Unstable drift pushes x past the bound unless the control fights it.
        let limit = scalar_limit(1.05, 0.2);
        let mut spec = scalar_spec(0.8, 30, 0.0, 1.0);
        spec.x_bound = 1.0;
        let sol = solve_ocp(&spec, &Plant::Collapsed(&limit)).unwrap();
        assert!(sol.max_x_violation < 1e-4, "{}", sol.max_x_violation);
        assert!(sol.penalty_weight > PENALTY_START);
    }

    #[test]
    fn quartiles() {
        let q = Quartiles::of(&[4.0, 1.0, 3.0, 2.0, 5.0, f64::INFINITY]);
        assert_eq!((q.q1, q.median, q.q3), (2.0, 3.0, 4.0));
    }

    #[test]
    fn zero_policy_from_origin_costs_nothing() {
        let system = SystemConfig::new(Variant::Combined);
        let grid = TimeGrid::default();
        let e = evaluate_policy(&[0.0; 3], &ScaleState::default(), &system, &grid, Controller::Pi).unwrap();
        assert_eq!(e.cost, 0.0);
        assert!(!e.diverged);
    }
}
