//! Koopman-LQR for the fast/actuator subsystem.
//!
//! The value function is `V(ψ_y) = ψ_yᵀ P ψ_y + pᵀ ψ_y` with `p` affine in the
//! slow and supervisory variables, which are frozen over the fast horizon. The
//! minimizing actuator observable is `ψ_w = −F ψ_y − d`.

use crate::cost::{CostQuadratic, Group};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{block, max_abs, min_sym_eigenvalue, solve, spectral_radius, sym, Mat, Vector};
use crate::model::{Feedback, KoopmanBlocks};

pub const MAX_ITERATIONS: usize = 10_000;
pub const TOLERANCE: f64 = 1e-10;

/// Affine map `v = M_x ψ_x + M_u ψ_u + v_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub x: Mat,
    pub u: Mat,
    pub c: Vector,
}

impl Affine {
    pub fn zeros(rows: usize, nx: usize, nu: usize) -> Self {
        Affine {
            x: Mat::zeros(rows, nx),
            u: Mat::zeros(rows, nu),
            c: Vector::zeros(rows),
        }
    }

    pub fn eval(&self, psi_x: &Vector, psi_u: &Vector) -> Vector {
        &self.x * psi_x + &self.u * psi_u + &self.c
    }

    fn as_matrix(&self) -> Mat {
        block(&[&[&self.x, &self.u, &Mat::from_column_slice(self.c.len(), 1, self.c.as_slice())]])
    }

    fn from_matrix(m: &Mat, nx: usize, nu: usize) -> Self {
        Affine {
            x: m.columns(0, nx).into_owned(),
            u: m.columns(nx, nu).into_owned(),
            c: Vector::from_column_slice(m.column(nx + nu).as_slice()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrPolicy {
    /// Value quadratic (n_ψy × n_ψy, symmetric).
    pub p: Mat,
    /// Feedback gain (n_ψw × n_ψy).
    pub f: Mat,
    /// Hessian of the Bellman bracket in ψ_w.
    pub q: Mat,
    pub p_affine: Affine,
    pub d_affine: Affine,
    pub iterations: usize,
}

impl LqrPolicy {
    /// `ψ_w = −F ψ_y − d(ψ_x, ψ_u)`.
    pub fn actuation(&self, psi_y: &Vector, psi_x: &Vector, psi_u: &Vector) -> Vector {
        -(&self.f * psi_y + self.d_affine.eval(psi_x, psi_u))
    }

    pub fn feedback(&self) -> Feedback<'_> {
        Feedback {
            f: &self.f,
            d_x: &self.d_affine.x,
            d_u: &self.d_affine.u,
            d_0: &self.d_affine.c,
        }
    }

    /// Closed fast transition `K_yy − (I − K_yy) K_yw F`.
    pub fn closed_loop(&self, model: &KoopmanBlocks) -> Mat {
        let fm = model.fast_map();
        &fm.yy - &fm.yw * &self.f
    }
}

/// Output of the Q/R/q assembly for a given value function.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub q: Mat,
    pub f: Mat,
    /// `q` as an affine map of (ψ_x, ψ_u), including the `Gᵀ p` contribution.
    pub q_affine: Affine,
}

/// Fast-subsystem pieces shared by the assembly and the solver.
struct Parts {
    a: Mat,
    g: Mat,
    h: Mat,
    q_ww2: Mat,
    cross_wy: Mat,
    cross_wx: Mat,
    cross_wu: Mat,
    cross_yx: Mat,
    cross_yu: Mat,
    q_yy: Mat,
    c_w: Vector,
    c_y: Vector,
}

impl Parts {
    fn new(model: &KoopmanBlocks, cost: &CostQuadratic) -> Result<Self> {
        if !model.form.has_actuator() {
            return Err(Error::WrongForm("LQR (model has no actuator)"));
        }
        cost.validate()?;
        if cost.dims != model.dims {
            return Err(Error::config("cost and model lifted dimensions differ"));
        }
        let fm = model.fast_map();
        let qb = |i, j| cost.q_block(i, j);
        let pair = |i, j| qb(i, j) + qb(j, i).transpose();
        Ok(Parts {
            a: fm.yy,
            g: fm.yw,
            h: fm.yx,
            q_ww2: qb(Group::W, Group::W) * 2.0,
            cross_wy: pair(Group::W, Group::Y),
            cross_wx: pair(Group::W, Group::X),
            cross_wu: pair(Group::W, Group::U),
            cross_yx: pair(Group::Y, Group::X),
            cross_yu: pair(Group::Y, Group::U),
            q_yy: qb(Group::Y, Group::Y),
            c_w: cost.c_block(Group::W),
            c_y: cost.c_block(Group::Y),
        })
    }

    fn hessian(&self, p: &Mat) -> Mat {
        let q = &self.q_ww2 + (self.g.transpose() * p * &self.g) * 2.0;
        sym(&q)
    }

    fn gain(&self, q: &Mat, p: &Mat) -> Result<Mat> {
        let rhs = &self.cross_wy + (self.g.transpose() * p * &self.a) * 2.0;
        solve(q, &rhs, "LQR gain")
    }

    /// `q` without the `Gᵀ p` term, as an affine map.
    fn q0(&self, p: &Mat) -> Affine {
        Affine {
            x: &self.cross_wx + (self.g.transpose() * p * &self.h) * 2.0,
            u: self.cross_wu.clone(),
            c: self.c_w.clone(),
        }
    }
}

fn check_pd(q: &Mat) -> Result<()> {
    let min = min_sym_eigenvalue(q);
    if !(min > 0.0) {
        return Err(Error::NotPositiveDefinite {
            context: "LQR Hessian Q",
            min_eigenvalue: min,
        });
    }
    Ok(())
}

pub fn assemble_qrq(model: &KoopmanBlocks, cost: &CostQuadratic, p: &Mat, p_affine: &Affine) -> Result<Assembly> {
    let parts = Parts::new(model, cost)?;
    check_dim("value quadratic", model.dims.y, p.nrows())?;
    check_dim("value linear term", model.dims.y, p_affine.c.len())?;
    let q = parts.hessian(p);
    check_pd(&q)?;
    let f = parts.gain(&q, p)?;
    let q0 = parts.q0(p);
    let gt = parts.g.transpose();
    let q_affine = Affine {
        x: q0.x + &gt * &p_affine.x,
        u: q0.u + &gt * &p_affine.u,
        c: q0.c + &gt * &p_affine.c,
    };
    Ok(Assembly { q, f, q_affine })
}

/// Solves the Bellman equation by value iteration on `P` followed by one joint
/// linear solve for the affine `p` and `d` maps.
pub fn solve_bellman(model: &KoopmanBlocks, cost: &CostQuadratic) -> Result<LqrPolicy> {
    let parts = Parts::new(model, cost)?;
    let ny = model.dims.y;
    let mut p = sym(&parts.q_yy);
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let q = parts.hessian(&p);
        check_pd(&q)?;
        let f = parts.gain(&q, &p)?;
        let next = sym(&(parts.a.transpose() * &p * &parts.a - f.transpose() * &q * &f * 0.5 + &parts.q_yy));
        residual = max_abs(&(&next - &p));
        p = next;
        if !residual.is_finite() {
            break;
        }
        if residual < TOLERANCE * max_abs(&p).max(1.0) {
            break;
        }
    }
    if !(residual < TOLERANCE * max_abs(&p).max(1.0)) {
        return Err(Error::NoConvergence {
            context: "Riccati value iteration",
            iterations,
            residual,
        });
    }
    let q = parts.hessian(&p);
    check_pd(&q)?;
    let f = parts.gain(&q, &p)?;
    let a_cl = &parts.a - &parts.g * &f;
    let radius = spectral_radius(&a_cl);
    if !(radius < 1.0) {
        return Err(Error::UnstableBlock {
            block: "LQR closed fast block",
            radius,
        });
    }

    // (I − A_clᵀ) p = −Fᵀ q0 + [Q_yx + Q_xyᵀ + 2AᵀP H] ψ_x + (Q_yu + Q_uyᵀ) ψ_u + c_y
    let q0 = parts.q0(&p);
    let rhs = Affine {
        x: -(f.transpose() * &q0.x) + &parts.cross_yx + (parts.a.transpose() * &p * &parts.h) * 2.0,
        u: -(f.transpose() * &q0.u) + &parts.cross_yu,
        c: -(f.transpose() * &q0.c) + &parts.c_y,
    };
    let lhs = Mat::identity(ny, ny) - a_cl.transpose();
    let (nx, nu) = (model.dims.x, model.dims.u);
    let p_affine = Affine::from_matrix(&solve(&lhs, &rhs.as_matrix(), "value linear term")?, nx, nu);
    let gt = parts.g.transpose();
    let q_full = Affine {
        x: q0.x + &gt * &p_affine.x,
        u: q0.u + &gt * &p_affine.u,
        c: q0.c + &gt * &p_affine.c,
    };
    let d_affine = Affine::from_matrix(&solve(&q, &q_full.as_matrix(), "LQR offset")?, nx, nu);
    Ok(LqrPolicy {
        p,
        f,
        q,
        p_affine,
        d_affine,
        iterations,
    })
}

/// Right-hand side of the Bellman equation at a given ψ_w:
/// `L(ψ_u, ψ_w, ψ_y, ψ_x) + V(ψ_y')`.
pub fn bellman_rhs(
    policy: &LqrPolicy,
    model: &KoopmanBlocks,
    cost: &CostQuadratic,
    psi_y: &Vector,
    psi_x: &Vector,
    psi_u: &Vector,
    psi_w: &Vector,
) -> Result<f64> {
    let fm = model.fast_map();
    let next = &fm.yy * psi_y + &fm.yw * psi_w + &fm.yx * psi_x;
    let p_lin = policy.p_affine.eval(psi_x, psi_u);
    Ok(cost.evaluate(psi_u, psi_w, psi_y, psi_x)? + next.dot(&(&policy.p * &next)) + p_lin.dot(&next))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BellmanResiduals {
    /// `‖P − (AᵀPA − ½FᵀQF + Q_yy)‖∞`.
    pub quadratic: f64,
    /// Largest mismatch in the linear-in-ψ_y coefficient over the samples.
    pub linear: f64,
    /// Largest mismatch in the ψ_y-independent part; reported only.
    pub constant: f64,
}

impl BellmanResiduals {
    pub fn within(&self, tol: f64) -> bool {
        self.quadratic < tol && self.linear < tol
    }
}

/// Bellman mismatches at the given `(ψ_x, ψ_u)` samples. The value function
/// carries no constant, so the constant mismatch is a diagnostic only.
pub fn bellman_residuals(
    policy: &LqrPolicy,
    model: &KoopmanBlocks,
    cost: &CostQuadratic,
    samples: &[(Vector, Vector)],
) -> Result<BellmanResiduals> {
    let parts = Parts::new(model, cost)?;
    let p = &policy.p;
    let q = parts.hessian(p);
    let f = parts.gain(&q, p)?;
    let quadratic = max_abs(&(p - (parts.a.transpose() * p * &parts.a - f.transpose() * &q * &f * 0.5 + &parts.q_yy)));

    let ny = model.dims.y;
    let zero_y = Vector::zeros(ny);
    let mut linear: f64 = 0.0;
    let mut constant: f64 = 0.0;
    for (x, u) in samples {
        // The minimized bracket is quadratic in ψ_y; recover its linear and constant
        // coefficients from evaluations at 0 and ±e_i.
        let at = |y: &Vector| -> Result<f64> {
            let w = policy.actuation(y, x, u);
            bellman_rhs(policy, model, cost, y, x, u, &w)
        };
        let r0 = at(&zero_y)?;
        constant = constant.max(r0.abs());
        let p_lin = policy.p_affine.eval(x, u);
        for i in 0..ny {
            let mut e = zero_y.clone();
            e[i] = 1.0;
            let plus = at(&e)?;
            let minus = at(&(-&e))?;
            let lin = 0.5 * (plus - minus);
            linear = linear.max((lin - p_lin[i]).abs());
        }
    }
    Ok(BellmanResiduals { quadratic, linear, constant })
}
