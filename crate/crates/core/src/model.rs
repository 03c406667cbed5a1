//! Structured discrete-time Koopman models.
//!
//! All three forms share one representation. Absent variable groups have zero
//! width: the hierarchical form has no `ψ_x`, the time-scale-separated form has
//! no `ψ_w` or `ψ_u`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{block, solve, spectral_radius, Mat, Vector};

/// Lifted-state norm beyond which a model rollout is declared divergent.
pub const ROLLOUT_BOUND: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelForm {
    Tss,
    Hier,
    Combined,
}

impl ModelForm {
    pub fn has_slow(self) -> bool {
        self != ModelForm::Hier
    }

    pub fn has_actuator(self) -> bool {
        self != ModelForm::Tss
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelForm::Tss => "tss",
            ModelForm::Hier => "hier",
            ModelForm::Combined => "combined",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiftedDims {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub u: usize,
}

impl LiftedDims {
    pub fn check_form(&self, form: ModelForm) -> Result<()> {
        if form.has_slow() != (self.x > 0) {
            return Err(Error::config(format!("{form:?} form and ψ_x width {} disagree", self.x)));
        }
        if form.has_actuator() != (self.w > 0) || (self.u > 0 && self.w == 0) {
            return Err(Error::config(format!(
                "{form:?} form and actuator widths (w {}, u {}) disagree",
                self.w, self.u
            )));
        }
        if self.y == 0 {
            return Err(Error::config("ψ_y must be non-empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanBlocks {
    pub form: ModelForm,
    pub dims: LiftedDims,
    pub k_xx: Mat,
    pub k_xy: Mat,
    pub k_xw: Mat,
    pub k_yy: Mat,
    pub k_yx: Mat,
    pub k_yw: Mat,
    pub k_ww: Mat,
    pub k_wy: Mat,
    pub k_wx: Mat,
    pub k_wu: Mat,
}

/// Fast update written out as an affine map:
/// `y' = yy·y + yw·w + yx·x`, `w' = wy·y + ww·w + wx·x + wu·u`.
#[derive(Debug, Clone)]
pub struct FastMap {
    pub yy: Mat,
    pub yw: Mat,
    pub yx: Mat,
    pub wy: Mat,
    pub ww: Mat,
    pub wx: Mat,
    pub wu: Mat,
}

impl FastMap {
    /// Joint `(y, w)` transition matrix.
    pub fn closed_block(&self) -> Mat {
        block(&[&[&self.yy, &self.yw], &[&self.wy, &self.ww]])
    }
}

/// Slow update written out as `x' = xx·x + xy·ȳ + xw·w̄` over window means.
#[derive(Debug, Clone)]
pub struct SlowMap {
    pub xx: Mat,
    pub xy: Mat,
    pub xw: Mat,
}

/// Names of the blocks in serialization order.
pub const BLOCK_NAMES: [&str; 10] = [
    "k_xx", "k_xy", "k_xw", "k_yy", "k_yx", "k_yw", "k_ww", "k_wy", "k_wx", "k_wu",
];

impl KoopmanBlocks {
    pub fn zeros(form: ModelForm, dims: LiftedDims) -> Result<Self> {
        dims.check_form(form)?;
        let LiftedDims { x, y, w, u } = dims;
        Ok(KoopmanBlocks {
            form,
            dims,
            k_xx: Mat::zeros(x, x),
            k_xy: Mat::zeros(x, y),
            k_xw: Mat::zeros(x, w),
            k_yy: Mat::zeros(y, y),
            k_yx: Mat::zeros(y, x),
            k_yw: Mat::zeros(y, w),
            k_ww: Mat::zeros(w, w),
            k_wy: Mat::zeros(w, y),
            k_wx: Mat::zeros(w, x),
            k_wu: Mat::zeros(w, u),
        })
    }

    /// Random model whose `K_xx`, `K_yy`, `K_ww` and joint fast block all have
    /// spectral radius below `radius` (< 1); used by tests and property checks.
    /// `K_xw` and `K_wx` stay zero for the combined form.
    pub fn random<R: Rng>(form: ModelForm, dims: LiftedDims, radius: f64, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(form, dims)?;
        let fill = |a: &mut Mat, scale: f64, rng: &mut R| a.iter_mut().for_each(|v| *v = scale * rng.gen_range(-1.0..1.0));
        for (name, a) in m.blocks_mut() {
            if form == ModelForm::Combined && (name == "k_xw" || name == "k_wx") {
                continue;
            }
            fill(a, 0.5, rng);
        }
        for a in [&mut m.k_xx, &mut m.k_yy, &mut m.k_ww] {
            let rho = spectral_radius(a);
            if rho > 0.0 {
                *a *= radius * rng.gen_range(0.3..1.0) / rho;
            }
        }
        while m.closed_fast_radius() >= radius {
            m.k_yw *= 0.7;
            m.k_wy *= 0.7;
        }
        Ok(m)
    }

    pub fn blocks(&self) -> [(&'static str, &Mat); 10] {
        [
            ("k_xx", &self.k_xx),
            ("k_xy", &self.k_xy),
            ("k_xw", &self.k_xw),
            ("k_yy", &self.k_yy),
            ("k_yx", &self.k_yx),
            ("k_yw", &self.k_yw),
            ("k_ww", &self.k_ww),
            ("k_wy", &self.k_wy),
            ("k_wx", &self.k_wx),
            ("k_wu", &self.k_wu),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Mat); 10] {
        [
            ("k_xx", &mut self.k_xx),
            ("k_xy", &mut self.k_xy),
            ("k_xw", &mut self.k_xw),
            ("k_yy", &mut self.k_yy),
            ("k_yx", &mut self.k_yx),
            ("k_yw", &mut self.k_yw),
            ("k_ww", &mut self.k_ww),
            ("k_wy", &mut self.k_wy),
            ("k_wx", &mut self.k_wx),
            ("k_wu", &mut self.k_wu),
        ]
    }

    /// Checks block shapes, finiteness and the structural zeros of the combined form.
    pub fn validate(&self) -> Result<()> {
        self.dims.check_form(self.form)?;
        let LiftedDims { x, y, w, u } = self.dims;
        let shapes = [(x, x), (x, y), (x, w), (y, y), (y, x), (y, w), (w, w), (w, y), (w, x), (w, u)];
        for ((name, a), (r, c)) in self.blocks().into_iter().zip(shapes) {
            if a.shape() != (r, c) {
                return Err(Error::format(format!("{name} has shape {:?}, expected ({r}, {c})", a.shape())));
            }
            if !a.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("Koopman block"));
            }
        }
        if self.form == ModelForm::Combined && (self.k_xw.amax() != 0.0 || self.k_wx.amax() != 0.0) {
            return Err(Error::format("combined form requires K_xw = K_wx = 0"));
        }
        Ok(())
    }

    pub fn fast_map(&self) -> FastMap {
        let ey = Mat::identity(self.dims.y, self.dims.y) - &self.k_yy;
        let ew = Mat::identity(self.dims.w, self.dims.w) - &self.k_ww;
        FastMap {
            yy: self.k_yy.clone(),
            yw: &ey * &self.k_yw,
            yx: &ey * &self.k_yx,
            wy: &ew * &self.k_wy,
            ww: self.k_ww.clone(),
            wx: &ew * &self.k_wx,
            wu: &ew * &self.k_wu,
        }
    }

    pub fn slow_map(&self) -> SlowMap {
        let ex = Mat::identity(self.dims.x, self.dims.x) - &self.k_xx;
        SlowMap {
            xx: self.k_xx.clone(),
            xy: &ex * &self.k_xy,
            xw: &ex * &self.k_xw,
        }
    }

    /// Inverse of [`fast_map`](Self::fast_map) and [`slow_map`](Self::slow_map).
    /// Needs `I − K` invertible for `K_xx`, `K_yy` and `K_ww`.
    pub fn from_maps(form: ModelForm, dims: LiftedDims, fast: &FastMap, slow: &SlowMap) -> Result<Self> {
        let mut m = Self::zeros(form, dims)?;
        let ey = Mat::identity(dims.y, dims.y) - &fast.yy;
        let ew = Mat::identity(dims.w, dims.w) - &fast.ww;
        let ex = Mat::identity(dims.x, dims.x) - &slow.xx;
        m.k_yy = fast.yy.clone();
        m.k_ww = fast.ww.clone();
        m.k_xx = slow.xx.clone();
        m.k_yx = solve(&ey, &fast.yx, "I − K_yy")?;
        m.k_yw = solve(&ey, &fast.yw, "I − K_yy")?;
        m.k_wy = solve(&ew, &fast.wy, "I − K_ww")?;
        m.k_wx = solve(&ew, &fast.wx, "I − K_ww")?;
        m.k_wu = solve(&ew, &fast.wu, "I − K_ww")?;
        m.k_xy = solve(&ex, &slow.xy, "I − K_xx")?;
        m.k_xw = solve(&ex, &slow.xw, "I − K_xx")?;
        m.validate()?;
        Ok(m)
    }

    /// Spectral radius of the joint fast transition (just `K_yy` without an actuator).
    pub fn closed_fast_radius(&self) -> f64 {
        spectral_radius(&self.fast_map().closed_block())
    }

    /// One fast step. Returns `(ψ_y', ψ_w')`; `ψ_w'` is empty without an actuator.
    pub fn step_fast(&self, psi_y: &Vector, psi_x: &Vector, psi_w: &Vector, psi_u: &Vector) -> Result<(Vector, Vector)> {
        self.check_vectors(psi_x, psi_y, psi_w, psi_u)?;
        let y_eq = &self.k_yx * psi_x + &self.k_yw * psi_w;
        let y_next = &self.k_yy * (psi_y - &y_eq) + &y_eq;
        let w_eq = &self.k_wx * psi_x + &self.k_wy * psi_y + &self.k_wu * psi_u;
        let w_next = &self.k_ww * (psi_w - &w_eq) + &w_eq;
        Ok((y_next, w_next))
    }

    /// One slow step from window averages of the fast lifted states.
    pub fn step_slow_mean(&self, psi_x: &Vector, y_mean: &Vector, w_mean: &Vector) -> Vector {
        let coupled = &self.k_xy * y_mean + &self.k_xw * w_mean;
        &self.k_xx * (psi_x - &coupled) + coupled
    }

    /// One slow step; `window` holds the `m` fast samples `(ψ_y, ψ_w)` of the interval.
    pub fn step_slow(&self, psi_x: &Vector, window: &[(Vector, Vector)], m: usize) -> Result<Vector> {
        check_dim("slow-step window", m, window.len())?;
        check_dim("ψ_x", self.dims.x, psi_x.len())?;
        let mut y_mean = Vector::zeros(self.dims.y);
        let mut w_mean = Vector::zeros(self.dims.w);
        for (y, w) in window {
            check_dim("window ψ_y", self.dims.y, y.len())?;
            check_dim("window ψ_w", self.dims.w, w.len())?;
            y_mean += y;
            w_mean += w;
        }
        y_mean /= m as f64;
        w_mean /= m as f64;
        Ok(self.step_slow_mean(psi_x, &y_mean, &w_mean))
    }

    /// Pure lifted-space rollout over `controls.len()` slow steps of `m` fast steps.
    pub fn rollout(&self, init: &LiftedState, controls: &[Vector], m: usize) -> Result<LiftedTrajectory> {
        self.check_vectors(&init.x, &init.y, &init.w, controls.first().unwrap_or(&Vector::zeros(self.dims.u)))?;
        if m == 0 {
            return Err(Error::config("m must be positive"));
        }
        let mut slow = vec![init.x.clone()];
        let mut fast = vec![(init.y.clone(), init.w.clone())];
        let (mut x, mut y, mut w) = (init.x.clone(), init.y.clone(), init.w.clone());
        for (k, u) in controls.iter().enumerate() {
            let mut window = Vec::with_capacity(m);
            for _ in 0..m {
                let (yn, wn) = self.step_fast(&y, &x, &w, u)?;
                y = yn;
                w = wn;
                if !(y.norm() + w.norm() < ROLLOUT_BOUND) {
                    return Err(Error::Divergence { time: k as f64, context: "fast lifted state" });
                }
                window.push((y.clone(), w.clone()));
            }
            x = self.step_slow(&x, &window, m)?;
            if !(x.norm() < ROLLOUT_BOUND) {
                return Err(Error::Divergence { time: (k + 1) as f64, context: "slow lifted state" });
            }
            fast.extend(window);
            slow.push(x.clone());
        }
        Ok(LiftedTrajectory { m, slow, fast })
    }

    fn check_vectors(&self, x: &Vector, y: &Vector, w: &Vector, u: &Vector) -> Result<()> {
        check_dim("ψ_x", self.dims.x, x.len())?;
        check_dim("ψ_y", self.dims.y, y.len())?;
        check_dim("ψ_w", self.dims.w, w.len())?;
        check_dim("ψ_u", self.dims.u, u.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedState {
    pub x: Vector,
    pub y: Vector,
    pub w: Vector,
}

#[derive(Debug, Clone)]
pub struct LiftedTrajectory {
    pub m: usize,
    /// ψ_x at every slow step, starting with the initial state.
    pub slow: Vec<Vector>,
    /// (ψ_y, ψ_w) at every fast step, starting with the initial state.
    pub fast: Vec<(Vector, Vector)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    FromPi,
    FromLqr,
}

/// Slow-scale model obtained by replacing the fast variables with their fixed point:
/// `ψ_x' = B_xx ψ_x + B_xu ψ_u + b_x`, `ψ_y* = B_yx ψ_x + B_yu ψ_u + b_y`, likewise for `ψ_w*`.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitModel {
    pub provenance: Provenance,
    pub b_xx: Mat,
    pub b_xu: Mat,
    pub b_x: Vector,
    pub b_yx: Mat,
    pub b_yu: Mat,
    pub b_y: Vector,
    pub b_wx: Mat,
    pub b_wu: Mat,
    pub b_w: Vector,
}

impl LimitModel {
    /// The collapsed slow transition, called `K_comb,xx` for the time-scale-separated form.
    pub fn k_comb_xx(&self) -> &Mat {
        &self.b_xx
    }

    pub fn step(&self, psi_x: &Vector, psi_u: &Vector) -> Vector {
        &self.b_xx * psi_x + &self.b_xu * psi_u + &self.b_x
    }

    pub fn fast_equilibrium(&self, psi_x: &Vector, psi_u: &Vector) -> (Vector, Vector) {
        (
            &self.b_yx * psi_x + &self.b_yu * psi_u + &self.b_y,
            &self.b_wx * psi_x + &self.b_wu * psi_u + &self.b_w,
        )
    }

    fn slow_rows(model: &KoopmanBlocks, provenance: Provenance, fast: FastEquilibrium) -> LimitModel {
        let ex = Mat::identity(model.dims.x, model.dims.x) - &model.k_xx;
        let FastEquilibrium { yx, yu, y0, wx, wu, w0 } = fast;
        LimitModel {
            provenance,
            b_xx: &model.k_xx + &ex * (&model.k_xw * &wx + &model.k_xy * &yx),
            b_xu: &ex * (&model.k_xw * &wu + &model.k_xy * &yu),
            b_x: &ex * (&model.k_xw * &w0 + &model.k_xy * &y0),
            b_yx: yx,
            b_yu: yu,
            b_y: y0,
            b_wx: wx,
            b_wu: wu,
            b_w: w0,
        }
    }
}

struct FastEquilibrium {
    yx: Mat,
    yu: Mat,
    y0: Vector,
    wx: Mat,
    wu: Mat,
    w0: Vector,
}

/// `K_comb,xx = K_xx + (I − K_xx) K_xy K_yx`, valid when `K_yy` is stable.
pub fn tss_limit(model: &KoopmanBlocks) -> Result<LimitModel> {
    if model.form != ModelForm::Tss {
        return Err(Error::WrongForm("tss_limit"));
    }
    let radius = spectral_radius(&model.k_yy);
    if !(radius < 1.0) {
        return Err(Error::UnstableBlock { block: "K_yy", radius });
    }
    let d = model.dims;
    Ok(LimitModel::slow_rows(
        model,
        Provenance::FromPi,
        FastEquilibrium {
            yx: model.k_yx.clone(),
            yu: Mat::zeros(d.y, 0),
            y0: Vector::zeros(d.y),
            wx: Mat::zeros(0, d.x),
            wu: Mat::zeros(0, 0),
            w0: Vector::zeros(0),
        },
    ))
}

/// Affine feedback `ψ_w = −F ψ_y − (D_x ψ_x + D_u ψ_u + d_0)` replacing the actuator update.
#[derive(Debug, Clone, Copy)]
pub struct Feedback<'a> {
    pub f: &'a Mat,
    pub d_x: &'a Mat,
    pub d_u: &'a Mat,
    pub d_0: &'a Vector,
}

/// Collapses the joint fast subsystem of a hierarchical or combined model to its
/// fixed point, with the learned actuator blocks or with an LQR feedback law.
pub fn combined_limit(model: &KoopmanBlocks, feedback: Option<Feedback<'_>>) -> Result<LimitModel> {
    if !model.form.has_actuator() {
        return Err(Error::WrongForm("combined_limit"));
    }
    model.validate()?;
    let d = model.dims;
    let fm = model.fast_map();
    let fast = match feedback {
        None => {
            let j = fm.closed_block();
            let radius = spectral_radius(&j);
            if !(radius < 1.0) {
                return Err(Error::UnstableBlock { block: "closed fast block", radius });
            }
            let n = d.y + d.w;
            let lhs = Mat::identity(n, n) - j;
            let rhs_x = block(&[&[&fm.yx], &[&fm.wx]]);
            let rhs_u = block(&[&[&Mat::zeros(d.y, d.u)], &[&fm.wu]]);
            let rhs = block(&[&[&rhs_x, &rhs_u]]);
            let sol = solve(&lhs, &rhs, "fast fixed point")?;
            FastEquilibrium {
                yx: sol.view((0, 0), (d.y, d.x)).into_owned(),
                yu: sol.view((0, d.x), (d.y, d.u)).into_owned(),
                y0: Vector::zeros(d.y),
                wx: sol.view((d.y, 0), (d.w, d.x)).into_owned(),
                wu: sol.view((d.y, d.x), (d.w, d.u)).into_owned(),
                w0: Vector::zeros(d.w),
            }
        }
        Some(fb) => {
            check_dim("feedback gain rows", d.w, fb.f.nrows())?;
            check_dim("feedback gain cols", d.y, fb.f.ncols())?;
            let a_cl = &fm.yy - &fm.yw * fb.f;
            let radius = spectral_radius(&a_cl);
            if !(radius < 1.0) {
                return Err(Error::UnstableBlock { block: "LQR closed fast block", radius });
            }
            let lhs = Mat::identity(d.y, d.y) - a_cl;
            let rhs_x = &fm.yx - &fm.yw * fb.d_x;
            let rhs_u = -(&fm.yw * fb.d_u);
            let rhs_0 = -(&fm.yw * fb.d_0);
            let rhs = block(&[&[&rhs_x, &rhs_u, &Mat::from_column_slice(d.y, 1, rhs_0.as_slice())]]);
            let sol = solve(&lhs, &rhs, "LQR fast fixed point")?;
            let yx = sol.columns(0, d.x).into_owned();
            let yu = sol.columns(d.x, d.u).into_owned();
            let y0 = Vector::from_column_slice(sol.column(d.x + d.u).as_slice());
            let wx = -(fb.f * &yx + fb.d_x);
            let wu = -(fb.f * &yu + fb.d_u);
            let w0 = -(fb.f * &y0 + fb.d_0);
            FastEquilibrium { yx, yu, y0, wx, wu, w0 }
        }
    };
    let provenance = if feedback.is_some() { Provenance::FromLqr } else { Provenance::FromPi };
    Ok(LimitModel::slow_rows(model, provenance, fast))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TSS: LiftedDims = LiftedDims { x: 3, y: 4, w: 0, u: 0 };
    const COMB: LiftedDims = LiftedDims { x: 3, y: 4, w: 2, u: 1 };

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vector {
        Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn form_dims_checked() {
        assert!(KoopmanBlocks::zeros(ModelForm::Tss, COMB).is_err());
        assert!(KoopmanBlocks::zeros(ModelForm::Hier, COMB).is_err());
        assert!(KoopmanBlocks::zeros(ModelForm::Combined, TSS).is_err());
    }

    #[test]
    fn fast_fixed_point_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = KoopmanBlocks::random(ModelForm::Tss, TSS, 0.9, &mut rng).unwrap();
        let x = rand_vec(3, &mut rng);
        let y = &m.k_yx * &x;
        let (next, _) = m.step_fast(&y, &x, &Vector::zeros(0), &Vector::zeros(0)).unwrap();
        assert!((next - y).amax() < 1e-15);
    }

    #[test]
    fn zero_k_yy_collapses_in_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = KoopmanBlocks::random(ModelForm::Tss, TSS, 0.9, &mut rng).unwrap();
        m.k_yy.fill(0.0);
        let x = rand_vec(3, &mut rng);
        let (next, _) = m.step_fast(&rand_vec(4, &mut rng), &x, &Vector::zeros(0), &Vector::zeros(0)).unwrap();
        assert!((next - &m.k_yx * &x).amax() < 1e-15);
    }

    #[test]
    fn fast_steps_match_matrix_power_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = KoopmanBlocks::random(ModelForm::Tss, TSS, 0.95, &mut rng).unwrap();
        let x = rand_vec(3, &mut rng);
        let y0 = rand_vec(4, &mut rng);
        let mut y = y0.clone();
        for _ in 0..200 {
            y = m.step_fast(&y, &x, &Vector::zeros(0), &Vector::zeros(0)).unwrap().0;
        }
        // y_n − y* = K_yy^n (y_0 − y*)
        let eq = &m.k_yx * &x;
        let expected = m.k_yy.pow(200) * (&y0 - &eq) + &eq;
        assert!((y - expected).amax() < 1e-10);
    }

    #[test]
    fn decoupled_slow_step_is_k_xx() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = KoopmanBlocks::random(ModelForm::Combined, COMB, 0.9, &mut rng).unwrap();
        m.k_xy.fill(0.0);
        let x = rand_vec(3, &mut rng);
        let window: Vec<_> = (0..5).map(|_| (rand_vec(4, &mut rng), rand_vec(2, &mut rng))).collect();
        let next = m.step_slow(&x, &window, 5).unwrap();
        assert!((next - &m.k_xx * &x).amax() < 1e-15);
        assert!(m.step_slow(&x, &window, 4).is_err());
    }

    #[test]
    fn slow_step_matches_written_out_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = KoopmanBlocks::random(ModelForm::Tss, TSS, 0.9, &mut rng).unwrap();
        let x = rand_vec(3, &mut rng);
        let window: Vec<_> = (0..7).map(|_| (rand_vec(4, &mut rng), Vector::zeros(0))).collect();
        let mean = window.iter().fold(Vector::zeros(4), |a, (y, _)| a + y) / 7.0;
        let expected = &m.k_xx * &x - &m.k_xx * &m.k_xy * &mean + &m.k_xy * &mean;
        let got = m.step_slow(&x, &window, 7).unwrap();
        assert!((got - expected).amax() < 1e-13);
    }

    #[test]
    fn one_step_rollout_composes_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = KoopmanBlocks::random(ModelForm::Combined, COMB, 0.9, &mut rng).unwrap();
        let init = LiftedState { x: rand_vec(3, &mut rng), y: rand_vec(4, &mut rng), w: rand_vec(2, &mut rng) };
        let u = rand_vec(1, &mut rng);
        let traj = m.rollout(&init, std::slice::from_ref(&u), 10).unwrap();
        let (mut y, mut w) = (init.y.clone(), init.w.clone());
        let mut window = Vec::new();
        for _ in 0..10 {
            let (yn, wn) = m.step_fast(&y, &init.x, &w, &u).unwrap();
            y = yn;
            w = wn;
            window.push((y.clone(), w.clone()));
        }
        assert_eq!(traj.slow[1], m.step_slow(&init.x, &window, 10).unwrap());
        assert_eq!(traj.fast.len(), 11);
        assert_eq!(traj.fast[10], window[9]);
    }

    #[test]
    fn zero_state_rollout_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = KoopmanBlocks::random(ModelForm::Combined, COMB, 0.9, &mut rng).unwrap();
        let init = LiftedState { x: Vector::zeros(3), y: Vector::zeros(4), w: Vector::zeros(2) };
        let traj = m.rollout(&init, &vec![Vector::zeros(1); 3], 5).unwrap();
        assert!(traj.slow.iter().all(|x| x.amax() == 0.0));
    }

    #[test]
    fn effective_maps_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = KoopmanBlocks::random(ModelForm::Combined, COMB, 0.9, &mut rng).unwrap();
        let back = KoopmanBlocks::from_maps(m.form, m.dims, &m.fast_map(), &m.slow_map()).unwrap();
        for ((name, a), (_, b)) in m.blocks().into_iter().zip(back.blocks()) {
            assert!((a - b).amax() < 1e-12, "{name}");
        }
    }

    #[test]
    fn tss_limit_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = KoopmanBlocks::random(ModelForm::Tss, TSS, 0.9, &mut rng).unwrap();
        let kxy = m.k_xy.clone();
        m.k_xy.fill(0.0);
        assert_eq!(tss_limit(&m).unwrap().b_xx, m.k_xx);
        m.k_xy = kxy;
        m.k_xx.fill(0.0);
        let lim = tss_limit(&m).unwrap();
        assert!((lim.b_xx - &m.k_xy * &m.k_yx).amax() < 1e-15);
    }

    #[test]
    fn tss_limit_refuses_unstable_fast_block() {
        let mut m = KoopmanBlocks::zeros(ModelForm::Tss, TSS).unwrap();
        m.k_yy = Mat::identity(4, 4) * 1.01;
        assert!(matches!(tss_limit(&m), Err(Error::UnstableBlock { .. })));
    }

    #[test]
    fn decoupled_combined_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = KoopmanBlocks::random(ModelForm::Combined, COMB, 0.9, &mut rng).unwrap();
        m.k_yw.fill(0.0);
        m.k_wy.fill(0.0);
        let lim = combined_limit(&m, None).unwrap();
        assert!((&lim.b_yx - &m.k_yx).amax() < 1e-12);
        assert!((&lim.b_wx - &m.k_wx).amax() < 1e-12);
        assert!((&lim.b_wu - &m.k_wu).amax() < 1e-12);
        assert!(lim.b_yu.amax() < 1e-12);
    }

    #[test]
    fn combined_limit_satisfies_fixed_point_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = KoopmanBlocks::random(ModelForm::Combined, COMB, 0.9, &mut rng).unwrap();
        let lim = combined_limit(&m, None).unwrap();
        let ry = &lim.b_yx - &m.k_yx - &m.k_yw * &lim.b_wx;
        let rw = &lim.b_wx - &m.k_wx - &m.k_wy * &lim.b_yx;
        let ru = &lim.b_wu - &m.k_wu - &m.k_wy * &lim.b_yu;
        assert!(ry.amax().max(rw.amax()).max(ru.amax()) < 1e-10);
    }

    #[test]
    fn feedback_limit_satisfies_policy_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = KoopmanBlocks::random(ModelForm::Combined, COMB, 0.9, &mut rng).unwrap();
        let f = Mat::from_fn(2, 4, |_, _| rng.gen_range(-0.1..0.1));
        let d_x = Mat::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0));
        let d_u = Mat::from_fn(2, 1, |_, _| rng.gen_range(-1.0..1.0));
        let d_0 = rand_vec(2, &mut rng);
        let lim = combined_limit(&m, Some(Feedback { f: &f, d_x: &d_x, d_u: &d_u, d_0: &d_0 })).unwrap();
        assert_eq!(lim.provenance, Provenance::FromLqr);
        let x = rand_vec(3, &mut rng);
        let u = rand_vec(1, &mut rng);
        let (y, w) = lim.fast_equilibrium(&x, &u);
        let y_res = &y - (&m.k_yx * &x + &m.k_yw * &w);
        let w_res = &w + (&f * &y + &d_x * &x + &d_u * &u + &d_0);
        assert!(y_res.amax().max(w_res.amax()) < 1e-10);
    }
}
