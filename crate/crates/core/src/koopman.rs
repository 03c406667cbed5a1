//! A learned model: structured Koopman blocks together with the liftings that
//! map benchmark states into the lifted coordinates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::benchmark::{ScaleState, Trajectory, Variant};
use crate::error::{Error, Result};
use crate::lifting::{LiftingMap, DEFAULT_HIDDEN};
use crate::linalg::Vector;
use crate::model::{KoopmanBlocks, LiftedDims, LiftedState, LimitModel, ModelForm, ROLLOUT_BOUND};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiftingSpec {
    pub x_nonlinear: usize,
    pub y_nonlinear: usize,
    pub w_nonlinear: usize,
    pub hidden: usize,
}

impl Default for LiftingSpec {
    fn default() -> Self {
        LiftingSpec {
            x_nonlinear: 12,
            y_nonlinear: 12,
            w_nonlinear: 4,
            hidden: DEFAULT_HIDDEN,
        }
    }
}

impl LiftingSpec {
    pub fn identity() -> Self {
        LiftingSpec {
            x_nonlinear: 0,
            y_nonlinear: 0,
            w_nonlinear: 0,
            hidden: 0,
        }
    }
}

pub fn form_of(variant: Variant) -> ModelForm {
    match variant {
        Variant::TssOnly => ModelForm::Tss,
        Variant::HierOnly => ModelForm::Hier,
        Variant::Combined => ModelForm::Combined,
    }
}

pub fn variant_of(form: ModelForm) -> Variant {
    match form {
        ModelForm::Tss => Variant::TssOnly,
        ModelForm::Hier => Variant::HierOnly,
        ModelForm::Combined => Variant::Combined,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    pub blocks: KoopmanBlocks,
    pub psi_x: LiftingMap,
    pub psi_y: LiftingMap,
    pub psi_w: LiftingMap,
}

impl KoopmanModel {
    /// Fresh model with randomly initialized liftings and zero blocks.
    pub fn new<R: Rng>(variant: Variant, spec: &LiftingSpec, rng: &mut R) -> Result<Self> {
        let psi_x = if variant.has_slow() {
            LiftingMap::new(2, spec.x_nonlinear, spec.hidden, rng)
        } else {
            LiftingMap::identity(0)
        };
        let psi_y = LiftingMap::new(2, spec.y_nonlinear, spec.hidden, rng);
        let psi_w = if variant.has_actuator() {
            LiftingMap::new(1, spec.w_nonlinear, spec.hidden, rng)
        } else {
            LiftingMap::identity(0)
        };
        let dims = LiftedDims {
            x: psi_x.output_dim(),
            y: psi_y.output_dim(),
            w: psi_w.output_dim(),
            u: usize::from(variant.has_actuator()),
        };
        let blocks = KoopmanBlocks::zeros(form_of(variant), dims)?;
        Ok(KoopmanModel { blocks, psi_x, psi_y, psi_w })
    }

    pub fn variant(&self) -> Variant {
        variant_of(self.blocks.form)
    }

    pub fn dims(&self) -> LiftedDims {
        self.blocks.dims
    }

    pub fn validate(&self) -> Result<()> {
        self.blocks.validate()?;
        let d = self.blocks.dims;
        let v = self.variant();
        let want = [
            (self.psi_x.output_dim(), d.x, if v.has_slow() { 2 } else { 0 }, self.psi_x.input_dim()),
            (self.psi_y.output_dim(), d.y, 2, self.psi_y.input_dim()),
            (self.psi_w.output_dim(), d.w, if v.has_actuator() { 1 } else { 0 }, self.psi_w.input_dim()),
        ];
        for (out, dim, input, found_input) in want {
            if out != dim || input != found_input {
                return Err(Error::format("lifting dimensions do not match the Koopman blocks"));
            }
        }
        if d.u != usize::from(v.has_actuator()) {
            return Err(Error::format("ψ_u must be the scalar control"));
        }
        Ok(())
    }

    pub fn lift_x(&self, x: &[f64; 2]) -> Vector {
        if self.variant().has_slow() {
            self.psi_x.lift(x).expect("ψ_x input width is 2")
        } else {
            Vector::zeros(0)
        }
    }

    pub fn lift_y(&self, y: &[f64; 2]) -> Vector {
        self.psi_y.lift(y).expect("ψ_y input width is 2")
    }

    pub fn lift_w(&self, w: f64) -> Vector {
        if self.variant().has_actuator() {
            self.psi_w.lift(&[w]).expect("ψ_w input width is 1")
        } else {
            Vector::zeros(0)
        }
    }

    pub fn lift_u(&self, u: f64) -> Vector {
        if self.variant().has_actuator() {
            Vector::from_element(1, u)
        } else {
            Vector::zeros(0)
        }
    }

    pub fn lift(&self, s: &ScaleState) -> LiftedState {
        LiftedState {
            x: self.lift_x(&s.x),
            y: self.lift_y(&s.y),
            w: self.lift_w(s.w),
        }
    }

    /// Lifted-space prediction with the multirate (`ε > 0`) model, sampled at slow instants.
    pub fn predict_full(&self, s0: &ScaleState, controls: &[f64], m: usize) -> Result<Prediction> {
        let us: Vec<Vector> = controls.iter().map(|u| self.lift_u(*u)).collect();
        let traj = self.blocks.rollout(&self.lift(s0), &us, m)?;
        let mut p = Prediction::default();
        for k in 0..=controls.len() {
            let (y, w) = &traj.fast[k * m];
            p.push(&traj.slow[k], y, w);
        }
        Ok(p)
    }

    /// Prediction with the collapsed slow model; fast variables sit at their fixed point.
    pub fn predict_limit(&self, limit: &LimitModel, s0: &ScaleState, controls: &[f64]) -> Result<Prediction> {
        let init = self.lift(s0);
        let mut p = Prediction::default();
        p.push(&init.x, &init.y, &init.w);
        let mut x = init.x;
        for u in controls {
            let psi_u = self.lift_u(*u);
            x = limit.step(&x, &psi_u);
            if !(x.norm() < ROLLOUT_BOUND) {
                return Err(Error::Divergence { time: p.x.len() as f64, context: "collapsed model rollout" });
            }
            let (y, w) = limit.fast_equilibrium(&x, &psi_u);
            p.push(&x, &y, &w);
        }
        Ok(p)
    }

    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.blocks.form.name().as_bytes());
        for (_, b) in self.blocks.blocks() {
            h.update((b.nrows() as u64).to_le_bytes());
            h.update((b.ncols() as u64).to_le_bytes());
            for v in b.iter() {
                h.update(v.to_le_bytes());
            }
        }
        for map in [&self.psi_x, &self.psi_y, &self.psi_w] {
            let mut p = Vec::new();
            map.write_params(&mut p);
            h.update((map.input_dim() as u64).to_le_bytes());
            h.update((map.n_nonlinear() as u64).to_le_bytes());
            for v in p {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Predicted physical states (the state-inclusive prefixes) at slow instants.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Prediction {
    pub x: Vec<[f64; 2]>,
    pub y: Vec<[f64; 2]>,
    pub w: Vec<f64>,
}

impl Prediction {
    fn push(&mut self, x: &Vector, y: &Vector, w: &Vector) {
        let first2 = |v: &Vector| if v.len() >= 2 { [v[0], v[1]] } else { [0.0, 0.0] };
        self.x.push(first2(x));
        self.y.push(first2(y));
        self.w.push(if w.is_empty() { 0.0 } else { w[0] });
    }
}

/// Mean over trajectories of the per-trajectory RMS error of the slow (`x`) and
/// fast (`y`) states at slow instants `k = 1..n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPair {
    pub slow: f64,
    pub fast: f64,
}

pub fn trajectory_rms(pred: &Prediction, truth: &Trajectory) -> RmsPair {
    let mut sx = 0.0;
    let mut sy = 0.0;
    let n = truth.n_slow();
    for (k, s) in truth.slow_samples().enumerate().skip(1) {
        for c in 0..2 {
            sx += (pred.x[k][c] - s.x[c]).powi(2);
            sy += (pred.y[k][c] - s.y[c]).powi(2);
        }
    }
    let denom = (2 * n) as f64;
    RmsPair {
        slow: (sx / denom).sqrt(),
        fast: (sy / denom).sqrt(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsReport {
    /// Multirate model.
    pub full: RmsPair,
    /// Collapsed slow-scale model, when available.
    pub limit: Option<RmsPair>,
    pub trajectories: usize,
}

/// Evaluates prediction errors against ground-truth trajectories with constant control.
pub fn evaluate_rms(model: &KoopmanModel, limit: Option<&LimitModel>, truths: &[Trajectory]) -> Result<RmsReport> {
    let mut full = RmsPair { slow: 0.0, fast: 0.0 };
    let mut lim = RmsPair { slow: 0.0, fast: 0.0 };
    for truth in truths {
        let s0 = truth.samples[0];
        let controls = vec![s0.u; truth.n_slow()];
        let r = trajectory_rms(&model.predict_full(&s0, &controls, truth.m)?, truth);
        full.slow += r.slow;
        full.fast += r.fast;
        if let Some(l) = limit {
            let r = trajectory_rms(&model.predict_limit(l, &s0, &controls)?, truth);
            lim.slow += r.slow;
            lim.fast += r.fast;
        }
    }
    let n = truths.len().max(1) as f64;
    let scale = |p: RmsPair| RmsPair { slow: p.slow / n, fast: p.fast / n };
    Ok(RmsReport {
        full: scale(full),
        limit: limit.map(|_| scale(lim)),
        trajectories: truths.len(),
    })
}
