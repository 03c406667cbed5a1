//! Trainable parameters in the affine (effective) parameterization.
//!
//! Training updates `FastMap`/`SlowMap` entries rather than raw Koopman
//! blocks: the map `K ↦ (I − K)·K_coupling` is badly conditioned when a
//! diagonal block sits close to the unit circle, as the slow actuator does.

use crate::error::Result;
use crate::koopman::KoopmanModel;
use crate::lifting::LiftingMap;
use crate::linalg::Mat;
use crate::model::{FastMap, KoopmanBlocks, LiftedDims, ModelForm, SlowMap};

#[derive(Debug, Clone)]
pub struct Params {
    pub form: ModelForm,
    pub fast: FastMap,
    pub slow: SlowMap,
    pub psi_x: LiftingMap,
    pub psi_y: LiftingMap,
    pub psi_w: LiftingMap,
}

impl Params {
    pub fn from_model(model: &KoopmanModel) -> Self {
        Params {
            form: model.blocks.form,
            fast: model.blocks.fast_map(),
            slow: model.blocks.slow_map(),
            psi_x: model.psi_x.clone(),
            psi_y: model.psi_y.clone(),
            psi_w: model.psi_w.clone(),
        }
    }

    pub fn to_model(&self) -> Result<KoopmanModel> {
        let blocks = KoopmanBlocks::from_maps(self.form, self.dims(), &self.fast, &self.slow)?;
        Ok(KoopmanModel {
            blocks,
            psi_x: self.psi_x.clone(),
            psi_y: self.psi_y.clone(),
            psi_w: self.psi_w.clone(),
        })
    }

    pub fn dims(&self) -> LiftedDims {
        LiftedDims {
            x: self.psi_x.output_dim(),
            y: self.psi_y.output_dim(),
            w: self.psi_w.output_dim(),
            u: self.fast.wu.ncols(),
        }
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Mat| Mat::zeros(m.nrows(), m.ncols());
        Params {
            form: self.form,
            fast: FastMap {
                yy: z(&self.fast.yy),
                yw: z(&self.fast.yw),
                yx: z(&self.fast.yx),
                wy: z(&self.fast.wy),
                ww: z(&self.fast.ww),
                wx: z(&self.fast.wx),
                wu: z(&self.fast.wu),
            },
            slow: SlowMap {
                xx: z(&self.slow.xx),
                xy: z(&self.slow.xy),
                xw: z(&self.slow.xw),
            },
            psi_x: self.psi_x.zeros_like(),
            psi_y: self.psi_y.zeros_like(),
            psi_w: self.psi_w.zeros_like(),
        }
    }

    fn matrices(&self) -> [&Mat; 10] {
        let (f, s) = (&self.fast, &self.slow);
        [&f.yy, &f.yw, &f.yx, &f.wy, &f.ww, &f.wx, &f.wu, &s.xx, &s.xy, &s.xw]
    }

    fn matrices_mut(&mut self) -> [&mut Mat; 10] {
        let (f, s) = (&mut self.fast, &mut self.slow);
        [
            &mut f.yy, &mut f.yw, &mut f.yx, &mut f.wy, &mut f.ww, &mut f.wx, &mut f.wu, &mut s.xx, &mut s.xy,
            &mut s.xw,
        ]
    }

    /// Number of block entries; they come first in the flat layout.
    pub fn block_count(&self) -> usize {
        self.matrices().iter().map(|m| m.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.block_count() + self.psi_x.param_count() + self.psi_y.param_count() + self.psi_w.param_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for m in self.matrices() {
            out.extend_from_slice(m.as_slice());
        }
        self.psi_x.write_params(&mut out);
        self.psi_y.write_params(&mut out);
        self.psi_w.write_params(&mut out);
        out
    }

    pub fn set_flat(&mut self, src: &[f64]) {
        assert_eq!(src.len(), self.len(), "flat parameter length");
        let mut at = 0;
        for m in self.matrices_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&src[at..at + n]);
            at += n;
        }
        at += self.psi_x.read_params(&src[at..]);
        at += self.psi_y.read_params(&src[at..]);
        self.psi_w.read_params(&src[at..]);
    }

    /// Zeroes entries that the form fixes structurally. Applied to gradients
    /// so those entries never move.
    pub fn mask_structural(&mut self) {
        if self.form == ModelForm::Combined {
            self.fast.wx.fill(0.0);
            self.slow.xw.fill(0.0);
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &Params) {
        let mut a = self.to_flat();
        for (x, y) in a.iter_mut().zip(other.to_flat()) {
            *x += alpha * y;
        }
        self.set_flat(&a);
    }
}

impl From<&KoopmanModel> for Params {
    fn from(model: &KoopmanModel) -> Self {
        Params::from_model(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::Variant;
    use crate::koopman::LiftingSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = KoopmanModel::new(Variant::Combined, &LiftingSpec::default(), &mut rng).unwrap();
        let mut p = Params::from_model(&model);
        let flat: Vec<f64> = (0..p.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        p.set_flat(&flat);
        assert_eq!(p.to_flat(), flat);
        assert_eq!(p.fast.yy[(1, 0)], flat[1]);
    }

    #[test]
    fn model_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = KoopmanModel::new(Variant::TssOnly, &LiftingSpec::default(), &mut rng).unwrap();
        model.blocks = KoopmanBlocks::random(ModelForm::Tss, model.dims(), 0.8, &mut rng).unwrap();
        let back = Params::from_model(&model).to_model().unwrap();
        for ((_, a), (_, b)) in model.blocks.blocks().iter().zip(back.blocks.blocks().iter()) {
            assert!((*a - *b).amax() < 1e-12);
        }
    }
}
