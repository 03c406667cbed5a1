//! Spectral projection of the governed transition matrices.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{spectral_radius, Mat};
use crate::model::{combined_limit, tss_limit, FastMap, KoopmanBlocks, LiftedDims, ModelForm, SlowMap};

/// Relative margin kept below the unit circle for the actuator block alone so
/// that `I − K_ww` stays invertible; the joint fast block carries the real
/// stability requirement.
pub const ACTUATOR_MARGIN: f64 = 1e-6;

/// Radii this close above the cap count as on it, so projection is idempotent
/// under round-off.
const PROJECTION_SLACK: f64 = 1e-12;

/// Shrink factor applied to the slow coupling blocks per limit violation.
pub const COUPLING_SHRINK: f64 = 0.98;
const MAX_SHRINKS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub block: String,
    pub radius: f64,
}

/// Rescales `a` to spectral radius `1 − delta` when it exceeds that.
/// Returns the radius before rescaling when a projection happened.
pub fn project(a: &mut Mat, delta: f64) -> Option<f64> {
    if a.is_empty() {
        return None;
    }
    let rho = spectral_radius(a);
    let cap = 1.0 - delta;
    if rho > cap + PROJECTION_SLACK {
        *a *= cap / rho;
        Some(rho)
    } else {
        None
    }
}

/// Projects `K_xx` (= `xx`), `K_yy` (= `yy`), the joint fast block and, with a
/// tiny margin, the actuator block.
pub fn stabilize_maps(fast: &mut FastMap, slow: &mut SlowMap, delta: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    if let Some(r) = project(&mut slow.xx, delta) {
        out.push(Violation { block: "K_xx".into(), radius: r });
    }
    if let Some(r) = project(&mut fast.yy, delta) {
        out.push(Violation { block: "K_yy".into(), radius: r });
    }
    if let Some(r) = project(&mut fast.ww, ACTUATOR_MARGIN) {
        out.push(Violation { block: "K_ww".into(), radius: r });
    }
    if !fast.ww.is_empty() {
        let mut j = fast.closed_block();
        if let Some(r) = project(&mut j, delta) {
            let (ny, nw) = (fast.yy.nrows(), fast.ww.nrows());
            fast.yy = j.view((0, 0), (ny, ny)).into_owned();
            fast.yw = j.view((0, ny), (ny, nw)).into_owned();
            fast.wy = j.view((ny, 0), (nw, ny)).into_owned();
            fast.ww = j.view((ny, ny), (nw, nw)).into_owned();
            out.push(Violation { block: "closed fast block".into(), radius: r });
        }
    }
    out
}

/// [`stabilize_maps`] applied to Koopman blocks.
pub fn stabilize(blocks: &mut KoopmanBlocks, delta: f64) -> Result<Vec<Violation>> {
    let mut fast = blocks.fast_map();
    let mut slow = blocks.slow_map();
    let report = stabilize_maps(&mut fast, &mut slow, delta);
    if !report.is_empty() {
        *blocks = KoopmanBlocks::from_maps(blocks.form, blocks.dims, &fast, &slow)?;
    }
    Ok(report)
}

/// Spectral radius of the collapsed slow transition, if the form has one.
pub fn limit_radius(form: ModelForm, dims: LiftedDims, fast: &FastMap, slow: &SlowMap) -> Result<Option<f64>> {
    if !form.has_slow() {
        return Ok(None);
    }
    let blocks = KoopmanBlocks::from_maps(form, dims, fast, slow)?;
    let limit = if form.has_actuator() {
        combined_limit(&blocks, None)?
    } else {
        tss_limit(&blocks)?
    };
    Ok(Some(spectral_radius(limit.k_comb_xx())))
}

/// Shrinks the slow coupling blocks until the collapsed slow transition has
/// spectral radius at most `1 − delta`. Returns the number of shrink steps.
pub fn enforce_limit(form: ModelForm, dims: LiftedDims, fast: &FastMap, slow: &mut SlowMap, delta: f64) -> Result<usize> {
    let mut count = 0;
    while let Some(r) = limit_radius(form, dims, fast, slow)? {
        if r <= 1.0 - delta || count >= MAX_SHRINKS {
            break;
        }
        slow.xy *= COUPLING_SHRINK;
        slow.xw *= COUPLING_SHRINK;
        count += 1;
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rescales_to_margin() {
        let mut a = Mat::from_row_slice(2, 2, &[2.0, 1.0, 0.0, -1.0]);
        assert_eq!(project(&mut a, 0.01), Some(2.0));
        assert!((spectral_radius(&a) - 0.99).abs() < 1e-12);
    }

    #[test]
    fn stable_block_untouched() {
        let mut a = Mat::from_row_slice(2, 2, &[0.3, 0.7, -0.1, 0.2]);
        let before = a.clone();
        assert_eq!(project(&mut a, 0.01), None);
        assert_eq!(a, before);
    }

    #[test]
    fn governed_blocks_within_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dims = LiftedDims { x: 3, y: 4, w: 2, u: 1 };
        let mut blocks = KoopmanBlocks::random(ModelForm::Combined, dims, 0.9, &mut rng).unwrap();
        let mut fast = blocks.fast_map();
        let mut slow = blocks.slow_map();
        fast.yy *= 3.0;
        fast.wy *= 5.0;
        slow.xx *= 2.0;
        let v = stabilize_maps(&mut fast, &mut slow, 0.05);
        assert!(!v.is_empty());
        for m in [&slow.xx, &fast.yy, &fast.closed_block()] {
            assert!(spectral_radius(m) <= 0.95 + 1e-9);
        }
        blocks = KoopmanBlocks::from_maps(ModelForm::Combined, dims, &fast, &slow).unwrap();
        assert!(stabilize(&mut blocks, 0.05).unwrap().is_empty());
    }

    #[test]
    fn limit_enforcement_shrinks_coupling() {
        let dims = LiftedDims { x: 1, y: 1, w: 0, u: 0 };
        let fast = FastMap {
            yy: Mat::from_element(1, 1, 0.5),
            yw: Mat::zeros(1, 0),
            yx: Mat::from_element(1, 1, 1.0),
            wy: Mat::zeros(0, 1),
            ww: Mat::zeros(0, 0),
            wx: Mat::zeros(0, 1),
            wu: Mat::zeros(0, 0),
        };
        let mut slow = SlowMap {
            xx: Mat::from_element(1, 1, 0.9),
            xy: Mat::from_element(1, 1, 0.5),
            xw: Mat::zeros(1, 0),
        };
        // Collapsed transition is 0.9 + 0.5·1/(1 − 0.5) = 1.9.
        assert!(limit_radius(ModelForm::Tss, dims, &fast, &slow).unwrap().unwrap() > 1.0);
        let n = enforce_limit(ModelForm::Tss, dims, &fast, &mut slow, 0.01).unwrap();
        assert!(n > 0);
        assert!(limit_radius(ModelForm::Tss, dims, &fast, &slow).unwrap().unwrap() <= 0.99);
    }
}
