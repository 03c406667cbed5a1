//! Dataset generation and joint training of liftings and Koopman blocks.

mod adam;
pub mod dataset;
pub mod loss;
pub mod params;
pub mod stabilize;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchmark::{Trajectory, Variant};
use crate::cost::{CostQuadratic, Group};
use crate::error::{Error, Result};
use crate::koopman::{KoopmanModel, LiftingSpec};
use crate::linalg::{spectral_radius, Mat};
use crate::lqr::{solve_bellman, LqrPolicy};
use crate::model::{KoopmanBlocks, LiftedDims};

pub use adam::Adam;
pub use dataset::{generate_dataset, simulate_batch, Batch, Dataset, NormalizationStats};
pub use loss::{bellman_penalty, lqr_consistency_loss, prediction_loss, PredictionLoss};
pub use params::Params;
pub use stabilize::{enforce_limit, limit_radius, project, stabilize, stabilize_maps, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub prediction: f64,
    /// Riccati residual penalty.
    pub lqr_solve: f64,
    /// ψ_w consistency of the LQR actuation.
    pub consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            prediction: 1.0,
            lqr_solve: 1.0,
            consistency: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the lifting networks.
    pub learning_rate: f64,
    /// Learning rate of the block entries.
    pub block_learning_rate: f64,
    pub weights: LossWeights,
    /// Stability margin: governed spectral radii are kept at or below `1 − delta`.
    pub delta: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub lifting: LiftingSpec,
    /// Use `ψ_w(w) = w` instead of a learned actuator lifting.
    pub identity_psi_w: bool,
    /// Least-squares initialization of the state rows.
    pub warm_start: bool,
    /// Half-width of the uniform initialization of non-state block entries.
    pub coupling_init: f64,
    /// Weight, relative to the actuator weight, on the nonlinear ψ_w entries in the LQR cost.
    pub lqr_ridge: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            block_learning_rate: 1e-4,
            weights: LossWeights::default(),
            delta: 1e-4,
            seed: 0,
            validation_fraction: 0.1,
            lifting: LiftingSpec::default(),
            identity_psi_w: false,
            warm_start: true,
            coupling_init: 1e-2,
            lqr_ridge: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if ![w.prediction, w.lqr_solve, w.consistency].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if !(self.delta > 0.0 && self.delta < 0.1) {
            return Err(Error::config("delta must lie in (0, 0.1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        for lr in [self.learning_rate, self.block_learning_rate] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::config("learning rates must be finite and non-negative"));
            }
        }
        if !(0.0..0.9).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction must lie in [0, 0.9)"));
        }
        if !(self.coupling_init.is_finite() && self.coupling_init >= 0.0) {
            return Err(Error::config("coupling_init must be finite and non-negative"));
        }
        if !(self.lqr_ridge.is_finite() && self.lqr_ridge > 0.0) {
            return Err(Error::config("lqr_ridge must be positive"));
        }
        Ok(())
    }
}

/// Riemann approximation of the actuator-loop cost `(y₁ − u)² + w²` over one
/// fast step of length `tau`, with a small ridge on the nonlinear ψ_w entries
/// so the Bellman Hessian stays positive definite.
pub fn lqr_cost(dims: LiftedDims, ridge: f64, tau: f64) -> CostQuadratic {
    let mut cost = CostQuadratic::zeros(dims);
    cost.add_diagonal(Group::Y, 0, tau);
    if dims.u > 0 {
        cost.add_diagonal(Group::U, 0, tau);
        let (ou, oy) = (cost.offset(Group::U), cost.offset(Group::Y));
        cost.q[(ou, oy)] -= tau;
        cost.q[(oy, ou)] -= tau;
    }
    for i in 0..dims.w {
        cost.add_diagonal(Group::W, i, if i == 0 { tau } else { ridge * tau });
    }
    cost
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub fast_y: f64,
    pub fast_w: f64,
    pub slow: f64,
    pub consistency: f64,
    pub bellman: f64,
    pub val_loss: f64,
    pub rho_xx: f64,
    pub rho_yy: f64,
    pub rho_fast: f64,
    pub rho_limit: f64,
    pub projections: usize,
    pub shrinks: usize,
    pub lqr_ok: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,fast_y,fast_w,slow,consistency,bellman,val_loss,rho_xx,rho_yy,rho_fast,rho_limit,projections,shrinks,lqr_ok";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{},{},{},{},{},{}",
                r.epoch,
                r.train_loss,
                r.fast_y,
                r.fast_w,
                r.slow,
                r.consistency,
                r.bellman,
                r.val_loss,
                r.rho_xx,
                r.rho_yy,
                r.rho_fast,
                r.rho_limit,
                r.projections,
                r.shrinks,
                r.lqr_ok
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: KoopmanModel,
    pub log: TrainLog,
    /// Epoch whose parameters were kept (lowest validation loss); 0 is the initialization.
    pub best_epoch: usize,
    pub validation: Vec<usize>,
}

fn lstsq(ata: &Mat, atb: &Mat) -> Result<Mat> {
    let n = ata.nrows();
    let ridge = 1e-10 * ata.trace().max(1.0) / n.max(1) as f64;
    let lhs = ata + Mat::identity(n, n) * ridge;
    crate::linalg::solve(&lhs, atb, "least-squares normal equations")
}

fn accumulate(ata: &mut Mat, atb: &mut Mat, feat: &[f64], target: &[f64]) {
    for i in 0..feat.len() {
        for j in 0..feat.len() {
            ata[(i, j)] += feat[i] * feat[j];
        }
        for j in 0..target.len() {
            atb[(i, j)] += feat[i] * target[j];
        }
    }
}

/// Initializes the blocks: state rows from least squares on the physical
/// states, stable diagonal for the nonlinear observables, and small random
/// couplings elsewhere so the observables receive gradient.
fn warm_start<R: Rng>(p: &mut Params, variant: Variant, data: &[&Trajectory], init: f64, rng: &mut R) -> Result<()> {
    let mut fill = |m: &mut Mat, diag: bool| {
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                m[(r, c)] = if diag && r == c { 0.5 } else { rng.gen_range(-init..=init) };
            }
        }
    };
    fill(&mut p.fast.yy, true);
    fill(&mut p.fast.yw, false);
    fill(&mut p.fast.yx, false);
    fill(&mut p.fast.wy, false);
    fill(&mut p.fast.ww, true);
    fill(&mut p.fast.wx, false);
    fill(&mut p.fast.wu, false);
    fill(&mut p.slow.xx, true);
    fill(&mut p.slow.xy, false);
    fill(&mut p.slow.xw, false);
    p.mask_structural();

    let (slow, act) = (variant.has_slow(), variant.has_actuator());
    // y' ~ [y, w, x]; w' ~ [w, y, u]; x' ~ [x, ȳ]
    let ny_feat = 2 + usize::from(act) + if slow { 2 } else { 0 };
    let mut y_ata = Mat::zeros(ny_feat, ny_feat);
    let mut y_atb = Mat::zeros(ny_feat, 2);
    let mut w_ata = Mat::zeros(4, 4);
    let mut w_atb = Mat::zeros(4, 1);
    let mut x_ata = Mat::zeros(4, 4);
    let mut x_atb = Mat::zeros(4, 2);
    for t in data {
        let s0 = &t.samples[0];
        for pair in t.samples.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let mut feat = vec![a.y[0], a.y[1]];
            if act {
                feat.push(a.w);
            }
            if slow {
                feat.extend_from_slice(&a.x);
            }
            accumulate(&mut y_ata, &mut y_atb, &feat, &b.y);
            if act {
                accumulate(&mut w_ata, &mut w_atb, &[a.w, a.y[0], a.y[1], a.u], &[b.w]);
            }
        }
        if slow {
            let m = t.samples.len() - 1;
            let mut y_bar = [0.0; 2];
            for s in &t.samples[1..] {
                y_bar[0] += s.y[0] / m as f64;
                y_bar[1] += s.y[1] / m as f64;
            }
            accumulate(&mut x_ata, &mut x_atb, &[s0.x[0], s0.x[1], y_bar[0], y_bar[1]], &t.samples[m].x);
        }
    }
    let sol = lstsq(&y_ata, &y_atb)?;
    for r in 0..2 {
        let mut k = 0;
        for c in 0..2 {
            p.fast.yy[(r, c)] = sol[(k, r)];
            k += 1;
        }
        if act {
            p.fast.yw[(r, 0)] = sol[(k, r)];
            k += 1;
        }
        if slow {
            for c in 0..2 {
                p.fast.yx[(r, c)] = sol[(k + c, r)];
            }
        }
    }
    if act {
        let sol = lstsq(&w_ata, &w_atb)?;
        p.fast.ww[(0, 0)] = sol[(0, 0)];
        p.fast.wy[(0, 0)] = sol[(1, 0)];
        p.fast.wy[(0, 1)] = sol[(2, 0)];
        p.fast.wu[(0, 0)] = sol[(3, 0)];
    }
    if slow {
        let sol = lstsq(&x_ata, &x_atb)?;
        for r in 0..2 {
            for c in 0..2 {
                p.slow.xx[(r, c)] = sol[(c, r)];
                p.slow.xy[(r, c)] = sol[(2 + c, r)];
            }
        }
    }
    Ok(())
}

fn blocks_of(p: &Params) -> Result<KoopmanBlocks> {
    KoopmanBlocks::from_maps(p.form, p.dims(), &p.fast, &p.slow)
}

fn radius_or_zero(m: &Mat) -> f64 {
    if m.is_empty() {
        0.0
    } else {
        spectral_radius(m)
    }
}

/// Trains liftings and blocks jointly with Adam.
///
/// The first `validation_fraction` of a seeded shuffle is held out. After
/// every optimizer step the governed blocks are projected back inside the
/// stability margin, and after every epoch the slow coupling is shrunk until
/// the collapsed slow transition is inside the margin too. The parameters of
/// the epoch with the lowest validation loss are returned.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let variant = dataset.variant();
    if dataset.len() < 2 {
        return Err(Error::config("training needs at least two trajectories"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((dataset.len() as f64 * config.validation_fraction).round() as usize).min(dataset.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    let mut spec = config.lifting;
    if config.identity_psi_w {
        spec.w_nonlinear = 0;
    }
    let model = KoopmanModel::new(variant, &spec, &mut rng)?;
    let mut params = Params::from_model(&model);
    if config.warm_start {
        let refs: Vec<&Trajectory> = train_idx.iter().map(|&i| &dataset.trajectories[i]).collect();
        warm_start(&mut params, variant, &refs, config.coupling_init, &mut rng)?;
    }
    stabilize_maps(&mut params.fast, &mut params.slow, config.delta);
    enforce_limit(params.form, params.dims(), &params.fast, &mut params.slow, config.delta)?;

    let n_blocks = params.block_count();
    let lr: Vec<f64> = (0..params.len())
        .map(|i| if i < n_blocks { config.block_learning_rate } else { config.learning_rate })
        .collect();
    let mut opt = Adam::new(lr);
    let lqr_active = variant.has_actuator() && config.weights.consistency + config.weights.lqr_solve > 0.0;
    let cost = lqr_cost(params.dims(), config.lqr_ridge, dataset.grid.tau());

    let val_refs: Vec<&Trajectory> = val_idx.iter().map(|&i| &dataset.trajectories[i]).collect();
    let val_batch = if val_refs.is_empty() { None } else { Some(Batch::new(variant, &val_refs)?) };
    let evaluate = |p: &Params, policy: Option<&LqrPolicy>| -> Result<f64> {
        let Some(batch) = &val_batch else { return Ok(0.0) };
        let mut l = config.weights.prediction * prediction_loss(p, batch, None)?.total();
        if let Some(pol) = policy {
            l += config.weights.consistency * lqr_consistency_loss(p, pol, batch, None)?;
        }
        Ok(l)
    };

    let mut log = TrainLog::default();
    let solve_policy = |p: &Params| -> Option<LqrPolicy> {
        if !lqr_active {
            return None;
        }
        match blocks_of(p).and_then(|b| solve_bellman(&b, &cost)) {
            Ok(pol) => Some(pol),
            Err(e) => {
                log::warn!("LQR solve failed, LQR terms skipped this epoch: {e}");
                None
            }
        }
    };
    let initial_policy = solve_policy(&params);
    let mut best = (evaluate(&params, initial_policy.as_ref())?, params.clone(), 0usize);

    for epoch in 1..=config.epochs {
        let policy = solve_policy(&params);
        train_idx.shuffle(&mut rng);
        let mut rec = EpochRecord {
            epoch,
            lqr_ok: policy.is_some() || !lqr_active,
            ..Default::default()
        };
        let mut n_batches = 0usize;
        for chunk in train_idx.chunks(config.batch_size) {
            let refs: Vec<&Trajectory> = chunk.iter().map(|&i| &dataset.trajectories[i]).collect();
            let batch = Batch::new(variant, &refs)?;
            let mut g_pred = params.zeros_like();
            let pl = prediction_loss(&params, &batch, Some(&mut g_pred))?;
            let mut grad = g_pred.to_flat();
            grad.iter_mut().for_each(|v| *v *= config.weights.prediction);
            let mut total = config.weights.prediction * pl.total();
            rec.fast_y += pl.fast_y;
            rec.fast_w += pl.fast_w;
            rec.slow += pl.slow;
            if let Some(pol) = &policy {
                if config.weights.consistency > 0.0 {
                    let mut g = params.zeros_like();
                    let l = lqr_consistency_loss(&params, pol, &batch, Some(&mut g))?;
                    rec.consistency += l;
                    total += config.weights.consistency * l;
                    for (a, b) in grad.iter_mut().zip(g.to_flat()) {
                        *a += config.weights.consistency * b;
                    }
                }
                if config.weights.lqr_solve > 0.0 {
                    let mut g = params.zeros_like();
                    let l = bellman_penalty(&params, pol, &cost, Some(&mut g))?;
                    rec.bellman += l;
                    total += config.weights.lqr_solve * l;
                    for (a, b) in grad.iter_mut().zip(g.to_flat()) {
                        *a += config.weights.lqr_solve * b;
                    }
                }
            }
            if !total.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    reason: format!("non-finite loss or gradient (loss {total}) at batch {n_batches}"),
                });
            }
            rec.train_loss += total;
            let mut flat = params.to_flat();
            opt.step(&mut flat, &grad);
            params.set_flat(&flat);
            rec.projections += stabilize_maps(&mut params.fast, &mut params.slow, config.delta).len();
            n_batches += 1;
        }
        rec.shrinks = enforce_limit(params.form, params.dims(), &params.fast, &mut params.slow, config.delta)?;
        let nb = n_batches.max(1) as f64;
        for v in [
            &mut rec.train_loss,
            &mut rec.fast_y,
            &mut rec.fast_w,
            &mut rec.slow,
            &mut rec.consistency,
            &mut rec.bellman,
        ] {
            *v /= nb;
        }
        rec.val_loss = evaluate(&params, policy.as_ref())?;
        rec.rho_xx = radius_or_zero(&params.slow.xx);
        rec.rho_yy = radius_or_zero(&params.fast.yy);
        rec.rho_fast = radius_or_zero(&params.fast.closed_block());
        rec.rho_limit = limit_radius(params.form, params.dims(), &params.fast, &params.slow)?.unwrap_or(0.0);
        log::debug!(
            "epoch {epoch}: train {:.4e} val {:.4e} (fast_y {:.3e}, fast_w {:.3e}, slow {:.3e}, cons {:.3e})",
            rec.train_loss,
            rec.val_loss,
            rec.fast_y,
            rec.fast_w,
            rec.slow,
            rec.consistency
        );
        if !rec.val_loss.is_finite() {
            return Err(Error::Training { epoch, reason: "non-finite validation loss".into() });
        }
        if rec.val_loss < best.0 || val_batch.is_none() {
            best = (rec.val_loss, params.clone(), epoch);
        }
        log.records.push(rec);
    }
    let model = best.1.to_model()?;
    model.validate()?;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: best.2,
        validation: val_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{SystemConfig, TimeGrid};

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            lifting: LiftingSpec { x_nonlinear: 2, y_nonlinear: 2, w_nonlinear: 1, hidden: 4 },
            ..Default::default()
        }
    }

    fn tiny_data(variant: Variant) -> Dataset {
        let grid = TimeGrid { dt_slow: 0.1, m: 10, substeps: 2 };
        generate_dataset(&SystemConfig::new(variant), &grid, 64, 9).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { delta: 0.2, ..Default::default() };
        assert!(bad.validate().is_err());
        let mut bad = TrainConfig::default();
        bad.weights.consistency = -1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn lqr_cost_matches_tracking_objective() {
        let dims = LiftedDims { x: 0, y: 3, w: 2, u: 1 };
        let cost = lqr_cost(dims, 0.01, 0.5);
        let v = |s: &[f64]| crate::linalg::Vector::from_column_slice(s);
        let c = cost.evaluate(&v(&[0.3]), &v(&[2.0, 1.0]), &v(&[-0.4, 7.0, 1.0]), &v(&[])).unwrap();
        let want = 0.5 * ((-0.4f64 - 0.3).powi(2) + 4.0) + 0.005;
        assert!((c - want).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic_and_stable() {
        for variant in [Variant::TssOnly, Variant::HierOnly, Variant::Combined] {
            let data = tiny_data(variant);
            let cfg = tiny_config(3);
            let a = train(&data, &cfg).unwrap();
            let b = train(&data, &cfg).unwrap();
            assert_eq!(a.log, b.log);
            assert_eq!(a.model, b.model);
            let blocks = &a.model.blocks;
            let fm = blocks.fast_map();
            for m in [&blocks.k_xx, &blocks.k_yy, &fm.closed_block()] {
                assert!(radius_or_zero(m) <= 1.0 - cfg.delta + 1e-9);
            }
        }
    }

    #[test]
    fn training_reduces_loss() {
        let data = tiny_data(Variant::TssOnly);
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            block_learning_rate: 1e-3,
            ..tiny_config(10)
        };
        let out = train(&data, &cfg).unwrap();
        let first = out.log.records.first().unwrap().train_loss;
        let last = out.log.records.last().unwrap().train_loss;
        assert!(last < first, "{first} → {last}");
    }
}
