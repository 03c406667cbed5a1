//! Simulated training and evaluation data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::{integrate, ScaleState, SystemConfig, TimeGrid, Trajectory, Variant};
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Redraws allowed per trajectory before giving up.
const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub system: SystemConfig,
    pub grid: TimeGrid,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
    /// Initial conditions redrawn because the integration diverged.
    pub resampled: usize,
}

/// Per-coordinate mean and standard deviation over every recorded sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    /// Order: x₁, x₂, y₁, y₂, w, u.
    pub mean: [f64; 6],
    pub std: [f64; 6],
}

impl Dataset {
    pub fn variant(&self) -> Variant {
        self.system.variant
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn stats(&self) -> NormalizationStats {
        let mut sum = [0.0; 6];
        let mut sq = [0.0; 6];
        let mut n = 0usize;
        for s in self.trajectories.iter().flat_map(|t| t.samples.iter()) {
            let v = [s.x[0], s.x[1], s.y[0], s.y[1], s.w, s.u];
            for i in 0..6 {
                sum[i] += v[i];
                sq[i] += v[i] * v[i];
            }
            n += 1;
        }
        let n = n.max(1) as f64;
        let mean = sum.map(|v| v / n);
        let mut std = [0.0; 6];
        for i in 0..6 {
            std[i] = (sq[i] / n - mean[i] * mean[i]).max(0.0).sqrt();
        }
        NormalizationStats { mean, std }
    }
}

/// Uniform draw from the `[−1, 1]` hypercube of the variant's free coordinates.
/// The control is drawn too (constant per trajectory) when the variant has one.
pub fn sample_initial<R: Rng>(variant: Variant, rng: &mut R) -> ScaleState {
    let mut draw = || rng.gen_range(-1.0..=1.0);
    let mut s = ScaleState::default();
    if variant.has_slow() {
        s.x = [draw(), draw()];
    }
    s.y = [draw(), draw()];
    if variant.has_actuator() {
        s.w = draw();
        s.u = draw();
    }
    s
}

/// Simulates `n` trajectories of `n_slow` slow steps from random initial
/// conditions under constant random control. Each trajectory index owns an
/// independent random stream, so results do not depend on thread scheduling.
pub fn simulate_batch(
    system: &SystemConfig,
    grid: &TimeGrid,
    n: usize,
    n_slow: usize,
    seed: u64,
) -> Result<(Vec<Trajectory>, usize)> {
    system.validate()?;
    grid.validate()?;
    let results: Vec<Result<(Trajectory, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            for redraw in 0..MAX_REDRAWS {
                let s0 = sample_initial(system.variant, &mut rng);
                match integrate(&s0, &vec![s0.u; n_slow], grid, n_slow, system) {
                    Ok(t) => return Ok((t, redraw)),
                    Err(Error::Divergence { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::config(format!("trajectory {i}: every initial condition diverged")))
        })
        .collect();
    let mut trajectories = Vec::with_capacity(n);
    let mut resampled = 0;
    for r in results {
        let (t, redraws) = r?;
        resampled += redraws;
        trajectories.push(t);
    }
    if resampled > 0 {
        log::info!("{resampled} diverging initial conditions were redrawn");
    }
    Ok((trajectories, resampled))
}

/// Training data: one slow step per trajectory with every fast sample recorded.
/// The hierarchical-only variant keeps just the first fast step.
pub fn generate_dataset(system: &SystemConfig, grid: &TimeGrid, n_traj: usize, seed: u64) -> Result<Dataset> {
    let (mut trajectories, resampled) = simulate_batch(system, grid, n_traj, 1, seed)?;
    if system.variant == Variant::HierOnly {
        for t in &mut trajectories {
            t.samples.truncate(2);
        }
    }
    Ok(Dataset {
        system: *system,
        grid: *grid,
        seed,
        trajectories,
        resampled,
    })
}

/// Row-stacked view of a set of trajectories for batched training.
///
/// Fast samples are stacked by time: row `j·b + i` holds sample `j` of trajectory `i`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub b: usize,
    /// Fast steps per trajectory.
    pub m: usize,
    pub x0: Mat,
    pub x1: Mat,
    pub y: Mat,
    pub w: Mat,
    pub u: Mat,
}

impl Batch {
    pub fn new(variant: Variant, trajectories: &[&Trajectory]) -> Result<Self> {
        let b = trajectories.len();
        let m = trajectories.first().map_or(0, |t| t.samples.len() - 1);
        if b == 0 || m == 0 {
            return Err(Error::config("a batch needs at least one trajectory with two samples"));
        }
        if trajectories.iter().any(|t| t.samples.len() != m + 1) {
            return Err(Error::config("batch trajectories differ in length"));
        }
        let nx = if variant.has_slow() { 2 } else { 0 };
        let nw = usize::from(variant.has_actuator());
        let mut batch = Batch {
            b,
            m,
            x0: Mat::zeros(b, nx),
            x1: Mat::zeros(b, nx),
            y: Mat::zeros((m + 1) * b, 2),
            w: Mat::zeros((m + 1) * b, nw),
            u: Mat::zeros(b, nw),
        };
        for (i, t) in trajectories.iter().enumerate() {
            let (first, last) = (&t.samples[0], &t.samples[m]);
            for c in 0..nx {
                batch.x0[(i, c)] = first.x[c];
                batch.x1[(i, c)] = last.x[c];
            }
            if nw > 0 {
                batch.u[(i, 0)] = first.u;
            }
            for (j, s) in t.samples.iter().enumerate() {
                batch.y[(j * b + i, 0)] = s.y[0];
                batch.y[(j * b + i, 1)] = s.y[1];
                if nw > 0 {
                    batch.w[(j * b + i, 0)] = s.w;
                }
            }
        }
        Ok(batch)
    }
}
