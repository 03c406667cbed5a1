//! Resolvent-based stability measures for discrete-time transition matrices.
//!
//! Suprema and infima over the complex plane are taken on a deterministic grid
//! followed by local refinement around the best grid cells, so the reported
//! transient-growth bound is always attained at some probed point.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{complex_singular_values, sigma_max, spectral_radius, to_complex, CMat, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Angular intervals on each circle.
    pub angular: usize,
    /// Log-spaced radial intervals on `1 < |z| ≤ R_max`.
    pub radial: usize,
    pub refine_levels: usize,
    /// Number of grid-local extrema refined.
    pub candidates: usize,
    /// Keep refining past `refine_levels` until the stencil step falls below
    /// `1e-8` of the grid spacing.
    pub polish: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            angular: 256,
            radial: 64,
            refine_levels: 3,
            candidates: 6,
            polish: true,
        }
    }
}

impl GridConfig {
    pub fn doubled(&self) -> Self {
        GridConfig {
            angular: self.angular * 2,
            radial: self.radial * 2,
            ..*self
        }
    }

    fn validate(&self) -> Result<()> {
        if self.angular < 4 || self.radial < 2 {
            return Err(Error::config("stability grid needs at least 4 angular and 2 radial intervals"));
        }
        Ok(())
    }
}

const REFINE_FACTOR: f64 = 4.0;
/// Half-width (in stencil steps) of the local refinement stencil.
const STENCIL: i32 = 4;
/// 4^14 ≈ 2.7e8.
const POLISH_LEVELS: usize = 14;

fn square(a: &Mat) -> Result<()> {
    check_dim("square matrix", a.nrows(), a.ncols())?;
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("stability input"));
    }
    Ok(())
}

/// `ln σ_max(A)`; the zero matrix gives `-inf`.
pub fn max_initial_growth(a: &Mat) -> Result<f64> {
    square(a)?;
    Ok(sigma_max(a).ln())
}

fn shifted(a: &CMat, z: Complex64) -> CMat {
    let mut m = -a;
    for i in 0..m.nrows() {
        m[(i, i)] += z;
    }
    m
}

/// `σ_min(zI − A)` from the singular values of the shifted matrix.
pub fn sigma_min_svd(a: &Mat, z: Complex64) -> f64 {
    sigma_min_c(&to_complex(a), z)
}

fn sigma_min_c(a: &CMat, z: Complex64) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    complex_singular_values(&shifted(a, z))
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

/// `1 / ‖(zI − A)⁻¹‖₂`, computed through an explicit inverse.
pub fn sigma_min_via_inverse(a: &Mat, z: Complex64) -> f64 {
    let m = shifted(&to_complex(a), z);
    match m.try_inverse() {
        Some(inv) => {
            let top = complex_singular_values(&inv).into_iter().fold(0.0, f64::max);
            1.0 / top
        }
        None => 0.0,
    }
}

/// Scalar objective on a 2-D parameter box, searched by grid plus refinement.
trait Objective: Sync {
    fn eval(&self, p: [f64; 2]) -> f64;
}

/// Finds the largest value of `obj` over the tensor grid `axes[0] × axes[1]`,
/// then refines around the best grid-local maxima. `wrap[k]` marks a periodic axis.
fn grid_max<O: Objective>(obj: &O, axes: [&[f64]; 2], wrap: [bool; 2], grid: &GridConfig) -> f64 {
    let (n0, n1) = (axes[0].len(), axes[1].len());
    let values: Vec<f64> = (0..n0 * n1)
        .into_par_iter()
        .map(|k| obj.eval([axes[0][k / n1], axes[1][k % n1]]))
        .collect();
    let at = |i: usize, j: usize| values[i * n1 + j];
    let mut best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let neighbour = |i: isize, n: usize, wrap: bool| -> Option<usize> {
        if wrap {
            Some(i.rem_euclid(n as isize) as usize)
        } else if i < 0 || i >= n as isize {
            None
        } else {
            Some(i as usize)
        }
    };
    let mut local: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n0 {
        for j in 0..n1 {
            let v = at(i, j);
            let mut is_max = true;
            'scan: for di in -1..=1isize {
                for dj in -1..=1isize {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    if let (Some(a), Some(b)) = (
                        neighbour(i as isize + di, n0, wrap[0]),
                        neighbour(j as isize + dj, n1, wrap[1]),
                    ) {
                        if at(a, b) > v {
                            is_max = false;
                            break 'scan;
                        }
                    }
                }
            }
            if is_max {
                local.push((v, i, j));
            }
        }
    }
    local.sort_by(|a, b| b.0.total_cmp(&a.0));
    local.truncate(grid.candidates);

    let spacing = |axis: &[f64], i: usize| -> f64 {
        if axis.len() < 2 {
            return 0.0;
        }
        let lo = if i > 0 { axis[i] - axis[i - 1] } else { axis[1] - axis[0] };
        let hi = if i + 1 < axis.len() { axis[i + 1] - axis[i] } else { lo };
        lo.max(hi)
    };
    let bounds = [
        (axes[0][0], axes[0][n0 - 1]),
        (axes[1][0], axes[1][n1 - 1]),
    ];
    for (v, i, j) in local {
        let mut centre = [axes[0][i], axes[1][j]];
        let mut value = v;
        let mut step = [spacing(axes[0], i), spacing(axes[1], j)];
        let levels = if grid.polish {
            grid.refine_levels.max(POLISH_LEVELS)
        } else {
            grid.refine_levels
        };
        for _ in 0..levels {
            step = [step[0] / REFINE_FACTOR, step[1] / REFINE_FACTOR];
            // Re-centre until the incumbent is interior to the stencil (bounded number of moves).
            for _ in 0..64 {
                let mut moved = false;
                let mut best_here = (value, centre);
                let reach = step.map(|h| if h > 0.0 { STENCIL } else { 0 });
                for a in -reach[0]..=reach[0] {
                    for b in -reach[1]..=reach[1] {
                        if a == 0 && b == 0 {
                            continue;
                        }
                        let mut p = [centre[0] + a as f64 * step[0], centre[1] + b as f64 * step[1]];
                        let mut ok = true;
                        for k in 0..2 {
                            if !wrap[k] && (p[k] < bounds[k].0 || p[k] > bounds[k].1) {
                                ok = false;
                            }
                        }
                        if wrap[1] {
                            p[1] = p[1].rem_euclid(2.0 * PI);
                        }
                        if !ok {
                            continue;
                        }
                        let f = obj.eval(p);
                        if f > best_here.0 {
                            best_here = (f, p);
                            moved = (reach[0] > 0 && a.abs() == STENCIL) || (reach[1] > 0 && b.abs() == STENCIL);
                        }
                    }
                }
                value = best_here.0;
                centre = best_here.1;
                if !moved {
                    break;
                }
            }
        }
        best = best.max(value);
    }
    best
}

struct KreissObjective {
    a: CMat,
}

impl Objective for KreissObjective {
    /// p = (ln(|z| − 1), arg z)
    fn eval(&self, p: [f64; 2]) -> f64 {
        let s = p[0].exp();
        let z = Complex64::from_polar(1.0 + s, p[1]);
        s / sigma_min_c(&self.a, z)
    }
}

struct RadiusObjective {
    a: CMat,
}

impl Objective for RadiusObjective {
    /// Negated so the minimum of σ_min on the unit circle becomes a maximum; p = (unused, θ).
    fn eval(&self, p: [f64; 2]) -> f64 {
        -sigma_min_c(&self.a, Complex64::from_polar(1.0, p[1]))
    }
}

fn angles(n: usize) -> Vec<f64> {
    (0..n).map(|j| 2.0 * PI * j as f64 / n as f64).collect()
}

/// Lower bound on `sup_{|z|>1} (|z|−1)‖(zI − A)⁻¹‖₂`; `inf` when `ρ(A) ≥ 1`.
pub fn kreiss_lower_bound(a: &Mat, grid: &GridConfig) -> Result<f64> {
    square(a)?;
    grid.validate()?;
    if a.nrows() == 0 {
        return Ok(1.0);
    }
    let rho = spectral_radius(a);
    if !(rho < 1.0) {
        return Ok(f64::INFINITY);
    }
    let r_max = 10.0 * (1.0 + sigma_max(a));
    let s_hi = (r_max - 1.0).ln();
    let s_lo = (1e-2 * (1.0 - rho)).max(1e-12).ln();
    let radial: Vec<f64> = (0..=grid.radial)
        .map(|i| s_lo + (s_hi - s_lo) * i as f64 / grid.radial as f64)
        .collect();
    let obj = KreissObjective { a: to_complex(a) };
    let sup = grid_max(&obj, [&radial, &angles(grid.angular)], [false, true], grid);
    // The objective tends to 1 as |z| → ∞.
    Ok(sup.max(1.0))
}

/// `1 / sup_{|z|=1} ‖(zI − A)⁻¹‖₂ = min_θ σ_min(e^{iθ}I − A)`; zero when `ρ(A) ≥ 1`.
pub fn complex_stability_radius(a: &Mat, grid: &GridConfig) -> Result<f64> {
    square(a)?;
    grid.validate()?;
    if a.nrows() == 0 {
        return Ok(f64::INFINITY);
    }
    if !(spectral_radius(a) < 1.0) {
        return Ok(0.0);
    }
    let obj = RadiusObjective { a: to_complex(a) };
    let neg = grid_max(&obj, [&[0.0], &angles(grid.angular)], [false, true], grid);
    Ok((-neg).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub label: String,
    pub spectral_radius: f64,
    /// Natural log of `‖A‖₂`.
    pub log_norm: f64,
    pub kreiss_lb: f64,
    pub stability_radius: f64,
    pub grid: GridConfig,
}

impl StabilityReport {
    pub const CSV_HEADER: &'static str = "label,spectral_radius,log_norm,kreiss_lb,stability_radius,angular,radial,refine_levels";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{},{},{}",
            self.label,
            self.spectral_radius,
            self.log_norm,
            self.kreiss_lb,
            self.stability_radius,
            self.grid.angular,
            self.grid.radial,
            self.grid.refine_levels
        )
    }
}

pub fn analyze(label: &str, a: &Mat, grid: &GridConfig) -> Result<StabilityReport> {
    Ok(StabilityReport {
        label: label.to_string(),
        spectral_radius: spectral_radius(a),
        log_norm: max_initial_growth(a)?,
        kreiss_lb: kreiss_lower_bound(a, grid)?,
        stability_radius: complex_stability_radius(a, grid)?,
        grid: *grid,
    })
}

pub fn stability_table(matrices: &[(&str, &Mat)], grid: &GridConfig) -> Result<Vec<StabilityReport>> {
    matrices.iter().map(|(label, a)| analyze(label, a, grid)).collect()
}

/// Aligned text table with one column per matrix.
pub fn render_table(reports: &[StabilityReport]) -> String {
    let rows: [(&str, fn(&StabilityReport) -> f64); 3] = [
        ("max initial growth ln||A||", |r| r.log_norm),
        ("transient growth lower bound", |r| r.kreiss_lb),
        ("complex stability radius", |r| r.stability_radius),
    ];
    let mut out = format!("{:<30}", "");
    for r in reports {
        out.push_str(&format!("{:>14}", r.label));
    }
    out.push('\n');
    for (name, get) in rows {
        out.push_str(&format!("{name:<30}"));
        for r in reports {
            out.push_str(&format!("{:>14.4}", get(r)));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stable(n: usize, rng: &mut ChaCha8Rng) -> Mat {
        let a = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let rho = spectral_radius(&a);
        a * (rng.gen_range(0.3..0.95) / rho)
    }

    #[test]
    fn growth_of_scaled_identity() {
        let a = Mat::identity(2, 2) * 0.5;
        assert!((max_initial_growth(&a).unwrap() - 0.5f64.ln()).abs() < 1e-12);
        assert_eq!(max_initial_growth(&Mat::zeros(2, 2)).unwrap(), f64::NEG_INFINITY);
        assert!(max_initial_growth(&Mat::zeros(2, 3)).is_err());
    }

    #[test]
    fn growth_matches_power_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Mat::from_fn(10, 10, |_, _| rng.gen_range(-1.0..1.0));
        let ata = a.transpose() * &a;
        let mut v = crate::linalg::Vector::from_element(10, 1.0);
        for _ in 0..2000 {
            v = &ata * &v;
            v /= v.norm();
        }
        let sigma = (&a * &v).norm();
        assert!((max_initial_growth(&a).unwrap() - sigma.ln()).abs() < 1e-6);
    }

    #[test]
    fn normal_matrix_measures() {
        let a = Mat::identity(2, 2) * 0.5;
        let g = GridConfig::default();
        assert!((complex_stability_radius(&a, &g).unwrap() - 0.5).abs() < 1e-6);
        assert!((kreiss_lower_bound(&a, &g).unwrap() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn unstable_conventions() {
        let a = Mat::identity(2, 2) * 1.2;
        let g = GridConfig::default();
        assert_eq!(complex_stability_radius(&a, &g).unwrap(), 0.0);
        assert_eq!(kreiss_lower_bound(&a, &g).unwrap(), f64::INFINITY);
    }

    #[test]
    fn sigma_min_two_ways_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_stable(6, &mut rng);
        for k in 0..20 {
            let z = Complex64::from_polar(1.0 + 0.1 * k as f64, 0.7 * k as f64);
            let (s1, s2) = (sigma_min_svd(&a, z), sigma_min_via_inverse(&a, z));
            assert!((s1 - s2).abs() < 1e-8 * s1.max(1.0), "{s1} vs {s2}");
        }
    }

    #[test]
    fn jordan_block_matches_dense_scan() {
        let a = Mat::from_row_slice(2, 2, &[0.9, 1.0, 0.0, 0.9]);
        let lb = kreiss_lower_bound(&a, &GridConfig::default()).unwrap();
        // Dense brute force over 1000 radii × 1000 angles.
        let ca = to_complex(&a);
        let r_max = 10.0 * (1.0 + sigma_max(&a));
        let mut brute: f64 = 1.0;
        for i in 1..=1000 {
            let s = (1e-3f64.ln() + ((r_max - 1.0).ln() - 1e-3f64.ln()) * i as f64 / 1000.0).exp();
            for j in 0..1000 {
                let z = Complex64::from_polar(1.0 + s, 2.0 * PI * j as f64 / 1000.0);
                brute = brute.max(s / sigma_min_c(&ca, z));
            }
        }
        assert!((lb - brute).abs() / brute < 0.01, "{lb} vs {brute}");
        assert!(lb >= brute * (1.0 - 1e-12), "{lb} vs {brute}");
    }

    #[test]
    fn radius_matches_dense_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_stable(8, &mut rng);
        let r = complex_stability_radius(&a, &GridConfig::default()).unwrap();
        let ca = to_complex(&a);
        let dense = (0..100_000)
            .map(|j| sigma_min_c(&ca, Complex64::from_polar(1.0, 2.0 * PI * j as f64 / 1e5)))
            .fold(f64::INFINITY, f64::min);
        assert!((r - dense).abs() / dense < 1e-4, "{r} vs {dense}");
    }

    #[test]
    fn diagonal_table_is_analytic() {
        let a = Mat::from_diagonal(&crate::linalg::Vector::from_vec(vec![0.8, -0.3]));
        let reports = stability_table(&[("A", &a)], &GridConfig::default()).unwrap();
        let r = &reports[0];
        assert!((r.log_norm - 0.8f64.ln()).abs() < 1e-12);
        assert!((r.stability_radius - 0.2).abs() < 1e-6);
        assert!((r.kreiss_lb - 1.0).abs() < 1e-3);
        assert!(render_table(&reports).contains("complex stability radius"));
    }
}
