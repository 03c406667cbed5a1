//! Small dense linear-algebra helpers shared by the model, LQR and stability code.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;
pub type CMat = DMatrix<Complex64>;

/// Largest eigenvalue modulus. Empty matrices have radius 0.
pub fn spectral_radius(a: &Mat) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    if !a.iter().all(|v| v.is_finite()) {
        return f64::INFINITY;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn eigenvalues(a: &Mat) -> Vec<Complex64> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    a.complex_eigenvalues().iter().copied().collect()
}

pub fn sigma_max(a: &Mat) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.singular_values().max()
}

pub fn complex_singular_values(a: &CMat) -> Vec<f64> {
    a.clone().singular_values().iter().copied().collect()
}

/// Symmetric part `(A + Aᵀ)/2`.
pub fn sym(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

/// Solves `A X = B` by LU with partial pivoting, rejecting numerically singular `A`.
pub fn solve(a: &Mat, b: &Mat, context: &'static str) -> Result<Mat> {
    if a.nrows() == 0 {
        return Ok(Mat::zeros(0, b.ncols()));
    }
    let lu = a.clone().lu();
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let u = lu.u();
    let min_pivot = u.diagonal().iter().map(|d| d.abs()).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-13 * scale) {
        return Err(Error::Singular(context));
    }
    lu.solve(b).ok_or(Error::Singular(context))
}

pub fn solve_vec(a: &Mat, b: &Vector, context: &'static str) -> Result<Vector> {
    let m = solve(a, &Mat::from_column_slice(b.len(), 1, b.as_slice()), context)?;
    Ok(Vector::from_column_slice(m.as_slice()))
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_sym_eigenvalue(a: &Mat) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    sym(a).symmetric_eigenvalues().min()
}

pub fn max_abs(a: &Mat) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn all_finite(a: &Mat) -> bool {
    a.iter().all(|v| v.is_finite())
}

pub fn to_complex(a: &Mat) -> CMat {
    a.map(|v| Complex64::new(v, 0.0))
}

/// Stacks blocks row-major into one matrix; every block in a block-row must share its row count.
pub fn block(rows: &[&[&Mat]]) -> Mat {
    let nrows: usize = rows.iter().map(|r| r[0].nrows()).sum();
    let ncols: usize = rows[0].iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(nrows, ncols);
    let mut r0 = 0;
    for row in rows {
        let h = row[0].nrows();
        let mut c0 = 0;
        for b in row.iter() {
            debug_assert_eq!(b.nrows(), h);
            out.view_mut((r0, c0), (h, b.ncols())).copy_from(*b);
            c0 += b.ncols();
        }
        r0 += h;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_radius_of_rotation_scaled() {
        let a = Mat::from_row_slice(2, 2, &[0.0, -0.5, 0.5, 0.0]);
        assert!((spectral_radius(&a) - 0.5).abs() < 1e-12);
        assert_eq!(spectral_radius(&Mat::zeros(0, 0)), 0.0);
    }

    #[test]
    fn solve_detects_singularity() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(
            solve(&a, &Mat::identity(2, 2), "test"),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn block_assembles_in_order() {
        let a = Mat::from_element(1, 1, 1.0);
        let b = Mat::from_element(1, 2, 2.0);
        let c = Mat::from_element(1, 1, 3.0);
        let d = Mat::from_element(1, 2, 4.0);
        let m = block(&[&[&a, &b], &[&c, &d]]);
        assert_eq!(m, Mat::from_row_slice(2, 3, &[1.0, 2.0, 2.0, 3.0, 4.0, 4.0]));
    }
}
