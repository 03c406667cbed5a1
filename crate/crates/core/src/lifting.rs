//! State-inclusive observables `ψ(v) = [v ; mlp(v)]`.
//!
//! The nonlinear part is a single tanh hidden layer followed by a linear output
//! layer. Batched evaluation works on row-major sample matrices (one sample per
//! row) so that training can use matrix-matrix products throughout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{Mat, Vector};

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct LiftingMap {
    input_dim: usize,
    /// hidden × input
    w1: Mat,
    b1: Vector,
    /// n_nonlinear × hidden
    w2: Mat,
    b2: Vector,
}

/// Hidden activations kept from a batched forward pass.
#[derive(Debug, Clone)]
pub struct LiftCache {
    hidden: Mat,
}

impl LiftingMap {
    /// Identity lifting with no nonlinear observables.
    pub fn identity(input_dim: usize) -> Self {
        Self::zeros(input_dim, 0, 0)
    }

    pub fn zeros(input_dim: usize, n_nonlinear: usize, hidden: usize) -> Self {
        let hidden = if n_nonlinear == 0 { 0 } else { hidden };
        LiftingMap {
            input_dim,
            w1: Mat::zeros(hidden, input_dim),
            b1: Vector::zeros(hidden),
            w2: Mat::zeros(n_nonlinear, hidden),
            b2: Vector::zeros(n_nonlinear),
        }
    }

    /// Fan-in scaled uniform first layer; the output layer starts at zero so the
    /// initial lifting is `[v ; 0]`.
    pub fn new<R: Rng>(input_dim: usize, n_nonlinear: usize, hidden: usize, rng: &mut R) -> Self {
        let mut map = Self::zeros(input_dim, n_nonlinear, hidden);
        let bound = 1.0 / (input_dim.max(1) as f64).sqrt();
        map.w1.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        map.b1.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        map
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_nonlinear(&self) -> usize {
        self.w2.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.input_dim + self.n_nonlinear()
    }

    pub fn is_identity(&self) -> bool {
        self.n_nonlinear() == 0
    }

    pub fn lift(&self, v: &[f64]) -> Result<Vector> {
        check_dim("lifting input", self.input_dim, v.len())?;
        let mut out = Vector::zeros(self.output_dim());
        out.rows_mut(0, self.input_dim).copy_from_slice(v);
        if !self.is_identity() {
            let vin = Vector::from_column_slice(v);
            let h = (&self.w1 * vin + &self.b1).map(f64::tanh);
            let o = &self.w2 * h + &self.b2;
            out.rows_mut(self.input_dim, self.n_nonlinear()).copy_from(&o);
        }
        Ok(out)
    }

    /// Lifts every row of `v` (batch × input_dim).
    pub fn lift_batch(&self, v: &Mat) -> Result<Mat> {
        Ok(self.forward_batch(v)?.0)
    }

    pub fn forward_batch(&self, v: &Mat) -> Result<(Mat, LiftCache)> {
        check_dim("lifting batch input", self.input_dim, v.ncols())?;
        let b = v.nrows();
        let mut out = Mat::zeros(b, self.output_dim());
        out.columns_mut(0, self.input_dim).copy_from(v);
        if self.is_identity() {
            return Ok((out, LiftCache { hidden: Mat::zeros(b, 0) }));
        }
        let mut z = v * self.w1.transpose();
        for (j, mut col) in z.column_iter_mut().enumerate() {
            let bias = self.b1[j];
            col.iter_mut().for_each(|e| *e = (*e + bias).tanh());
        }
        let mut o = &z * self.w2.transpose();
        for (j, mut col) in o.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.b2[j]);
        }
        out.columns_mut(self.input_dim, self.n_nonlinear()).copy_from(&o);
        Ok((out, LiftCache { hidden: z }))
    }

    /// Reverse pass of [`forward_batch`](Self::forward_batch).
    ///
    /// Accumulates parameter gradients into `grad` and returns the gradient with
    /// respect to the inputs.
    pub fn backward_batch(&self, v: &Mat, cache: &LiftCache, upstream: &Mat, grad: &mut LiftingMap) -> Mat {
        let mut dv = upstream.columns(0, self.input_dim).into_owned();
        if self.is_identity() {
            return dv;
        }
        let d_out = upstream.columns(self.input_dim, self.n_nonlinear());
        grad.w2 += d_out.transpose() * &cache.hidden;
        for j in 0..self.n_nonlinear() {
            grad.b2[j] += d_out.column(j).sum();
        }
        let mut dz = d_out * &self.w2;
        dz.zip_apply(&cache.hidden, |g, h| *g *= 1.0 - h * h);
        grad.w1 += dz.transpose() * v;
        for j in 0..self.hidden() {
            grad.b1[j] += dz.column(j).sum();
        }
        dv += dz * &self.w1;
        dv
    }

    /// `∂ψ/∂v` at a single point (output_dim × input_dim).
    pub fn jacobian(&self, v: &[f64]) -> Result<Mat> {
        check_dim("lifting input", self.input_dim, v.len())?;
        let mut jac = Mat::zeros(self.output_dim(), self.input_dim);
        jac.view_mut((0, 0), (self.input_dim, self.input_dim))
            .fill_with_identity();
        if !self.is_identity() {
            let vin = Vector::from_column_slice(v);
            let h = (&self.w1 * vin + &self.b1).map(f64::tanh);
            let mut dh = self.w1.clone();
            for (i, mut row) in dh.row_iter_mut().enumerate() {
                row *= 1.0 - h[i] * h[i];
            }
            let nl = &self.w2 * dh;
            jac.view_mut((self.input_dim, 0), (self.n_nonlinear(), self.input_dim))
                .copy_from(&nl);
        }
        Ok(jac)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim, self.n_nonlinear(), self.hidden())
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Appends parameters in a fixed order (w1, b1, w2, b2; column-major).
    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(self.b1.as_slice());
        out.extend_from_slice(self.w2.as_slice());
        out.extend_from_slice(self.b2.as_slice());
    }

    /// Reads parameters written by [`write_params`](Self::write_params); returns the count consumed.
    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut at = 0;
        for dst in [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ] {
            dst.copy_from_slice(&src[at..at + dst.len()]);
            at += dst.len();
        }
        at
    }

    /// Builds a map from its layer tensors, checking shapes, widths and finiteness.
    pub fn from_parts(input_dim: usize, w1: Mat, b1: Vector, w2: Mat, b2: Vector) -> Result<Self> {
        let (hidden, nl) = (w1.nrows(), w2.nrows());
        if input_dim > MAX_LAYER_WIDTH || nl > MAX_LAYER_WIDTH || hidden > MAX_LAYER_WIDTH {
            return Err(Error::format("layer width out of range"));
        }
        if (nl == 0) != (hidden == 0) {
            return Err(Error::format("hidden width must be zero exactly when there are no nonlinear observables"));
        }
        if w1.ncols() != input_dim || b1.len() != hidden || w2.ncols() != hidden || b2.len() != nl {
            return Err(Error::format("lifting layer shapes are inconsistent"));
        }
        let map = LiftingMap { input_dim, w1, b1, w2, b2 };
        let mut flat = Vec::new();
        map.write_params(&mut flat);
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("non-finite weight"));
        }
        Ok(map)
    }

    /// Layer tensors `(w1, b1, w2, b2)`.
    pub fn parts(&self) -> (&Mat, &Vector, &Mat, &Vector) {
        (&self.w1, &self.b1, &self.w2, &self.b2)
    }

    pub fn output_layer_mut(&mut self) -> (&mut Mat, &mut Vector) {
        (&mut self.w2, &mut self.b2)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&WeightsFile::from(self)).expect("weights serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: WeightsFile = serde_json::from_str(text)?;
        file.into_map()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    fn matrix(m: &Mat) -> Self {
        // Row-major in the file.
        Tensor {
            shape: vec![m.nrows(), m.ncols()],
            data: m.transpose().as_slice().to_vec(),
        }
    }

    fn vector(v: &Vector) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v.as_slice().to_vec(),
        }
    }

    fn to_matrix(&self, rows: usize, cols: usize, name: &str) -> Result<Mat> {
        if self.shape != [rows, cols] || self.data.len() != rows * cols {
            return Err(Error::format(format!(
                "tensor {name}: expected shape [{rows}, {cols}], found {:?} with {} values",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Mat::from_row_slice(rows, cols, &self.data))
    }

    fn to_vector(&self, len: usize, name: &str) -> Result<Vector> {
        if self.shape != [len] || self.data.len() != len {
            return Err(Error::format(format!("tensor {name}: expected shape [{len}]")));
        }
        Ok(Vector::from_column_slice(&self.data))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsFile {
    format_version: u32,
    activation: String,
    input_dim: usize,
    n_nonlinear: usize,
    hidden: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl From<&LiftingMap> for WeightsFile {
    fn from(m: &LiftingMap) -> Self {
        WeightsFile {
            format_version: WEIGHTS_FORMAT_VERSION,
            activation: "tanh".into(),
            input_dim: m.input_dim,
            n_nonlinear: m.n_nonlinear(),
            hidden: m.hidden(),
            w1: Tensor::matrix(&m.w1),
            b1: Tensor::vector(&m.b1),
            w2: Tensor::matrix(&m.w2),
            b2: Tensor::vector(&m.b2),
        }
    }
}

const MAX_LAYER_WIDTH: usize = 1 << 12;

impl WeightsFile {
    fn into_map(self) -> Result<LiftingMap> {
        if self.format_version != WEIGHTS_FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported weights format version {}",
                self.format_version
            )));
        }
        if self.activation != "tanh" {
            return Err(Error::format(format!("unsupported activation {}", self.activation)));
        }
        if self.input_dim > MAX_LAYER_WIDTH || self.n_nonlinear > MAX_LAYER_WIDTH || self.hidden > MAX_LAYER_WIDTH {
            return Err(Error::format("layer width out of range"));
        }
        LiftingMap::from_parts(
            self.input_dim,
            self.w1.to_matrix(self.hidden, self.input_dim, "w1")?,
            self.b1.to_vector(self.hidden, "b1")?,
            self.w2.to_matrix(self.n_nonlinear, self.hidden, "w2")?,
            self.b2.to_vector(self.n_nonlinear, "b2")?,
        )
    }
}
