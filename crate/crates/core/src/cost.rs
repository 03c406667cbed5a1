//! Block-quadratic running costs over the lifted variables.
//!
//! The cost is `zᵀ Q z + cᵀ z + c₀` with `z = [ψ_u ; ψ_w ; ψ_y ; ψ_x]`. `Q` is
//! stored whole, so an off-diagonal pair `Q_wy`, `Q_yw` need not be transposes
//! of each other.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{block, Mat, Vector};
use crate::model::{LiftedDims, LimitModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    U,
    W,
    Y,
    X,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::U, Group::W, Group::Y, Group::X];
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostQuadratic {
    pub dims: LiftedDims,
    pub q: Mat,
    pub c: Vector,
    pub c0: f64,
}

impl CostQuadratic {
    pub fn zeros(dims: LiftedDims) -> Self {
        let n = dims.u + dims.w + dims.y + dims.x;
        CostQuadratic {
            dims,
            q: Mat::zeros(n, n),
            c: Vector::zeros(n),
            c0: 0.0,
        }
    }

    pub fn total_dim(&self) -> usize {
        self.q.nrows()
    }

    fn width(&self, g: Group) -> usize {
        match g {
            Group::U => self.dims.u,
            Group::W => self.dims.w,
            Group::Y => self.dims.y,
            Group::X => self.dims.x,
        }
    }

    pub fn offset(&self, g: Group) -> usize {
        Group::ALL.iter().take_while(|h| **h != g).map(|h| self.width(*h)).sum()
    }

    pub fn q_block(&self, i: Group, j: Group) -> Mat {
        self.q
            .view((self.offset(i), self.offset(j)), (self.width(i), self.width(j)))
            .into_owned()
    }

    pub fn set_q_block(&mut self, i: Group, j: Group, value: &Mat) {
        let (r, c) = (self.offset(i), self.offset(j));
        self.q.view_mut((r, c), (self.width(i), self.width(j))).copy_from(value);
    }

    pub fn c_block(&self, g: Group) -> Vector {
        self.c.rows(self.offset(g), self.width(g)).into_owned()
    }

    pub fn set_c_block(&mut self, g: Group, value: &Vector) {
        let at = self.offset(g);
        self.c.rows_mut(at, self.width(g)).copy_from(value);
    }

    /// Adds `weight` to the diagonal entry for component `index` of group `g`.
    pub fn add_diagonal(&mut self, g: Group, index: usize, weight: f64) {
        let at = self.offset(g) + index;
        self.q[(at, at)] += weight;
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dims.u + self.dims.w + self.dims.y + self.dims.x;
        check_dim("cost quadratic rows", n, self.q.nrows())?;
        check_dim("cost quadratic cols", n, self.q.ncols())?;
        check_dim("cost linear term", n, self.c.len())?;
        if !self.q.iter().chain(self.c.iter()).all(|v| v.is_finite()) || !self.c0.is_finite() {
            return Err(Error::NonFinite("cost"));
        }
        for g in Group::ALL {
            let d = self.q_block(g, g);
            if (&d - d.transpose()).amax() > 1e-12 * (1.0 + d.amax()) {
                return Err(Error::format(format!("diagonal cost block {g:?} is not symmetric")));
            }
        }
        Ok(())
    }

    fn stack(&self, u: &Vector, w: &Vector, y: &Vector, x: &Vector) -> Result<Vector> {
        check_dim("cost ψ_u", self.dims.u, u.len())?;
        check_dim("cost ψ_w", self.dims.w, w.len())?;
        check_dim("cost ψ_y", self.dims.y, y.len())?;
        check_dim("cost ψ_x", self.dims.x, x.len())?;
        let mut z = Vector::zeros(self.total_dim());
        for (g, v) in Group::ALL.into_iter().zip([u, w, y, x]) {
            let at = self.offset(g);
            z.rows_mut(at, v.len()).copy_from(v);
        }
        Ok(z)
    }

    pub fn evaluate(&self, u: &Vector, w: &Vector, y: &Vector, x: &Vector) -> Result<f64> {
        let z = self.stack(u, w, y, x)?;
        Ok(z.dot(&(&self.q * &z)) + self.c.dot(&z) + self.c0)
    }

    /// Multiplies every coefficient by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        CostQuadratic {
            dims: self.dims,
            q: &self.q * alpha,
            c: &self.c * alpha,
            c0: self.c0 * alpha,
        }
    }

    /// Substitutes an affine map `z = S r + s` with `r` the new variables.
    pub fn substitute(&self, dims: LiftedDims, s: &Mat, s0: &Vector) -> CostQuadratic {
        let q = s.transpose() * &self.q * s;
        let c = s.transpose() * ((&self.q + self.q.transpose()) * s0 + &self.c);
        let c0 = s0.dot(&(&self.q * s0)) + self.c.dot(s0) + self.c0;
        CostQuadratic { dims, q, c, c0 }
    }

    /// Stable hash of the coefficients, used to tie policy files to their cost.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for d in [self.dims.u, self.dims.w, self.dims.y, self.dims.x] {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.q.iter().chain(self.c.iter()).chain(std::iter::once(&self.c0)) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Folds the fast fixed point of `limit` into `cost`, leaving a cost over `(ψ_u, ψ_x)` only.
pub fn collapse_cost(cost: &CostQuadratic, limit: &LimitModel) -> Result<CostQuadratic> {
    cost.validate()?;
    let d = cost.dims;
    check_dim("limit ψ_y rows", d.y, limit.b_yx.nrows())?;
    check_dim("limit ψ_w rows", d.w, limit.b_wx.nrows())?;
    check_dim("limit ψ_x cols", d.x, limit.b_yx.ncols())?;
    check_dim("limit ψ_u cols", d.u, limit.b_yu.ncols())?;
    let s = block(&[
        &[&Mat::identity(d.u, d.u), &Mat::zeros(d.u, d.x)],
        &[&limit.b_wu, &limit.b_wx],
        &[&limit.b_yu, &limit.b_yx],
        &[&Mat::zeros(d.x, d.u), &Mat::identity(d.x, d.x)],
    ]);
    let mut s0 = Vector::zeros(cost.total_dim());
    s0.rows_mut(d.u, d.w).copy_from(&limit.b_w);
    s0.rows_mut(d.u + d.w, d.y).copy_from(&limit.b_y);
    let reduced = LiftedDims { x: d.x, y: 0, w: 0, u: d.u };
    Ok(cost.substitute(reduced, &s, &s0))
}
