//! Thin dense linear-algebra layer over `faer`.

use faer::linalg::solvers::{Llt, Solve};
use faer::linalg::triangular_solve::{
    solve_lower_triangular_in_place, solve_upper_triangular_in_place,
};
use faer::{Mat, MatMut, MatRef, Par, Side};

use crate::GmrfError;

pub type Dense = Mat<f64>;

pub fn zeros(rows: usize, cols: usize) -> Dense {
    Mat::zeros(rows, cols)
}

fn col_mut(v: &mut [f64]) -> MatMut<'_, f64> {
    let n = v.len();
    MatMut::from_column_major_slice_mut(v, n, 1)
}

/// Lower Cholesky factor `A = L L'` of a symmetric positive-definite matrix.
pub struct Cholesky {
    llt: Llt<f64>,
    n: usize,
}

impl Cholesky {
    pub fn factor(a: &Dense) -> Result<Self, GmrfError> {
        let llt = a
            .llt(Side::Lower)
            .map_err(|_| GmrfError::NotPositiveDefinite)?;
        Ok(Self {
            llt,
            n: a.nrows(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn l(&self) -> MatRef<'_, f64> {
        self.llt.L()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.l();
        2.0 * (0..self.n).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// `b <- A^{-1} b`
    pub fn solve_in_place(&self, b: &mut [f64]) {
        self.llt.solve_in_place(col_mut(b));
    }

    pub fn solve_mat_in_place(&self, b: &mut Dense) {
        self.llt.solve_in_place(b.as_mut());
    }

    /// `z <- L^{-T} z`; maps standard normal `z` to a draw with covariance `A^{-1}`.
    pub fn solve_lt_in_place(&self, z: &mut [f64]) {
        solve_upper_triangular_in_place(self.l().transpose(), col_mut(z), Par::Seq);
    }

    /// `z <- L^{-1} z`
    pub fn solve_l_in_place(&self, z: &mut [f64]) {
        solve_lower_triangular_in_place(self.l(), col_mut(z), Par::Seq);
    }
}

/// Symmetric eigendecomposition, eigenvalues ascending.
pub fn symmetric_eigen(a: &Dense) -> Result<(Vec<f64>, Dense), GmrfError> {
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| GmrfError::Numerical("eigendecomposition failed".into()))?;
    let s = evd.S();
    let values = (0..a.nrows()).map(|i| s[i]).collect();
    Ok((values, evd.U().to_owned()))
}

pub fn quad_form(a: &Dense, x: &[f64]) -> f64 {
    let n = x.len();
    let mut total = 0.0;
    for j in 0..n {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        let col = a.col(j);
        let mut s = 0.0;
        for i in 0..n {
            s += col[i] * x[i];
        }
        total += s * xj;
    }
    total
}

pub fn mat_vec(a: &Dense, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.nrows()];
    for j in 0..a.ncols() {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        let col = a.col(j);
        for (i, o) in out.iter_mut().enumerate() {
            *o += col[i] * xj;
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
