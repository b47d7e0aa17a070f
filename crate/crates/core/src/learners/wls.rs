//! Weighted least squares via orthogonal decomposition of the weighted
//! design matrix. Rank-deficient systems get the minimum-norm solution and
//! a degeneracy flag instead of an error: tiny training subsamples are a
//! normal part of the subsampling estimators.

use nalgebra::{DMatrix, DVector};

use super::TrainingSet;

/// Relative rank tolerance against the largest singular value.
const RANK_RTOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct WlsFit {
    /// Coefficients; the intercept (if any) comes first.
    pub coef: Vec<f64>,
    pub intercept: bool,
    pub degenerate: bool,
}

impl WlsFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut acc;
        let slope = if self.intercept {
            acc = self.coef[0];
            &self.coef[1..]
        } else {
            acc = 0.0;
            &self.coef[..]
        };
        for (b, v) in slope.iter().zip(x) {
            acc += b * v;
        }
        acc
    }
}

/// Solve min_b sum_i w_i (y_i - x_i^T b)^2 by SVD of the row-scaled design
/// matrix, singular values below RANK_RTOL * s_max zeroed.
pub fn wls_fit(ts: &TrainingSet, intercept: bool) -> WlsFit {
    let m = ts.len();
    let p = ts.dim() + usize::from(intercept);
    let mut design = DMatrix::zeros(m, p);
    let mut rhs = DVector::zeros(m);
    for i in 0..m {
        let sw = ts.w(i).sqrt();
        let mut j = 0;
        if intercept {
            design[(i, 0)] = sw;
            j = 1;
        }
        for v in ts.row(i) {
            design[(i, j)] = sw * v;
            j += 1;
        }
        rhs[i] = sw * ts.y(i);
    }

    let svd = design.svd(true, true);
    let s_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    if s_max == 0.0 {
        // all-zero design: predict 0 everywhere, flagged
        return WlsFit {
            coef: vec![0.0; p],
            intercept,
            degenerate: true,
        };
    }
    let tol = RANK_RTOL * s_max;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    let sol = svd
        .solve(&rhs, tol)
        .expect("SVD solve cannot fail when both factors are requested");
    WlsFit {
        coef: sol.iter().copied().collect(),
        intercept,
        degenerate: rank < p,
    }
}
