use serde::{Deserialize, Serialize};

use super::design::Design;
use super::linalg::{cholesky_dropping, mat_vec, Matrix};

/// Pivots below this fraction of the leading pivot are treated as collinear.
pub const COLLINEARITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedFit {
    /// Retained design columns, in design order.
    pub columns: Vec<usize>,
    /// Coefficients aligned with `columns`.
    pub coefficients: Vec<f64>,
    /// Inverse of `(1/n) Xᵀ diag(w) X` over `columns`.
    pub gram_inverse: Matrix,
    pub dropped_columns: Vec<usize>,
}

impl RelaxedFit {
    /// Coefficients expanded to all `p` design columns.
    pub fn full_coefficients(&self, p: usize) -> Vec<f64> {
        let mut beta = vec![0.0; p];
        for (&j, &b) in self.columns.iter().zip(&self.coefficients) {
            beta[j] = b;
        }
        beta
    }
}

/// `(1/n) Xᵀ diag(w) X` over dense columns.
pub fn weighted_gram(cols: &[Vec<f64>], w: &[f64]) -> Matrix {
    let p = cols.len();
    let n = w.len();
    let mut g = vec![vec![0.0; p]; p];
    let weighted: Vec<Vec<f64>> = cols
        .iter()
        .map(|c| c.iter().zip(w).map(|(x, wi)| x * wi).collect())
        .collect();
    for j in 0..p {
        for k in 0..=j {
            let s: f64 = weighted[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
            g[j][k] = s / n as f64;
            g[k][j] = g[j][k];
        }
    }
    g
}

/// Weighted least squares of `y` on the `support` columns of `design`,
/// without an implicit intercept.
pub fn relaxed_ols(design: &Design, y: &[f64], weights: &[f64], support: &[usize]) -> RelaxedFit {
    let n = design.n;
    let cols: Vec<Vec<f64>> = support.iter().map(|&j| design.cols[j].to_dense(n)).collect();
    let g = weighted_gram(&cols, weights);
    let b: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().zip(weights).zip(y).map(|((x, w), yi)| x * w * yi).sum::<f64>() / n as f64)
        .collect();
    let ch = cholesky_dropping(&g, COLLINEARITY_TOL);
    let g_kept: Matrix = ch
        .kept
        .iter()
        .map(|&j| ch.kept.iter().map(|&k| g[j][k]).collect())
        .collect();
    let b_kept: Vec<f64> = ch.kept.iter().map(|&j| b[j]).collect();
    let mut beta = ch.solve(&b_kept);
    // one step of iterative refinement
    let gb = mat_vec(&g_kept, &beta);
    let r: Vec<f64> = b_kept.iter().zip(&gb).map(|(u, v)| u - v).collect();
    let delta = ch.solve(&r);
    for (bj, dj) in beta.iter_mut().zip(&delta) {
        *bj += dj;
    }
    RelaxedFit {
        columns: ch.kept.iter().map(|&k| support[k]).collect(),
        coefficients: beta,
        gram_inverse: ch.inverse(),
        dropped_columns: ch.dropped.iter().map(|&k| support[k]).collect(),
    }
}

/// `(1/n) ⟨x_j, w · (y − X β)⟩` for every column `j` of `design`.
pub fn normal_equation_residuals(design: &Design, y: &[f64], weights: &[f64], beta: &[f64]) -> Vec<f64> {
    let fitted = design.mul(beta);
    let wr: Vec<f64> = (0..design.n).map(|i| weights[i] * (y[i] - fitted[i])).collect();
    design.cols.iter().map(|c| c.dot(&wr) / design.n as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_design_returns_response() {
        let rows = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let d = Design::from_rows(&rows);
        let fit = relaxed_ols(&d, &[3.0, -1.0, 2.5], &[1.0; 3], &[0, 1, 2]);
        for (b, y) in fit.coefficients.iter().zip([3.0, -1.0, 2.5]) {
            assert!((b - y).abs() < 1e-14);
        }
    }

    #[test]
    fn intercept_gives_weighted_mean() {
        let d = Design::from_dense_columns(4, &[vec![1.0; 4]]);
        let y = [1.0, 2.0, 3.0, 10.0];
        let w = [1.0, 1.0, 2.0, 0.0];
        let fit = relaxed_ols(&d, &y, &w, &[0]);
        assert!((fit.coefficients[0] - 9.0 / 4.0).abs() < 1e-14);
        // Gram is mean(w) = 1
        assert!((fit.gram_inverse[0][0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn duplicated_column_is_dropped() {
        let x = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let d = Design::from_dense_columns(5, &[vec![1.0; 5], x.clone(), x]);
        let y = [1.0, 2.9, 5.2, 7.1, 8.8];
        let w = [1.0; 5];
        let fit = relaxed_ols(&d, &y, &w, &[0, 1, 2]);
        assert_eq!(fit.dropped_columns, vec![2]);
        let beta = fit.full_coefficients(3);
        for r in normal_equation_residuals(&d, &y, &w, &beta) {
            assert!(r.abs() < 1e-12);
        }
    }
}
