//! Binomial regression: Newton/IRLS for small dense designs and an
//! L1-penalized path for indicator bases.

use serde::{Deserialize, Serialize};

use super::design::Design;
use super::lasso::{solve, LassoOptions, PathPoint, Prepared, State};
use super::linalg::{solve_spd, Matrix};
use crate::error::{Error, Result};

/// Probability bound applied to solver outputs.
pub const CLIP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub offset_supported: bool,
    /// Fitted probabilities reached the clipping bound on the side of the
    /// observed label, the usual sign of (quasi-)separation.
    pub separation: bool,
    pub iterations: usize,
    /// Sup-norm of `(1/n) Σ w x (y − p)` at the returned coefficients.
    pub score_norm: f64,
}

impl LogisticFit {
    /// Linear predictor `offset + Xβ`.
    pub fn linear_predictor(&self, design: &Design, offset: Option<&[f64]>) -> Vec<f64> {
        let mut eta = design.mul(&self.coefficients);
        if let Some(off) = offset {
            for (e, o) in eta.iter_mut().zip(off) {
                *e += o;
            }
        }
        eta
    }

    /// Clipped fitted probabilities.
    pub fn predict(&self, design: &Design, offset: Option<&[f64]>) -> Vec<f64> {
        self.linear_predictor(design, offset)
            .into_iter()
            .map(|e| expit(e).clamp(CLIP, 1.0 - CLIP))
            .collect()
    }
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_lik(y: &[f64], w: &[f64], eta: &[f64]) -> f64 {
    y.iter()
        .zip(w)
        .zip(eta)
        .map(|((yi, wi), e)| wi * (yi * e - softplus(*e)))
        .sum()
}

fn check_labels(y: &[f64]) -> Result<()> {
    if let Some(v) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(format!(
            "logistic labels must be 0/1, found {v}"
        )));
    }
    Ok(())
}

/// Maximizes the weighted binomial log-likelihood with an optional fixed
/// offset. Newton steps with step-halving; converged when the score
/// sup-norm drops below `1e-8` (at most 100 iterations).
pub fn logistic_irls(
    design: &Design,
    labels: &[f64],
    offset: Option<&[f64]>,
    weights: Option<&[f64]>,
) -> Result<LogisticFit> {
    let n = design.n;
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    check_labels(labels)?;
    if design.has_non_finite() || offset.is_some_and(|o| o.len() != n || o.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("non-finite design or offset".into()));
    }
    let ones = vec![1.0; n];
    let w = weights.unwrap_or(&ones);
    if w.len() != n || w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument("invalid logistic weights".into()));
    }
    let zeros = vec![0.0; n];
    let off = offset.unwrap_or(&zeros);
    let cols = design.dense_columns();
    let p = cols.len();
    let eta_of = |beta: &[f64]| -> Vec<f64> {
        let mut eta = off.to_vec();
        for (c, b) in cols.iter().zip(beta) {
            for i in 0..n {
                eta[i] += c[i] * b;
            }
        }
        eta
    };
    let score_of = |eta: &[f64]| -> Vec<f64> {
        let resid: Vec<f64> = (0..n).map(|i| w[i] * (labels[i] - expit(eta[i]))).collect();
        cols.iter()
            .map(|c| c.iter().zip(&resid).map(|(x, r)| x * r).sum::<f64>() / n as f64)
            .collect()
    };
    let hessian_of = |eta: &[f64]| -> Matrix {
        let h: Vec<f64> = (0..n)
            .map(|i| {
                let pi = expit(eta[i]);
                w[i] * pi * (1.0 - pi)
            })
            .collect();
        let mut m = vec![vec![0.0; p]; p];
        for j in 0..p {
            for k in 0..=j {
                let s: f64 = (0..n).map(|i| cols[j][i] * cols[k][i] * h[i]).sum::<f64>() / n as f64;
                m[j][k] = s;
                m[k][j] = s;
            }
        }
        m
    };
    let sup = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));

    let mut beta = vec![0.0; p];
    let mut eta = eta_of(&beta);
    let mut ll = log_lik(labels, w, &eta);
    let mut score = score_of(&eta);
    let mut iterations = 0;
    let mut converged = p == 0 || sup(&score) < 1e-8;
    let mut polished = false;
    while iterations < 100 && (!converged || !polished) {
        if converged {
            polished = true;
        }
        let hess = hessian_of(&eta);
        let Some(step) = solve_spd(&hess, &score) else {
            break;
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + t * s).collect();
            let cand_eta = eta_of(&cand);
            let cand_ll = log_lik(labels, w, &cand_eta);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs() {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
        score = score_of(&eta);
        if sup(&score) < 1e-8 {
            converged = true;
        }
    }
    let separation = (0..n).any(|i| {
        let pi = expit(eta[i]);
        w[i] > 0.0 && ((pi < CLIP && labels[i] == 0.0) || (pi > 1.0 - CLIP && labels[i] == 1.0))
    });
    if separation {
        log::warn!("logistic fit shows separation; predictions are clipped");
    }
    Ok(LogisticFit {
        coefficients: beta,
        converged: converged && !separation,
        offset_supported: true,
        separation,
        iterations,
        score_norm: sup(&score),
    })
}

const IRLS_MAX_ITER: usize = 10;
const IRLS_ETA_TOL: f64 = 1e-3;

/// L1-penalized logistic regression along `lambdas`, with a free intercept.
/// Each penalty is solved by IRLS with coordinate descent on the weighted
/// quadratic approximation; penalties are scaled by the weighted column
/// standard deviations, as in the Gaussian lasso.
pub fn l1_logistic_path(
    design: &Design,
    labels: &[f64],
    weights: &[f64],
    lambdas: &[f64],
    opts: &LassoOptions,
) -> Result<Vec<PathPoint>> {
    check_labels(labels)?;
    let n = design.n;
    let pf = opts.penalty_factor.clone().unwrap_or_else(|| vec![1.0; design.p()]);
    let base = Prepared::new(design, labels, weights, true, &pf);
    let scale = base.scale.clone();
    let vsum: f64 = weights.iter().sum();
    let mut beta = vec![0.0; design.p()];
    let ybar = labels.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>() / vsum;
    let mut b0 = logit(ybar.clamp(1e-5, 1.0 - 1e-5));
    let mut out: Vec<PathPoint> = Vec::with_capacity(lambdas.len());
    let mut stalls = 0;
    for (k, &lam) in lambdas.iter().enumerate() {
        if stalls >= 3 {
            let last = out.last().cloned().expect("path has a point");
            out.push(last);
            continue;
        }
        let mut eta: Vec<f64> = design.mul(&beta).into_iter().map(|e| e + b0).collect();
        for _ in 0..IRLS_MAX_ITER {
            let mut z = vec![0.0; n];
            let mut wt = vec![0.0; n];
            for i in 0..n {
                let pi = expit(eta[i]).clamp(1e-5, 1.0 - 1e-5);
                let h = pi * (1.0 - pi);
                wt[i] = weights[i] * h;
                z[i] = eta[i] + (labels[i] - pi) / h;
            }
            let prep = Prepared::with_normalizer(design, &z, &wt, true, &pf, Some(vsum), Some(&scale));
            let mut st = State::with_mode(&prep, beta.clone(), false);
            solve(&prep, &mut st, lam, opts.tol, opts.max_sweeps, false);
            beta = st.beta.clone();
            b0 = st.intercept();
            let new_eta: Vec<f64> = design.mul(&beta).into_iter().map(|e| e + b0).collect();
            let change = new_eta.iter().zip(&eta).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            eta = new_eta;

            if change < IRLS_ETA_TOL {
                break;
            }
        }
        let loss = -log_lik(labels, weights, &eta) / vsum;
        if let Some(prev) = out.last() {
            let rel = (prev.loss - loss) / prev.loss.max(1e-300);
            if opts.early_stop && k >= 5 && rel < 1e-5 {
                stalls += 1;
            } else {
                stalls = 0;
            }
        }
        if eta.iter().any(|e| e.abs() > 15.0) {
            stalls = 3;
        }
        out.push(PathPoint {
            beta: beta.clone(),
            intercept: b0,
            loss,
        });
    }
    Ok(out)
}

/// Penalty at which the L1-logistic path starts, all slopes at zero.
pub fn l1_logistic_lambda_max(design: &Design, labels: &[f64], weights: &[f64], opts: &LassoOptions) -> f64 {
    let pf = opts.penalty_factor.clone().unwrap_or_else(|| vec![1.0; design.p()]);
    let base = Prepared::new(design, labels, weights, true, &pf);
    let vsum: f64 = weights.iter().sum();
    let ybar = labels.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>() / vsum;
    let resid: Vec<f64> = labels.iter().map(|y| y - ybar).collect();
    (0..design.p())
        .filter(|&j| base.scale[j] > 0.0 && pf[j] > 0.0)
        .map(|j| (design.cols[j].dot_weighted(weights, &resid) / vsum).abs() / (pf[j] * base.scale[j]))
        .fold(0.0, f64::max)
}
