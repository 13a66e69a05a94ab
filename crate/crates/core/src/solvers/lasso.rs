//! Weighted lasso by cyclic coordinate descent.
//!
//! Objective: `(1/2W) Σ v_i (y_i − b0 − x_iᵀβ)² + λ Σ_j pf_j s_j |β_j|`,
//! where `W = Σ v_i` and `s_j` is the weighted standard deviation of
//! column `j` (second-moment root when no intercept is fitted). The penalty
//! scaling is equivalent to penalizing standardized coefficients.

use serde::{Deserialize, Serialize};

use super::design::Design;
use crate::data::FoldAssignment;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoOptions {
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    /// Fit a free, unpenalized intercept.
    pub intercept: bool,
    /// Per-column multipliers; 0 leaves a column unpenalized.
    pub penalty_factor: Option<Vec<f64>>,
    /// Selected penalty is scaled by this factor (≤ 1 undersmooths).
    pub undersmooth: f64,
    /// Convergence threshold on `max_j c_j δ_j²` relative to the null loss.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Stop the path once the training loss stalls.
    pub early_stop: bool,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            n_lambda: 100,
            lambda_min_ratio: 1e-4,
            intercept: true,
            penalty_factor: None,
            undersmooth: 1.0,
            tol: 1e-7,
            max_sweeps: 100_000,
            early_stop: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    /// Original-scale coefficients, one per design column.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub lambda_index: usize,
    pub support: Vec<usize>,
    /// `(lambda, mean CV risk)` along the grid.
    pub cv_risk_path: Vec<(f64, f64)>,
}

impl LassoFit {
    pub fn predict(&self, design: &Design) -> Vec<f64> {
        let mut out = design.mul(&self.coefficients);
        for v in &mut out {
            *v += self.intercept;
        }
        out
    }
}

/// Solution at one penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPoint {
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub loss: f64,
}

/// Problem data with weighted column summaries.
pub(crate) struct Prepared<'a> {
    design: &'a Design,
    y: &'a [f64],
    v: &'a [f64],
    vsum: f64,
    wsum: f64,
    intercept: bool,
    /// `v_i x_ij` aligned with the column entries.
    wval: Vec<Vec<f64>>,
    /// `Σ v x_j / Σ v`, drives the residual-mean update.
    xmean: Vec<f64>,
    /// `Σ v x_j / W`, enters the gradient.
    xbar: Vec<f64>,
    curv: Vec<f64>,
    pub(crate) scale: Vec<f64>,
    pen: Vec<f64>,
    usable: Vec<bool>,
    null_loss: f64,
}

impl<'a> Prepared<'a> {
    pub(crate) fn new(design: &'a Design, y: &'a [f64], v: &'a [f64], intercept: bool, pf: &[f64]) -> Self {
        Self::with_normalizer(design, y, v, intercept, pf, None, None)
    }

    /// `norm` replaces `Σ v` as the loss normalizer and `scale` fixes the
    /// penalty scaling; both are used by the IRLS outer loop.
    pub(crate) fn with_normalizer(
        design: &'a Design,
        y: &'a [f64],
        v: &'a [f64],
        intercept: bool,
        pf: &[f64],
        norm: Option<f64>,
        scale: Option<&[f64]>,
    ) -> Self {
        let vsum: f64 = v.iter().sum();
        let wsum = norm.unwrap_or(vsum);
        let p = design.p();
        let mut wval = Vec::with_capacity(p);
        let mut xmean = vec![0.0; p];
        let mut xbar = vec![0.0; p];
        let mut curv = vec![0.0; p];
        let mut scales = vec![0.0; p];
        let mut pen = vec![0.0; p];
        let mut usable = vec![false; p];
        for (j, c) in design.cols.iter().enumerate() {
            let wv: Vec<f64> = c.idx.iter().zip(&c.val).map(|(&i, &x)| v[i as usize] * x).collect();
            let s1: f64 = wv.iter().sum();
            let s2: f64 = wv.iter().zip(&c.val).map(|(a, b)| a * b).sum();
            let cj = if intercept {
                (s2 - s1 * s1 / vsum) / wsum
            } else {
                s2 / wsum
            };
            if intercept {
                xmean[j] = s1 / vsum;
                xbar[j] = s1 / wsum;
            }
            if cj > 1e-12 * (s2 / wsum) && cj > 0.0 {
                curv[j] = cj;
                scales[j] = scale.map_or(cj.sqrt(), |s| s[j]);
                pen[j] = pf[j] * scales[j];
                usable[j] = true;
            }
            wval.push(wv);
        }
        let ybar = if intercept {
            y.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / vsum
        } else {
            0.0
        };
        let null_loss = y.iter().zip(v).map(|(yi, vi)| vi * (yi - ybar).powi(2)).sum::<f64>() / (2.0 * wsum);
        Prepared {
            design,
            y,
            v,
            vsum,
            wsum,
            intercept,
            wval,
            xmean,
            xbar,
            curv,
            scale: scales,
            pen,
            usable,
            null_loss,
        }
    }

    pub(crate) fn p(&self) -> usize {
        self.design.p()
    }

    /// Loss gradient `(1/W) Σ v x_j (r − r̄)` for column `j`.
    #[inline]
    fn grad(&self, j: usize, st: &State) -> f64 {
        let c = &self.design.cols[j];
        let mut dot = 0.0;
        for (&i, &wv) in c.idx.iter().zip(&self.wval[j]) {
            dot += wv * st.r[i as usize];
        }
        dot / self.wsum - self.xbar[j] * st.rbar
    }

    pub(crate) fn loss(&self, st: &State) -> f64 {
        let mut s = 0.0;
        for i in 0..self.design.n {
            let e = st.r[i] - st.rbar;
            s += self.v[i] * e * e;
        }
        s / (2.0 * self.wsum)
    }

    fn objective(&self, st: &State, lambda: f64) -> f64 {
        let pen: f64 = (0..self.p()).map(|j| self.pen[j] * st.beta[j].abs()).sum();
        self.loss(st) + lambda * pen
    }
}

pub(crate) struct State {
    pub(crate) beta: Vec<f64>,
    r: Vec<f64>,
    rbar: f64,
    /// Gradient of the loss for every column, kept current by covariance
    /// updates; `r` and `rbar` lag behind until `sync`.
    g: Vec<f64>,
    /// Lazily filled columns of the centered weighted Gram matrix.
    gram: Vec<Option<Vec<f64>>>,
    stale: bool,
    covariance: bool,
    /// Coefficient changes not yet applied to inactive gradient entries.
    pending: Vec<f64>,
}

impl State {
    pub(crate) fn new(prep: &Prepared, beta: Vec<f64>) -> Self {
        Self::with_mode(prep, beta, true)
    }

    /// `covariance = false` updates residuals directly, which is cheaper
    /// when the weights change between short solves.
    pub(crate) fn with_mode(prep: &Prepared, beta: Vec<f64>, covariance: bool) -> Self {
        let fitted = prep.design.mul(&beta);
        let r: Vec<f64> = prep.y.iter().zip(&fitted).map(|(y, f)| y - f).collect();
        let rbar = if prep.intercept {
            r.iter().zip(prep.v).map(|(a, b)| a * b).sum::<f64>() / prep.vsum
        } else {
            0.0
        };
        let mut st = State {
            beta,
            r,
            rbar,
            g: Vec::new(),
            gram: vec![None; prep.p()],
            stale: false,
            covariance,
            pending: vec![0.0; prep.p()],
        };
        if covariance {
            st.g = (0..prep.p()).map(|j| prep.grad(j, &st)).collect();
        }
        st
    }

    pub(crate) fn intercept(&self) -> f64 {
        debug_assert!(!self.stale);
        self.rbar
    }

    /// Recomputes residuals and the exact gradient from `beta`.
    fn sync(&mut self, prep: &Prepared) {
        let fitted = prep.design.mul(&self.beta);
        for i in 0..self.r.len() {
            self.r[i] = prep.y[i] - fitted[i];
        }
        self.rbar = if prep.intercept {
            self.r.iter().zip(prep.v).map(|(a, b)| a * b).sum::<f64>() / prep.vsum
        } else {
            0.0
        };
        if self.covariance {
            self.g = (0..prep.p()).map(|j| prep.grad(j, self)).collect();
        }
        self.stale = false;
    }
}

fn ensure_gram(prep: &Prepared, gram: &mut [Option<Vec<f64>>], j: usize) {
    {
        if gram[j].is_none() {
            let mut u = vec![0.0; prep.design.n];
            for (&i, &wv) in prep.design.cols[j].idx.iter().zip(&prep.wval[j]) {
                u[i as usize] = wv;
            }
            let col = (0..prep.p())
                .map(|m| {
                    let c = &prep.design.cols[m];
                    let dot: f64 = c.idx.iter().zip(&c.val).map(|(&i, &x)| x * u[i as usize]).sum();
                    dot / prep.wsum - prep.xbar[m] * prep.xmean[j]
                })
                .collect();
            gram[j] = Some(col);
        }
    }
}

#[inline]
fn soft_threshold(u: f64, t: f64) -> f64 {
    if u > t {
        u - t
    } else if u < -t {
        u + t
    } else {
        0.0
    }
}

/// Exact minimization along coordinate `j`; returns `c_j δ²`.
#[inline]
fn update(prep: &Prepared, st: &mut State, j: usize, lambda: f64) -> f64 {
    if !st.covariance {
        return update_naive(prep, st, j, lambda);
    }
    let g = st.g[j];
    let cj = prep.curv[j];
    let old = st.beta[j];
    let new = soft_threshold(g + cj * old, lambda * prep.pen[j]) / cj;
    let delta = new - old;
    if delta != 0.0 {
        ensure_gram(prep, &mut st.gram, j);
        let col = st.gram[j].as_deref().expect("filled");
        for (gm, c) in st.g.iter_mut().zip(col) {
            *gm -= delta * c;
        }
        st.beta[j] = new;
        st.stale = true;
    }
    cj * delta * delta
}

/// Like `update`, but refreshes only the gradient entries in `active`;
/// the rest is settled by `flush`.
#[inline]
fn update_within(prep: &Prepared, st: &mut State, j: usize, lambda: f64, active: &[usize]) -> f64 {
    if !st.covariance {
        return update_naive(prep, st, j, lambda);
    }
    let g = st.g[j];
    let cj = prep.curv[j];
    let old = st.beta[j];
    let new = soft_threshold(g + cj * old, lambda * prep.pen[j]) / cj;
    let delta = new - old;
    if delta != 0.0 {
        ensure_gram(prep, &mut st.gram, j);
        let col = st.gram[j].as_deref().expect("filled");
        for &m in active {
            st.g[m] -= delta * col[m];
        }
        st.pending[j] += delta;
        st.beta[j] = new;
        st.stale = true;
    }
    cj * delta * delta
}

fn flush(st: &mut State, in_active: &[bool]) {
    for k in 0..st.pending.len() {
        let d = st.pending[k];
        if d != 0.0 {
            let col = st.gram[k].as_deref().expect("filled on update");
            for (m, gm) in st.g.iter_mut().enumerate() {
                if !in_active[m] {
                    *gm -= d * col[m];
                }
            }
            st.pending[k] = 0.0;
        }
    }
}

#[inline]
fn update_naive(prep: &Prepared, st: &mut State, j: usize, lambda: f64) -> f64 {
    let g = prep.grad(j, st);
    let cj = prep.curv[j];
    let old = st.beta[j];
    let new = soft_threshold(g + cj * old, lambda * prep.pen[j]) / cj;
    let delta = new - old;
    if delta != 0.0 {
        let c = &prep.design.cols[j];
        for (&i, &x) in c.idx.iter().zip(&c.val) {
            st.r[i as usize] -= delta * x;
        }
        st.rbar -= delta * prep.xmean[j];
        st.beta[j] = new;
    }
    cj * delta * delta
}

/// Coordinate descent at a single penalty, warm-started from `st`.
/// Gradients are updated through Gram columns; convergence is confirmed by
/// a sweep on the exactly recomputed gradient.
pub(crate) fn solve(prep: &Prepared, st: &mut State, lambda: f64, tol: f64, max_sweeps: usize, only_unpenalized: bool) {
    let thresh = tol * prep.null_loss.max(1e-300);
    let candidates: Vec<usize> = (0..prep.p())
        .filter(|&j| prep.usable[j] && (!only_unpenalized || prep.pen[j] == 0.0))
        .collect();
    let mut sweeps = 0;
    let start_obj = if cfg!(debug_assertions) {
        st.sync(prep);
        prep.objective(st, lambda)
    } else {
        0.0
    };
    'outer: loop {
        loop {
            let mut dmax = 0.0_f64;
            for &j in &candidates {
                dmax = dmax.max(update(prep, st, j, lambda));
            }
            sweeps += 1;
            if dmax < thresh || sweeps >= max_sweeps {
                break;
            }
            let active: Vec<usize> = candidates
                .iter()
                .copied()
                .filter(|&j| st.beta[j] != 0.0 || prep.pen[j] == 0.0)
                .collect();
            loop {
                let mut dmax = 0.0_f64;
                for &j in &active {
                    dmax = dmax.max(update_within(prep, st, j, lambda, &active));
                }
                sweeps += 1;
                if dmax < thresh || sweeps >= max_sweeps {
                    break;
                }
            }
            if st.covariance {
                let mut in_active = vec![false; prep.p()];
                for &j in &active {
                    in_active[j] = true;
                }
                flush(st, &in_active);
            }
            if sweeps >= max_sweeps {
                break;
            }
        }
        if !st.stale {
            break;
        }
        let maintained = std::mem::take(&mut st.g);
        st.sync(prep);
        if sweeps >= max_sweeps {
            log::warn!("coordinate descent stopped at the sweep limit");
            break;
        }
        // Resume only if rounding in the maintained gradient could have
        // stopped the sweeps early.
        let scale = st.g.iter().fold(0.0_f64, |m, g| m.max(g.abs())) + f64::MIN_POSITIVE;
        let drift = maintained
            .iter()
            .zip(&st.g)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        if drift > 1e-9 * scale {
            continue 'outer;
        }
        break;
    }
    if cfg!(debug_assertions) {
        let obj = prep.objective(st, lambda);
        debug_assert!(
            obj <= start_obj + 1e-10 * (1.0 + start_obj.abs()),
            "objective increased: {start_obj} -> {obj}"
        );
    }
}

/// Largest penalty at which every penalized coefficient is zero, with the
/// unpenalized columns fitted.
pub(crate) fn lambda_max(prep: &Prepared, opts: &LassoOptions) -> f64 {
    let mut st = State::new(prep, vec![0.0; prep.p()]);
    solve(prep, &mut st, 0.0, opts.tol * 1e-4, opts.max_sweeps, true);
    (0..prep.p())
        .filter(|&j| prep.usable[j] && prep.pen[j] > 0.0)
        .map(|j| prep.grad(j, &st).abs() / prep.pen[j])
        .fold(0.0, f64::max)
}

pub fn geometric_grid(lmax: f64, n_lambda: usize, min_ratio: f64) -> Vec<f64> {
    if lmax <= 0.0 || n_lambda <= 1 {
        return vec![lmax.max(0.0)];
    }
    (0..n_lambda)
        .map(|k| lmax * min_ratio.powf(k as f64 / (n_lambda - 1) as f64))
        .collect()
}

fn penalty_factor(design: &Design, opts: &LassoOptions) -> Result<Vec<f64>> {
    match &opts.penalty_factor {
        Some(pf) if pf.len() != design.p() => Err(Error::DimensionMismatch {
            expected: design.p(),
            found: pf.len(),
        }),
        Some(pf) if pf.iter().any(|v| !v.is_finite() || *v < 0.0) => Err(Error::InvalidArgument(
            "penalty factors must be finite and non-negative".into(),
        )),
        Some(pf) => Ok(pf.clone()),
        None => Ok(vec![1.0; design.p()]),
    }
}

fn check_inputs(design: &Design, y: &[f64], weights: &[f64]) -> Result<()> {
    if y.len() != design.n || weights.len() != design.n {
        return Err(Error::DimensionMismatch {
            expected: design.n,
            found: y.len().min(weights.len()),
        });
    }
    if y.iter().any(|v| !v.is_finite()) || design.has_non_finite() {
        return Err(Error::InvalidArgument("non-finite value in lasso inputs".into()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::InvalidArgument("all weights are zero".into()));
    }
    Ok(())
}

/// Fits the lasso along `lambdas` with warm starts. With `early_stop`, the
/// path is cut once the loss stalls and the last fit is repeated.
pub(crate) fn run_path(prep: &Prepared, lambdas: &[f64], opts: &LassoOptions) -> Vec<PathPoint> {
    let mut st = State::new(prep, vec![0.0; prep.p()]);
    let mut out: Vec<PathPoint> = Vec::with_capacity(lambdas.len());
    let mut stalls = 0;
    for (k, &lam) in lambdas.iter().enumerate() {
        if stalls >= 3 {
            let last = out.last().cloned().expect("path has a point");
            out.push(last);
            continue;
        }
        solve(prep, &mut st, lam, opts.tol, opts.max_sweeps, false);
        let loss = prep.loss(&st);
        if let Some(prev) = out.last() {
            let rel = (prev.loss - loss) / prev.loss.max(1e-300);
            if opts.early_stop && k >= 5 && rel < 1e-5 {
                stalls += 1;
            } else {
                stalls = 0;
            }
        }
        out.push(PathPoint {
            beta: st.beta.clone(),
            intercept: st.intercept(),
            loss,
        });
    }
    out
}

/// Lasso path over an explicit grid.
pub fn lasso_path(
    design: &Design,
    y: &[f64],
    weights: &[f64],
    lambdas: &[f64],
    opts: &LassoOptions,
) -> Result<Vec<PathPoint>> {
    check_inputs(design, y, weights)?;
    let pf = penalty_factor(design, opts)?;
    let prep = Prepared::new(design, y, weights, opts.intercept, &pf);
    Ok(run_path(&prep, lambdas, opts))
}

/// The default geometric grid for this problem.
pub fn lambda_grid(design: &Design, y: &[f64], weights: &[f64], opts: &LassoOptions) -> Result<Vec<f64>> {
    check_inputs(design, y, weights)?;
    let pf = penalty_factor(design, opts)?;
    let prep = Prepared::new(design, y, weights, opts.intercept, &pf);
    Ok(geometric_grid(
        lambda_max(&prep, opts),
        opts.n_lambda,
        opts.lambda_min_ratio,
    ))
}

/// Single-penalty fit solved to a tight tolerance.
pub fn lasso_fit(design: &Design, y: &[f64], weights: &[f64], lambda: f64, opts: &LassoOptions) -> Result<PathPoint> {
    check_inputs(design, y, weights)?;
    let pf = penalty_factor(design, opts)?;
    let prep = Prepared::new(design, y, weights, opts.intercept, &pf);
    let mut st = State::new(&prep, vec![0.0; prep.p()]);
    solve(&prep, &mut st, lambda, opts.tol.min(1e-20), opts.max_sweeps, false);
    Ok(PathPoint {
        loss: prep.loss(&st),
        intercept: st.intercept(),
        beta: st.beta,
    })
}

const CV_PATIENCE: usize = 10;

/// Cross-validated lasso: the penalty minimizing mean held-out weighted
/// squared error (ties go to the larger penalty), optionally undersmoothed,
/// then refitted on all rows.
pub fn cv_lasso(
    design: &Design,
    y: &[f64],
    weights: &[f64],
    folds: &FoldAssignment,
    opts: &LassoOptions,
) -> Result<LassoFit> {
    check_inputs(design, y, weights)?;
    if folds.n() != design.n {
        return Err(Error::DimensionMismatch {
            expected: design.n,
            found: folds.n(),
        });
    }
    let pf = penalty_factor(design, opts)?;
    let full = Prepared::new(design, y, weights, opts.intercept, &pf);
    let lambdas = geometric_grid(lambda_max(&full, opts), opts.n_lambda, opts.lambda_min_ratio);

    let mut fold_weights = Vec::new();
    for k in 0..folds.v {
        let train_w: Vec<f64> = (0..design.n)
            .map(|i| if folds.fold_of[i] == k { 0.0 } else { weights[i] })
            .collect();
        let val_w: f64 = (0..design.n)
            .filter(|&i| folds.fold_of[i] == k)
            .map(|i| weights[i])
            .sum();
        if val_w > 0.0 && train_w.iter().any(|&w| w > 0.0) {
            fold_weights.push((k, train_w, val_w));
        }
    }
    if fold_weights.is_empty() {
        return Err(Error::InvalidArgument("no fold has positive validation weight".into()));
    }
    let preps: Vec<Prepared> = fold_weights
        .iter()
        .map(|(_, w, _)| Prepared::new(design, y, w, opts.intercept, &pf))
        .collect();
    let mut states: Vec<State> = preps.iter().map(|p| State::new(p, vec![0.0; p.p()])).collect();
    // Folds advance together so the path can stop once the mean held-out
    // risk has not improved for `CV_PATIENCE` penalties.
    let mut risks = Vec::with_capacity(lambdas.len());
    let mut best = 0;
    let mut since_best = 0;
    for (l, &lam) in lambdas.iter().enumerate() {
        let mut total = 0.0;
        for ((prep, st), (k, _, val_w)) in preps.iter().zip(states.iter_mut()).zip(&fold_weights) {
            solve(prep, st, lam, opts.tol, opts.max_sweeps, false);
            let fitted = design.mul(&st.beta);
            let b0 = st.intercept();
            let mut s = 0.0;
            for i in (0..design.n).filter(|&i| folds.fold_of[i] == *k) {
                let e = y[i] - b0 - fitted[i];
                s += weights[i] * e * e;
            }
            total += s / val_w;
        }
        risks.push(total / preps.len() as f64);
        if risks[l] < risks[best] {
            best = l;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if opts.early_stop && since_best >= CV_PATIENCE {
            break;
        }
    }
    if opts.undersmooth < 1.0 {
        let target = lambdas[best] * opts.undersmooth;
        best = (best..lambdas.len())
            .find(|&l| lambdas[l] <= target)
            .unwrap_or(lambdas.len() - 1);
    }

    let mut st = State::new(&full, vec![0.0; full.p()]);
    for &lam in &lambdas[..=best] {
        solve(&full, &mut st, lam, opts.tol, opts.max_sweeps, false);
    }
    solve(
        &full,
        &mut st,
        lambdas[best],
        opts.tol.min(1e-10),
        opts.max_sweeps,
        false,
    );
    let support = (0..full.p()).filter(|&j| st.beta[j] != 0.0).collect();
    Ok(LassoFit {
        intercept: st.intercept(),
        coefficients: st.beta,
        lambda: lambdas[best],
        lambda_index: best,
        support,
        cv_risk_path: lambdas.iter().copied().zip(risks).collect(),
    })
}

/// Largest violation of the lasso optimality conditions, in standardized
/// coefficient units.
pub fn kkt_residual(
    design: &Design,
    y: &[f64],
    weights: &[f64],
    beta: &[f64],
    intercept: f64,
    lambda: f64,
    opts: &LassoOptions,
) -> Result<f64> {
    check_inputs(design, y, weights)?;
    let pf = penalty_factor(design, opts)?;
    let prep = Prepared::new(design, y, weights, opts.intercept, &pf);
    let fitted = design.mul(beta);
    let wsum: f64 = weights.iter().sum();
    let e: Vec<f64> = (0..design.n).map(|i| y[i] - intercept - fitted[i]).collect();
    let mut worst = 0.0_f64;
    if opts.intercept {
        let mean_e: f64 = e.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>() / wsum;
        worst = worst.max(mean_e.abs());
    }
    for j in 0..design.p() {
        if !prep.usable[j] {
            continue;
        }
        let g = design.cols[j].dot_weighted(weights, &e) / wsum / prep.scale[j];
        let bound = lambda * pf[j];
        let viol = if beta[j] != 0.0 {
            (g - bound * beta[j].signum()).abs()
        } else {
            (g.abs() - bound).max(0.0)
        };
        worst = worst.max(viol);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::ols::relaxed_ols;

    #[test]
    fn soft_threshold_closed_form() {
        let x: Vec<f64> = vec![-1.5, -0.5, 0.5, 1.5];
        let mean = 0.0;
        let sd = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0).sqrt();
        let xs: Vec<f64> = x.iter().map(|v| v / sd).collect();
        let y = [0.3, -0.2, 1.1, 0.9];
        let d = Design::from_dense_columns(4, &[xs.clone()]);
        let z: f64 = xs.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / 4.0;
        for lam in [0.0, 0.1, 0.2, z.abs() + 0.1] {
            let fit = lasso_fit(&d, &y, &[1.0; 4], lam, &LassoOptions::default()).unwrap();
            let want = z.signum() * (z.abs() - lam).max(0.0);
            assert!((fit.beta[0] - want).abs() < 1e-12, "{lam}: {} vs {want}", fit.beta[0]);
        }
    }

    #[test]
    fn zero_penalty_matches_weighted_ols() {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let t = i as f64;
                vec![1.0, (t * 0.7).sin(), (t * 1.3).cos()]
            })
            .collect();
        let d = Design::from_rows(&rows);
        let y: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin() + 0.1 * i as f64).collect();
        let w: Vec<f64> = (0..12).map(|i| 1.0 + (i % 3) as f64).collect();
        let opts = LassoOptions {
            intercept: false,
            ..Default::default()
        };
        let fit = lasso_fit(&d, &y, &w, 0.0, &opts).unwrap();
        let ols = relaxed_ols(&d, &y, &w, &[0, 1, 2]);
        for (a, b) in fit.beta.iter().zip(&ols.coefficients) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn lambda_max_zeroes_everything() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos()])
            .collect();
        let d = Design::from_rows(&rows);
        let y: Vec<f64> = (0..20).map(|i| (i as f64 * 0.5).sin()).collect();
        let w = vec![1.0; 20];
        let opts = LassoOptions::default();
        let grid = lambda_grid(&d, &y, &w, &opts).unwrap();
        let fit = lasso_fit(&d, &y, &w, grid[0] * (1.0 + 1e-9), &opts).unwrap();
        assert!(fit.beta.iter().all(|&b| b == 0.0));
        let fit = lasso_fit(&d, &y, &w, grid[0] * 0.9, &opts).unwrap();
        assert!(fit.beta.iter().any(|&b| b != 0.0));
    }

    #[test]
    fn rejects_nan() {
        let d = Design::from_dense_columns(2, &[vec![1.0, 2.0]]);
        assert!(lasso_fit(&d, &[f64::NAN, 1.0], &[1.0, 1.0], 0.1, &LassoOptions::default()).is_err());
    }
}
