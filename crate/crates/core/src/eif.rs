//! Canonical gradients evaluated at fitted nuisances and working models.
//!
//! `ipcw` arguments are the per-row factors `Δ / g^Δ` that multiply the
//! outcome-residual terms; they equal one without censoring.

use serde::{Deserialize, Serialize};

use crate::data::FusionDataset;
use crate::error::{Error, Result};
use crate::nuisance::NuisanceFit;
use crate::solvers::linalg::mat_vec;
use crate::working_model::WorkingModel;

/// Row-level inputs of the trial-ATE gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialRow {
    pub s: u8,
    pub a: u8,
    pub y: f64,
    pub ipcw: f64,
    /// `Q(S, W, A)` at the observed values.
    pub q: f64,
    /// `Q(1, W, 0)`, `Q(1, W, 1)`.
    pub q10: f64,
    pub q11: f64,
    /// `g(1 | S = 1, W)`.
    pub g_trial: f64,
}

impl TrialRow {
    fn y_part(&self) -> f64 {
        if self.ipcw == 0.0 {
            return 0.0;
        }
        let ga = if self.a == 1 { self.g_trial } else { 1.0 - self.g_trial };
        let sign = if self.a == 1 { 1.0 } else { -1.0 };
        sign / ga * self.ipcw * (self.y - self.q)
    }
}

/// `Q(1,W,1) − Q(1,W,0) − ψ + S/P(S=1|W) · (2A−1)/g(A|1,W) · (Y − Q(S,W,A))`.
pub fn d_psi(row: &TrialRow, pi_bar: f64, psi: f64, eps: f64) -> Result<f64> {
    if pi_bar < eps {
        return Err(Error::Positivity(format!("P(S=1|W) = {pi_bar} below {eps}")));
    }
    let w_part = row.q11 - row.q10 - psi;
    if row.s == 0 {
        return Ok(w_part);
    }
    Ok(w_part + row.y_part() / pi_bar)
}

/// `S/P(S=1) · (Q(1,W,1) − Q(1,W,0) − ψ₂) + S/P(S=1) · (2A−1)/g(A|1,W) · (Y − Q)`.
pub fn d_psi2(row: &TrialRow, p_trial: f64, psi2: f64, eps: f64) -> Result<f64> {
    if p_trial < eps {
        return Err(Error::Positivity(format!("P(S=1) = {p_trial} below {eps}")));
    }
    if row.s == 0 {
        return Ok(0.0);
    }
    Ok((row.q11 - row.q10 - psi2 + row.y_part()) / p_trial)
}

/// `Q̄(W,1) − Q̄(W,0) − ψ + (2A−1)/g(A|W) · (Y − Q̄(W,A))`, the classic ATE
/// gradient.
pub fn d_ate(a: u8, y: f64, ipcw: f64, q: f64, q0: f64, q1: f64, g1: f64, psi: f64) -> f64 {
    let w_part = q1 - q0 - psi;
    if ipcw == 0.0 {
        return w_part;
    }
    let (ga, sign) = if a == 1 { (g1, 1.0) } else { (1.0 - g1, -1.0) };
    w_part + sign / ga * ipcw * (y - q)
}

/// Gradient of the working-model pooled ATE for one row.
///
/// `phi` is `φ(W)` over the model's functions and `basis_means` is `P_n φ`.
#[allow(clippy::too_many_arguments)]
pub fn d_pooled_projection(
    a: u8,
    y: f64,
    ipcw: f64,
    theta: f64,
    g1: f64,
    phi: &[f64],
    model: &WorkingModel,
    psi_tilde: f64,
    basis_means: &[f64],
) -> f64 {
    let tau: f64 = phi.iter().zip(&model.beta_star).map(|(p, b)| p * b).sum();
    let u = mat_vec(&model.gram_inverse, basis_means);
    let m = a as f64 - g1;
    let resid = if ipcw == 0.0 { 0.0 } else { ipcw * (y - theta - m * tau) };
    let contraction: f64 = u.iter().zip(phi).map(|(x, p)| x * p).sum();
    tau - psi_tilde + contraction * m * resid
}

/// The three parts of the bias-parameter gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpParts {
    pub w_part: f64,
    pub pi_part: f64,
    pub beta_part: f64,
}

impl SharpParts {
    pub fn total(&self) -> f64 {
        self.w_part + self.pi_part + self.beta_part
    }
}

/// Row-level inputs of the bias-parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct SharpRow<'a> {
    pub s: u8,
    pub a: u8,
    pub y: f64,
    pub ipcw: f64,
    pub qbar: f64,
    pub g1: f64,
    /// Initial `Π(1|W,A)` used by the working-model fit.
    pub pi_initial: f64,
    /// Targeted `Π*(1|W,0)` and `Π*(1|W,1)`.
    pub pi_star0: f64,
    pub pi_star1: f64,
    /// `φ(W, A)`, `φ(W, 0)`, `φ(W, 1)`.
    pub phi: &'a [f64],
    pub phi0: &'a [f64],
    pub phi1: &'a [f64],
    pub external_controls_only: bool,
}

/// Clever covariate `A/g(1|W) · τ_S(W,1) − (1−A)/g(0|W) · τ_S(W,0)`; the
/// treated term is absent when the external data carry no treated rows.
pub fn clever_covariate(a: u8, g1: f64, tau0: f64, tau1: f64, external_controls_only: bool) -> f64 {
    if a == 1 {
        if external_controls_only {
            0.0
        } else {
            tau1 / g1
        }
    } else {
        -tau0 / (1.0 - g1)
    }
}

/// Gradient of the working-model bias parameter for one row.
///
/// `weighted_means` are `(P_n Π*(0|W,0) φ(W,0), P_n Π*(0|W,1) φ(W,1))`.
pub fn d_sharp_projection(
    row: &SharpRow,
    model: &WorkingModel,
    psi_sharp: f64,
    weighted_means: (&[f64], &[f64]),
    eps: f64,
) -> Result<SharpParts> {
    if row.g1 < eps || row.g1 > 1.0 - eps {
        return Err(Error::Positivity(format!(
            "g(1|W) = {} outside [{eps}, {}]",
            row.g1,
            1.0 - eps
        )));
    }
    let dot = |x: &[f64]| -> f64 { x.iter().zip(&model.beta_star).map(|(p, b)| p * b).sum() };
    let (tau, tau0, tau1) = (dot(row.phi), dot(row.phi0), dot(row.phi1));
    let p00 = 1.0 - row.pi_star0;
    let p01 = if row.external_controls_only {
        0.0
    } else {
        1.0 - row.pi_star1
    };
    let w_part = p00 * tau0 - p01 * tau1 - psi_sharp;

    let pi_star_f = if row.a == 1 { row.pi_star1 } else { row.pi_star0 };
    let c = clever_covariate(row.a, row.g1, tau0, tau1, row.external_controls_only);
    let pi_part = c * (row.s as f64 - pi_star_f);

    let (m0, m1) = weighted_means;
    let diff: Vec<f64> = m0.iter().zip(m1).map(|(u, v)| u - v).collect();
    let u = mat_vec(&model.gram_inverse, &diff);
    let m = row.s as f64 - row.pi_initial;
    let resid = if row.ipcw == 0.0 {
        0.0
    } else {
        row.ipcw * (row.y - row.qbar - m * tau)
    };
    let contraction: f64 = u.iter().zip(row.phi).map(|(x, p)| x * p).sum();
    let beta_part = contraction * m * resid;
    Ok(SharpParts {
        w_part,
        pi_part,
        beta_part,
    })
}

/// Per-observation gradient values of the final estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceVectors {
    pub d_pooled: Vec<f64>,
    pub d_sharp: Vec<f64>,
    /// `d_pooled − d_sharp`.
    pub d_total: Vec<f64>,
    pub w_part: Vec<f64>,
    pub pi_part: Vec<f64>,
    pub beta_part: Vec<f64>,
}

impl InfluenceVectors {
    pub fn new(d_pooled: Vec<f64>, parts: Vec<SharpParts>) -> Self {
        let d_sharp: Vec<f64> = parts.iter().map(|p| p.total()).collect();
        let d_total = d_pooled.iter().zip(&d_sharp).map(|(a, b)| a - b).collect();
        InfluenceVectors {
            d_pooled,
            d_sharp,
            d_total,
            w_part: parts.iter().map(|p| p.w_part).collect(),
            pi_part: parts.iter().map(|p| p.pi_part).collect(),
            beta_part: parts.iter().map(|p| p.beta_part).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.d_total.len()
    }

    /// `sqrt(P_n d_total² / n)`.
    pub fn standard_error(&self) -> f64 {
        let n = self.n() as f64;
        (self.d_total.iter().map(|v| v * v).sum::<f64>() / n / n).sqrt()
    }

    /// Writes `row,d_pooled,d_sharp,d_total,w_part,pi_part,beta_part`.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("row,d_pooled,d_sharp,d_total,w_part,pi_part,beta_part\n");
        for i in 0..self.n() {
            s.push_str(&format!(
                "{i},{},{},{},{},{},{}\n",
                self.d_pooled[i], self.d_sharp[i], self.d_total[i], self.w_part[i], self.pi_part[i], self.beta_part[i]
            ));
        }
        s
    }
}

fn dense_rows(rows: &[Vec<u32>], n: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; rows.len()]; n];
    for (j, r) in rows.iter().enumerate() {
        for &i in r {
            out[i as usize][j] = 1.0;
        }
    }
    out
}

pub fn ipcw_factors(ds: &FusionDataset, gdelta: &[f64]) -> Vec<f64> {
    (0..ds.n())
        .map(|i| if ds.delta(i) == 1 { 1.0 / gdelta[i] } else { 0.0 })
        .collect()
}

/// `P_n φ` for the model's functions.
pub fn basis_means(ds: &FusionDataset, model: &WorkingModel) -> Vec<f64> {
    let n = ds.n() as f64;
    model.basis_rows(ds, None).iter().map(|r| r.len() as f64 / n).collect()
}

/// Pooled-ATE projection gradient for every row.
pub fn pooled_influence(ds: &FusionDataset, nuis: &NuisanceFit, model: &WorkingModel, psi_tilde: f64) -> Vec<f64> {
    let phi = dense_rows(&model.basis_rows(ds, None), ds.n());
    let means = basis_means(ds, model);
    let ipcw = ipcw_factors(ds, &nuis.gtilde_delta);
    (0..ds.n())
        .map(|i| {
            let y = if ds.delta(i) == 1 { ds.y()[i] } else { 0.0 };
            d_pooled_projection(
                ds.a()[i],
                y,
                ipcw[i],
                nuis.theta[i],
                nuis.g1[i],
                &phi[i],
                model,
                psi_tilde,
                &means,
            )
        })
        .collect()
}

/// `(P_n (1 − Π*(1|W,0)) φ(W,0), P_n (1 − Π*(1|W,1)) φ(W,1))`.
pub fn weighted_basis_means(
    ds: &FusionDataset,
    model: &WorkingModel,
    pi_star0: &[f64],
    pi_star1: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = ds.n() as f64;
    let mean = |rows: Vec<Vec<u32>>, pi: &[f64], zero: bool| -> Vec<f64> {
        rows.iter()
            .map(|r| {
                if zero {
                    0.0
                } else {
                    r.iter().map(|&i| 1.0 - pi[i as usize]).sum::<f64>() / n
                }
            })
            .collect()
    };
    (
        mean(model.basis_rows(ds, Some(0)), pi_star0, false),
        mean(model.basis_rows(ds, Some(1)), pi_star1, ds.external_controls_only),
    )
}

/// Bias-parameter gradient parts for every row.
pub fn sharp_influence(
    ds: &FusionDataset,
    nuis: &NuisanceFit,
    model: &WorkingModel,
    pi_star0: &[f64],
    pi_star1: &[f64],
    psi_sharp: f64,
) -> Result<Vec<SharpParts>> {
    let n = ds.n();
    let phi = dense_rows(&model.basis_rows(ds, None), n);
    let phi0 = dense_rows(&model.basis_rows(ds, Some(0)), n);
    let phi1 = dense_rows(&model.basis_rows(ds, Some(1)), n);
    let (m0, m1) = weighted_basis_means(ds, model, pi_star0, pi_star1);
    let ipcw = ipcw_factors(ds, &nuis.gdelta);
    let eps = nuis.summary.truncation_bound.min(1e-4).max(0.0);
    (0..n)
        .map(|i| {
            let row = SharpRow {
                s: ds.s()[i],
                a: ds.a()[i],
                y: if ds.delta(i) == 1 { ds.y()[i] } else { 0.0 },
                ipcw: ipcw[i],
                qbar: nuis.qbar[i],
                g1: nuis.g1[i],
                pi_initial: nuis.pi[i],
                pi_star0: pi_star0[i],
                pi_star1: pi_star1[i],
                phi: &phi[i],
                phi0: &phi0[i],
                phi1: &phi1[i],
                external_controls_only: ds.external_controls_only,
            };
            d_sharp_projection(&row, model, psi_sharp, (&m0, &m1), eps)
        })
        .collect()
}
