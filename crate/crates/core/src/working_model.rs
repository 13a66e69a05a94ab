//! Data-adaptive working models for the conditional treatment effect
//! `τ_A(W)` and the conditional enrollment effect `τ_S(W, A)`.
//!
//! Both are R-loss regressions written without division: the residualized
//! outcome is regressed on basis columns multiplied by the residualized
//! treatment (`A − g`) or enrollment (`S − Π`), selected by cross-validated
//! lasso and refitted by least squares on the selected support.

use serde::{Deserialize, Serialize};

use crate::basis::{BasisSet, Domain};
use crate::data::{FoldAssignment, FusionDataset};
use crate::error::{Error, Result};
use crate::nuisance::NuisanceFit;
use crate::solvers::lasso::{cv_lasso, LassoOptions};
use crate::solvers::linalg::Matrix;
use crate::solvers::ols::{normal_equation_residuals, relaxed_ols};
use crate::solvers::Design;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkingModelKind {
    /// `τ_A(W)`, basis over `W`.
    Cate,
    /// `τ_S(W, A)`, basis over `(W, A)`.
    EnrollmentEffect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingModel {
    pub kind: WorkingModelKind,
    /// Retained basis functions, aligned with `beta_star`.
    pub basis: BasisSet,
    pub beta_star: Vec<f64>,
    /// Inverse of the empirical Gram of the transformed design.
    pub gram_inverse: Matrix,
    /// Positions of the retained functions in the generated basis.
    pub support: Vec<usize>,
    /// Generated-basis positions removed as collinear in the refit.
    pub dropped: Vec<usize>,
    pub lambda: Option<f64>,
    /// Position of `lambda` on the cross-validation grid.
    pub lambda_index: Option<usize>,
}

pub type CateWorkingModel = WorkingModel;
pub type EnrollEffectWorkingModel = WorkingModel;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkingModelOptions {
    pub lasso: LassoOptions,
    /// Leave the intercept and every single-covariate function unpenalized.
    pub force_main_terms: bool,
    /// Skip selection and fit the intercept alone.
    pub intercept_only: bool,
    /// The lasso reuses the nuisance folds shifted by this many labels.
    pub fold_rotation: usize,
}

impl Default for WorkingModelOptions {
    fn default() -> Self {
        WorkingModelOptions {
            lasso: LassoOptions {
                intercept: false,
                ..Default::default()
            },
            force_main_terms: false,
            intercept_only: false,
            fold_rotation: 1,
        }
    }
}

/// Rows of the transformed regression: `response ≈ multiplier · τ(row)`,
/// weighted by `weight`.
#[derive(Debug, Clone)]
pub struct Transformed {
    pub response: Vec<f64>,
    pub multiplier: Vec<f64>,
    pub weight: Vec<f64>,
}

/// `(Y − θ, A − g, Δ/g̃^Δ)`.
pub fn cate_transform(ds: &FusionDataset, nuis: &NuisanceFit) -> Transformed {
    let n = ds.n();
    let mut t = Transformed {
        response: vec![0.0; n],
        multiplier: vec![0.0; n],
        weight: vec![0.0; n],
    };
    for i in 0..n {
        t.multiplier[i] = ds.a()[i] as f64 - nuis.g1[i];
        if ds.delta(i) == 1 {
            t.response[i] = ds.y()[i] - nuis.theta[i];
            t.weight[i] = 1.0 / nuis.gtilde_delta[i];
        }
    }
    t
}

/// `(Y − Q̄, S − Π, Δ/g^Δ)`.
pub fn enrollment_transform(ds: &FusionDataset, nuis: &NuisanceFit) -> Transformed {
    let n = ds.n();
    let mut t = Transformed {
        response: vec![0.0; n],
        multiplier: vec![0.0; n],
        weight: vec![0.0; n],
    };
    for i in 0..n {
        t.multiplier[i] = ds.s()[i] as f64 - nuis.pi[i];
        if ds.delta(i) == 1 {
            t.response[i] = ds.y()[i] - nuis.qbar[i];
            t.weight[i] = 1.0 / nuis.gdelta[i];
        }
    }
    t
}

fn basis_rows(kind: WorkingModelKind, basis: &BasisSet, ds: &FusionDataset) -> Result<Vec<Vec<u32>>> {
    let expected = match kind {
        WorkingModelKind::Cate => Domain::WOnly,
        WorkingModelKind::EnrollmentEffect => Domain::WAndA,
    };
    if basis.domain != expected || basis.d != ds.d() {
        return Err(Error::InvalidArgument(
            "basis domain does not match the working model".into(),
        ));
    }
    Ok(match kind {
        WorkingModelKind::Cate => basis.design_columns(ds.w(), None),
        WorkingModelKind::EnrollmentEffect => basis.design_columns(ds.w(), Some(ds.a())),
    })
}

/// Drops columns that vanish on the transformed design and collapses
/// identical indicator columns; keeps the first of each group.
fn dedupe(rows: &[Vec<u32>], multiplier: &[f64], weight: &[f64]) -> Vec<usize> {
    let mut seen: std::collections::HashMap<&[u32], usize> = std::collections::HashMap::new();
    let mut keep = Vec::new();
    for (j, r) in rows.iter().enumerate() {
        let live = r
            .iter()
            .any(|&i| multiplier[i as usize] != 0.0 && weight[i as usize] != 0.0);
        if !live && j != 0 {
            continue;
        }
        if seen.contains_key(r.as_slice()) {
            continue;
        }
        seen.insert(r.as_slice(), j);
        keep.push(j);
    }
    keep
}

fn fit(
    kind: WorkingModelKind,
    basis: &BasisSet,
    rows: Vec<Vec<u32>>,
    t: &Transformed,
    folds: &FoldAssignment,
    opts: &WorkingModelOptions,
) -> Result<WorkingModel> {
    let n = t.response.len();
    let keep = dedupe(&rows, &t.multiplier, &t.weight);
    let kept_rows: Vec<Vec<u32>> = keep.iter().map(|&j| rows[j].clone()).collect();
    let design = Design::from_indicators(n, &kept_rows, Some(&t.multiplier));

    let (support_local, lambda) = if opts.intercept_only || keep.len() == 1 {
        (vec![0], None)
    } else {
        let pf: Vec<f64> = keep
            .iter()
            .map(|&j| {
                let f = &basis.functions[j];
                let main = f.degree() == 1 && !f.includes_treatment;
                if j == 0 || (opts.force_main_terms && main) {
                    0.0
                } else {
                    1.0
                }
            })
            .collect();
        let lasso_opts = LassoOptions {
            intercept: false,
            penalty_factor: Some(pf),
            ..opts.lasso.clone()
        };
        let fit = cv_lasso(
            &design,
            &t.response,
            &t.weight,
            &folds.rotated(opts.fold_rotation),
            &lasso_opts,
        )?;
        let mut s = fit.support.clone();
        if !s.contains(&0) {
            s.insert(0, 0);
        }
        (s, Some((fit.lambda, fit.lambda_index)))
    };
    let relaxed = relaxed_ols(&design, &t.response, &t.weight, &support_local);
    if relaxed.coefficients.iter().any(|b| !b.is_finite()) {
        return Err(Error::Estimation("non-finite working-model coefficients".into()));
    }
    let support: Vec<usize> = relaxed.columns.iter().map(|&c| keep[c]).collect();
    let dropped: Vec<usize> = relaxed.dropped_columns.iter().map(|&c| keep[c]).collect();
    Ok(WorkingModel {
        kind,
        basis: basis.restrict(&support),
        beta_star: relaxed.coefficients,
        gram_inverse: relaxed.gram_inverse,
        support,
        dropped,
        lambda: lambda.map(|l| l.0),
        lambda_index: lambda.map(|l| l.1),
    })
}

/// Learns `τ_A` on a basis over `W`.
pub fn learn_tau_a(
    ds: &FusionDataset,
    nuis: &NuisanceFit,
    basis: &BasisSet,
    folds: &FoldAssignment,
    opts: &WorkingModelOptions,
) -> Result<CateWorkingModel> {
    let rows = basis_rows(WorkingModelKind::Cate, basis, ds)?;
    fit(
        WorkingModelKind::Cate,
        basis,
        rows,
        &cate_transform(ds, nuis),
        folds,
        opts,
    )
}

/// Learns `τ_S` on a basis over `(W, A)`.
pub fn learn_tau_s(
    ds: &FusionDataset,
    nuis: &NuisanceFit,
    basis: &BasisSet,
    folds: &FoldAssignment,
    opts: &WorkingModelOptions,
) -> Result<EnrollEffectWorkingModel> {
    if ds.n_external() == 0 {
        return Err(Error::InvalidData(
            "the enrollment effect needs external (s=0) rows".into(),
        ));
    }
    let rows = basis_rows(WorkingModelKind::EnrollmentEffect, basis, ds)?;
    fit(
        WorkingModelKind::EnrollmentEffect,
        basis,
        rows,
        &enrollment_transform(ds, nuis),
        folds,
        opts,
    )
}

impl WorkingModel {
    fn check_point(&self, w: &[f64], a: Option<u8>) -> Result<()> {
        match (self.kind, a) {
            (WorkingModelKind::Cate, Some(_)) => Err(Error::InvalidArgument(
                "treatment given to a conditional treatment effect model".into(),
            )),
            (WorkingModelKind::EnrollmentEffect, None) => Err(Error::InvalidArgument(
                "enrollment effect model needs a treatment value".into(),
            )),
            _ if w.len() != self.basis.d => Err(Error::DimensionMismatch {
                expected: self.basis.d,
                found: w.len(),
            }),
            _ => Ok(()),
        }
    }

    /// `Σ_j β*(j) φ_j(w, a)`.
    pub fn predict(&self, w: &[f64], a: Option<u8>) -> Result<f64> {
        self.check_point(w, a)?;
        Ok(self
            .basis
            .functions
            .iter()
            .zip(&self.beta_star)
            .map(|(f, b)| f.eval(w, a) as f64 * b)
            .sum())
    }

    /// Predictions for row-major `w` with the treatment fixed at `a`.
    pub fn predict_rows(&self, w: &[f64], a: Option<u8>) -> Vec<f64> {
        let d = self.basis.d;
        let n = if d == 0 { 0 } else { w.len() / d };
        (0..n)
            .map(|i| {
                let wi = &w[i * d..(i + 1) * d];
                self.basis
                    .functions
                    .iter()
                    .zip(&self.beta_star)
                    .map(|(f, b)| f.eval(wi, a) as f64 * b)
                    .sum()
            })
            .collect()
    }

    /// Indicator design of the retained functions at the rows of `ds`,
    /// treatment fixed at `a` (or observed when `None`).
    pub fn basis_rows(&self, ds: &FusionDataset, a: Option<u8>) -> Vec<Vec<u32>> {
        match (self.kind, a) {
            (WorkingModelKind::Cate, _) => self.basis.design_columns(ds.w(), None),
            (WorkingModelKind::EnrollmentEffect, Some(v)) => self.basis.design_columns_at(ds.w(), ds.n(), v),
            (WorkingModelKind::EnrollmentEffect, None) => self.basis.design_columns(ds.w(), Some(ds.a())),
        }
    }

    fn transform(&self, ds: &FusionDataset, nuis: &NuisanceFit) -> Transformed {
        match self.kind {
            WorkingModelKind::Cate => cate_transform(ds, nuis),
            WorkingModelKind::EnrollmentEffect => enrollment_transform(ds, nuis),
        }
    }

    /// Empirical mean of the coefficient score
    /// `w · m · φ · (r − m τ_β)`, one entry per retained function.
    pub fn score_residuals(&self, ds: &FusionDataset, nuis: &NuisanceFit) -> Vec<f64> {
        let t = self.transform(ds, nuis);
        let design = Design::from_indicators(ds.n(), &self.basis_rows(ds, None), Some(&t.multiplier));
        normal_equation_residuals(&design, &t.response, &t.weight, &self.beta_star)
    }

    /// Least-squares refit of the same functions on other data.
    pub fn refit(&self, ds: &FusionDataset, nuis: &NuisanceFit) -> Result<WorkingModel> {
        let t = self.transform(ds, nuis);
        let rows = self.basis_rows(ds, None);
        let design = Design::from_indicators(ds.n(), &rows, Some(&t.multiplier));
        let all: Vec<usize> = (0..rows.len()).collect();
        let relaxed = relaxed_ols(&design, &t.response, &t.weight, &all);
        if relaxed.coefficients.iter().any(|b| !b.is_finite()) {
            return Err(Error::Estimation("non-finite refit coefficients".into()));
        }
        Ok(WorkingModel {
            kind: self.kind,
            basis: self.basis.restrict(&relaxed.columns),
            beta_star: relaxed.coefficients,
            gram_inverse: relaxed.gram_inverse,
            support: relaxed.columns.iter().map(|&c| self.support[c]).collect(),
            dropped: relaxed.dropped_columns.iter().map(|&c| self.support[c]).collect(),
            lambda: self.lambda,
            lambda_index: self.lambda_index,
        })
    }

    pub fn is_intercept_only(&self) -> bool {
        self.basis.functions.len() == 1 && self.basis.functions[0].is_intercept()
    }
}

/// Builds a fixed model from explicit functions and coefficients.
pub fn fixed_model(kind: WorkingModelKind, basis: BasisSet, beta: Vec<f64>) -> Result<WorkingModel> {
    if basis.len() != beta.len() {
        return Err(Error::DimensionMismatch {
            expected: basis.len(),
            found: beta.len(),
        });
    }
    let p = beta.len();
    Ok(WorkingModel {
        kind,
        support: (0..p).collect(),
        basis,
        beta_star: beta,
        gram_inverse: vec![vec![0.0; p]; p],
        dropped: Vec::new(),
        lambda: None,
        lambda_index: None,
    })
}
