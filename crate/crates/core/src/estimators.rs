//! A-TMLE, its cross-validated variant and the comparison estimators.

use serde::{Deserialize, Serialize};

use crate::basis::{generate_basis, Domain};
use crate::data::{make_folds, FoldAssignment, FusionDataset};
use crate::eif::{
    clever_covariate, d_ate, d_psi, ipcw_factors, pooled_influence, sharp_influence, InfluenceVectors, SharpParts,
    TrialRow,
};
use crate::error::{Error, Result};
use crate::nuisance::{
    cross_fit, fit_nuisances, fit_trial_nuisances, logit_clamped, truncate, NuisanceFit, NuisanceOptions,
    NuisanceSummary, NuisanceTarget, Request, TrialNuisances,
};
use crate::solvers::linalg::mat_vec;
use crate::solvers::logistic::{expit, logistic_irls};
use crate::solvers::Design;
use crate::working_model::{learn_tau_a, learn_tau_s, WorkingModel, WorkingModelOptions};

pub const SCHEMA_VERSION: u32 = 1;
const Z95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PooledMethod {
    /// Relaxed-HAL plug-in under the learned working model.
    Atmle,
    /// Nonparametric TMLE of the pooled ATE.
    RegularTmle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisOptions {
    pub max_degree: usize,
    pub max_knots: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub v_folds: usize,
    pub seed: u64,
    pub nuisance: NuisanceOptions,
    pub tau_a_basis: BasisOptions,
    pub tau_s_basis: BasisOptions,
    pub tau_a_model: WorkingModelOptions,
    pub tau_s_model: WorkingModelOptions,
    pub pooled: PooledMethod,
    pub targeting_max_iter: usize,
    pub targeting_tol: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            v_folds: 5,
            seed: 1,
            nuisance: NuisanceOptions::default(),
            tau_a_basis: BasisOptions {
                max_degree: 1,
                max_knots: 10,
            },
            tau_s_basis: BasisOptions {
                max_degree: 2,
                max_knots: 10,
            },
            tau_a_model: WorkingModelOptions::default(),
            tau_s_model: WorkingModelOptions::default(),
            pooled: PooledMethod::Atmle,
            targeting_max_iter: 50,
            targeting_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    RctOnly,
    Tmle,
    PooledAipw,
    Atmle,
    CvAtmle,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::RctOnly => "rct-only",
            Estimator::Tmle => "tmle",
            Estimator::PooledAipw => "pooled-aipw",
            Estimator::Atmle => "atmle",
            Estimator::CvAtmle => "cv-atmle",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "rct-only" => Ok(Estimator::RctOnly),
            "tmle" => Ok(Estimator::Tmle),
            "pooled-aipw" => Ok(Estimator::PooledAipw),
            "atmle" => Ok(Estimator::Atmle),
            "cv-atmle" => Ok(Estimator::CvAtmle),
            other => Err(Error::InvalidArgument(format!("unknown estimator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetingLog {
    pub epsilon_path: Vec<f64>,
    pub score_residual: f64,
    pub converged: bool,
}

/// Largest absolute empirical means of the solved scores.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreChecks {
    /// `max_j |P_n D^r_β,j|` of the treatment-effect model.
    pub tau_a_beta: f64,
    /// `max_j |P_n D_β,j|` of the enrollment-effect model.
    pub tau_s_beta: f64,
    /// `|P_n C (S − Π*)|`.
    pub pi_score: f64,
    pub mean_d_pooled: f64,
    pub mean_d_sharp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingModels {
    pub tau_a: Option<WorkingModel>,
    pub tau_s: Option<WorkingModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub schema_version: u32,
    pub estimator: String,
    pub n: usize,
    pub n_trial: usize,
    pub n_external: usize,
    pub psi: f64,
    pub psi_tilde: f64,
    pub psi_sharp: f64,
    pub se: f64,
    pub ci95: [f64; 2],
    pub working_models: WorkingModels,
    pub nuisance_summary: NuisanceSummary,
    pub targeting_log: TargetingLog,
    pub score_checks: ScoreChecks,
    pub warnings: Vec<String>,
    pub influence: InfluenceVectors,
}

impl EstimateReport {
    fn assemble(
        estimator: Estimator,
        ds: &FusionDataset,
        psi_tilde: f64,
        psi_sharp: f64,
        se: f64,
        influence: InfluenceVectors,
    ) -> Self {
        let psi = psi_tilde - psi_sharp;
        EstimateReport {
            schema_version: SCHEMA_VERSION,
            estimator: estimator.name().into(),
            n: ds.n(),
            n_trial: ds.n_trial(),
            n_external: ds.n_external(),
            psi,
            psi_tilde,
            psi_sharp,
            se,
            ci95: [psi - Z95 * se, psi + Z95 * se],
            working_models: WorkingModels {
                tau_a: None,
                tau_s: None,
            },
            nuisance_summary: NuisanceSummary::default(),
            targeting_log: TargetingLog::default(),
            score_checks: ScoreChecks::default(),
            warnings: Vec::new(),
            influence,
        }
    }

    /// Whether the interval covers `truth`.
    pub fn covers(&self, truth: f64) -> bool {
        self.ci95[0] <= truth && truth <= self.ci95[1]
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Estimation(format!("report serialization: {e}")))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn se_of(d: &[f64]) -> f64 {
    let n = d.len() as f64;
    (d.iter().map(|v| v * v).sum::<f64>() / n / n).sqrt()
}

/// Influence vectors for single-gradient estimators.
fn plain_influence(d: Vec<f64>) -> InfluenceVectors {
    let n = d.len();
    InfluenceVectors::new(
        d,
        vec![
            SharpParts {
                w_part: 0.0,
                pi_part: 0.0,
                beta_part: 0.0
            };
            n
        ],
    )
}

/// Result of the enrollment-probability fluctuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiTargetingResult {
    /// `Π*(1 | W, 0)` and `Π*(1 | W, 1)` per row.
    pub pi_star0: Vec<f64>,
    pub pi_star1: Vec<f64>,
    pub epsilon_path: Vec<f64>,
    pub score_residual: f64,
    pub converged: bool,
}

/// Logistic fluctuation `logit Π_ε(1|W,a) = logit Π(1|W,a) + ε C(W,a)`,
/// with `ε` refitted by binomial maximum likelihood until
/// `|P_n C(S − Π*)| < tol` or `max_iter` rounds.
///
/// `c0`, `c1` are the covariate at `a = 0, 1`; rows use the one matching
/// their observed treatment.
#[allow(clippy::too_many_arguments)]
pub fn fluctuate_pi(
    s: &[u8],
    a: &[u8],
    pi0: &[f64],
    pi1: &[f64],
    c0: &[f64],
    c1: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<PiTargetingResult> {
    let n = s.len();
    let mut off0: Vec<f64> = pi0.iter().map(|&p| logit_clamped(p)).collect();
    let mut off1: Vec<f64> = pi1.iter().map(|&p| logit_clamped(p)).collect();
    // Arms with probability exactly one stay fixed.
    let fixed1: Vec<bool> = pi1.iter().map(|&p| p >= 1.0).collect();
    let c: Vec<f64> = (0..n).map(|i| if a[i] == 1 { c1[i] } else { c0[i] }).collect();
    let labels: Vec<f64> = s.iter().map(|&v| v as f64).collect();
    let star = |off0: &[f64], off1: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let p0 = off0.iter().map(|&e| expit(e)).collect();
        let p1 = (0..n).map(|i| if fixed1[i] { 1.0 } else { expit(off1[i]) }).collect();
        (p0, p1)
    };
    let score = |p0: &[f64], p1: &[f64]| -> f64 {
        (0..n)
            .map(|i| c[i] * (labels[i] - if a[i] == 1 { p1[i] } else { p0[i] }))
            .sum::<f64>()
            / n as f64
    };
    let (mut p0, mut p1) = star(&off0, &off1);
    let mut resid = score(&p0, &p1);
    let mut path = Vec::new();
    let live: Vec<usize> = (0..n).filter(|&i| !(a[i] == 1 && fixed1[i])).collect();
    if c.iter().all(|&v| v == 0.0) || live.is_empty() {
        return Ok(PiTargetingResult {
            pi_star0: p0,
            pi_star1: p1,
            epsilon_path: path,
            score_residual: resid.abs(),
            converged: true,
        });
    }
    for _ in 0..max_iter {
        if resid.abs() < tol {
            break;
        }
        let design = Design::from_dense_columns(live.len(), &[live.iter().map(|&i| c[i]).collect()]);
        let offset: Vec<f64> = live
            .iter()
            .map(|&i| if a[i] == 1 { off1[i] } else { off0[i] })
            .collect();
        let y: Vec<f64> = live.iter().map(|&i| labels[i]).collect();
        let fit = logistic_irls(&design, &y, Some(&offset), None)?;
        let eps = fit.coefficients[0];
        if !eps.is_finite() {
            return Err(Error::Estimation("fluctuation produced a non-finite step".into()));
        }
        path.push(eps);
        for i in 0..n {
            off0[i] += eps * c0[i];
            if !fixed1[i] {
                off1[i] += eps * c1[i];
            }
        }
        let next = star(&off0, &off1);
        p0 = next.0;
        p1 = next.1;
        resid = score(&p0, &p1);
    }
    Ok(PiTargetingResult {
        pi_star0: p0,
        pi_star1: p1,
        epsilon_path: path,
        score_residual: resid.abs(),
        converged: resid.abs() < tol,
    })
}

/// Targets `Π` along the clever covariate of the enrollment-effect model.
pub fn target_pi(
    ds: &FusionDataset,
    nuis: &NuisanceFit,
    model: &WorkingModel,
    config: &EstimatorConfig,
) -> Result<PiTargetingResult> {
    let tau0 = model.predict_rows(ds.w(), Some(0));
    let tau1 = model.predict_rows(ds.w(), Some(1));
    let eco = ds.external_controls_only;
    let c0: Vec<f64> = (0..ds.n())
        .map(|i| clever_covariate(0, nuis.g1[i], tau0[i], tau1[i], eco))
        .collect();
    let c1: Vec<f64> = (0..ds.n())
        .map(|i| clever_covariate(1, nuis.g1[i], tau0[i], tau1[i], eco))
        .collect();
    fluctuate_pi(
        ds.s(),
        ds.a(),
        &nuis.pi0,
        &nuis.pi1,
        &c0,
        &c1,
        config.targeting_max_iter,
        config.targeting_tol,
    )
}

/// Plug-in bias estimate and its gradient parts.
pub fn estimate_bias(
    ds: &FusionDataset,
    nuis: &NuisanceFit,
    model: &WorkingModel,
    targeting: &PiTargetingResult,
) -> Result<(f64, Vec<SharpParts>)> {
    let tau0 = model.predict_rows(ds.w(), Some(0));
    let tau1 = model.predict_rows(ds.w(), Some(1));
    let terms: Vec<f64> = (0..ds.n())
        .map(|i| {
            let treated = if ds.external_controls_only {
                0.0
            } else {
                (1.0 - targeting.pi_star1[i]) * tau1[i]
            };
            (1.0 - targeting.pi_star0[i]) * tau0[i] - treated
        })
        .collect();
    let psi_sharp = mean(&terms);
    let parts = sharp_influence(ds, nuis, model, &targeting.pi_star0, &targeting.pi_star1, psi_sharp)?;
    Ok((psi_sharp, parts))
}

/// Plug-in pooled ATE under the working model, with its gradient.
pub fn estimate_pooled(ds: &FusionDataset, nuis: &NuisanceFit, model: &WorkingModel) -> (f64, Vec<f64>) {
    let tau = model.predict_rows(ds.w(), None);
    let psi_tilde = mean(&tau);
    (psi_tilde, pooled_influence(ds, nuis, model, psi_tilde))
}

/// TMLE of an ATE with a linear fluctuation of the outcome regression
/// along `(2A − 1)/g(A|W)`.
fn ate_tmle(a: &[u8], y: &[f64], ipcw: &[f64], q: &[f64], q0: &[f64], q1: &[f64], g1: &[f64]) -> (f64, Vec<f64>) {
    let n = a.len();
    let h = |ai: u8, i: usize| if ai == 1 { 1.0 / g1[i] } else { -1.0 / (1.0 - g1[i]) };
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        if ipcw[i] != 0.0 {
            let hi = h(a[i], i);
            num += ipcw[i] * hi * (y[i] - q[i]);
            den += ipcw[i] * hi * hi;
        }
    }
    let eps = if den > 0.0 { num / den } else { 0.0 };
    let qs: Vec<f64> = (0..n).map(|i| q[i] + eps * h(a[i], i)).collect();
    let qs0: Vec<f64> = (0..n).map(|i| q0[i] + eps * h(0, i)).collect();
    let qs1: Vec<f64> = (0..n).map(|i| q1[i] + eps * h(1, i)).collect();
    let psi = mean(&(0..n).map(|i| qs1[i] - qs0[i]).collect::<Vec<_>>());
    let yv: Vec<f64> = (0..n).map(|i| if ipcw[i] != 0.0 { y[i] } else { 0.0 }).collect();
    let d = (0..n)
        .map(|i| d_ate(a[i], yv[i], ipcw[i], qs[i], qs0[i], qs1[i], g1[i], psi))
        .collect();
    (psi, d)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// `max_j |(I⁻¹ P_n score)_j|`.
fn beta_score_check(model: &WorkingModel, ds: &FusionDataset, nuis: &NuisanceFit) -> f64 {
    max_abs(&mat_vec(&model.gram_inverse, &model.score_residuals(ds, nuis)))
}

/// A-TMLE on precomputed nuisances.
pub fn atmle_with_nuisances(
    ds: &FusionDataset,
    folds: &FoldAssignment,
    nuis: &NuisanceFit,
    config: &EstimatorConfig,
) -> Result<EstimateReport> {
    let mut warnings = nuis.summary.warnings.clone();

    let basis_a = generate_basis(
        ds,
        Domain::WOnly,
        config.tau_a_basis.max_degree,
        config.tau_a_basis.max_knots,
    )?;
    let model_a = learn_tau_a(ds, nuis, &basis_a, folds, &config.tau_a_model)?;
    let (psi_tilde, d_pooled) = match config.pooled {
        PooledMethod::Atmle => estimate_pooled(ds, nuis, &model_a),
        PooledMethod::RegularTmle => {
            let ipcw = ipcw_factors(ds, &nuis.gtilde_delta);
            ate_tmle(ds.a(), ds.y(), &ipcw, &nuis.qbar, &nuis.qbar0, &nuis.qbar1, &nuis.g1)
        }
    };

    let basis_s = generate_basis(
        ds,
        Domain::WAndA,
        config.tau_s_basis.max_degree,
        config.tau_s_basis.max_knots,
    )?;
    let model_s = learn_tau_s(ds, nuis, &basis_s, folds, &config.tau_s_model)?;
    let targeting = target_pi(ds, nuis, &model_s, config)?;
    if !targeting.converged {
        warnings.push(format!(
            "enrollment targeting stopped with score residual {:.3e}",
            targeting.score_residual
        ));
    }
    let (psi_sharp, parts) = estimate_bias(ds, nuis, &model_s, &targeting)?;
    let influence = InfluenceVectors::new(d_pooled, parts);
    let se = influence.standard_error();
    if !se.is_finite() || !psi_tilde.is_finite() || !psi_sharp.is_finite() {
        return Err(Error::Estimation("non-finite estimate".into()));
    }

    let mut report = EstimateReport::assemble(Estimator::Atmle, ds, psi_tilde, psi_sharp, se, influence);
    report.score_checks = ScoreChecks {
        tau_a_beta: beta_score_check(&model_a, ds, nuis),
        tau_s_beta: beta_score_check(&model_s, ds, nuis),
        pi_score: targeting.score_residual,
        mean_d_pooled: mean(&report.influence.d_pooled).abs(),
        mean_d_sharp: mean(&report.influence.d_sharp).abs(),
    };
    report.targeting_log = TargetingLog {
        epsilon_path: targeting.epsilon_path,
        score_residual: targeting.score_residual,
        converged: targeting.converged,
    };
    report.working_models = WorkingModels {
        tau_a: Some(model_a),
        tau_s: Some(model_s),
    };
    report.nuisance_summary = nuis.summary.clone();
    report.warnings = warnings;
    Ok(report)
}

/// Folds and nuisances for `ds` under `config`.
pub fn prepare(ds: &FusionDataset, config: &EstimatorConfig) -> Result<(FoldAssignment, NuisanceFit)> {
    let folds = make_folds(ds, config.v_folds, config.seed)?;
    let nuis = fit_nuisances(ds, &folds, &config.nuisance)?;
    Ok((folds, nuis))
}

/// Adaptive TMLE of the trial-population ATE.
pub fn atmle(ds: &FusionDataset, config: &EstimatorConfig) -> Result<EstimateReport> {
    let (folds, nuis) = prepare(ds, config)?;
    atmle_with_nuisances(ds, &folds, &nuis, config)
}

/// AIPW of the pooled ATE ignoring the data source.
pub fn pooled_aipw_with_nuisances(ds: &FusionDataset, nuis: &NuisanceFit) -> Result<EstimateReport> {
    let ipcw = ipcw_factors(ds, &nuis.gtilde_delta);
    let n = ds.n();
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let y = if ipcw[i] != 0.0 { ds.y()[i] } else { 0.0 };
            d_ate(
                ds.a()[i],
                y,
                ipcw[i],
                nuis.qbar[i],
                nuis.qbar0[i],
                nuis.qbar1[i],
                nuis.g1[i],
                0.0,
            )
        })
        .collect();
    let psi = mean(&raw);
    let d: Vec<f64> = raw.iter().map(|v| v - psi).collect();
    let se = se_of(&d);
    let mut report = EstimateReport::assemble(Estimator::PooledAipw, ds, psi, 0.0, se, plain_influence(d));
    report.nuisance_summary = nuis.summary.clone();
    report.warnings = nuis.summary.warnings.clone();
    Ok(report)
}

pub fn baseline_pooled_aipw(ds: &FusionDataset, config: &EstimatorConfig) -> Result<EstimateReport> {
    let (_, nuis) = prepare(ds, config)?;
    pooled_aipw_with_nuisances(ds, &nuis)
}

/// TMLE of the ATE from the trial rows alone.
pub fn baseline_rct_only(ds: &FusionDataset, config: &EstimatorConfig) -> Result<EstimateReport> {
    let trial_rows: Vec<usize> = (0..ds.n()).filter(|&i| ds.s()[i] == 1).collect();
    let trial = ds.subset(&trial_rows)?;
    let folds = make_folds(&trial, config.v_folds, config.seed)?;
    let n = trial.n();
    let d = trial.d();
    let mut summary = NuisanceSummary {
        truncation_bound: config.nuisance.truncation,
        ..Default::default()
    };
    let mask: Vec<bool> = (0..n).map(|i| trial.delta(i) == 1).collect();
    let q_target = NuisanceTarget {
        name: "q_trial".into(),
        x: trial.w().to_vec(),
        k: d,
        treatment: Some(trial.a().to_vec()),
        y: (0..n).map(|i| if mask[i] { trial.y()[i] } else { 0.0 }).collect(),
        binary: false,
        mask,
        requests: vec![
            Request {
                x: trial.w().to_vec(),
                a: Some(vec![0; n]),
            },
            Request {
                x: trial.w().to_vec(),
                a: Some(vec![1; n]),
            },
        ],
    };
    let q = cross_fit(&q_target, &folds, &config.nuisance)?;
    let g_target = NuisanceTarget {
        name: "g_trial".into(),
        x: trial.w().to_vec(),
        k: d,
        treatment: None,
        y: trial.a().iter().map(|&v| v as f64).collect(),
        binary: true,
        mask: vec![true; n],
        requests: Vec::new(),
    };
    let g = cross_fit(&g_target, &folds, &config.nuisance)?;
    let mut g1 = g.factual.clone();
    summary
        .truncation_events
        .insert("g_trial".into(), truncate(&mut g1, config.nuisance.truncation));
    for (name, cf) in [("q_trial", &q), ("g_trial", &g)] {
        summary.learner_choice.insert(name.into(), cf.choice.name().into());
        summary.cv_risks.insert(name.into(), cf.risks.clone());
        summary.warnings.extend(cf.warnings.iter().cloned());
    }
    let gdelta = if trial.is_censored() {
        let t = NuisanceTarget {
            name: "gdelta_trial".into(),
            x: trial.w().to_vec(),
            k: d,
            treatment: Some(trial.a().to_vec()),
            y: (0..n).map(|i| trial.delta(i) as f64).collect(),
            binary: true,
            mask: vec![true; n],
            requests: Vec::new(),
        };
        let cf = cross_fit(&t, &folds, &config.nuisance)?;
        let mut v = cf.factual;
        summary
            .truncation_events
            .insert("gdelta_trial".into(), truncate(&mut v, config.nuisance.truncation));
        v
    } else {
        vec![1.0; n]
    };
    let ipcw = ipcw_factors(&trial, &gdelta);
    let (psi, dvec) = ate_tmle(
        trial.a(),
        trial.y(),
        &ipcw,
        &q.factual,
        &q.requests[0],
        &q.requests[1],
        &g1,
    );
    let se = se_of(&dvec);
    if !psi.is_finite() || !se.is_finite() {
        return Err(Error::Estimation("non-finite trial-only estimate".into()));
    }
    let mut report = EstimateReport::assemble(Estimator::RctOnly, &trial, psi, 0.0, se, plain_influence(dvec));
    report.warnings = summary.warnings.clone();
    report.nuisance_summary = summary;
    Ok(report)
}

/// TMLE of the trial-population ATE using all rows, with the
/// `1/P(S=1|W)` weighted gradient.
pub fn full_tmle_with_nuisances(ds: &FusionDataset, tn: &TrialNuisances) -> Result<EstimateReport> {
    let n = ds.n();
    let ipcw = ipcw_factors(ds, &tn.gdelta);
    let h = |s: u8, a: u8, i: usize| -> f64 {
        if s == 0 {
            return 0.0;
        }
        let ga = if a == 1 { tn.g_trial[i] } else { 1.0 - tn.g_trial[i] };
        let sign = if a == 1 { 1.0 } else { -1.0 };
        sign / (tn.pi_bar[i] * ga)
    };
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        let hi = h(ds.s()[i], ds.a()[i], i);
        if ipcw[i] != 0.0 && hi != 0.0 {
            num += ipcw[i] * hi * (ds.y()[i] - tn.q[i]);
            den += ipcw[i] * hi * hi;
        }
    }
    let eps = if den > 0.0 { num / den } else { 0.0 };
    let q: Vec<f64> = (0..n).map(|i| tn.q[i] + eps * h(ds.s()[i], ds.a()[i], i)).collect();
    let q10: Vec<f64> = (0..n).map(|i| tn.q10[i] + eps * h(1, 0, i)).collect();
    let q11: Vec<f64> = (0..n).map(|i| tn.q11[i] + eps * h(1, 1, i)).collect();
    let psi = mean(&(0..n).map(|i| q11[i] - q10[i]).collect::<Vec<_>>());
    let eps_bound = tn.summary.truncation_bound;
    let d = (0..n)
        .map(|i| {
            let row = TrialRow {
                s: ds.s()[i],
                a: ds.a()[i],
                y: if ipcw[i] != 0.0 { ds.y()[i] } else { 0.0 },
                ipcw: ipcw[i],
                q: q[i],
                q10: q10[i],
                q11: q11[i],
                g_trial: tn.g_trial[i],
            };
            d_psi(&row, tn.pi_bar[i], psi, eps_bound * (1.0 - 1e-12))
        })
        .collect::<Result<Vec<f64>>>()?;
    let se = se_of(&d);
    if !psi.is_finite() || !se.is_finite() {
        return Err(Error::Estimation("non-finite TMLE estimate".into()));
    }
    let mut report = EstimateReport::assemble(Estimator::Tmle, ds, psi, 0.0, se, plain_influence(d));
    report.nuisance_summary = tn.summary.clone();
    report.warnings = tn.summary.warnings.clone();
    Ok(report)
}

pub fn baseline_full_tmle(ds: &FusionDataset, config: &EstimatorConfig) -> Result<EstimateReport> {
    let folds = make_folds(ds, config.v_folds, config.seed)?;
    let tn = fit_trial_nuisances(ds, &folds, &config.nuisance)?;
    full_tmle_with_nuisances(ds, &tn)
}

/// Cross-validated A-TMLE: working models and nuisances are learned on each
/// training split; the coefficient refit, the enrollment targeting and the
/// plug-in use the held-out split. Estimates are averaged over folds.
pub fn cv_atmle(ds: &FusionDataset, config: &EstimatorConfig, v: usize) -> Result<EstimateReport> {
    if v < 2 {
        return Err(Error::InvalidArgument(format!(
            "cv-atmle needs at least 2 folds, got {v}"
        )));
    }
    let outer = make_folds(ds, v, config.seed)?;
    let n = ds.n();
    let mut d_pooled = vec![0.0; n];
    let mut parts = vec![
        SharpParts {
            w_part: 0.0,
            pi_part: 0.0,
            beta_part: 0.0
        };
        n
    ];
    let mut tilde = Vec::new();
    let mut sharp = Vec::new();
    let mut sigmas = Vec::new();
    let mut warnings = Vec::new();
    let mut checks = ScoreChecks::default();
    let mut eps_path = Vec::new();
    let mut max_resid = 0.0_f64;
    let mut nuisance_summary = None;
    let nuis_opts = NuisanceOptions {
        keep_models: true,
        ..config.nuisance.clone()
    };
    for k in 0..v {
        let run = || -> Result<_> {
            let train_rows = outer.training(k);
            let val_rows = outer.validation(k);
            let train = ds.subset(&train_rows)?;
            let valid = ds.subset(&val_rows)?;
            let inner = make_folds(&train, config.v_folds, config.seed.wrapping_add(k as u64 + 1))?;
            let nt = fit_nuisances(&train, &inner, &nuis_opts)?;
            let basis_a = generate_basis(
                &train,
                Domain::WOnly,
                config.tau_a_basis.max_degree,
                config.tau_a_basis.max_knots,
            )?;
            let model_a = learn_tau_a(&train, &nt, &basis_a, &inner, &config.tau_a_model)?;
            let basis_s = generate_basis(
                &train,
                Domain::WAndA,
                config.tau_s_basis.max_degree,
                config.tau_s_basis.max_knots,
            )?;
            let model_s = learn_tau_s(&train, &nt, &basis_s, &inner, &config.tau_s_model)?;
            let models = nt
                .models
                .as_ref()
                .ok_or_else(|| Error::Estimation("nuisance models missing".into()))?;
            let nv = models.predict(&valid);
            let va = model_a.refit(&valid, &nv)?;
            let vs = model_s.refit(&valid, &nv)?;
            let (pt, dp) = estimate_pooled(&valid, &nv, &va);
            let targeting = target_pi(&valid, &nv, &vs, config)?;
            let (ps, sp) = estimate_bias(&valid, &nv, &vs, &targeting)?;
            let a_check = beta_score_check(&va, &valid, &nv);
            let s_check = beta_score_check(&vs, &valid, &nv);
            Ok((val_rows, pt, dp, ps, sp, targeting, a_check, s_check, nt.summary))
        };
        match run() {
            Ok((rows, pt, dp, ps, sp, targeting, a_check, s_check, summary)) => {
                let dt: Vec<f64> = dp.iter().zip(&sp).map(|(a, b)| a - b.total()).collect();
                sigmas.push((dt.iter().map(|x| x * x).sum::<f64>() / dt.len() as f64).sqrt());
                for (pos, &i) in rows.iter().enumerate() {
                    d_pooled[i] = dp[pos];
                    parts[i] = sp[pos];
                }
                tilde.push(pt);
                sharp.push(ps);
                checks.tau_a_beta = checks.tau_a_beta.max(a_check);
                checks.tau_s_beta = checks.tau_s_beta.max(s_check);
                max_resid = max_resid.max(targeting.score_residual);
                eps_path.extend(targeting.epsilon_path);
                if !targeting.converged {
                    warnings.push(format!("fold {k}: enrollment targeting did not converge"));
                }
                nuisance_summary.get_or_insert(summary);
            }
            Err(e) => warnings.push(format!("fold {k} skipped: {e}")),
        }
    }
    if tilde.len() < 2 {
        return Err(Error::Estimation(format!("only {} usable folds", tilde.len())));
    }
    let psi_tilde = mean(&tilde);
    let psi_sharp = mean(&sharp);
    let se = mean(&sigmas) / (n as f64).sqrt();
    let influence = InfluenceVectors::new(d_pooled, parts);
    let mut report = EstimateReport::assemble(Estimator::CvAtmle, ds, psi_tilde, psi_sharp, se, influence);
    checks.pi_score = max_resid;
    report.score_checks = checks;
    report.targeting_log = TargetingLog {
        epsilon_path: eps_path,
        score_residual: max_resid,
        converged: max_resid < config.targeting_tol,
    };
    report.nuisance_summary = nuisance_summary.unwrap_or_default();
    report.warnings = warnings;
    Ok(report)
}

/// Runs one estimator by kind.
pub fn run_estimator(kind: Estimator, ds: &FusionDataset, config: &EstimatorConfig) -> Result<EstimateReport> {
    match kind {
        Estimator::RctOnly => baseline_rct_only(ds, config),
        Estimator::Tmle => baseline_full_tmle(ds, config),
        Estimator::PooledAipw => baseline_pooled_aipw(ds, config),
        Estimator::Atmle => atmle(ds, config),
        Estimator::CvAtmle => cv_atmle(ds, config, config.v_folds),
    }
}

/// Plug-in variance components of the trial-ATE gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyDiagnostics {
    pub psi: f64,
    pub psi2: f64,
    /// `P_n (Q(1,W,1) − Q(1,W,0) − ψ)²`.
    pub w_component_psi: f64,
    /// `P_n (S/P(S=1))² (Q(1,W,1) − Q(1,W,0) − ψ₂)²`.
    pub w_component_psi2: f64,
    pub y_component_psi: f64,
    pub y_component_psi2: f64,
    /// Coefficient of variation of `P(S=1|W)` across rows.
    pub enrollment_cv: f64,
    /// `P(S=1|W)` is close to constant.
    pub trial_independent_of_w: bool,
    pub advisory: String,
}

pub fn efficiency_diagnostics(ds: &FusionDataset, tn: &TrialNuisances) -> EfficiencyDiagnostics {
    let n = ds.n();
    let ipcw = ipcw_factors(ds, &tn.gdelta);
    let p_trial = ds.n_trial() as f64 / n as f64;
    let cate: Vec<f64> = (0..n).map(|i| tn.q11[i] - tn.q10[i]).collect();
    let psi = mean(&cate);
    let trial: Vec<usize> = (0..n).filter(|&i| ds.s()[i] == 1).collect();
    let psi2 = trial.iter().map(|&i| cate[i]).sum::<f64>() / trial.len() as f64;
    let mut wc = 0.0;
    let mut wc2 = 0.0;
    let mut yc = 0.0;
    let mut yc2 = 0.0;
    for i in 0..n {
        wc += (cate[i] - psi).powi(2);
        if ds.s()[i] == 1 {
            wc2 += ((cate[i] - psi2) / p_trial).powi(2);
            if ipcw[i] != 0.0 {
                let ga = if ds.a()[i] == 1 {
                    tn.g_trial[i]
                } else {
                    1.0 - tn.g_trial[i]
                };
                let r = ipcw[i] * (ds.y()[i] - tn.q[i]) / ga;
                yc += (r / tn.pi_bar[i]).powi(2);
                yc2 += (r / p_trial).powi(2);
            }
        }
    }
    let nf = n as f64;
    let pm = mean(&tn.pi_bar);
    let sd = (tn.pi_bar.iter().map(|p| (p - pm).powi(2)).sum::<f64>() / nf).sqrt();
    let cv = sd / pm;
    let independent = cv < 0.1;
    let advisory = if independent {
        "trial enrollment looks unrelated to covariates; the pooled-covariate estimand should be more precise".into()
    } else {
        "trial enrollment depends on covariates; weighting by 1/P(S=1|W) may inflate the outcome component".into()
    };
    EfficiencyDiagnostics {
        psi,
        psi2,
        w_component_psi: wc / nf,
        w_component_psi2: wc2 / nf,
        y_component_psi: yc / nf,
        y_component_psi2: yc2 / nf,
        enrollment_cv: cv,
        trial_independent_of_w: independent,
        advisory,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_covariate_calibrates_mean() {
        let s = [1, 0, 1, 1, 0, 0, 1, 0];
        let a = [0, 0, 1, 1, 0, 1, 0, 0];
        let pi0 = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.4, 0.3];
        let pi1 = [0.5, 0.6, 0.7, 0.2, 0.3, 0.4, 0.5, 0.5];
        let ones = [1.0; 8];
        let r = fluctuate_pi(&s, &a, &pi0, &pi1, &ones, &ones, 50, 1e-12).unwrap();
        let fitted: f64 = (0..8)
            .map(|i| if a[i] == 1 { r.pi_star1[i] } else { r.pi_star0[i] })
            .sum::<f64>()
            / 8.0;
        assert!((fitted - 0.5).abs() < 1e-10);
        assert!(r.converged);
    }

    #[test]
    fn zero_covariate_leaves_pi_unchanged() {
        let s = [1, 0, 1, 0];
        let a = [0, 1, 1, 0];
        let pi0 = [0.2, 0.3, 0.4, 0.5];
        let pi1 = [0.6, 0.7, 0.8, 0.9];
        let z = [0.0; 4];
        let r = fluctuate_pi(&s, &a, &pi0, &pi1, &z, &z, 50, 1e-8).unwrap();
        assert!(r.epsilon_path.is_empty());
        for i in 0..4 {
            assert!((r.pi_star0[i] - pi0[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn balanced_constant_outcomes() {
        let a = [1, 0, 1, 0];
        let y = [1.0, 0.0, 1.0, 0.0];
        let (psi, d) = ate_tmle(&a, &y, &[1.0; 4], &y, &[0.0; 4], &[1.0; 4], &[0.5; 4]);
        assert_eq!(psi, 1.0);
        assert!(d.iter().all(|v| v.abs() < 1e-15));
    }
}
