//! Cross-fitted nuisance regressions with discrete super-learner selection.
//!
//! Every nuisance is a regression of a target on features `x` (plus an
//! optional binary treatment that enters HAL bases as `I(a = 1)` products).
//! Predictions for row `i` come from a model trained without `fold(i)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::basis::{generate_basis_from_points, BasisSet, Domain};
use crate::data::{FoldAssignment, FusionDataset};
use crate::error::{Error, Result};
use crate::solvers::lasso::{geometric_grid, lambda_grid, lasso_path, LassoOptions};
use crate::solvers::logistic::{expit, l1_logistic_lambda_max, l1_logistic_path, logistic_irls, logit, CLIP};
use crate::solvers::ols::relaxed_ols;
use crate::solvers::Design;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Learner {
    InterceptOnly,
    MainTermGlm,
    Hal {
        max_degree: usize,
        max_knots: usize,
        n_lambda: usize,
    },
}

impl Learner {
    pub fn name(&self) -> &'static str {
        match self {
            Learner::InterceptOnly => "intercept-only",
            Learner::MainTermGlm => "main-term-glm",
            Learner::Hal { .. } => "hal",
        }
    }

    pub fn hal_default() -> Self {
        Learner::Hal {
            max_degree: 1,
            max_knots: 10,
            n_lambda: 30,
        }
    }

    pub fn default_library() -> Vec<Learner> {
        vec![Learner::InterceptOnly, Learner::MainTermGlm, Learner::hal_default()]
    }

    /// Parses `intercept-only`, `main-term-glm` or `hal`.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "intercept-only" | "mean" => Ok(Learner::InterceptOnly),
            "main-term-glm" | "glm" => Ok(Learner::MainTermGlm),
            "hal" => Ok(Learner::hal_default()),
            other => Err(Error::InvalidArgument(format!("unknown learner `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceOptions {
    pub library: Vec<Learner>,
    /// Probabilities are truncated to `[ε, 1 − ε]`.
    pub truncation: f64,
    /// Keep full-data fits so the nuisances can score new rows.
    pub keep_models: bool,
    /// Declared `P(A = 1 | S = 1)`, used only as a sanity check.
    pub known_trial_treatment_prob: Option<f64>,
}

impl Default for NuisanceOptions {
    fn default() -> Self {
        NuisanceOptions {
            library: Learner::default_library(),
            truncation: 0.01,
            keep_models: false,
            known_trial_treatment_prob: None,
        }
    }
}

impl NuisanceOptions {
    pub fn validate(&self) -> Result<()> {
        if self.library.is_empty() {
            return Err(Error::InvalidArgument("learner library is empty".into()));
        }
        if !(1e-4..0.5).contains(&self.truncation) {
            return Err(Error::InvalidArgument(format!(
                "truncation must lie in [1e-4, 0.5), got {}",
                self.truncation
            )));
        }
        Ok(())
    }
}

/// A fitted regression that can score arbitrary rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FittedModel {
    /// Mean (or probability) constant.
    Constant { value: f64 },
    /// Coefficients over `[1, x_1..x_k, a]`.
    Glm {
        coefficients: Vec<f64>,
        binary: bool,
        with_treatment: bool,
    },
    Hal {
        basis: BasisSet,
        /// Coefficients per basis function (the intercept function is unused).
        beta: Vec<f64>,
        intercept: f64,
        binary: bool,
    },
}

impl FittedModel {
    pub fn predict(&self, x: &[f64], k: usize, a: Option<&[u8]>) -> Vec<f64> {
        let n = if k == 0 { a.map_or(0, |a| a.len()) } else { x.len() / k };
        match self {
            FittedModel::Constant { value } => vec![*value; n],
            FittedModel::Glm {
                coefficients,
                binary,
                with_treatment,
            } => (0..n)
                .map(|i| {
                    let mut eta = coefficients[0];
                    for j in 0..k {
                        eta += coefficients[1 + j] * x[i * k + j];
                    }
                    if *with_treatment {
                        eta += coefficients[1 + k] * a.map_or(0.0, |a| a[i] as f64);
                    }
                    if *binary {
                        expit(eta).clamp(CLIP, 1.0 - CLIP)
                    } else {
                        eta
                    }
                })
                .collect(),
            FittedModel::Hal {
                basis,
                beta,
                intercept,
                binary,
            } => {
                let active: Vec<usize> = (0..beta.len()).filter(|&j| beta[j] != 0.0).collect();
                let sub = basis.restrict(&active);
                let cols = sub.design_columns(x, a);
                let mut out = vec![*intercept; n];
                for (c, &j) in cols.iter().zip(&active) {
                    for &i in c {
                        out[i as usize] += beta[j];
                    }
                }
                if *binary {
                    for v in &mut out {
                        *v = expit(*v).clamp(CLIP, 1.0 - CLIP);
                    }
                }
                out
            }
        }
    }
}

/// Extra prediction points for a nuisance: features and treatment for
/// every row.
#[derive(Debug, Clone)]
pub struct Request {
    pub x: Vec<f64>,
    pub a: Option<Vec<u8>>,
}

/// One regression problem.
#[derive(Debug, Clone)]
pub struct NuisanceTarget {
    pub name: String,
    /// Row-major `n × k` features.
    pub x: Vec<f64>,
    pub k: usize,
    pub treatment: Option<Vec<u8>>,
    /// Response; ignored where `mask` is false.
    pub y: Vec<f64>,
    pub binary: bool,
    /// Rows used for training and risk evaluation.
    pub mask: Vec<bool>,
    pub requests: Vec<Request>,
}

impl NuisanceTarget {
    pub fn n(&self) -> usize {
        self.mask.len()
    }

    fn rows_x(&self, x: &[f64], rows: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len() * self.k);
        for &i in rows {
            out.extend_from_slice(&x[i * self.k..(i + 1) * self.k]);
        }
        out
    }

    fn rows_a(a: Option<&Vec<u8>>, rows: &[usize]) -> Option<Vec<u8>> {
        a.map(|a| rows.iter().map(|&i| a[i]).collect())
    }
}

/// Out-of-fold predictions from the selected learner.
#[derive(Debug, Clone)]
pub struct CrossFit {
    pub factual: Vec<f64>,
    pub requests: Vec<Vec<f64>>,
    pub choice: Learner,
    /// CV risk per library entry (`+∞` for failed candidates).
    pub risks: Vec<f64>,
    pub warnings: Vec<String>,
    pub model: Option<FittedModel>,
}

fn loss(y: f64, p: f64, binary: bool) -> f64 {
    if binary {
        let p = p.clamp(CLIP, 1.0 - CLIP);
        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
    } else {
        (y - p) * (y - p)
    }
}

/// Predictions of one candidate for every λ (HAL) or a single set.
struct CandidateOutput {
    /// `[setting][request][row]`, request 0 being factual.
    preds: Vec<Vec<Vec<f64>>>,
}

fn glm_design(x: &[f64], k: usize, a: Option<&[u8]>, n: usize) -> Design {
    let mut cols = vec![vec![1.0; n]];
    for j in 0..k {
        cols.push((0..n).map(|i| x[i * k + j]).collect());
    }
    if let Some(a) = a {
        cols.push(a.iter().map(|&v| v as f64).collect());
    }
    Design::from_dense_columns(n, &cols)
}

fn fit_simple(t: &NuisanceTarget, learner: &Learner, train: &[usize]) -> Result<FittedModel> {
    let y: Vec<f64> = train.iter().map(|&i| t.y[i]).collect();
    match learner {
        Learner::InterceptOnly => {
            let mean = y.iter().sum::<f64>() / y.len() as f64;
            Ok(FittedModel::Constant {
                value: if t.binary { mean.clamp(CLIP, 1.0 - CLIP) } else { mean },
            })
        }
        Learner::MainTermGlm => {
            let x = t.rows_x(&t.x, train);
            let a = NuisanceTarget::rows_a(t.treatment.as_ref(), train);
            let design = glm_design(&x, t.k, a.as_deref(), train.len());
            let coefficients = if t.binary {
                let fit = logistic_irls(&design, &y, None, None)?;
                if !fit.converged && !fit.separation {
                    return Err(Error::Estimation(format!("{}: logistic fit did not converge", t.name)));
                }
                fit.coefficients
            } else {
                let p = design.p();
                let support: Vec<usize> = (0..p).collect();
                let fit = relaxed_ols(&design, &y, &vec![1.0; y.len()], &support);
                fit.full_coefficients(p)
            };
            if coefficients.iter().any(|c| !c.is_finite()) {
                return Err(Error::Estimation(format!("{}: non-finite GLM coefficients", t.name)));
            }
            Ok(FittedModel::Glm {
                coefficients,
                binary: t.binary,
                with_treatment: t.treatment.is_some(),
            })
        }
        Learner::Hal { .. } => unreachable!("HAL handled by the path routine"),
    }
}

fn domain_of(t: &NuisanceTarget) -> Domain {
    if t.treatment.is_some() {
        Domain::WAndA
    } else {
        Domain::WOnly
    }
}

/// HAL basis and path fitted on `train`; returns one model per λ.
fn fit_hal_path(
    t: &NuisanceTarget,
    train: &[usize],
    lambdas: &[f64],
    max_degree: usize,
    max_knots: usize,
    stop_at: Option<usize>,
) -> Result<(BasisSet, Vec<(Vec<f64>, f64)>)> {
    let xt = t.rows_x(&t.x, train);
    let basis = generate_basis_from_points(&xt, t.k, domain_of(t), max_degree, max_knots)?;
    let at = NuisanceTarget::rows_a(t.treatment.as_ref(), train);
    let design = Design::from_indicators(train.len(), &basis.design_columns(&xt, at.as_deref()), None);
    let y: Vec<f64> = train.iter().map(|&i| t.y[i]).collect();
    let w = vec![1.0; train.len()];
    let grid = match stop_at {
        Some(s) => &lambdas[..=s],
        None => lambdas,
    };
    let opts = LassoOptions::default();
    let path = if t.binary {
        l1_logistic_path(&design, &y, &w, grid, &opts)?
    } else {
        lasso_path(&design, &y, &w, grid, &opts)?
    };
    Ok((basis, path.into_iter().map(|p| (p.beta, p.intercept)).collect()))
}

/// Smallest penalty of the nuisance HAL grid, relative to the largest.
const HAL_LAMBDA_MIN_RATIO: f64 = 1e-2;

fn hal_lambdas(t: &NuisanceTarget, max_degree: usize, max_knots: usize, n_lambda: usize) -> Result<Vec<f64>> {
    let rows: Vec<usize> = (0..t.n()).filter(|&i| t.mask[i]).collect();
    let xt = t.rows_x(&t.x, &rows);
    let basis = generate_basis_from_points(&xt, t.k, domain_of(t), max_degree, max_knots)?;
    let at = NuisanceTarget::rows_a(t.treatment.as_ref(), &rows);
    let design = Design::from_indicators(rows.len(), &basis.design_columns(&xt, at.as_deref()), None);
    let y: Vec<f64> = rows.iter().map(|&i| t.y[i]).collect();
    let w = vec![1.0; rows.len()];
    let opts = LassoOptions {
        n_lambda,
        lambda_min_ratio: HAL_LAMBDA_MIN_RATIO,
        ..Default::default()
    };
    if t.binary {
        let lmax = l1_logistic_lambda_max(&design, &y, &w, &opts);
        Ok(geometric_grid(lmax, n_lambda, opts.lambda_min_ratio))
    } else {
        lambda_grid(&design, &y, &w, &opts)
    }
}

fn hal_model(basis: BasisSet, beta: Vec<f64>, intercept: f64, binary: bool) -> FittedModel {
    FittedModel::Hal {
        basis,
        beta,
        intercept,
        binary,
    }
}

/// All prediction sets `(x, a)` for the rows `rows`: factual first.
fn prediction_inputs(t: &NuisanceTarget, rows: &[usize]) -> Vec<(Vec<f64>, Option<Vec<u8>>)> {
    let mut out = vec![(t.rows_x(&t.x, rows), NuisanceTarget::rows_a(t.treatment.as_ref(), rows))];
    for r in &t.requests {
        out.push((t.rows_x(&r.x, rows), NuisanceTarget::rows_a(r.a.as_ref(), rows)));
    }
    out
}

fn run_candidate(t: &NuisanceTarget, learner: &Learner, folds: &FoldAssignment) -> Result<CandidateOutput> {
    let n = t.n();
    let n_req = 1 + t.requests.len();
    let (settings, lambdas) = match learner {
        Learner::Hal {
            max_degree,
            max_knots,
            n_lambda,
        } => {
            let l = hal_lambdas(t, *max_degree, *max_knots, *n_lambda)?;
            (l.len(), Some(l))
        }
        _ => (1, None),
    };
    let mut preds = vec![vec![vec![f64::NAN; n]; n_req]; settings];
    for k in 0..folds.v {
        let val: Vec<usize> = (0..n).filter(|&i| folds.fold_of[i] == k).collect();
        let train: Vec<usize> = (0..n).filter(|&i| folds.fold_of[i] != k && t.mask[i]).collect();
        if val.is_empty() {
            continue;
        }
        if train.is_empty() {
            return Err(Error::Estimation(format!("{}: empty training fold", t.name)));
        }
        let inputs = prediction_inputs(t, &val);
        match (learner, &lambdas) {
            (
                Learner::Hal {
                    max_degree, max_knots, ..
                },
                Some(l),
            ) => {
                let (basis, path) = fit_hal_path(t, &train, l, *max_degree, *max_knots, None)?;
                for (r, (x, a)) in inputs.iter().enumerate() {
                    let cols = basis.design_columns(x, a.as_deref());
                    let design = Design::from_indicators(val.len(), &cols, None);
                    for (s, (beta, b0)) in path.iter().enumerate() {
                        let lin = design.mul(beta);
                        for (pos, &i) in val.iter().enumerate() {
                            let eta = lin[pos] + b0;
                            preds[s][r][i] = if t.binary {
                                expit(eta).clamp(CLIP, 1.0 - CLIP)
                            } else {
                                eta
                            };
                        }
                    }
                }
            }
            _ => {
                let model = fit_simple(t, learner, &train)?;
                for (r, (x, a)) in inputs.iter().enumerate() {
                    let p = model.predict(x, t.k, a.as_deref());
                    for (pos, &i) in val.iter().enumerate() {
                        preds[0][r][i] = p[pos];
                    }
                }
            }
        }
    }
    Ok(CandidateOutput { preds })
}

fn risk_of(t: &NuisanceTarget, factual: &[f64]) -> f64 {
    let mut s = 0.0;
    let mut m = 0usize;
    for i in 0..t.n() {
        if t.mask[i] {
            s += loss(t.y[i], factual[i], t.binary);
            m += 1;
        }
    }
    let r = s / m.max(1) as f64;
    if r.is_finite() {
        r
    } else {
        f64::INFINITY
    }
}

/// Cross-validated risk of one learner: mean held-out squared error
/// (continuous) or log-loss (binary); `+∞` if the learner fails.
pub fn cv_risk(learner: &Learner, target: &NuisanceTarget, folds: &FoldAssignment) -> f64 {
    match run_candidate(target, learner, folds) {
        Ok(out) => out
            .preds
            .iter()
            .map(|p| risk_of(target, &p[0]))
            .fold(f64::INFINITY, f64::min),
        Err(_) => f64::INFINITY,
    }
}

/// Cross-fits every library candidate and keeps the one with the lowest
/// risk (ties go to the earlier candidate).
pub fn cross_fit(target: &NuisanceTarget, folds: &FoldAssignment, opts: &NuisanceOptions) -> Result<CrossFit> {
    opts.validate()?;
    if !target.mask.iter().any(|&m| m) {
        return Err(Error::Estimation(format!("{}: no training rows", target.name)));
    }
    let mut warnings = Vec::new();
    let mut risks = Vec::with_capacity(opts.library.len());
    let mut best: Option<(usize, usize, CandidateOutput)> = None;
    for (c, learner) in opts.library.iter().enumerate() {
        let out = match run_candidate(target, learner, folds) {
            Ok(out) => out,
            Err(e) => {
                warnings.push(format!("{}: learner {} disqualified: {e}", target.name, learner.name()));
                risks.push(f64::INFINITY);
                continue;
            }
        };
        let mut best_s = 0;
        let mut best_r = f64::INFINITY;
        for (s, p) in out.preds.iter().enumerate() {
            let r = risk_of(target, &p[0]);
            if r < best_r {
                best_r = r;
                best_s = s;
            }
        }
        risks.push(best_r);
        let better = match &best {
            None => best_r.is_finite(),
            Some((bc, _, _)) => best_r < risks[*bc],
        };
        if better {
            best = Some((c, best_s, out));
        }
    }
    let Some((c, s, out)) = best else {
        return Err(Error::Estimation(format!("{}: every learner failed", target.name)));
    };
    let learner = opts.library[c].clone();
    let mut sets = out.preds.into_iter().nth(s).expect("selected setting");
    let factual = sets.remove(0);
    if factual.iter().chain(sets.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::Estimation(format!("{}: non-finite predictions", target.name)));
    }
    let model = if opts.keep_models {
        let rows: Vec<usize> = (0..target.n()).filter(|&i| target.mask[i]).collect();
        Some(match &learner {
            Learner::Hal {
                max_degree,
                max_knots,
                n_lambda,
            } => {
                let lambdas = hal_lambdas(target, *max_degree, *max_knots, *n_lambda)?;
                let (basis, mut path) = fit_hal_path(target, &rows, &lambdas, *max_degree, *max_knots, Some(s))?;
                let (beta, b0) = path.pop().expect("path point");
                hal_model(basis, beta, b0, target.binary)
            }
            other => fit_simple(target, other, &rows)?,
        })
    } else {
        None
    };
    Ok(CrossFit {
        factual,
        requests: sets,
        choice: learner,
        risks,
        warnings,
        model,
    })
}

/// Clamps to `[eps, 1 − eps]`, returning the number of changed entries.
pub fn truncate(p: &mut [f64], eps: f64) -> usize {
    let mut events = 0;
    for v in p.iter_mut() {
        let c = v.clamp(eps, 1.0 - eps);
        if c != *v {
            events += 1;
            *v = c;
        }
    }
    events
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSummary {
    pub learner_choice: BTreeMap<String, String>,
    pub cv_risks: BTreeMap<String, Vec<f64>>,
    pub truncation_events: BTreeMap<String, usize>,
    pub truncation_bound: f64,
    pub warnings: Vec<String>,
}

impl NuisanceSummary {
    fn record(&mut self, name: &str, cf: &CrossFit) {
        self.learner_choice
            .insert(name.to_string(), cf.choice.name().to_string());
        self.cv_risks.insert(name.to_string(), cf.risks.clone());
        self.warnings.extend(cf.warnings.iter().cloned());
    }
}

/// Full-data nuisance models, for scoring rows outside the training data.
#[derive(Debug, Clone)]
pub struct NuisanceModels {
    theta: FittedModel,
    g: FittedModel,
    qbar: FittedModel,
    pi: FittedModel,
    gdelta: Option<FittedModel>,
    gtilde_delta: Option<FittedModel>,
    external_controls_only: bool,
    truncation: f64,
}

/// Nuisance predictions for every observation.
#[derive(Debug, Clone)]
pub struct NuisanceFit {
    /// `θ(W) = E(Y | W)`.
    pub theta: Vec<f64>,
    /// `g(1 | W) = P(A = 1 | W)`.
    pub g1: Vec<f64>,
    /// `Q̄(W, A)` at the observed treatment, at `a = 0` and at `a = 1`.
    pub qbar: Vec<f64>,
    pub qbar0: Vec<f64>,
    pub qbar1: Vec<f64>,
    /// `Π(1 | W, A)` at the observed treatment, at `a = 0` and at `a = 1`.
    pub pi: Vec<f64>,
    pub pi0: Vec<f64>,
    pub pi1: Vec<f64>,
    /// `g^Δ(1 | S, W, A)`; all ones without censoring.
    pub gdelta: Vec<f64>,
    /// `g̃^Δ(1 | W, A)`; all ones without censoring.
    pub gtilde_delta: Vec<f64>,
    pub summary: NuisanceSummary,
    pub models: Option<NuisanceModels>,
}

fn w_with_s(ds: &FusionDataset, s: Option<u8>) -> Vec<f64> {
    let d = ds.d();
    let mut x = Vec::with_capacity(ds.n() * (d + 1));
    for i in 0..ds.n() {
        x.extend_from_slice(ds.w_row(i));
        x.push(s.unwrap_or(ds.s()[i]) as f64);
    }
    x
}

fn outcome_target(ds: &FusionDataset, name: &str, x: Vec<f64>, k: usize, treatment: Option<Vec<u8>>) -> NuisanceTarget {
    let n = ds.n();
    let mask: Vec<bool> = (0..n).map(|i| ds.delta(i) == 1).collect();
    let y: Vec<f64> = (0..n).map(|i| if mask[i] { ds.y()[i] } else { 0.0 }).collect();
    NuisanceTarget {
        name: name.into(),
        x,
        k,
        treatment,
        y,
        binary: false,
        mask,
        requests: Vec::new(),
    }
}

fn binary_target(
    name: &str,
    x: Vec<f64>,
    k: usize,
    treatment: Option<Vec<u8>>,
    y: Vec<f64>,
    mask: Vec<bool>,
) -> NuisanceTarget {
    NuisanceTarget {
        name: name.into(),
        x,
        k,
        treatment,
        y,
        binary: true,
        mask,
        requests: Vec::new(),
    }
}

fn u8_to_f64(v: &[u8]) -> Vec<f64> {
    v.iter().map(|&b| b as f64).collect()
}

struct Targets {
    theta: NuisanceTarget,
    g: NuisanceTarget,
    qbar: NuisanceTarget,
    pi: NuisanceTarget,
    gdelta: Option<NuisanceTarget>,
    gtilde_delta: Option<NuisanceTarget>,
}

fn targets(ds: &FusionDataset) -> Targets {
    let n = ds.n();
    let d = ds.d();
    let w = ds.w().to_vec();
    let a = ds.a().to_vec();
    let all = vec![true; n];
    let theta = outcome_target(ds, "theta", w.clone(), d, None);
    let g = binary_target("g", w.clone(), d, None, u8_to_f64(&a), all.clone());
    let mut qbar = outcome_target(ds, "qbar", w.clone(), d, Some(a.clone()));
    qbar.requests = vec![
        Request {
            x: w.clone(),
            a: Some(vec![0; n]),
        },
        Request {
            x: w.clone(),
            a: Some(vec![1; n]),
        },
    ];
    let pi = if ds.external_controls_only {
        // Π(1 | W, 1) ≡ 1; only the control arm carries information.
        let mask: Vec<bool> = a.iter().map(|&v| v == 0).collect();
        binary_target("pi", w.clone(), d, None, u8_to_f64(ds.s()), mask)
    } else {
        let mut t = binary_target("pi", w.clone(), d, Some(a.clone()), u8_to_f64(ds.s()), all.clone());
        t.requests = vec![
            Request {
                x: w.clone(),
                a: Some(vec![0; n]),
            },
            Request {
                x: w.clone(),
                a: Some(vec![1; n]),
            },
        ];
        t
    };
    let (gdelta, gtilde_delta) = if ds.is_censored() {
        let delta = u8_to_f64(ds.delta_column().expect("censored data has delta"));
        (
            Some(binary_target(
                "gdelta",
                w_with_s(ds, None),
                d + 1,
                Some(a.clone()),
                delta.clone(),
                all.clone(),
            )),
            Some(binary_target("gtilde_delta", w, d, Some(a), delta, all)),
        )
    } else {
        (None, None)
    };
    Targets {
        theta,
        g,
        qbar,
        pi,
        gdelta,
        gtilde_delta,
    }
}

/// Cross-fits `θ`, `g`, `Q̄`, `Π` and, when outcomes are missing, the
/// censoring mechanisms.
pub fn fit_nuisances(ds: &FusionDataset, folds: &FoldAssignment, opts: &NuisanceOptions) -> Result<NuisanceFit> {
    opts.validate()?;
    if folds.n() != ds.n() {
        return Err(Error::DimensionMismatch {
            expected: ds.n(),
            found: folds.n(),
        });
    }
    let n = ds.n();
    let eps = opts.truncation;
    let t = targets(ds);
    let mut summary = NuisanceSummary {
        truncation_bound: eps,
        ..Default::default()
    };

    let theta = cross_fit(&t.theta, folds, opts)?;
    summary.record("theta", &theta);
    let g = cross_fit(&t.g, folds, opts)?;
    summary.record("g", &g);
    let qbar = cross_fit(&t.qbar, folds, opts)?;
    summary.record("qbar", &qbar);
    let pi = cross_fit(&t.pi, folds, opts)?;
    summary.record("pi", &pi);

    let mut g1 = g.factual.clone();
    summary.truncation_events.insert("g".into(), truncate(&mut g1, eps));
    let (mut pi0, mut pi1) = if ds.external_controls_only {
        (pi.factual.clone(), vec![1.0; n])
    } else {
        (pi.requests[0].clone(), pi.requests[1].clone())
    };
    let mut events = truncate(&mut pi0, eps);
    if !ds.external_controls_only {
        events += truncate(&mut pi1, eps);
    }
    summary.truncation_events.insert("pi".into(), events);
    let pi_f: Vec<f64> = (0..n).map(|i| if ds.a()[i] == 1 { pi1[i] } else { pi0[i] }).collect();

    let (gdelta, gtilde_delta, gd_model, gt_model) = match (&t.gdelta, &t.gtilde_delta) {
        (Some(td), Some(tt)) => {
            let gd = cross_fit(td, folds, opts)?;
            summary.record("gdelta", &gd);
            let gt = cross_fit(tt, folds, opts)?;
            summary.record("gtilde_delta", &gt);
            let mut gdv = gd.factual.clone();
            let mut gtv = gt.factual.clone();
            summary
                .truncation_events
                .insert("gdelta".into(), truncate(&mut gdv, eps));
            summary
                .truncation_events
                .insert("gtilde_delta".into(), truncate(&mut gtv, eps));
            (gdv, gtv, gd.model, gt.model)
        }
        _ => (vec![1.0; n], vec![1.0; n], None, None),
    };

    if let Some(p) = opts.known_trial_treatment_prob {
        let trial: Vec<usize> = (0..n).filter(|&i| ds.s()[i] == 1).collect();
        let mean = trial.iter().map(|&i| ds.a()[i] as f64).sum::<f64>() / trial.len() as f64;
        if (mean - p).abs() > 0.05 {
            summary.warnings.push(format!(
                "declared trial treatment probability {p} differs from the observed {mean:.3}"
            ));
        }
    }

    let models = match (theta.model, g.model, qbar.model.clone(), pi.model) {
        (Some(theta_m), Some(g_m), Some(qbar_m), Some(pi_m)) => Some(NuisanceModels {
            theta: theta_m,
            g: g_m,
            qbar: qbar_m,
            pi: pi_m,
            gdelta: gd_model,
            gtilde_delta: gt_model,
            external_controls_only: ds.external_controls_only,
            truncation: eps,
        }),
        _ => None,
    };

    Ok(NuisanceFit {
        theta: theta.factual,
        g1,
        qbar: qbar.factual,
        qbar0: qbar.requests[0].clone(),
        qbar1: qbar.requests[1].clone(),
        pi: pi_f,
        pi0,
        pi1,
        gdelta,
        gtilde_delta,
        summary,
        models,
    })
}

impl NuisanceModels {
    /// Scores every row of `ds` with the full-data fits.
    pub fn predict(&self, ds: &FusionDataset) -> NuisanceFit {
        let n = ds.n();
        let d = ds.d();
        let w = ds.w();
        let eps = self.truncation;
        let zeros = vec![0u8; n];
        let ones = vec![1u8; n];
        let mut summary = NuisanceSummary {
            truncation_bound: eps,
            ..Default::default()
        };
        let theta = self.theta.predict(w, d, None);
        let mut g1 = self.g.predict(w, d, None);
        summary.truncation_events.insert("g".into(), truncate(&mut g1, eps));
        let qbar = self.qbar.predict(w, d, Some(ds.a()));
        let qbar0 = self.qbar.predict(w, d, Some(&zeros));
        let qbar1 = self.qbar.predict(w, d, Some(&ones));
        let (mut pi0, mut pi1) = if self.external_controls_only {
            (self.pi.predict(w, d, None), vec![1.0; n])
        } else {
            (self.pi.predict(w, d, Some(&zeros)), self.pi.predict(w, d, Some(&ones)))
        };
        let mut events = truncate(&mut pi0, eps);
        if !self.external_controls_only {
            events += truncate(&mut pi1, eps);
        }
        summary.truncation_events.insert("pi".into(), events);
        let pi: Vec<f64> = (0..n).map(|i| if ds.a()[i] == 1 { pi1[i] } else { pi0[i] }).collect();
        let (gdelta, gtilde_delta) = match (&self.gdelta, &self.gtilde_delta, ds.is_censored()) {
            (Some(gd), Some(gt), true) => {
                let mut a = gd.predict(&w_with_s(ds, None), d + 1, Some(ds.a()));
                let mut b = gt.predict(w, d, Some(ds.a()));
                truncate(&mut a, eps);
                truncate(&mut b, eps);
                (a, b)
            }
            _ => (vec![1.0; n], vec![1.0; n]),
        };
        NuisanceFit {
            theta,
            g1,
            qbar,
            qbar0,
            qbar1,
            pi,
            pi0,
            pi1,
            gdelta,
            gtilde_delta,
            summary,
            models: None,
        }
    }
}

/// Nuisances of the comparison estimators: `Q(S, W, A)`, the trial
/// treatment mechanism `g(1 | S = 1, W)` and `Π̄(1 | W) = P(S = 1 | W)`.
#[derive(Debug, Clone)]
pub struct TrialNuisances {
    /// `Q(1, W_i, A_i)`.
    pub q: Vec<f64>,
    /// `Q(1, W, 0)` and `Q(1, W, 1)`.
    pub q10: Vec<f64>,
    pub q11: Vec<f64>,
    pub g_trial: Vec<f64>,
    pub pi_bar: Vec<f64>,
    pub gdelta: Vec<f64>,
    pub summary: NuisanceSummary,
}

pub fn fit_trial_nuisances(
    ds: &FusionDataset,
    folds: &FoldAssignment,
    opts: &NuisanceOptions,
) -> Result<TrialNuisances> {
    opts.validate()?;
    let n = ds.n();
    let d = ds.d();
    let eps = opts.truncation;
    let mut summary = NuisanceSummary {
        truncation_bound: eps,
        ..Default::default()
    };
    // `Q(1, W, A)` is learned from trial rows only.
    let mut qt = outcome_target(ds, "q", ds.w().to_vec(), d, Some(ds.a().to_vec()));
    for (m, &s) in qt.mask.iter_mut().zip(ds.s()) {
        *m &= s == 1;
    }
    qt.requests = vec![
        Request {
            x: ds.w().to_vec(),
            a: Some(vec![0; n]),
        },
        Request {
            x: ds.w().to_vec(),
            a: Some(vec![1; n]),
        },
    ];
    let q = cross_fit(&qt, folds, opts)?;
    summary.record("q", &q);

    let trial_mask: Vec<bool> = ds.s().iter().map(|&s| s == 1).collect();
    let gt = binary_target("g_trial", ds.w().to_vec(), d, None, u8_to_f64(ds.a()), trial_mask);
    let g = cross_fit(&gt, folds, opts)?;
    summary.record("g_trial", &g);
    let pt = binary_target("pi_bar", ds.w().to_vec(), d, None, u8_to_f64(ds.s()), vec![true; n]);
    let p = cross_fit(&pt, folds, opts)?;
    summary.record("pi_bar", &p);

    let mut g_trial = g.factual;
    summary
        .truncation_events
        .insert("g_trial".into(), truncate(&mut g_trial, eps));
    let mut pi_bar = p.factual;
    let events = truncate(&mut pi_bar, eps);
    if events > 0 {
        summary.warnings.push(format!(
            "pi_bar: {events} trial-enrollment probabilities truncated at {eps}"
        ));
    }
    summary.truncation_events.insert("pi_bar".into(), events);

    let gdelta = if ds.is_censored() {
        let delta = u8_to_f64(ds.delta_column().expect("delta"));
        let t = binary_target(
            "gdelta",
            w_with_s(ds, None),
            d + 1,
            Some(ds.a().to_vec()),
            delta,
            vec![true; n],
        );
        let cf = cross_fit(&t, folds, opts)?;
        summary.record("gdelta", &cf);
        let mut v = cf.factual;
        summary.truncation_events.insert("gdelta".into(), truncate(&mut v, eps));
        v
    } else {
        vec![1.0; n]
    };

    Ok(TrialNuisances {
        q: q.factual,
        q10: q.requests[0].clone(),
        q11: q.requests[1].clone(),
        g_trial,
        pi_bar,
        gdelta,
        summary,
    })
}

/// `logit` of a truncated probability; exposed for fluctuation offsets.
pub fn logit_clamped(p: f64) -> f64 {
    logit(p.clamp(CLIP, 1.0 - CLIP))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_folds, Observation};

    fn dataset(n: usize, y_const: Option<f64>) -> FusionDataset {
        let obs = (0..n)
            .map(|i| {
                let w = (i as f64 * 0.37).sin();
                let s = (i % 3 != 0) as u8;
                let a = ((i * 7 + i / 3) % 2) as u8;
                Observation {
                    s,
                    w: vec![w],
                    a,
                    y: y_const.unwrap_or(1.0 + w + a as f64 + 0.1 * (i as f64 * 1.7).cos()),
                    delta: None,
                }
            })
            .collect();
        FusionDataset::new(obs, Some(false)).unwrap()
    }

    #[test]
    fn constant_outcome_gives_constant_theta() {
        let ds = dataset(60, Some(3.0));
        let folds = make_folds(&ds, 5, 1).unwrap();
        let fit = fit_nuisances(&ds, &folds, &NuisanceOptions::default()).unwrap();
        for v in &fit.theta {
            assert!((v - 3.0).abs() < 1e-9);
        }
        assert!(fit.gdelta.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn probabilities_respect_truncation() {
        let ds = dataset(80, None);
        let folds = make_folds(&ds, 5, 2).unwrap();
        let opts = NuisanceOptions {
            truncation: 0.05,
            ..Default::default()
        };
        let fit = fit_nuisances(&ds, &folds, &opts).unwrap();
        for v in fit.g1.iter().chain(&fit.pi0).chain(&fit.pi1) {
            assert!((0.05..=0.95).contains(v));
        }
    }

    #[test]
    fn selected_risk_is_minimum() {
        let ds = dataset(80, None);
        let folds = make_folds(&ds, 5, 3).unwrap();
        let t = targets(&ds);
        let opts = NuisanceOptions::default();
        let cf = cross_fit(&t.qbar, &folds, &opts).unwrap();
        let idx = opts.library.iter().position(|l| *l == cf.choice).unwrap();
        let min = cf.risks.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(cf.risks[idx], min);
        for l in &opts.library {
            let r = cv_risk(l, &t.qbar, &folds);
            assert!(r >= min - 1e-12);
        }
    }

    #[test]
    fn intercept_only_risk_is_variance_scale() {
        let ds = dataset(100, None);
        let folds = make_folds(&ds, 5, 4).unwrap();
        let t = targets(&ds);
        let r = cv_risk(&Learner::InterceptOnly, &t.theta, &folds);
        let y = ds.y();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (y.len() - 1) as f64;
        assert!((r / var - 1.0).abs() < 0.15, "{r} vs {var}");
    }
}
