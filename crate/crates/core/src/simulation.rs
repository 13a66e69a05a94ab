//! Data-generating scenarios and the Monte Carlo harness.
//!
//! Scenarios `a`–`d` draw fixed stratum sizes; `positivity` draws `S` from
//! an enrollment model that pushes `P(S = 1 | W)` toward zero as `alpha`
//! grows.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::FusionDataset;
use crate::error::{Error, Result};
use crate::estimators::{
    atmle_with_nuisances, baseline_rct_only, cv_atmle, full_tmle_with_nuisances, pooled_aipw_with_nuisances,
    EstimateReport, Estimator, EstimatorConfig,
};
use crate::nuisance::{fit_nuisances, fit_trial_nuisances};
use crate::solvers::expit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioId {
    A,
    B,
    C,
    D,
    Positivity,
}

impl ScenarioId {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "a" => Ok(ScenarioId::A),
            "b" => Ok(ScenarioId::B),
            "c" => Ok(ScenarioId::C),
            "d" => Ok(ScenarioId::D),
            "positivity" => Ok(ScenarioId::Positivity),
            other => Err(Error::InvalidArgument(format!("unknown scenario `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioId::A => "a",
            ScenarioId::B => "b",
            ScenarioId::C => "c",
            ScenarioId::D => "d",
            ScenarioId::Positivity => "positivity",
        }
    }

    /// Treatment effect in the trial population.
    pub fn psi(&self) -> f64 {
        match self {
            ScenarioId::A | ScenarioId::B | ScenarioId::Positivity => 1.5,
            ScenarioId::C | ScenarioId::D => 4.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    /// Enrollment-model steepness; positivity scenarios only.
    pub alpha: Option<f64>,
    /// Trial size for `a`–`d`. For `positivity`, `n_rct + n_external` is
    /// the total size and strata are random.
    pub n_rct: usize,
    pub n_external: usize,
    pub seed: u64,
    /// Probability that an outcome is missing completely at random.
    #[serde(default)]
    pub censoring: f64,
}

impl ScenarioSpec {
    pub fn new(id: ScenarioId, n_rct: usize, ext_multiplier: f64, seed: u64) -> Self {
        ScenarioSpec {
            id,
            alpha: if id == ScenarioId::Positivity { Some(0.5) } else { None },
            n_rct,
            n_external: (n_rct as f64 * ext_multiplier).round() as usize,
            seed,
            censoring: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.id, self.alpha) {
            (ScenarioId::Positivity, None) => {
                return Err(Error::InvalidArgument("positivity scenario requires alpha".into()));
            }
            (ScenarioId::Positivity, Some(a)) if !(a.is_finite() && a > 0.0) => {
                return Err(Error::InvalidArgument(format!("alpha must be positive, got {a}")));
            }
            (id, Some(_)) if id != ScenarioId::Positivity => {
                return Err(Error::InvalidArgument(format!(
                    "alpha is only valid for the positivity scenario, not `{}`",
                    id.name()
                )));
            }
            _ => {}
        }
        if self.n_rct == 0 || self.n_external == 0 {
            return Err(Error::InvalidArgument("stratum sizes must be positive".into()));
        }
        if !(0.0..0.95).contains(&self.censoring) {
            return Err(Error::InvalidArgument(format!(
                "censoring rate {} outside [0, 0.95)",
                self.censoring
            )));
        }
        Ok(())
    }

    /// Short label such as `a` or `positivity-0.5`.
    pub fn label(&self) -> String {
        match self.alpha {
            Some(a) => format!("{}-{}", self.id.name(), a),
            None => self.id.name().into(),
        }
    }

    fn total(&self) -> usize {
        self.n_rct + self.n_external
    }

    /// Marginal trial share for the fixed-size scenarios.
    fn trial_share(&self) -> f64 {
        self.n_rct as f64 / self.total() as f64
    }

    fn draw_w(&self, rng: &mut impl Rng) -> [f64; 3] {
        let mut w = [0.0; 3];
        for v in &mut w {
            *v = match self.id {
                ScenarioId::A | ScenarioId::B => rng.sample(StandardNormal),
                ScenarioId::C | ScenarioId::D => rng.random::<f64>(),
                ScenarioId::Positivity => rng.random_range(-1.0..1.0),
            };
        }
        w
    }

    /// `P(S = 1 | W)` in the positivity scenarios.
    pub fn enrollment_prob(&self, w: &[f64; 3]) -> f64 {
        let alpha = self.alpha.unwrap_or(1.0);
        expit(alpha * (-2.0 + w[0] + w[1] + (2.0 * w[0]).sin() + (2.0 * w[1]).sin()))
    }

    /// `P(A = 1 | S, W)`.
    pub fn treatment_prob(&self, s: u8, w: &[f64; 3]) -> f64 {
        if s == 1 {
            return 0.67;
        }
        match self.id {
            ScenarioId::A | ScenarioId::B => expit(0.5 * w[0]),
            ScenarioId::C | ScenarioId::D => expit(w[0]),
            ScenarioId::Positivity => expit(-0.5 * w[0]),
        }
    }

    /// Additive shift `B(W, A)` applied to external outcomes.
    pub fn bias(&self, w: &[f64; 3], a: u8) -> f64 {
        let ctrl = if a == 0 { 1.0 } else { 0.0 };
        match self.id {
            ScenarioId::A => 0.2 + 1.1 * w[0] * ctrl,
            ScenarioId::B => 0.5 + 3.1 * w[0] * ctrl + 0.8 * w[2],
            ScenarioId::C => 0.3 + 0.9 * w[1] * ctrl + if w[1] > 0.5 { 0.7 * w[2] } else { 0.0 },
            ScenarioId::D => 0.3 + 1.1 * w[0] * ctrl + 0.9 * w[1] * w[1] * w[2],
            ScenarioId::Positivity => 0.2 + 2.1 * w[0] * a as f64,
        }
    }

    /// `E(Y | S = 1, W, A)`.
    pub fn trial_mean(&self, w: &[f64; 3], a: u8) -> f64 {
        let a = a as f64;
        match self.id {
            ScenarioId::A | ScenarioId::B => 2.5 + 0.9 * w[0] + 1.1 * w[1] + 2.7 * w[2] + 1.5 * a,
            ScenarioId::C | ScenarioId::D => 1.9 + 4.2 * a + 0.9 * w[0] + 1.4 * w[1] + 2.1 * w[2],
            ScenarioId::Positivity => 1.9 + 1.5 * a + 0.9 * w[0] + 1.4 * w[1] + 2.1 * w[2],
        }
    }

    fn noise_sd(&self) -> f64 {
        if self.id == ScenarioId::Positivity {
            0.2
        } else {
            1.0
        }
    }

    /// `P(S = 1 | W)`.
    fn trial_prob_given_w(&self, w: &[f64; 3]) -> f64 {
        if self.id == ScenarioId::Positivity {
            self.enrollment_prob(w)
        } else {
            self.trial_share()
        }
    }

    /// `P(S = 0 | W, A = a)`.
    pub fn external_prob(&self, w: &[f64; 3], a: u8) -> f64 {
        let p1 = self.trial_prob_given_w(w);
        let lik = |s: u8| {
            let g = self.treatment_prob(s, w);
            if a == 1 {
                g
            } else {
                1.0 - g
            }
        };
        let num0 = (1.0 - p1) * lik(0);
        num0 / (num0 + p1 * lik(1))
    }
}

/// Draws one dataset.
pub fn generate(spec: &ScenarioSpec) -> Result<FusionDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sd()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n = spec.total();
    let mut s = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(3 * n);
    let mut delta = Vec::with_capacity(n);
    for i in 0..n {
        let wi = spec.draw_w(&mut rng);
        let si: u8 = if spec.id == ScenarioId::Positivity {
            u8::from(rng.random::<f64>() < spec.enrollment_prob(&wi))
        } else {
            u8::from(i < spec.n_rct)
        };
        let ai = u8::from(rng.random::<f64>() < spec.treatment_prob(si, &wi));
        let u: f64 = noise.sample(&mut rng);
        let shift = if si == 0 { spec.bias(&wi, ai) } else { 0.0 };
        let mut yi = spec.trial_mean(&wi, ai) + u + shift;
        if spec.censoring > 0.0 {
            let observed = u8::from(rng.random::<f64>() >= spec.censoring);
            if observed == 0 {
                yi = f64::NAN;
            }
            delta.push(observed);
        }
        s.push(si);
        a.push(ai);
        y.push(yi);
        w.extend_from_slice(&wi);
    }
    let delta = if spec.censoring > 0.0 { Some(delta) } else { None };
    let names = (1..=3).map(|j| format!("w{j}")).collect();
    FusionDataset::from_columns(s, a, y, delta, w, 3, names, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueValues {
    pub psi: f64,
    pub psi_tilde: f64,
    pub psi_sharp: f64,
    /// Bias computed from independent draws in the weighted `τ_S` form.
    pub psi_sharp_weighted: f64,
    /// Monte Carlo standard errors of `psi_tilde` and `psi_sharp_weighted`.
    pub mc_se_tilde: f64,
    pub mc_se_sharp: f64,
}

const TRUTH_CHUNK: usize = 1 << 16;

/// Sums `f` over `n` covariate draws in fixed-order chunks.
fn mc_moments(spec: &ScenarioSpec, n: usize, seed: u64, f: impl Fn(&[f64; 3]) -> f64 + Sync) -> (f64, f64) {
    let chunks = n.div_ceil(TRUTH_CHUNK);
    let sums: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let m = TRUTH_CHUNK.min(n - c * TRUTH_CHUNK);
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..m {
                let w = spec.draw_w(&mut rng);
                let v = f(&w);
                s1 += v;
                s2 += v * v;
            }
            (s1, s2)
        })
        .collect();
    let (s1, s2) = sums.iter().fold((0.0, 0.0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
    let nf = n as f64;
    let mean = s1 / nf;
    let var = (s2 / nf - mean * mean).max(0.0);
    (mean, (var / nf).sqrt())
}

/// Ground truth by Monte Carlo over `W`.
///
/// The pooled effect uses `E(Y | W, a) = Σ_s P(s | W, a) E(Y | s, W, a)`;
/// the bias is also computed on independent draws as
/// `E[Π(0|W,0) τ_S(W,0) − Π(0|W,1) τ_S(W,1)]` with `τ_S = −B`.
pub fn true_values(spec: &ScenarioSpec, n_oracle: usize) -> Result<TrueValues> {
    spec.validate()?;
    if n_oracle == 0 {
        return Err(Error::InvalidArgument("n_oracle must be positive".into()));
    }
    let psi = spec.id.psi();
    let pooled_mean = |w: &[f64; 3], a: u8| {
        let p0 = spec.external_prob(w, a);
        (1.0 - p0) * spec.trial_mean(w, a) + p0 * (spec.trial_mean(w, a) + spec.bias(w, a))
    };
    let (psi_tilde, mc_se_tilde) = mc_moments(spec, n_oracle, spec.seed ^ 0x7a11, |w| {
        pooled_mean(w, 1) - pooled_mean(w, 0)
    });
    let (weighted, mc_se_sharp) = mc_moments(spec, n_oracle, spec.seed ^ 0x5e4d, |w| {
        let tau0 = -spec.bias(w, 0);
        let tau1 = -spec.bias(w, 1);
        spec.external_prob(w, 0) * tau0 - spec.external_prob(w, 1) * tau1
    });
    Ok(TrueValues {
        psi,
        psi_tilde,
        psi_sharp: psi_tilde - psi,
        psi_sharp_weighted: weighted,
        mc_se_tilde,
        mc_se_sharp,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub scenario: ScenarioSpec,
    pub estimators: Vec<Estimator>,
    pub reps: usize,
    pub master_seed: u64,
    pub estimator_config: EstimatorConfig,
    pub n_oracle: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub estimator: Estimator,
    pub psi: Option<f64>,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub psi_sharp: Option<f64>,
    /// Largest solved-score residual (A-TMLE variants only).
    pub max_score_residual: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub estimator: Estimator,
    pub reps_ok: usize,
    pub reps_failed: usize,
    pub mean_estimate: f64,
    pub bias: f64,
    pub variance: f64,
    pub mse: f64,
    /// `MSE(rct-only) / MSE(estimator)`; `None` without the reference.
    pub relative_mse: Option<f64>,
    pub coverage: f64,
    pub mean_ci_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloResult {
    pub scenario: ScenarioSpec,
    pub label: String,
    pub truth: TrueValues,
    pub metrics: Vec<EstimatorMetrics>,
    pub records: Vec<RepRecord>,
}

/// Seeds for one replicate: data seed and estimator seed.
pub fn rep_seeds(master_seed: u64, rep: usize) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(rep as u64);
    (rng.next_u64(), rng.next_u64())
}

fn record(rep: usize, estimator: Estimator, out: Result<EstimateReport>) -> RepRecord {
    match out {
        Ok(r) => RepRecord {
            rep,
            estimator,
            psi: Some(r.psi),
            se: Some(r.se),
            ci_low: Some(r.ci95[0]),
            ci_high: Some(r.ci95[1]),
            psi_sharp: Some(r.psi_sharp),
            max_score_residual: match estimator {
                Estimator::Atmle | Estimator::CvAtmle => {
                    let c = &r.score_checks;
                    Some(c.tau_a_beta.max(c.tau_s_beta).max(c.pi_score))
                }
                _ => None,
            },
            error: None,
        },
        Err(e) => RepRecord {
            rep,
            estimator,
            psi: None,
            se: None,
            ci_low: None,
            ci_high: None,
            psi_sharp: None,
            max_score_residual: None,
            error: Some(e.to_string()),
        },
    }
}

/// Runs every requested estimator on one dataset, sharing nuisance fits.
pub fn run_estimators(
    ds: &FusionDataset,
    estimators: &[Estimator],
    config: &EstimatorConfig,
) -> Vec<(Estimator, Result<EstimateReport>)> {
    let needs_pooled = estimators
        .iter()
        .any(|e| matches!(e, Estimator::Atmle | Estimator::PooledAipw));
    let folds = crate::data::make_folds(ds, config.v_folds, config.seed).map_err(|e| e.to_string());
    let folds = || folds.clone().map_err(Error::Estimation);
    let pooled = if needs_pooled {
        Some(folds().and_then(|f| fit_nuisances(ds, &f, &config.nuisance).map(|n| (f, n))))
    } else {
        None
    };
    let mut trial = None;
    estimators
        .iter()
        .map(|&e| {
            let out = match e {
                Estimator::RctOnly => baseline_rct_only(ds, config),
                Estimator::CvAtmle => cv_atmle(ds, config, config.v_folds),
                Estimator::Atmle | Estimator::PooledAipw => match pooled.as_ref().expect("pooled nuisances") {
                    Ok((f, n)) if e == Estimator::Atmle => atmle_with_nuisances(ds, f, n, config),
                    Ok((_, n)) => pooled_aipw_with_nuisances(ds, n),
                    Err(err) => Err(Error::Estimation(format!("nuisance fit failed: {err}"))),
                },
                Estimator::Tmle => {
                    let tn = trial
                        .get_or_insert_with(|| folds().and_then(|f| fit_trial_nuisances(ds, &f, &config.nuisance)));
                    match tn {
                        Ok(tn) => full_tmle_with_nuisances(ds, tn),
                        Err(err) => Err(Error::Estimation(format!("nuisance fit failed: {err}"))),
                    }
                }
            };
            (e, out)
        })
        .collect()
}

/// Summary metrics from per-rep records.
pub fn summarize(records: &[RepRecord], estimators: &[Estimator], truth: f64) -> Vec<EstimatorMetrics> {
    let mut metrics: Vec<EstimatorMetrics> = estimators
        .iter()
        .map(|&e| {
            let mine: Vec<&RepRecord> = records.iter().filter(|r| r.estimator == e).collect();
            let ok: Vec<&RepRecord> = mine.iter().copied().filter(|r| r.psi.is_some()).collect();
            let m = ok.len() as f64;
            let est: Vec<f64> = ok.iter().map(|r| r.psi.unwrap()).collect();
            let mean = est.iter().sum::<f64>() / m;
            let variance = est.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            let bias = mean - truth;
            let covered = ok
                .iter()
                .filter(|r| r.ci_low.unwrap() <= truth && truth <= r.ci_high.unwrap())
                .count();
            let width = ok.iter().map(|r| r.ci_high.unwrap() - r.ci_low.unwrap()).sum::<f64>() / m;
            EstimatorMetrics {
                estimator: e,
                reps_ok: ok.len(),
                reps_failed: mine.len() - ok.len(),
                mean_estimate: mean,
                bias,
                variance,
                mse: bias * bias + variance,
                relative_mse: None,
                coverage: covered as f64 / m,
                mean_ci_width: width,
            }
        })
        .collect();
    if let Some(reference) = metrics
        .iter()
        .find(|m| m.estimator == Estimator::RctOnly)
        .map(|m| m.mse)
    {
        for m in &mut metrics {
            m.relative_mse = Some(if m.estimator == Estimator::RctOnly {
                1.0
            } else {
                reference / m.mse
            });
        }
    }
    metrics
}

/// Runs a Monte Carlo study on the current rayon pool. Results do not
/// depend on the number of workers.
pub fn run_study(config: &StudyConfig) -> Result<MonteCarloResult> {
    config.scenario.validate()?;
    if config.reps == 0 {
        return Err(Error::InvalidArgument("reps must be at least 1".into()));
    }
    if config.estimators.is_empty() {
        return Err(Error::InvalidArgument("no estimators requested".into()));
    }
    let truth = true_values(&config.scenario, config.n_oracle)?;
    let per_rep: Vec<Vec<RepRecord>> = (0..config.reps)
        .into_par_iter()
        .map(|rep| {
            let (data_seed, est_seed) = rep_seeds(config.master_seed, rep);
            let spec = ScenarioSpec {
                seed: data_seed,
                ..config.scenario.clone()
            };
            let est_config = EstimatorConfig {
                seed: est_seed,
                ..config.estimator_config.clone()
            };
            match generate(&spec) {
                Ok(ds) => run_estimators(&ds, &config.estimators, &est_config)
                    .into_iter()
                    .map(|(e, out)| record(rep, e, out))
                    .collect(),
                Err(err) => config
                    .estimators
                    .iter()
                    .map(|&e| record(rep, e, Err(Error::Estimation(format!("data generation: {err}")))))
                    .collect(),
            }
        })
        .collect();
    let records: Vec<RepRecord> = per_rep.into_iter().flatten().collect();
    let metrics = summarize(&records, &config.estimators, truth.psi);
    log::info!("scenario {} finished: {} reps", config.scenario.label(), config.reps);
    Ok(MonteCarloResult {
        label: config.scenario.label(),
        scenario: config.scenario.clone(),
        truth,
        metrics,
        records,
    })
}

impl MonteCarloResult {
    /// Tidy rows `scenario,estimator,metric,value`.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scenario", "estimator", "metric", "value"])?;
        for m in &self.metrics {
            let mut rows = vec![
                ("reps_ok", m.reps_ok as f64),
                ("reps_failed", m.reps_failed as f64),
                ("mean_estimate", m.mean_estimate),
                ("bias", m.bias),
                ("variance", m.variance),
                ("mse", m.mse),
                ("coverage", m.coverage),
                ("mean_ci_width", m.mean_ci_width),
            ];
            if let Some(r) = m.relative_mse {
                rows.push(("relative_mse", r));
            }
            for (metric, value) in rows {
                w.write_record([self.label.as_str(), m.estimator.name(), metric, &value.to_string()])?;
            }
        }
        for (metric, value) in [
            ("psi", self.truth.psi),
            ("psi_tilde", self.truth.psi_tilde),
            ("psi_sharp", self.truth.psi_sharp),
        ] {
            w.write_record([self.label.as_str(), "truth", metric, &value.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidData(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Estimation(format!("result serialization: {e}")))
    }

    pub fn metrics_for(&self, e: Estimator) -> Option<&EstimatorMetrics> {
        self.metrics.iter().find(|m| m.estimator == e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_only_with_positivity() {
        let mut spec = ScenarioSpec::new(ScenarioId::A, 10, 1.0, 1);
        spec.alpha = Some(0.5);
        assert!(spec.validate().is_err());
        let spec = ScenarioSpec::new(ScenarioId::Positivity, 10, 1.0, 1);
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn fixed_strata() {
        let spec = ScenarioSpec::new(ScenarioId::C, 40, 2.0, 3);
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.n_trial(), 40);
        assert_eq!(ds.n_external(), 80);
    }

    #[test]
    fn rep_seeds_are_distinct() {
        assert_ne!(rep_seeds(7, 0), rep_seeds(7, 1));
        assert_eq!(rep_seeds(7, 3), rep_seeds(7, 3));
    }
}
