//! Exact estimands, working-model projections and gradient checks on finite
//! discrete distributions.
//!
//! Gradients are evaluated with the same [`crate::eif`] routines the
//! estimators use, fed with exact conditional means, so a pathwise check
//! here certifies the production formulas.

use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisFunction, BasisSet, Domain};
use crate::data::{FusionDataset, Observation};
use crate::eif::{d_pooled_projection, d_psi, d_psi2, d_sharp_projection, SharpRow, TrialRow};
use crate::error::{Error, Result};
use crate::solvers::linalg::{cholesky_dropping, Matrix};
use crate::working_model::{fixed_model, WorkingModelKind};

/// One support point `(s, w, a, y)` with its probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub s: u8,
    pub w: Vec<f64>,
    pub a: u8,
    pub y: f64,
    pub p: f64,
}

#[derive(Debug, Clone)]
pub struct DiscreteDistribution {
    atoms: Vec<Atom>,
    d: usize,
    /// Distinct covariate values, in order of first appearance.
    cells: Vec<Vec<f64>>,
    cell_of: Vec<usize>,
}

const MASS_TOL: f64 = 1e-12;

impl DiscreteDistribution {
    /// Validates total mass and trial positivity: every covariate value
    /// carries trial mass in both arms.
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        let d = atoms
            .first()
            .map(|a| a.w.len())
            .ok_or_else(|| Error::InvalidData("no atoms".into()))?;
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut cells = Vec::new();
        let mut cell_of = Vec::with_capacity(atoms.len());
        let mut total = 0.0;
        for (i, at) in atoms.iter().enumerate() {
            if at.w.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: at.w.len(),
                });
            }
            if at.s > 1 || at.a > 1 {
                return Err(Error::InvalidData(format!("atom {i}: s and a must be binary")));
            }
            if !(at.p > 0.0 && at.p.is_finite()) || !at.y.is_finite() || at.w.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "atom {i}: needs finite values and positive mass"
                )));
            }
            total += at.p;
            let key: Vec<u64> = at.w.iter().map(|v| v.to_bits()).collect();
            let c = *index.entry(key).or_insert_with(|| {
                cells.push(at.w.clone());
                cells.len() - 1
            });
            cell_of.push(c);
        }
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidData(format!("probabilities sum to {total}, not 1")));
        }
        let dist = DiscreteDistribution {
            atoms,
            d,
            cells,
            cell_of,
        };
        let m = dist.masses();
        for c in 0..dist.cells.len() {
            if m.mass[1][0][c] <= 0.0 || m.mass[1][1][c] <= 0.0 {
                return Err(Error::Positivity(format!(
                    "covariate value {:?} lacks trial mass in one arm",
                    dist.cells[c]
                )));
            }
        }
        Ok(dist)
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn cells(&self) -> &[Vec<f64>] {
        &self.cells
    }

    /// No external treated mass.
    pub fn external_controls_only(&self) -> bool {
        !self.atoms.iter().any(|a| a.s == 0 && a.a == 1)
    }

    /// `E_P[f]` over atoms.
    pub fn expect(&self, f: &[f64]) -> f64 {
        self.atoms.iter().zip(f).map(|(a, v)| a.p * v).sum()
    }

    /// The path point `(1 + ε h) P`.
    pub fn perturbed(&self, h: &[f64], eps: f64) -> Result<Self> {
        if h.len() != self.atoms.len() {
            return Err(Error::DimensionMismatch {
                expected: self.atoms.len(),
                found: h.len(),
            });
        }
        let mut atoms = self.atoms.clone();
        for (a, hv) in atoms.iter_mut().zip(h) {
            a.p *= 1.0 + eps * hv;
            if a.p <= 0.0 {
                return Err(Error::InvalidArgument("perturbation leaves the model".into()));
            }
        }
        let total: f64 = atoms.iter().map(|a| a.p).sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidArgument("direction is not mean zero".into()));
        }
        Ok(DiscreteDistribution {
            atoms,
            d: self.d,
            cells: self.cells.clone(),
            cell_of: self.cell_of.clone(),
        })
    }

    /// Draws `n` observations.
    pub fn sample(&self, n: usize, seed: u64) -> Result<FusionDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<f64> = self.atoms.iter().map(|a| a.p).collect();
        let pick = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let obs = (0..n)
            .map(|_| {
                let at = &self.atoms[pick.sample(&mut rng)];
                Observation {
                    s: at.s,
                    w: at.w.clone(),
                    a: at.a,
                    y: at.y,
                    delta: None,
                }
            })
            .collect();
        FusionDataset::new(obs, None)
    }

    fn masses(&self) -> Masses {
        let k = self.cells.len();
        let mut m = Masses {
            mass: [[vec![0.0; k], vec![0.0; k]], [vec![0.0; k], vec![0.0; k]]],
            ysum: [[vec![0.0; k], vec![0.0; k]], [vec![0.0; k], vec![0.0; k]]],
        };
        for (at, &c) in self.atoms.iter().zip(&self.cell_of) {
            m.mass[at.s as usize][at.a as usize][c] += at.p;
            m.ysum[at.s as usize][at.a as usize][c] += at.p * at.y;
        }
        m
    }

    /// Every conditional quantity the estimands and gradients need.
    pub fn functionals(&self) -> Functionals {
        let m = self.masses();
        let k = self.cells.len();
        let mut f = Functionals {
            p_w: vec![0.0; k],
            p_wa: [vec![0.0; k], vec![0.0; k]],
            q: [
                [vec![f64::NAN; k], vec![f64::NAN; k]],
                [vec![f64::NAN; k], vec![f64::NAN; k]],
            ],
            qbar: [vec![0.0; k], vec![0.0; k]],
            theta: vec![0.0; k],
            g1: vec![0.0; k],
            g_trial1: vec![0.0; k],
            pi_bar: vec![0.0; k],
            pi1: [vec![0.0; k], vec![0.0; k]],
            tau_s: [vec![0.0; k], vec![0.0; k]],
            p_trial: 0.0,
        };
        for c in 0..k {
            let cell = |s: usize, a: usize| m.mass[s][a][c];
            let pw = cell(0, 0) + cell(0, 1) + cell(1, 0) + cell(1, 1);
            f.p_w[c] = pw;
            for s in 0..2 {
                for a in 0..2 {
                    if cell(s, a) > 0.0 {
                        f.q[s][a][c] = m.ysum[s][a][c] / cell(s, a);
                    }
                }
            }
            for a in 0..2 {
                let pa = cell(0, a) + cell(1, a);
                f.p_wa[a][c] = pa;
                f.qbar[a][c] = (m.ysum[0][a][c] + m.ysum[1][a][c]) / pa;
                f.pi1[a][c] = cell(1, a) / pa;
                if cell(0, a) > 0.0 {
                    f.tau_s[a][c] = f.q[1][a][c] - f.q[0][a][c];
                }
            }
            f.theta[c] = (0..2)
                .flat_map(|s| (0..2).map(move |a| (s, a)))
                .map(|(s, a)| m.ysum[s][a][c])
                .sum::<f64>()
                / pw;
            f.g1[c] = f.p_wa[1][c] / pw;
            f.pi_bar[c] = (cell(1, 0) + cell(1, 1)) / pw;
            f.g_trial1[c] = cell(1, 1) / (cell(1, 0) + cell(1, 1));
            f.p_trial += cell(1, 0) + cell(1, 1);
        }
        f
    }
}

struct Masses {
    /// `[s][a][cell]`.
    mass: [[Vec<f64>; 2]; 2],
    ysum: [[Vec<f64>; 2]; 2],
}

/// Conditional quantities per covariate cell; `[a]` and `[s][a]` index
/// the treatment and enrollment values.
#[derive(Debug, Clone)]
pub struct Functionals {
    pub p_w: Vec<f64>,
    /// `P(W = w, A = a)`.
    pub p_wa: [Vec<f64>; 2],
    /// `Q(s, w, a) = E(Y | s, w, a)`; NaN on empty cells.
    pub q: [[Vec<f64>; 2]; 2],
    /// `Q̄(w, a) = E(Y | w, a)`.
    pub qbar: [Vec<f64>; 2],
    /// `θ(w) = E(Y | w)`.
    pub theta: Vec<f64>,
    /// `g(1 | w)` pooled.
    pub g1: Vec<f64>,
    /// `g(1 | S = 1, w)`.
    pub g_trial1: Vec<f64>,
    /// `P(S = 1 | w)`.
    pub pi_bar: Vec<f64>,
    /// `Π(1 | w, a)`.
    pub pi1: [Vec<f64>; 2],
    /// `τ_S(w, a)`; zero where no external mass exists.
    pub tau_s: [Vec<f64>; 2],
    pub p_trial: f64,
}

/// `E[Q(1,W,1) − Q(1,W,0)]`, conditional means first.
pub fn exact_psi(dist: &DiscreteDistribution) -> f64 {
    let f = dist.functionals();
    (0..dist.cells.len())
        .map(|c| f.p_w[c] * (f.q[1][1][c] - f.q[1][0][c]))
        .sum()
}

/// The same value as a weighted sum over atoms,
/// `E[S (2A − 1) Y / (P(S=1|W) g(A|1,W))]`.
pub fn exact_psi_weighted(dist: &DiscreteDistribution) -> f64 {
    let f = dist.functionals();
    dist.atoms
        .iter()
        .zip(&dist.cell_of)
        .filter(|(at, _)| at.s == 1)
        .map(|(at, &c)| {
            let ga = if at.a == 1 { f.g_trial1[c] } else { 1.0 - f.g_trial1[c] };
            let sign = if at.a == 1 { 1.0 } else { -1.0 };
            at.p * sign * at.y / (f.pi_bar[c] * ga)
        })
        .sum()
}

/// `E[Q(1,W,1) − Q(1,W,0) | S = 1]`.
pub fn exact_psi2(dist: &DiscreteDistribution) -> f64 {
    let f = dist.functionals();
    (0..dist.cells.len())
        .map(|c| f.p_w[c] * f.pi_bar[c] * (f.q[1][1][c] - f.q[1][0][c]))
        .sum::<f64>()
        / f.p_trial
}

/// `E[Q̄(W,1) − Q̄(W,0)]`.
pub fn exact_psi_tilde(dist: &DiscreteDistribution) -> f64 {
    let f = dist.functionals();
    (0..dist.cells.len())
        .map(|c| f.p_w[c] * (f.qbar[1][c] - f.qbar[0][c]))
        .sum()
}

/// `E[Π(0|W,0) τ_S(W,0) − Π(0|W,1) τ_S(W,1)]`.
pub fn exact_psi_sharp(dist: &DiscreteDistribution) -> f64 {
    let f = dist.functionals();
    (0..dist.cells.len())
        .map(|c| f.p_w[c] * ((1.0 - f.pi1[0][c]) * f.tau_s[0][c] - (1.0 - f.pi1[1][c]) * f.tau_s[1][c]))
        .sum()
}

/// Which conditional effect a basis projects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionTarget {
    TauA,
    TauS,
}

/// Projection coefficients computed three ways.
#[derive(Debug, Clone)]
pub struct ProjectionCheck {
    /// Weighted projection of the conditional effect itself.
    pub via_effect: Vec<f64>,
    /// Regression of the conditional-mean contrast on the residualized
    /// design.
    pub via_conditional_means: Vec<f64>,
    /// Regression of the outcome residual on the residualized design.
    pub via_outcome: Vec<f64>,
    pub max_discrepancy: f64,
    /// Inverse of the information matrix `E[m² φ φᵀ]`.
    pub information_inverse: Matrix,
}

impl ProjectionCheck {
    pub fn beta(&self) -> &[f64] {
        &self.via_effect
    }
}

struct NormalEquations {
    lhs: Matrix,
    rhs: Vec<f64>,
}

impl NormalEquations {
    fn new(p: usize) -> Self {
        NormalEquations {
            lhs: vec![vec![0.0; p]; p],
            rhs: vec![0.0; p],
        }
    }

    fn add(&mut self, weight: f64, phi: &[f64], response: f64) {
        for (j, &pj) in phi.iter().enumerate() {
            if pj == 0.0 {
                continue;
            }
            self.rhs[j] += weight * pj * response;
            for (k, &pk) in phi.iter().enumerate() {
                self.lhs[j][k] += weight * pj * pk;
            }
        }
    }

    fn solve(&self) -> Result<(Vec<f64>, Matrix)> {
        let ch = cholesky_dropping(&self.lhs, 1e-12);
        if !ch.dropped.is_empty() {
            return Err(Error::InvalidArgument(
                "basis functions are linearly dependent under the distribution".into(),
            ));
        }
        Ok((ch.solve(&self.rhs), ch.inverse()))
    }
}

fn phi_at(basis: &BasisSet, w: &[f64], a: Option<u8>) -> Vec<f64> {
    basis.functions.iter().map(|f| f.eval(w, a) as f64).collect()
}

fn check_domain(basis: &BasisSet, target: ProjectionTarget, d: usize) -> Result<()> {
    let want = match target {
        ProjectionTarget::TauA => Domain::WOnly,
        ProjectionTarget::TauS => Domain::WAndA,
    };
    if basis.domain != want || basis.d != d {
        return Err(Error::InvalidArgument(
            "basis domain does not match the projection target".into(),
        ));
    }
    Ok(())
}

/// Exact working-model coefficients: `τ_A` projected with weights
/// `g(1−g)(1|W)`, or `τ_S` with weights `Π(1−Π)(1|W,A)`.
pub fn exact_projection_beta(
    dist: &DiscreteDistribution,
    basis: &BasisSet,
    target: ProjectionTarget,
) -> Result<ProjectionCheck> {
    check_domain(basis, target, dist.d)?;
    let f = dist.functionals();
    let p = basis.len();
    let (mut eff, mut cond, mut out) = (
        NormalEquations::new(p),
        NormalEquations::new(p),
        NormalEquations::new(p),
    );
    match target {
        ProjectionTarget::TauA => {
            for (c, w) in dist.cells.iter().enumerate() {
                let phi = phi_at(basis, w, None);
                let g = f.g1[c];
                eff.add(f.p_w[c] * g * (1.0 - g), &phi, f.qbar[1][c] - f.qbar[0][c]);
                for a in 0..2 {
                    let m = a as f64 - g;
                    cond.add(f.p_wa[a][c] * m * m, &phi, (f.qbar[a][c] - f.theta[c]) / m);
                }
            }
            for (at, &c) in dist.atoms.iter().zip(&dist.cell_of) {
                let phi = phi_at(basis, &at.w, None);
                let m = at.a as f64 - f.g1[c];
                out.add(at.p * m * m, &phi, (at.y - f.theta[c]) / m);
            }
        }
        ProjectionTarget::TauS => {
            for (c, w) in dist.cells.iter().enumerate() {
                for a in 0..2u8 {
                    let ai = a as usize;
                    let phi = phi_at(basis, w, Some(a));
                    let pi = f.pi1[ai][c];
                    eff.add(f.p_wa[ai][c] * pi * (1.0 - pi), &phi, f.tau_s[ai][c]);
                    for s in 0..2usize {
                        let m = s as f64 - pi;
                        let mass = f.p_wa[ai][c] * if s == 1 { pi } else { 1.0 - pi };
                        if mass > 0.0 && m != 0.0 {
                            cond.add(mass * m * m, &phi, (f.q[s][ai][c] - f.qbar[ai][c]) / m);
                        }
                    }
                }
            }
            for (at, &c) in dist.atoms.iter().zip(&dist.cell_of) {
                let phi = phi_at(basis, &at.w, Some(at.a));
                let m = at.s as f64 - f.pi1[at.a as usize][c];
                if m != 0.0 {
                    out.add(at.p * m * m, &phi, (at.y - f.qbar[at.a as usize][c]) / m);
                }
            }
        }
    }
    let (via_effect, information_inverse) = eff.solve()?;
    let (via_conditional_means, _) = cond.solve()?;
    let (via_outcome, _) = out.solve()?;
    let max_discrepancy = via_effect
        .iter()
        .zip(&via_conditional_means)
        .zip(&via_outcome)
        .map(|((x, y), z)| (x - y).abs().max((x - z).abs()))
        .fold(0.0, f64::max);
    Ok(ProjectionCheck {
        via_effect,
        via_conditional_means,
        via_outcome,
        max_discrepancy,
        information_inverse,
    })
}

/// A parameter of the distribution with an implemented gradient.
#[derive(Debug, Clone, PartialEq)]
pub enum Parameter {
    Psi,
    Psi2,
    /// Pooled ATE under the `τ_A` working model spanned by the basis.
    PooledProjection(BasisSet),
    /// Bias parameter under the `τ_S` working model spanned by the basis.
    SharpProjection(BasisSet),
}

impl Parameter {
    pub fn name(&self) -> &'static str {
        match self {
            Parameter::Psi => "psi",
            Parameter::Psi2 => "psi2",
            Parameter::PooledProjection(_) => "pooled-projection",
            Parameter::SharpProjection(_) => "sharp-projection",
        }
    }
}

/// Deliberate gradient errors used to show the checks have teeth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    /// Negates the enrollment-mechanism part of the bias gradient.
    FlipSharpPiSign,
}

pub fn parameter_value(dist: &DiscreteDistribution, param: &Parameter) -> Result<f64> {
    match param {
        Parameter::Psi => Ok(exact_psi(dist)),
        Parameter::Psi2 => Ok(exact_psi2(dist)),
        Parameter::PooledProjection(basis) => {
            let beta = exact_projection_beta(dist, basis, ProjectionTarget::TauA)?.via_effect;
            let f = dist.functionals();
            Ok(dist
                .cells
                .iter()
                .enumerate()
                .map(|(c, w)| f.p_w[c] * dot(&phi_at(basis, w, None), &beta))
                .sum())
        }
        Parameter::SharpProjection(basis) => {
            let beta = exact_projection_beta(dist, basis, ProjectionTarget::TauS)?.via_effect;
            let f = dist.functionals();
            Ok(dist
                .cells
                .iter()
                .enumerate()
                .map(|(c, w)| {
                    let t0 = dot(&phi_at(basis, w, Some(0)), &beta);
                    let t1 = dot(&phi_at(basis, w, Some(1)), &beta);
                    f.p_w[c] * ((1.0 - f.pi1[0][c]) * t0 - (1.0 - f.pi1[1][c]) * t1)
                })
                .sum())
        }
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Gradient of the bias parameter split into its three parts, one entry
/// per atom.
#[derive(Debug, Clone)]
pub struct SharpGradient {
    pub w_part: Vec<f64>,
    pub pi_part: Vec<f64>,
    pub beta_part: Vec<f64>,
}

fn sharp_gradient(dist: &DiscreteDistribution, basis: &BasisSet, mutation: Option<Mutation>) -> Result<SharpGradient> {
    let proj = exact_projection_beta(dist, basis, ProjectionTarget::TauS)?;
    let psi_sharp = parameter_value(dist, &Parameter::SharpProjection(basis.clone()))?;
    let f = dist.functionals();
    let mut model = fixed_model(
        WorkingModelKind::EnrollmentEffect,
        basis.clone(),
        proj.via_effect.clone(),
    )?;
    model.gram_inverse = proj.information_inverse.clone();
    let p = basis.len();
    let (mut m0, mut m1) = (vec![0.0; p], vec![0.0; p]);
    for (c, w) in dist.cells.iter().enumerate() {
        let (phi0, phi1) = (phi_at(basis, w, Some(0)), phi_at(basis, w, Some(1)));
        for j in 0..p {
            m0[j] += f.p_w[c] * (1.0 - f.pi1[0][c]) * phi0[j];
            m1[j] += f.p_w[c] * (1.0 - f.pi1[1][c]) * phi1[j];
        }
    }
    let eco = dist.external_controls_only();
    let n = dist.atoms.len();
    let mut out = SharpGradient {
        w_part: Vec::with_capacity(n),
        pi_part: Vec::with_capacity(n),
        beta_part: Vec::with_capacity(n),
    };
    for (at, &c) in dist.atoms.iter().zip(&dist.cell_of) {
        let phi = phi_at(basis, &at.w, Some(at.a));
        let phi0 = phi_at(basis, &at.w, Some(0));
        let phi1 = phi_at(basis, &at.w, Some(1));
        let row = SharpRow {
            s: at.s,
            a: at.a,
            y: at.y,
            ipcw: 1.0,
            qbar: f.qbar[at.a as usize][c],
            g1: f.g1[c],
            pi_initial: f.pi1[at.a as usize][c],
            pi_star0: f.pi1[0][c],
            pi_star1: f.pi1[1][c],
            phi: &phi,
            phi0: &phi0,
            phi1: &phi1,
            external_controls_only: eco,
        };
        let parts = d_sharp_projection(&row, &model, psi_sharp, (&m0, &m1), 0.0)?;
        out.w_part.push(parts.w_part);
        out.pi_part.push(match mutation {
            Some(Mutation::FlipSharpPiSign) => -parts.pi_part,
            None => parts.pi_part,
        });
        out.beta_part.push(parts.beta_part);
    }
    Ok(out)
}

/// Gradient of `param` at `dist`, one value per atom.
pub fn gradient(dist: &DiscreteDistribution, param: &Parameter, mutation: Option<Mutation>) -> Result<Vec<f64>> {
    let f = dist.functionals();
    let trial_row = |at: &Atom, c: usize| TrialRow {
        s: at.s,
        a: at.a,
        y: at.y,
        ipcw: 1.0,
        q: f.q[at.s as usize][at.a as usize][c],
        q10: f.q[1][0][c],
        q11: f.q[1][1][c],
        g_trial: f.g_trial1[c],
    };
    let rows = dist.atoms.iter().zip(&dist.cell_of);
    match param {
        Parameter::Psi => {
            let psi = exact_psi(dist);
            rows.map(|(at, &c)| d_psi(&trial_row(at, c), f.pi_bar[c], psi, 0.0))
                .collect()
        }
        Parameter::Psi2 => {
            let psi2 = exact_psi2(dist);
            rows.map(|(at, &c)| d_psi2(&trial_row(at, c), f.p_trial, psi2, 0.0))
                .collect()
        }
        Parameter::PooledProjection(basis) => {
            let proj = exact_projection_beta(dist, basis, ProjectionTarget::TauA)?;
            let psi_tilde = parameter_value(dist, param)?;
            let mut model = fixed_model(WorkingModelKind::Cate, basis.clone(), proj.via_effect.clone())?;
            model.gram_inverse = proj.information_inverse;
            let mut means = vec![0.0; basis.len()];
            for (c, w) in dist.cells.iter().enumerate() {
                for (m, v) in means.iter_mut().zip(phi_at(basis, w, None)) {
                    *m += f.p_w[c] * v;
                }
            }
            Ok(rows
                .map(|(at, &c)| {
                    let phi = phi_at(basis, &at.w, None);
                    d_pooled_projection(at.a, at.y, 1.0, f.theta[c], f.g1[c], &phi, &model, psi_tilde, &means)
                })
                .collect())
        }
        Parameter::SharpProjection(basis) => {
            let g = sharp_gradient(dist, basis, mutation)?;
            Ok((0..dist.atoms.len())
                .map(|i| g.w_part[i] + g.pi_part[i] + g.beta_part[i])
                .collect())
        }
    }
}

/// Finite-difference derivative along a path against `E_P[D h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathwiseCheck {
    pub derivative: f64,
    pub expected: f64,
    pub discrepancy: f64,
}

/// Central differences of `param` along `(1 + ε h) P` at steps `h_step`
/// and `h_step / 2`, combined by Richardson extrapolation.
pub fn pathwise_check(
    dist: &DiscreteDistribution,
    param: &Parameter,
    direction: &[f64],
    h_step: f64,
    mutation: Option<Mutation>,
) -> Result<PathwiseCheck> {
    if direction.len() != dist.atoms.len() {
        return Err(Error::DimensionMismatch {
            expected: dist.atoms.len(),
            found: direction.len(),
        });
    }
    let scale = direction.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    if dist.expect(direction).abs() > 1e-12 * scale {
        return Err(Error::InvalidArgument("direction must have mean zero".into()));
    }
    let d = gradient(dist, param, mutation)?;
    let expected: f64 = dist
        .atoms
        .iter()
        .zip(&d)
        .zip(direction)
        .map(|((a, g), h)| a.p * g * h)
        .sum();
    let central = |h: f64| -> Result<f64> {
        let up = parameter_value(&dist.perturbed(direction, h)?, param)?;
        let down = parameter_value(&dist.perturbed(direction, -h)?, param)?;
        Ok((up - down) / (2.0 * h))
    };
    let coarse = central(h_step)?;
    let fine = central(h_step / 2.0)?;
    let derivative = (4.0 * fine - coarse) / 3.0;
    Ok(PathwiseCheck {
        derivative,
        expected,
        discrepancy: (derivative - expected).abs(),
    })
}

/// Shape of a randomly drawn distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomDistributionOptions {
    pub d: usize,
    /// Support points per covariate.
    pub grid: usize,
    /// Outcome support size.
    pub y_values: usize,
    pub external_controls_only: bool,
}

impl Default for RandomDistributionOptions {
    fn default() -> Self {
        RandomDistributionOptions {
            d: 2,
            grid: 3,
            y_values: 3,
            external_controls_only: false,
        }
    }
}

/// Full-support distribution with random masses on a product grid.
pub fn random_distribution<R: Rng>(rng: &mut R, opts: &RandomDistributionOptions) -> Result<DiscreteDistribution> {
    if opts.d == 0 || opts.grid == 0 || opts.y_values == 0 {
        return Err(Error::InvalidArgument("grid sizes must be positive".into()));
    }
    let axes: Vec<Vec<f64>> = (0..opts.d)
        .map(|_| {
            let mut v: Vec<f64> = (0..opts.grid).map(|g| g as f64 + rng.random_range(0.0..0.9)).collect();
            v.sort_by(f64::total_cmp);
            v
        })
        .collect();
    let ys: Vec<f64> = (0..opts.y_values).map(|_| rng.random_range(-2.0..3.0)).collect();
    let mut points: Vec<Vec<f64>> = vec![Vec::new()];
    for axis in &axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    let mut atoms = Vec::new();
    for w in &points {
        for s in 0..2u8 {
            for a in 0..2u8 {
                if opts.external_controls_only && s == 0 && a == 1 {
                    continue;
                }
                for &y in &ys {
                    atoms.push(Atom {
                        s,
                        w: w.clone(),
                        a,
                        y,
                        p: rng.random_range(0.05..1.0),
                    });
                }
            }
        }
    }
    let total: f64 = atoms.iter().map(|a| a.p).sum();
    for a in &mut atoms {
        a.p /= total;
    }
    DiscreteDistribution::new(atoms)
}

/// Bounded mean-zero direction with `max |h| = 1`.
pub fn random_direction<R: Rng>(dist: &DiscreteDistribution, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = dist.atoms.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
    let mean = dist.expect(&raw);
    let centered: Vec<f64> = raw.iter().map(|v| v - mean).collect();
    let top = centered.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    centered.iter().map(|v| v / top).collect()
}

/// Factor of the likelihood a direction perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Factor {
    W,
    AGivenW,
    SGivenWA,
    YGivenSWA,
}

impl Factor {
    pub const ALL: [Factor; 4] = [Factor::W, Factor::AGivenW, Factor::SGivenWA, Factor::YGivenSWA];

    pub fn name(&self) -> &'static str {
        match self {
            Factor::W => "w",
            Factor::AGivenW => "a|w",
            Factor::SGivenWA => "s|w,a",
            Factor::YGivenSWA => "y|s,w,a",
        }
    }
}

/// Component of a mean-zero direction that moves only one factor:
/// successive differences of conditional expectations given `W`,
/// `(W, A)` and `(S, W, A)`.
pub fn factor_direction(dist: &DiscreteDistribution, h: &[f64], factor: Factor) -> Vec<f64> {
    let cond_mean = |key: &dyn Fn(&Atom, usize) -> (usize, u8, u8)| -> Vec<f64> {
        let mut sums: HashMap<(usize, u8, u8), (f64, f64)> = HashMap::new();
        for ((at, &c), hv) in dist.atoms.iter().zip(&dist.cell_of).zip(h) {
            let e = sums.entry(key(at, c)).or_insert((0.0, 0.0));
            e.0 += at.p * hv;
            e.1 += at.p;
        }
        dist.atoms
            .iter()
            .zip(&dist.cell_of)
            .map(|(at, &c)| {
                let (num, den) = sums[&key(at, c)];
                num / den
            })
            .collect()
    };
    let mean = dist.expect(h);
    let by_w = cond_mean(&|_, c| (c, 2, 2));
    let by_wa = cond_mean(&|at, c| (c, at.a, 2));
    let by_swa = cond_mean(&|at, c| (c, at.a, at.s));
    (0..h.len())
        .map(|i| match factor {
            Factor::W => by_w[i] - mean,
            Factor::AGivenW => by_wa[i] - by_w[i],
            Factor::SGivenWA => by_swa[i] - by_wa[i],
            Factor::YGivenSWA => h[i] - by_swa[i],
        })
        .collect()
}

/// Intercept plus `I(w_j ≥ u)` at every support point above the minimum
/// of each covariate, plus one two-way product; over `(W, A)` each
/// function also appears multiplied by `I(A = 1)` unless the external
/// data carry no treated rows.
pub fn staircase_basis(dist: &DiscreteDistribution, domain: Domain) -> Result<BasisSet> {
    let d = dist.d;
    let mut plain = vec![BasisFunction::intercept()];
    let mut axes: Vec<Vec<f64>> = vec![Vec::new(); d];
    for w in &dist.cells {
        for j in 0..d {
            if !axes[j].contains(&w[j]) {
                axes[j].push(w[j]);
            }
        }
    }
    for axis in &mut axes {
        axis.sort_by(f64::total_cmp);
    }
    for (j, axis) in axes.iter().enumerate() {
        for &u in axis.iter().skip(1) {
            plain.push(BasisFunction {
                subset: vec![j],
                knots: vec![u],
                includes_treatment: false,
            });
        }
    }
    if d >= 2 && axes[0].len() > 1 && axes[1].len() > 1 {
        plain.push(BasisFunction {
            subset: vec![0, 1],
            knots: vec![axes[0][axes[0].len() - 1], axes[1][axes[1].len() - 1]],
            includes_treatment: false,
        });
    }
    let functions = match domain {
        Domain::WOnly => plain,
        Domain::WAndA if dist.external_controls_only() => plain,
        Domain::WAndA => {
            let treated: Vec<BasisFunction> = plain
                .iter()
                .map(|f| BasisFunction {
                    includes_treatment: true,
                    ..f.clone()
                })
                .collect();
            plain.into_iter().chain(treated).collect()
        }
    };
    BasisSet::new(domain, d, functions)
}

/// Sizes and seed of a randomized validation sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub distributions: usize,
    pub directions: usize,
    pub seed: u64,
    /// Every `eco_every`-th distribution has no external treated rows.
    pub eco_every: usize,
    pub h_step: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            distributions: 50,
            directions: 5,
            seed: 20240601,
            eco_every: 5,
            h_step: 1e-5,
        }
    }
}

/// One row of the sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub name: String,
    pub count: usize,
    pub max_discrepancy: f64,
    pub tolerance: f64,
    /// Pathwise discrepancies are compared with `tolerance · (1 + |derivative|)`.
    pub relative: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub checks: Vec<CheckSummary>,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckSummary> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Fixed-width table, one line per check.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<34} {:>6} {:>12} {:>9}  result\n",
            "check", "count", "max error", "tol"
        );
        for c in &self.checks {
            out.push_str(&format!(
                "{:<34} {:>6} {:>12.3e} {:>9.0e}  {}\n",
                c.name,
                c.count,
                c.max_discrepancy,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

struct Tally {
    order: Vec<String>,
    rows: HashMap<String, CheckSummary>,
}

impl Tally {
    fn new() -> Self {
        Tally {
            order: Vec::new(),
            rows: HashMap::new(),
        }
    }

    fn record(&mut self, name: &str, err: f64, tolerance: f64, scale: Option<f64>) {
        let row = self.rows.entry(name.to_string()).or_insert_with(|| {
            self.order.push(name.to_string());
            CheckSummary {
                name: name.to_string(),
                count: 0,
                max_discrepancy: 0.0,
                tolerance,
                relative: scale.is_some(),
                passed: true,
            }
        });
        row.count += 1;
        row.max_discrepancy = row.max_discrepancy.max(if err.is_nan() { f64::INFINITY } else { err });
        let bound = tolerance * (1.0 + scale.unwrap_or(0.0).abs());
        if !(err <= bound) {
            row.passed = false;
        }
    }

    fn fail(&mut self, name: &str, tolerance: f64) {
        self.record(name, f64::INFINITY, tolerance, None);
    }

    fn finish(mut self) -> SweepReport {
        SweepReport {
            checks: self.order.iter().map(|n| self.rows.remove(n).expect("row")).collect(),
        }
    }
}

pub const IDENTITY_TOL: f64 = 1e-10;
pub const PATHWISE_TOL: f64 = 1e-6;

/// Runs the identity, projection, mean-zero and pathwise checks over
/// random distributions. An empty sweep passes trivially.
pub fn run_sweep(opts: &SweepOptions, mutation: Option<Mutation>) -> SweepReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut t = Tally::new();
    for k in 0..opts.distributions {
        let eco = opts.eco_every > 0 && k % opts.eco_every == opts.eco_every - 1;
        let dopts = RandomDistributionOptions {
            external_controls_only: eco,
            ..Default::default()
        };
        let dist = match random_distribution(&mut rng, &dopts) {
            Ok(d) => d,
            Err(_) => {
                t.fail("distribution-construction", 0.0);
                continue;
            }
        };
        let psi = exact_psi(&dist);
        t.record(
            "psi-two-ways",
            (psi - exact_psi_weighted(&dist)).abs(),
            IDENTITY_TOL,
            None,
        );
        t.record(
            "bias-decomposition",
            (exact_psi_tilde(&dist) - exact_psi_sharp(&dist) - psi).abs(),
            IDENTITY_TOL,
            None,
        );

        let (basis_a, basis_s) = match (
            staircase_basis(&dist, Domain::WOnly),
            staircase_basis(&dist, Domain::WAndA),
        ) {
            (Ok(a), Ok(s)) => (a, s),
            _ => {
                t.fail("basis-construction", 0.0);
                continue;
            }
        };
        for (name, basis, target) in [
            ("projection-tau-a-three-ways", &basis_a, ProjectionTarget::TauA),
            ("projection-tau-s-three-ways", &basis_s, ProjectionTarget::TauS),
        ] {
            match exact_projection_beta(&dist, basis, target) {
                Ok(p) => t.record(name, p.max_discrepancy, IDENTITY_TOL, None),
                Err(_) => t.fail(name, IDENTITY_TOL),
            }
        }

        let params = [
            Parameter::Psi,
            Parameter::Psi2,
            Parameter::PooledProjection(basis_a),
            Parameter::SharpProjection(basis_s),
        ];
        for param in &params {
            let name = format!("mean-zero-{}", param.name());
            match gradient(&dist, param, mutation) {
                Ok(g) => t.record(&name, dist.expect(&g).abs(), IDENTITY_TOL, None),
                Err(_) => t.fail(&name, IDENTITY_TOL),
            }
        }
        for _ in 0..opts.directions {
            let h = random_direction(&dist, &mut rng);
            for param in &params {
                let name = format!("pathwise-{}", param.name());
                match pathwise_check(&dist, param, &h, opts.h_step, mutation) {
                    Ok(c) => t.record(&name, c.discrepancy, PATHWISE_TOL, Some(c.derivative)),
                    Err(_) => t.fail(&name, PATHWISE_TOL),
                }
            }
            let sharp = &params[3];
            for factor in Factor::ALL {
                let hf = factor_direction(&dist, &h, factor);
                let name = format!("pathwise-sharp-projection[{}]", factor.name());
                match pathwise_check(&dist, sharp, &hf, opts.h_step, mutation) {
                    Ok(c) => t.record(&name, c.discrepancy, PATHWISE_TOL, Some(c.derivative)),
                    Err(_) => t.fail(&name, PATHWISE_TOL),
                }
            }
        }
    }
    t.finish()
}

/// Parts of the bias gradient at `dist`, for inspection.
pub fn sharp_gradient_parts(dist: &DiscreteDistribution, basis: &BasisSet) -> Result<SharpGradient> {
    sharp_gradient(dist, basis, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> DiscreteDistribution {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        random_distribution(&mut rng, &RandomDistributionOptions::default()).unwrap()
    }

    #[test]
    fn single_cell_effect() {
        let atoms = vec![
            Atom {
                s: 1,
                w: vec![0.0],
                a: 1,
                y: 1.0,
                p: 0.3,
            },
            Atom {
                s: 1,
                w: vec![0.0],
                a: 0,
                y: 0.0,
                p: 0.3,
            },
            Atom {
                s: 0,
                w: vec![0.0],
                a: 0,
                y: 2.0,
                p: 0.4,
            },
        ];
        let d = DiscreteDistribution::new(atoms).unwrap();
        assert_eq!(exact_psi(&d), 1.0);
        assert!(d.external_controls_only());
    }

    #[test]
    fn rejects_missing_trial_arm() {
        let atoms = vec![
            Atom {
                s: 1,
                w: vec![0.0],
                a: 1,
                y: 1.0,
                p: 0.5,
            },
            Atom {
                s: 0,
                w: vec![0.0],
                a: 0,
                y: 0.0,
                p: 0.5,
            },
        ];
        assert!(matches!(DiscreteDistribution::new(atoms), Err(Error::Positivity(_))));
    }

    #[test]
    fn zero_direction_has_zero_discrepancy() {
        let d = toy();
        let h = vec![0.0; d.atoms().len()];
        let c = pathwise_check(&d, &Parameter::Psi, &h, 1e-5, None).unwrap();
        assert_eq!(c.discrepancy, 0.0);
    }

    #[test]
    fn factor_directions_sum_to_direction() {
        let d = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = random_direction(&d, &mut rng);
        let parts: Vec<Vec<f64>> = Factor::ALL.iter().map(|&f| factor_direction(&d, &h, f)).collect();
        for i in 0..h.len() {
            let s: f64 = parts.iter().map(|p| p[i]).sum();
            assert!((s - h[i]).abs() < 1e-12);
        }
    }
}
