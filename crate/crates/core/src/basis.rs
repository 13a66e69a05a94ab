//! Zero-order spline (indicator) bases for HAL-style working models.

use serde::{Deserialize, Serialize};

use crate::data::FusionDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    WOnly,
    WAndA,
}

/// `Π_{j ∈ subset} I(w_j ≥ knot_j)`, times `I(a = 1)` when `includes_treatment`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisFunction {
    pub subset: Vec<usize>,
    pub knots: Vec<f64>,
    pub includes_treatment: bool,
}

impl BasisFunction {
    pub fn intercept() -> Self {
        BasisFunction {
            subset: Vec::new(),
            knots: Vec::new(),
            includes_treatment: false,
        }
    }

    pub fn is_intercept(&self) -> bool {
        self.subset.is_empty() && !self.includes_treatment
    }

    /// Evaluates at `w`, with `a` read as 0 when absent.
    #[inline]
    pub fn eval(&self, w: &[f64], a: Option<u8>) -> u8 {
        if self.includes_treatment && a != Some(1) {
            return 0;
        }
        let on = self.subset.iter().zip(&self.knots).all(|(&j, &u)| w[j] >= u);
        on as u8
    }

    /// Main-term functions: a single covariate, any treatment flag.
    pub fn degree(&self) -> usize {
        self.subset.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    pub functions: Vec<BasisFunction>,
    pub domain: Domain,
    pub d: usize,
}

/// Upper bound on the number of functions `generate_basis` may return.
pub fn basis_cap(d: usize, domain: Domain, max_degree: usize, max_knots_per_dim: usize) -> usize {
    let mut total = 1usize;
    let mut choose = 1usize;
    for k in 1..=max_degree.min(d) {
        choose = choose * (d - k + 1) / k;
        total = total.saturating_add(choose.saturating_mul(max_knots_per_dim.saturating_pow(k as u32)));
    }
    match domain {
        Domain::WOnly => total,
        Domain::WAndA => total.saturating_mul(2),
    }
}

/// Distinct sorted values of `values`, subsampled to at most `k` at
/// positions `floor(i·m/k)`; the minimum is always kept.
pub fn quantile_knots(values: &[f64], k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    let m = v.len();
    if m <= k {
        return v;
    }
    (0..k).map(|i| v[i * m / k]).collect()
}

fn subsets(d: usize, max_degree: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, d: usize, size: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        for j in start..d {
            cur.push(j);
            rec(j + 1, d, size, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for size in 1..=max_degree.min(d) {
        rec(0, d, size, &mut Vec::new(), &mut out);
    }
    out
}

impl BasisSet {
    /// Builds a basis from explicit functions. The intercept is prepended
    /// when missing; duplicates are rejected.
    pub fn new(domain: Domain, d: usize, functions: Vec<BasisFunction>) -> Result<Self> {
        let mut all = vec![BasisFunction::intercept()];
        for f in functions {
            if f.is_intercept() {
                continue;
            }
            if f.subset.len() != f.knots.len() || f.subset.iter().any(|&j| j >= d) {
                return Err(Error::InvalidArgument("basis function subset out of range".into()));
            }
            if f.knots.iter().any(|u| !u.is_finite()) {
                return Err(Error::InvalidArgument("non-finite knot".into()));
            }
            if f.includes_treatment && domain == Domain::WOnly {
                return Err(Error::InvalidArgument("treatment indicator in a W-only basis".into()));
            }
            if all.contains(&f) {
                return Err(Error::InvalidArgument("duplicate basis function".into()));
            }
            all.push(f);
        }
        Ok(BasisSet {
            functions: all,
            domain,
            d,
        })
    }

    pub fn intercept_only(domain: Domain, d: usize) -> Self {
        BasisSet {
            functions: vec![BasisFunction::intercept()],
            domain,
            d,
        }
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// Keeps only the functions at `indices` (which must include 0).
    pub fn restrict(&self, indices: &[usize]) -> Self {
        BasisSet {
            functions: indices.iter().map(|&j| self.functions[j].clone()).collect(),
            domain: self.domain,
            d: self.d,
        }
    }

    /// Evaluates every function at one point.
    pub fn evaluate(&self, w: &[f64], a: Option<u8>) -> Result<Vec<u8>> {
        if w.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                found: w.len(),
            });
        }
        match (self.domain, a) {
            (Domain::WOnly, Some(_)) => {
                return Err(Error::InvalidArgument("treatment given for a W-only basis".into()))
            }
            (Domain::WAndA, None) => return Err(Error::InvalidArgument("treatment required for a (W,A) basis".into())),
            _ => {}
        }
        Ok(self.functions.iter().map(|f| f.eval(w, a)).collect())
    }

    /// Column-compressed design over row-major `w` (`n × d`): for each
    /// function, the rows where it equals one.
    pub fn design_columns(&self, w: &[f64], a: Option<&[u8]>) -> Vec<Vec<u32>> {
        let n = if self.d == 0 {
            a.map_or(0, |a| a.len())
        } else {
            w.len() / self.d
        };
        self.functions
            .iter()
            .map(|f| {
                (0..n)
                    .filter(|&i| f.eval(&w[i * self.d..(i + 1) * self.d], a.map(|a| a[i])) == 1)
                    .map(|i| i as u32)
                    .collect()
            })
            .collect()
    }

    /// Design with the treatment fixed at `a` for every row.
    pub fn design_columns_at(&self, w: &[f64], n: usize, a: u8) -> Vec<Vec<u32>> {
        let fixed = vec![a; n];
        self.design_columns(w, Some(&fixed))
    }
}

/// Generates a basis from the covariates of `dataset`.
pub fn generate_basis(
    dataset: &FusionDataset,
    domain: Domain,
    max_degree: usize,
    max_knots_per_dim: usize,
) -> Result<BasisSet> {
    generate_basis_from_points(dataset.w(), dataset.d(), domain, max_degree, max_knots_per_dim)
}

/// Generates a basis from row-major points `w` with `d` columns.
pub fn generate_basis_from_points(
    w: &[f64],
    d: usize,
    domain: Domain,
    max_degree: usize,
    max_knots_per_dim: usize,
) -> Result<BasisSet> {
    if max_degree < 1 || max_knots_per_dim < 1 {
        return Err(Error::InvalidArgument(
            "max_degree and max_knots_per_dim must be >= 1".into(),
        ));
    }
    let n = if d == 0 { 0 } else { w.len() / d };
    let knots: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| w[i * d + j]).collect();
            quantile_knots(&col, max_knots_per_dim)
        })
        .collect();

    let mut plain = Vec::new();
    for subset in subsets(d, max_degree) {
        let mut grid: Vec<Vec<f64>> = vec![Vec::new()];
        for &j in &subset {
            grid = grid
                .into_iter()
                .flat_map(|prefix| {
                    knots[j].iter().map(move |&u| {
                        let mut next = prefix.clone();
                        next.push(u);
                        next
                    })
                })
                .collect();
        }
        for kn in grid {
            plain.push(BasisFunction {
                subset: subset.clone(),
                knots: kn,
                includes_treatment: false,
            });
        }
    }

    let mut functions = vec![BasisFunction::intercept()];
    match domain {
        Domain::WOnly => functions.extend(plain),
        Domain::WAndA => {
            functions.push(BasisFunction {
                subset: Vec::new(),
                knots: Vec::new(),
                includes_treatment: true,
            });
            for f in plain {
                let mut treated = f.clone();
                treated.includes_treatment = true;
                functions.push(f);
                functions.push(treated);
            }
        }
    }
    let cap = basis_cap(d, domain, max_degree, max_knots_per_dim);
    if functions.len() > cap {
        return Err(Error::InvalidArgument(format!(
            "basis has {} functions, above the cap {cap}",
            functions.len()
        )));
    }
    Ok(BasisSet { functions, domain, d })
}
