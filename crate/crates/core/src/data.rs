//! Observations `(S, W, A, Y[, Δ])`, CSV ingestion and fold assignment.
//!
//! Data are stored column-wise. `S = 1` marks the randomized trial, `S = 0`
//! the external data source. When a `delta` column is present, `delta = 0`
//! marks a row whose outcome is missing; its `y` is stored as `NaN`.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub s: u8,
    pub w: Vec<f64>,
    pub a: u8,
    pub y: f64,
    /// Outcome-observed indicator; `None` is read as observed.
    pub delta: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionDataset {
    s: Vec<u8>,
    a: Vec<u8>,
    y: Vec<f64>,
    delta: Option<Vec<u8>>,
    w: Vec<f64>,
    d: usize,
    covariate_names: Vec<String>,
    pub external_controls_only: bool,
}

/// Column mapping used by [`load_csv`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Explicit covariate columns; `None` picks up `w1..wd` by name.
    pub covariate_columns: Option<Vec<String>>,
    /// Overrides auto-detection of the external-controls-only design.
    pub external_controls_only: Option<bool>,
}

impl FusionDataset {
    /// Builds and validates a dataset. `external_controls_only` is detected
    /// automatically unless `external_override` is given.
    pub fn new(observations: Vec<Observation>, external_override: Option<bool>) -> Result<Self> {
        let d = observations.first().map(|o| o.w.len()).unwrap_or(0);
        let names = (1..=d).map(|j| format!("w{j}")).collect();
        Self::from_observations(observations, d, names, external_override)
    }

    fn from_observations(
        observations: Vec<Observation>,
        d: usize,
        covariate_names: Vec<String>,
        external_override: Option<bool>,
    ) -> Result<Self> {
        let n = observations.len();
        let has_delta = observations.iter().any(|o| o.delta.is_some());
        let mut s = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n * d);
        let mut delta = if has_delta { Some(Vec::with_capacity(n)) } else { None };
        for (i, o) in observations.into_iter().enumerate() {
            if o.w.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: o.w.len(),
                });
            }
            s.push(o.s);
            a.push(o.a);
            y.push(o.y);
            w.extend_from_slice(&o.w);
            if let Some(dl) = delta.as_mut() {
                dl.push(
                    o.delta.ok_or_else(|| {
                        Error::InvalidData(format!("row {i}: delta missing while other rows carry it"))
                    })?,
                );
            }
        }
        Self::from_columns(s, a, y, delta, w, d, covariate_names, external_override)
    }

    /// Builds a dataset directly from columns; `w` is row-major `n × d`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_columns(
        s: Vec<u8>,
        a: Vec<u8>,
        y: Vec<f64>,
        delta: Option<Vec<u8>>,
        w: Vec<f64>,
        d: usize,
        covariate_names: Vec<String>,
        external_override: Option<bool>,
    ) -> Result<Self> {
        let n = s.len();
        if a.len() != n || y.len() != n || w.len() != n * d {
            return Err(Error::InvalidData("column lengths disagree".into()));
        }
        if covariate_names.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: covariate_names.len(),
            });
        }
        let mut ds = FusionDataset {
            s,
            a,
            y,
            delta,
            w,
            d,
            covariate_names,
            external_controls_only: false,
        };
        ds.validate()?;
        let detected = !ds.has_external_treated();
        ds.external_controls_only = match external_override {
            Some(true) if !detected => {
                return Err(Error::InvalidData(
                    "external_controls_only requested but external rows with a=1 exist".into(),
                ))
            }
            Some(flag) => flag,
            None => detected,
        };
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.n() {
            if self.s[i] > 1 {
                return Err(Error::NonBinary {
                    what: "trial indicator",
                    row: i,
                    value: self.s[i].to_string(),
                });
            }
            if self.a[i] > 1 {
                return Err(Error::NonBinary {
                    what: "treatment",
                    row: i,
                    value: self.a[i].to_string(),
                });
            }
            let observed = match &self.delta {
                Some(dl) => {
                    if dl[i] > 1 {
                        return Err(Error::NonBinary {
                            what: "outcome indicator",
                            row: i,
                            value: dl[i].to_string(),
                        });
                    }
                    dl[i] == 1
                }
                None => true,
            };
            if observed && !self.y[i].is_finite() {
                return Err(Error::InvalidData(format!("row {i}: observed outcome is not finite")));
            }
            if let Some(j) = self.w_row(i).iter().position(|v| !v.is_finite()) {
                return Err(Error::NonNumeric {
                    column: self.covariate_names[j].clone(),
                    row: i,
                    value: self.w_row(i)[j].to_string(),
                });
            }
        }
        for arm in [0u8, 1] {
            if !(0..self.n()).any(|i| self.s[i] == 1 && self.a[i] == arm) {
                return Err(Error::EmptyTrialCell { a: arm });
            }
        }
        Ok(())
    }

    fn has_external_treated(&self) -> bool {
        (0..self.n()).any(|i| self.s[i] == 0 && self.a[i] == 1)
    }

    pub fn n(&self) -> usize {
        self.s.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn s(&self) -> &[u8] {
        &self.s
    }

    pub fn a(&self) -> &[u8] {
        &self.a
    }

    /// Outcomes; `NaN` where the outcome is missing.
    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Row-major `n × d` covariates.
    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn w_row(&self, i: usize) -> &[f64] {
        &self.w[i * self.d..(i + 1) * self.d]
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn delta_column(&self) -> Option<&[u8]> {
        self.delta.as_deref()
    }

    pub fn has_delta(&self) -> bool {
        self.delta.is_some()
    }

    /// `Δ_i`, 1 when no delta column is present.
    pub fn delta(&self, i: usize) -> u8 {
        self.delta.as_ref().map_or(1, |d| d[i])
    }

    /// True when some outcome is actually missing.
    pub fn is_censored(&self) -> bool {
        self.delta.as_ref().is_some_and(|d| d.iter().any(|&v| v == 0))
    }

    pub fn n_trial(&self) -> usize {
        self.s.iter().filter(|&&v| v == 1).count()
    }

    pub fn n_external(&self) -> usize {
        self.n() - self.n_trial()
    }

    pub fn observation(&self, i: usize) -> Observation {
        Observation {
            s: self.s[i],
            w: self.w_row(i).to_vec(),
            a: self.a[i],
            y: self.y[i],
            delta: self.delta.as_ref().map(|d| d[i]),
        }
    }

    pub fn observations(&self) -> Vec<Observation> {
        (0..self.n()).map(|i| self.observation(i)).collect()
    }

    /// Rows `indices` as a new dataset. The external-controls flag is kept
    /// when the subset is compatible with it, otherwise re-detected.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut w = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            w.extend_from_slice(self.w_row(i));
        }
        let pick_u8 = |v: &[u8]| indices.iter().map(|&i| v[i]).collect::<Vec<u8>>();
        Self::from_columns(
            pick_u8(&self.s),
            pick_u8(&self.a),
            indices.iter().map(|&i| self.y[i]).collect(),
            self.delta.as_deref().map(pick_u8),
            w,
            self.d,
            self.covariate_names.clone(),
            if self.external_controls_only { Some(true) } else { None },
        )
    }

    /// The same data with an explicit all-ones `delta` column.
    pub fn with_all_observed_delta(&self) -> Self {
        let mut ds = self.clone();
        ds.delta = Some(vec![1; self.n()]);
        ds
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        self.write_records(&mut writer)?;
        writer.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        self.write_records(&mut writer)?;
        let bytes = writer
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    fn write_records<W: std::io::Write>(&self, writer: &mut csv::Writer<W>) -> Result<()> {
        let mut header = vec!["s".to_string(), "a".to_string(), "y".to_string()];
        header.extend(self.covariate_names.iter().cloned());
        if self.delta.is_some() {
            header.push("delta".into());
        }
        writer.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![
                self.s[i].to_string(),
                self.a[i].to_string(),
                if self.y[i].is_nan() {
                    "NA".into()
                } else {
                    self.y[i].to_string()
                },
            ];
            rec.extend(self.w_row(i).iter().map(|v| v.to_string()));
            if let Some(dl) = &self.delta {
                rec.push(dl[i].to_string());
            }
            writer.write_record(&rec)?;
        }
        Ok(())
    }
}

fn parse_binary(raw: &str, what: &'static str, row: usize) -> Result<u8> {
    match raw.trim().parse::<f64>() {
        Ok(v) if v == 0.0 => Ok(0),
        Ok(v) if v == 1.0 => Ok(1),
        _ => Err(Error::NonBinary {
            what,
            row,
            value: raw.to_string(),
        }),
    }
}

fn parse_number(raw: &str, column: &str, row: usize) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| Error::NonNumeric {
        column: column.to_string(),
        row,
        value: raw.to_string(),
    })?;
    if !v.is_finite() {
        return Err(Error::NonNumeric {
            column: column.to_string(),
            row,
            value: raw.to_string(),
        });
    }
    Ok(v)
}

fn default_covariates(headers: &[String]) -> Vec<String> {
    let mut found: Vec<(usize, String)> = headers
        .iter()
        .filter_map(|h| {
            let rest = h.strip_prefix('w')?;
            let k: usize = rest.parse().ok()?;
            Some((k, h.clone()))
        })
        .collect();
    found.sort();
    found.into_iter().map(|(_, h)| h).collect()
}

/// Reads a dataset from a UTF-8 CSV file with a header row.
pub fn load_csv<P: AsRef<Path>>(path: P, schema: &CsvSchema) -> Result<FusionDataset> {
    let reader = csv::Reader::from_path(path)?;
    read_csv(reader, schema)
}

pub fn read_csv_str(text: &str, schema: &CsvSchema) -> Result<FusionDataset> {
    read_csv(csv::Reader::from_reader(text.as_bytes()), schema)
}

fn read_csv<R: std::io::Read>(mut reader: csv::Reader<R>, schema: &CsvSchema) -> Result<FusionDataset> {
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let col = |name: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (si, ai, yi) = (col("s")?, col("a")?, col("y")?);
    let di = index.get("delta").copied();
    let covariates = match &schema.covariate_columns {
        Some(cols) => cols.clone(),
        None => default_covariates(&headers),
    };
    let wi = covariates.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;

    let mut observations = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let field = |k: usize| record.get(k).unwrap_or("");
        let s = parse_binary(field(si), "trial indicator", row)?;
        let a = parse_binary(field(ai), "treatment", row)?;
        let delta = match di {
            Some(k) => Some(parse_binary(field(k), "outcome indicator", row)?),
            None => None,
        };
        let raw_y = field(yi).trim();
        let y = if delta == Some(0) && (raw_y.is_empty() || raw_y.eq_ignore_ascii_case("na")) {
            f64::NAN
        } else {
            let v = parse_number(raw_y, "y", row)?;
            if delta == Some(0) {
                f64::NAN
            } else {
                v
            }
        };
        let w = wi
            .iter()
            .zip(&covariates)
            .map(|(&k, name)| parse_number(field(k), name, row))
            .collect::<Result<Vec<_>>>()?;
        observations.push(Observation { s, w, a, y, delta });
    }
    if observations.is_empty() {
        return Err(Error::InvalidData("no rows".into()));
    }
    let d = covariates.len();
    FusionDataset::from_observations(observations, d, covariates, schema.external_controls_only)
}

/// Assignment of observations to `v` cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub v: usize,
    pub fold_of: Vec<usize>,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn n(&self) -> usize {
        self.fold_of.len()
    }

    pub fn validation(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn training(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.v];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }

    /// Same partition with fold labels shifted by `k`.
    pub fn rotated(&self, k: usize) -> Self {
        FoldAssignment {
            v: self.v,
            fold_of: self.fold_of.iter().map(|&f| (f + k) % self.v).collect(),
            seed: self.seed,
        }
    }
}

/// Stratum label of row `i` in the `(s, a)` cross-classification.
fn stratum(ds: &FusionDataset, i: usize) -> usize {
    2 * ds.s[i] as usize + ds.a[i] as usize
}

/// Assigns folds stratified by `(s, a)`. Strata are shuffled and dealt
/// round-robin in sequence, so fold sizes differ by at most one overall
/// and within each stratum. Falls back to an unstratified shuffle when some
/// non-empty stratum is smaller than `v`.
pub fn make_folds(dataset: &FusionDataset, v: usize, seed: u64) -> Result<FoldAssignment> {
    let strata: Vec<usize> = (0..dataset.n()).map(|i| stratum(dataset, i)).collect();
    make_folds_by(&strata, v, seed)
}

/// Fold assignment for arbitrary stratum labels.
pub fn make_folds_by(strata: &[usize], v: usize, seed: u64) -> Result<FoldAssignment> {
    if v < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {v}")));
    }
    let n = strata.len();
    if n < v {
        return Err(Error::InvalidArgument(format!("{n} rows cannot fill {v} folds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_strata = strata.iter().copied().max().map_or(0, |m| m + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_strata];
    for (i, &k) in strata.iter().enumerate() {
        groups[k].push(i);
    }
    let stratifiable = groups.iter().all(|g| g.is_empty() || g.len() >= v);
    let order: Vec<usize> = if stratifiable {
        let mut order = Vec::with_capacity(n);
        for g in groups.iter_mut() {
            g.shuffle(&mut rng);
            order.extend_from_slice(g);
        }
        order
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        all
    };
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % v;
    }
    Ok(FoldAssignment { v, fold_of, seed })
}
