/// One column of a design matrix: nonzero rows and their values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCol {
    pub idx: Vec<u32>,
    pub val: Vec<f64>,
}

impl SparseCol {
    pub fn nnz(&self) -> usize {
        self.idx.len()
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, &v)| v * x[i as usize]).sum()
    }

    pub fn dot_weighted(&self, w: &[f64], x: &[f64]) -> f64 {
        self.idx
            .iter()
            .zip(&self.val)
            .map(|(&i, &v)| v * w[i as usize] * x[i as usize])
            .sum()
    }

    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (&i, &v) in self.idx.iter().zip(&self.val) {
            out[i as usize] = v;
        }
        out
    }
}

/// Column-compressed `n × p` design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub n: usize,
    pub cols: Vec<SparseCol>,
}

impl Design {
    pub fn p(&self) -> usize {
        self.cols.len()
    }

    pub fn from_dense_columns(n: usize, columns: &[Vec<f64>]) -> Self {
        let cols = columns
            .iter()
            .map(|c| {
                assert_eq!(c.len(), n, "column length");
                let mut idx = Vec::new();
                let mut val = Vec::new();
                for (i, &v) in c.iter().enumerate() {
                    if v != 0.0 {
                        idx.push(i as u32);
                        val.push(v);
                    }
                }
                SparseCol { idx, val }
            })
            .collect();
        Design { n, cols }
    }

    /// Dense rows (`rows[i][j]`).
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let p = rows.first().map_or(0, |r| r.len());
        let columns: Vec<Vec<f64>> = (0..p).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        Self::from_dense_columns(n, &columns)
    }

    /// Indicator columns (row lists) scaled row-wise by `multiplier`:
    /// `x_ij = multiplier_i · 1{i ∈ rows_j}`.
    pub fn from_indicators(n: usize, rows: &[Vec<u32>], multiplier: Option<&[f64]>) -> Self {
        let cols = rows
            .iter()
            .map(|r| {
                let mut idx = Vec::with_capacity(r.len());
                let mut val = Vec::with_capacity(r.len());
                for &i in r {
                    let v = multiplier.map_or(1.0, |m| m[i as usize]);
                    if v != 0.0 {
                        idx.push(i);
                        val.push(v);
                    }
                }
                SparseCol { idx, val }
            })
            .collect();
        Design { n, cols }
    }

    pub fn dense_columns(&self) -> Vec<Vec<f64>> {
        self.cols.iter().map(|c| c.to_dense(self.n)).collect()
    }

    /// `X β`.
    pub fn mul(&self, beta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (c, &b) in self.cols.iter().zip(beta) {
            if b != 0.0 {
                for (&i, &v) in c.idx.iter().zip(&c.val) {
                    out[i as usize] += v * b;
                }
            }
        }
        out
    }

    pub fn select(&self, columns: &[usize]) -> Self {
        Design {
            n: self.n,
            cols: columns.iter().map(|&j| self.cols[j].clone()).collect(),
        }
    }

    pub fn has_non_finite(&self) -> bool {
        self.cols.iter().any(|c| c.val.iter().any(|v| !v.is_finite()))
    }
}
