//! Small dense kernels for symmetric positive (semi)definite systems.

/// Row-major square matrix.
pub type Matrix = Vec<Vec<f64>>;

/// Cholesky factor over the retained columns of a PSD matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    /// Lower-triangular factor, indexed by position in `kept`.
    pub l: Matrix,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// In-order Cholesky that drops a column when its pivot falls below
/// `rel_tol` times the largest diagonal entry.
pub fn cholesky_dropping(g: &Matrix, rel_tol: f64) -> Cholesky {
    let p = g.len();
    let lead = (0..p).map(|j| g[j][j]).fold(0.0_f64, f64::max);
    let threshold = rel_tol * lead;
    let mut l: Matrix = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..p {
        let m = kept.len();
        let mut row = vec![0.0; m + 1];
        for (r, &k) in kept.iter().enumerate() {
            let mut s = g[j][k];
            for t in 0..r {
                s -= row[t] * l[r][t];
            }
            row[r] = s / l[r][r];
        }
        let pivot = g[j][j] - row[..m].iter().map(|v| v * v).sum::<f64>();
        if lead <= 0.0 || pivot <= threshold || !pivot.is_finite() {
            dropped.push(j);
            continue;
        }
        row[m] = pivot.sqrt();
        l.push(row);
        kept.push(j);
    }
    Cholesky { l, kept, dropped }
}

impl Cholesky {
    pub fn dim(&self) -> usize {
        self.kept.len()
    }

    /// Solves `(L Lᵀ) x = b` for `b` indexed by position in `kept`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let m = self.dim();
        let mut z = vec![0.0; m];
        for i in 0..m {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i][k] * z[k];
            }
            z[i] = s / self.l[i][i];
        }
        for i in (0..m).rev() {
            let mut s = z[i];
            for k in i + 1..m {
                s -= self.l[k][i] * z[k];
            }
            z[i] = s / self.l[i][i];
        }
        z
    }

    pub fn inverse(&self) -> Matrix {
        let m = self.dim();
        let mut inv = vec![vec![0.0; m]; m];
        for j in 0..m {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..m {
                inv[i][j] = col[i];
            }
        }
        // symmetrize away rounding
        for i in 0..m {
            for j in 0..i {
                let v = 0.5 * (inv[i][j] + inv[j][i]);
                inv[i][j] = v;
                inv[j][i] = v;
            }
        }
        inv
    }
}

pub fn mat_vec(a: &Matrix, x: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(x).map(|(u, v)| u * v).sum())
        .collect()
}

/// Solves a small SPD system, adding a growing ridge if the factorization
/// loses rank. Returns `None` when even the ridged system fails.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Option<Vec<f64>> {
    let p = a.len();
    let scale = (0..p).map(|j| a[j][j].abs()).fold(0.0_f64, f64::max).max(1e-300);
    let mut ridge = 0.0;
    for _ in 0..8 {
        let mut m = a.clone();
        for (j, row) in m.iter_mut().enumerate() {
            row[j] += ridge;
        }
        let ch = cholesky_dropping(&m, 1e-14);
        if ch.dropped.is_empty() {
            let x = ch.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                return Some(x);
            }
        }
        ridge = if ridge == 0.0 { 1e-10 * scale } else { ridge * 100.0 };
    }
    None
}
