//! Compressed sparse row matrices and a banded LU factorization.
//!
//! FEM operators on a structured grid with lexicographic node numbering
//! have bandwidth `n + 1`, so a banded direct solver with partial pivoting
//! is both exact and cheap. Factorizations are immutable once built and can
//! be shared across threads.

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
    symmetric: bool,
}

impl SparseMatrix {
    /// Builds a CSR matrix from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut entries: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        for &(r, c, _) in &entries {
            if r >= rows || c >= cols {
                return Err(shape_err(
                    "sparse",
                    format!("entry ({r}, {c}) outside {rows}x{cols}"),
                ));
            }
        }
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
            symmetric: false,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0))).expect("in bounds")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    /// Sets the symmetric flag if `|A - Aᵀ| <= tol * max|A|` entrywise.
    pub fn verify_symmetric(&mut self, tol: f64) -> bool {
        let scale = self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let ok = self.rows == self.cols
            && (0..self.rows).all(|r| {
                self.row(r)
                    .all(|(c, v)| (v - self.get(c, r)).abs() <= tol * scale.max(1e-300))
            });
        self.symmetric = ok;
        ok
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.rows];
        self.matvec_into(x, &mut y)?;
        Ok(y)
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        if x.len() != self.cols || y.len() != self.rows {
            return Err(shape_err(
                "sparse matvec",
                format!("{}x{} with x[{}]", self.rows, self.cols, x.len()),
            ));
        }
        for (r, out) in y.iter_mut().enumerate() {
            *out = self.row(r).map(|(c, v)| v * x[c]).sum();
        }
        Ok(())
    }

    /// y += Aᵀ g
    pub fn matvec_t_acc(&self, g: &[f64], y: &mut [f64]) {
        for (r, &gr) in g.iter().enumerate().take(self.rows) {
            if gr == 0.0 {
                continue;
            }
            for (c, v) in self.row(r) {
                y[c] += v * gr;
            }
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).map(|(_, v)| v).sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        self.matvec_t_acc(&vec![1.0; self.rows], &mut s);
        s
    }

    /// Returns `a * self + b * other`.
    pub fn linear_combination(&self, a: f64, other: &SparseMatrix, b: f64) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(shape_err("sparse add", "dimension mismatch"));
        }
        let trip = (0..self.rows)
            .flat_map(|r| self.row(r).map(move |(c, v)| (r, c, a * v)))
            .chain((0..other.rows).flat_map(|r| other.row(r).map(move |(c, v)| (r, c, b * v))));
        Self::from_triplets(self.rows, self.cols, trip.collect::<Vec<_>>())
    }

    /// (lower, upper) bandwidths.
    pub fn bandwidth(&self) -> (usize, usize) {
        let mut kl = 0;
        let mut ku = 0;
        for r in 0..self.rows {
            for (c, _) in self.row(r) {
                if c < r {
                    kl = kl.max(r - c);
                } else {
                    ku = ku.max(c - r);
                }
            }
        }
        (kl, ku)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                d[r * self.cols + c] = v;
            }
        }
        d
    }
}

/// LU factorization with partial pivoting of a square banded matrix.
///
/// Storage keeps, for every row `i`, the columns `i - kl ..= i + kl + ku`
/// (the upper band grows by `kl` through row interchanges). Multipliers of
/// each elimination step are kept separately so the row interchanges never
/// have to be applied to previous columns of `L`.
#[derive(Clone, Debug)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    band: Vec<f64>,
    mult: Vec<f64>,
    pivots: Vec<usize>,
    /// Smallest |pivot| / largest |pivot|, a cheap conditioning indicator.
    pub pivot_ratio: f64,
}

impl BandedLu {
    pub fn factor(a: &SparseMatrix) -> Result<Self> {
        if a.rows != a.cols {
            return Err(shape_err(
                "factor",
                format!("{}x{} not square", a.rows, a.cols),
            ));
        }
        let n = a.rows;
        let (kl, ku) = a.bandwidth();
        let width = 2 * kl + ku + 1;
        let mut lu = Self {
            n,
            kl,
            ku,
            width,
            band: vec![0.0; n * width],
            mult: vec![0.0; n * kl.max(1)],
            pivots: vec![0; n],
            pivot_ratio: 0.0,
        };
        for r in 0..n {
            for (c, v) in a.row(r) {
                let k = lu.idx(r, c);
                lu.band[k] = v;
            }
        }
        lu.eliminate()?;
        Ok(lu)
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.kl + self.ku);
        i * self.width + (j + self.kl - i)
    }

    fn eliminate(&mut self) -> Result<()> {
        let n = self.n;
        let upper = self.kl + self.ku;
        let mut pmax = 0.0_f64;
        let mut pmin = f64::INFINITY;
        for k in 0..n {
            let last_row = (k + self.kl).min(n - 1);
            let last_col = (k + upper).min(n - 1);
            let mut p = k;
            let mut best = self.band[self.idx(k, k)].abs();
            for i in k + 1..=last_row {
                let v = self.band[self.idx(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            self.pivots[k] = p;
            if best == 0.0 || !best.is_finite() {
                return Err(Error::Singular {
                    row: k,
                    pivot: best,
                });
            }
            pmax = pmax.max(best);
            pmin = pmin.min(best);
            if p != k {
                for j in k..=last_col {
                    let a = self.idx(k, j);
                    let b = self.idx(p, j);
                    self.band.swap(a, b);
                }
            }
            let pivot = self.band[self.idx(k, k)];
            for r in 1..=last_row - k {
                let i = k + r;
                let ik = self.idx(i, k);
                let m = self.band[ik] / pivot;
                self.band[ik] = 0.0;
                self.mult[k * self.kl + r - 1] = m;
                if m == 0.0 {
                    continue;
                }
                for j in k + 1..=last_col {
                    let src = self.band[self.idx(k, j)];
                    let dst = self.idx(i, j);
                    self.band[dst] -= m * src;
                }
            }
        }
        self.pivot_ratio = pmin / pmax;
        if self.pivot_ratio < 1e-14 {
            return Err(Error::Singular {
                row: n,
                pivot: self.pivot_ratio,
            });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x)?;
        Ok(x)
    }

    pub fn solve_in_place(&self, x: &mut [f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(shape_err(
                "solve",
                format!("rhs[{}] for n={}", x.len(), self.n),
            ));
        }
        let n = self.n;
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                x.swap(k, p);
            }
            let xk = x[k];
            if xk != 0.0 {
                for r in 1..=(self.kl).min(n - 1 - k) {
                    x[k + r] -= self.mult[k * self.kl + r - 1] * xk;
                }
            }
        }
        let upper = self.kl + self.ku;
        for k in (0..n).rev() {
            let mut acc = x[k];
            for j in k + 1..=(k + upper).min(n - 1) {
                acc -= self.band[self.idx(k, j)] * x[j];
            }
            x[k] = acc / self.band[self.idx(k, k)];
        }
        Ok(())
    }

    /// Solves Aᵀ x = b with the same factors.
    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut x = b.to_vec();
        self.solve_transpose_in_place(&mut x)?;
        Ok(x)
    }

    pub fn solve_transpose_in_place(&self, x: &mut [f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(shape_err(
                "solve_t",
                format!("rhs[{}] for n={}", x.len(), self.n),
            ));
        }
        let n = self.n;
        let upper = self.kl + self.ku;
        for k in 0..n {
            let mut acc = x[k];
            for i in k.saturating_sub(upper)..k {
                acc -= self.band[self.idx(i, k)] * x[i];
            }
            x[k] = acc / self.band[self.idx(k, k)];
        }
        for k in (0..n).rev() {
            let mut acc = 0.0;
            for r in 1..=(self.kl).min(n - 1 - k) {
                acc += self.mult[k * self.kl + r - 1] * x[k + r];
            }
            x[k] -= acc;
            let p = self.pivots[k];
            if p != k {
                x.swap(k, p);
            }
        }
        Ok(())
    }
}

/// Relative residual ‖Ax − b‖ / ‖b‖ (absolute when b = 0).
pub fn relative_residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.matvec(x).expect("dimensions checked by caller");
    let num: f64 = ax
        .iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den > 0.0 {
        num / den
    } else {
        num
    }
}
