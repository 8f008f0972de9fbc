use crate::error::{Error, Result};

/// Compressed sparse row matrix with sorted, duplicate-free rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if row_offsets.len() != n_rows + 1 {
            return bad(format!("{} row offsets for {n_rows} rows", row_offsets.len()));
        }
        if row_offsets[0] != 0 || row_offsets.windows(2).any(|w| w[0] > w[1]) {
            return bad("row offsets must start at 0 and never decrease".into());
        }
        let nnz = row_offsets[n_rows];
        if col_indices.len() != nnz || values.len() != nnz {
            return bad(format!(
                "last offset is {nnz} but there are {} columns and {} values",
                col_indices.len(),
                values.len()
            ));
        }
        for r in 0..n_rows {
            let cols = &col_indices[row_offsets[r]..row_offsets[r + 1]];
            if cols.iter().any(|&c| c >= n_cols) {
                return bad(format!("row {r} has a column index outside 0..{n_cols}"));
            }
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("columns of row {r} are not strictly increasing"));
            }
        }
        Ok(CsrMatrix {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Builds from `(row, col, value)` entries in any order; duplicates add up.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(r, c, _)) = entries.iter().find(|(r, c, _)| *r >= n_rows || *c >= n_cols) {
            return Err(Error::InvalidArgument(format!(
                "entry ({r}, {c}) outside a {n_rows}x{n_cols} matrix"
            )));
        }
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut offsets = vec![0; n_rows + 1];
        let mut cols: Vec<usize> = Vec::with_capacity(entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *vals.last_mut().expect("previous entry") += v;
                continue;
            }
            last = Some((r, c));
            offsets[r + 1] += 1;
            cols.push(c);
            vals.push(v);
        }
        for r in 0..n_rows {
            offsets[r + 1] += offsets[r];
        }
        Self::new(n_rows, n_cols, offsets, cols, vals)
    }

    /// Non-zero entries of a dense row-major matrix.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::InvalidArgument("dense rows differ in length".into()));
        }
        let entries = rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(move |(j, &v)| (i, j, v))
            })
            .collect();
        Self::from_triplets(rows.len(), n_cols, entries)
    }

    pub fn identity(n: usize) -> Self {
        Self::new(n, n, (0..=n).collect(), (0..n).collect(), vec![1.0; n]).expect("identity is valid")
    }

    /// Five-point Laplacian on an `n x n` grid with Dirichlet boundaries.
    pub fn poisson_2d(n: usize) -> Self {
        let mut e = Vec::with_capacity(5 * n * n);
        for y in 0..n {
            for x in 0..n {
                let i = y * n + x;
                e.push((i, i, 4.0));
                if x > 0 {
                    e.push((i, i - 1, -1.0));
                }
                if x + 1 < n {
                    e.push((i, i + 1, -1.0));
                }
                if y > 0 {
                    e.push((i, i - n, -1.0));
                }
                if y + 1 < n {
                    e.push((i, i + n, -1.0));
                }
            }
        }
        Self::from_triplets(n * n, n * n, e).expect("poisson is valid")
    }

    /// Primes on the diagonal and ones wherever `|i - j|` is a power of two.
    pub fn trefethen(n: usize) -> Self {
        let primes = first_primes(n);
        let mut e = Vec::new();
        for (i, &p) in primes.iter().enumerate() {
            e.push((i, i, p as f64));
            let mut d = 1;
            while d < n {
                if i >= d {
                    e.push((i, i - d, 1.0));
                }
                if i + d < n {
                    e.push((i, i + d, 1.0));
                }
                d *= 2;
            }
        }
        Self::from_triplets(n, n, e).expect("trefethen is valid")
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        (&self.col_indices[span.clone()], &self.values[span])
    }

    /// Value at `(r, c)`, zero when not stored.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map_or(0.0, |k| vals[k])
    }

    pub fn check_symmetric(&self) -> Result<()> {
        if self.n_rows != self.n_cols {
            return Err(Error::NotSymmetric(format!(
                "{}x{} is not square",
                self.n_rows, self.n_cols
            )));
        }
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                if self.get(c, r) != v {
                    return Err(Error::NotSymmetric(format!(
                        "A[{r}][{c}] = {v} but A[{c}][{r}] = {}",
                        self.get(c, r)
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (r, row) in d.iter_mut().enumerate() {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                row[c] = v;
            }
        }
        d
    }

    /// Sequential SpMV; each row sums left to right starting from zero.
    pub fn spmv(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_cols {
            return Err(Error::InvalidArgument(format!(
                "vector of length {} for a matrix with {} columns",
                x.len(),
                self.n_cols
            )));
        }
        Ok((0..self.n_rows)
            .map(|r| {
                let (cols, vals) = self.row(r);
                let mut s = 0.0;
                for (&c, &v) in cols.iter().zip(vals) {
                    s += v * x[c];
                }
                s
            })
            .collect())
    }
}

fn first_primes(n: usize) -> Vec<u64> {
    let mut primes: Vec<u64> = Vec::with_capacity(n);
    let mut k = 2u64;
    while primes.len() < n {
        if primes
            .iter()
            .take_while(|&&p| p * p <= k)
            .all(|&p| !k.is_multiple_of(p))
        {
            primes.push(k);
        }
        k += 1;
    }
    primes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(CsrMatrix::new(2, 2, vec![0, 1], vec![0], vec![1.0]).is_err());
        assert!(CsrMatrix::new(2, 2, vec![0, 2, 1], vec![0, 1], vec![1.0, 1.0]).is_err());
        assert!(CsrMatrix::new(1, 2, vec![0, 2], vec![1, 0], vec![1.0, 1.0]).is_err());
        assert!(CsrMatrix::new(1, 2, vec![0, 1], vec![2], vec![1.0]).is_err());
        assert!(CsrMatrix::new(0, 0, vec![0], vec![], vec![]).is_ok());
    }

    #[test]
    fn triplets_sum_duplicates() {
        let m = CsrMatrix::from_triplets(2, 2, vec![(1, 0, 1.0), (0, 0, 2.0), (1, 0, 0.5)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(1, 0), 1.5);
    }

    #[test]
    fn hand_spmv() {
        let m = CsrMatrix::from_dense(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        assert_eq!(m.spmv(&[1.0, 1.0]).unwrap(), vec![5.0, 4.0]);
        assert_eq!(
            CsrMatrix::identity(3).spmv(&[1.0, 2.0, 3.0]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        assert!(m.spmv(&[1.0]).is_err());
    }

    #[test]
    fn generators() {
        let p = CsrMatrix::poisson_2d(4);
        assert_eq!(p.n_rows(), 16);
        assert_eq!(p.nnz(), 16 + 2 * 2 * 4 * 3);
        p.check_symmetric().unwrap();
        let t = CsrMatrix::trefethen(20);
        t.check_symmetric().unwrap();
        assert_eq!(t.get(0, 0), 2.0);
        assert_eq!(t.get(19, 19), 71.0);
        assert_eq!(t.get(3, 11), 1.0);
        assert_eq!(t.get(3, 6), 0.0);
        let ns = CsrMatrix::from_dense(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(ns.check_symmetric(), Err(Error::NotSymmetric(_))));
    }
}
