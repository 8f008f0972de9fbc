//! Merge-path work decomposition for CSR SpMV.
//!
//! The path merges the row-end offsets with the nonzero indices. Each step
//! either consumes a nonzero or closes a row, so its length is `rows + nnz`.

use super::csr::CsrMatrix;
use crate::error::{Error, Result};

/// A point on the merge path: rows closed and nonzeros consumed so far.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct PathCoord {
    pub row: usize,
    pub nnz: usize,
}

impl PathCoord {
    pub fn diagonal(&self) -> usize {
        self.row + self.nnz
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Tb,
    Thread,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergePartition {
    pub level: Level,
    /// `n_chunks + 1` boundaries; chunk `c` spans `bounds[c]..bounds[c + 1]`.
    pub bounds: Vec<PathCoord>,
}

impl MergePartition {
    pub fn chunks(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn chunk(&self, c: usize) -> (PathCoord, PathCoord) {
        (self.bounds[c], self.bounds[c + 1])
    }
}

pub fn path_len(mat: &CsrMatrix) -> usize {
    mat.n_rows() + mat.nnz()
}

/// Diagonal `c` of `n` evenly spaced cuts of a path of length `len`.
pub fn split_diagonal(c: usize, n: usize, len: usize) -> usize {
    ((c as u128 * len as u128) / n as u128) as usize
}

/// Finds where diagonal `d` crosses the path between `lo` and `hi`.
///
/// `row_end(r)` must return the end offset of row `r`; each call is one probe.
pub fn search(d: usize, lo: PathCoord, hi: PathCoord, mut row_end: impl FnMut(usize) -> usize) -> PathCoord {
    debug_assert!(lo.diagonal() <= d && d <= hi.diagonal());
    let mut x_min = lo.row.max(d.saturating_sub(hi.nnz));
    let mut x_max = hi.row.min(d - lo.nnz);
    while x_min < x_max {
        let pivot = (x_min + x_max) / 2;
        if row_end(pivot) < d - pivot {
            x_min = pivot + 1;
        } else {
            x_max = pivot;
        }
    }
    PathCoord {
        row: x_min,
        nnz: d - x_min,
    }
}

/// Cuts the whole path into `n_chunks` pieces whose lengths differ by at most one.
pub fn merge_partition(mat: &CsrMatrix, n_chunks: usize, level: Level) -> Result<MergePartition> {
    if n_chunks == 0 {
        return Err(Error::InvalidArgument(
            "a merge partition needs at least one chunk".into(),
        ));
    }
    let end = PathCoord {
        row: mat.n_rows(),
        nnz: mat.nnz(),
    };
    let len = end.diagonal();
    if len == 0 {
        return Ok(MergePartition {
            level,
            bounds: vec![end, end],
        });
    }
    let offsets = mat.row_offsets();
    let bounds = (0..=n_chunks)
        .map(|c| {
            search(split_diagonal(c, n_chunks, len), PathCoord::default(), end, |r| {
                offsets[r + 1]
            })
        })
        .collect();
    Ok(MergePartition { level, bounds })
}

/// Read access used while walking a chunk. Lets the simulated kernel count
/// every access it makes.
pub trait SpmvSource {
    fn row_end(&mut self, row: usize) -> Result<usize>;
    fn entry(&mut self, k: usize) -> Result<(usize, f64)>;
    fn x(&mut self, col: usize) -> Result<f64>;
}

/// Products of a chunk that belong to a row started in an earlier chunk,
/// plus the open sum of the row it leaves unfinished.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChunkCarry {
    pub first_row: usize,
    pub leading: Vec<f64>,
    pub closes_first: bool,
    pub carry: f64,
}

/// Walks `start..end`. Rows that start and finish inside the chunk go to
/// `emit`; the rest is returned for the fix-up.
pub fn walk_chunk(
    src: &mut impl SpmvSource,
    start: PathCoord,
    end: PathCoord,
    mut emit: impl FnMut(usize, f64) -> Result<()>,
) -> Result<ChunkCarry> {
    let mut out = ChunkCarry {
        first_row: start.row,
        ..Default::default()
    };
    let (mut r, mut k) = (start.row, start.nnz);
    let mut leading = true;
    let mut acc = 0.0;
    let mut row_end = None;
    while r + k < end.diagonal() {
        let re = match row_end {
            Some(v) => v,
            None => {
                let v = src.row_end(r)?;
                row_end = Some(v);
                v
            }
        };
        if k < re {
            let (col, v) = src.entry(k)?;
            let prod = v * src.x(col)?;
            if leading {
                out.leading.push(prod);
            } else {
                acc += prod;
            }
            k += 1;
        } else {
            if leading {
                leading = false;
                out.closes_first = true;
            } else {
                emit(r, acc)?;
            }
            acc = 0.0;
            r += 1;
            row_end = None;
        }
    }
    out.carry = acc;
    Ok(out)
}

/// Sequential pass over chunk carries in path order. Calls `finish` for each
/// row that closes at the start of a chunk.
pub fn fixup(carries: &[ChunkCarry], mut finish: impl FnMut(usize, f64) -> Result<()>) -> Result<()> {
    let mut run = 0.0;
    for c in carries {
        for p in &c.leading {
            run += p;
        }
        if c.closes_first {
            finish(c.first_row, run)?;
            run = c.carry;
        }
    }
    Ok(())
}

/// Merges consecutive thread-chunk carries into the carry of their union.
/// Rows closed strictly inside the union go to `finish`.
pub fn combine(carries: &[ChunkCarry], mut finish: impl FnMut(usize, f64) -> Result<()>) -> Result<ChunkCarry> {
    let mut out = ChunkCarry {
        first_row: carries.first().map_or(0, |c| c.first_row),
        ..Default::default()
    };
    let mut run = 0.0;
    for c in carries {
        if out.closes_first {
            for p in &c.leading {
                run += p;
            }
        } else {
            out.leading.extend_from_slice(&c.leading);
        }
        if c.closes_first {
            if out.closes_first {
                finish(c.first_row, run)?;
            }
            out.closes_first = true;
            run = c.carry;
        }
    }
    out.carry = run;
    Ok(out)
}

struct Plain<'a> {
    mat: &'a CsrMatrix,
    x: &'a [f64],
}

impl SpmvSource for Plain<'_> {
    fn row_end(&mut self, row: usize) -> Result<usize> {
        Ok(self.mat.row_offsets()[row + 1])
    }

    fn entry(&mut self, k: usize) -> Result<(usize, f64)> {
        Ok((self.mat.col_indices()[k], self.mat.values()[k]))
    }

    fn x(&mut self, col: usize) -> Result<f64> {
        Ok(self.x[col])
    }
}

/// SpMV over a merge partition. Matches `CsrMatrix::spmv` bit for bit.
pub fn spmv_merge(mat: &CsrMatrix, x: &[f64], part: &MergePartition) -> Result<Vec<f64>> {
    if x.len() != mat.n_cols() {
        return Err(Error::InvalidArgument(format!(
            "vector of length {} for a matrix with {} columns",
            x.len(),
            mat.n_cols()
        )));
    }
    let last = part.bounds.last().copied().unwrap_or_default();
    if part.bounds.first().copied() != Some(PathCoord::default())
        || last
            != (PathCoord {
                row: mat.n_rows(),
                nnz: mat.nnz(),
            })
    {
        return Err(Error::InvalidArgument("partition does not cover this matrix".into()));
    }
    let mut y = vec![0.0; mat.n_rows()];
    let mut src = Plain { mat, x };
    let mut carries = Vec::with_capacity(part.chunks());
    for c in 0..part.chunks() {
        let (s, e) = part.chunk(c);
        carries.push(walk_chunk(&mut src, s, e, |r, v| {
            y[r] = v;
            Ok(())
        })?);
    }
    fixup(&carries, |r, v| {
        y[r] = v;
        Ok(())
    })?;
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_csr(seed: u64, rows: usize, cols: usize, density: f64) -> CsrMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut e = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                if rng.gen_bool(density) {
                    e.push((r, c, rng.gen_range(-1.0..1.0)));
                }
            }
        }
        CsrMatrix::from_triplets(rows, cols, e).unwrap()
    }

    #[test]
    fn boundaries_lie_on_the_path() {
        let m = random_csr(1, 30, 30, 0.2);
        let p = merge_partition(&m, 7, Level::Tb).unwrap();
        for b in &p.bounds {
            // every nonzero before the cut belongs to a row at or after b.row
            assert!(b.row == 0 || m.row_offsets()[b.row] <= b.nnz);
            assert!(b.row == m.n_rows() || b.nnz <= m.row_offsets()[b.row + 1]);
        }
    }

    #[test]
    fn empty_rows_and_empty_matrix() {
        let m = CsrMatrix::from_triplets(5, 5, vec![(1, 1, 2.0), (3, 0, 1.0), (3, 4, 1.0)]).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        for n in 1..=8 {
            let p = merge_partition(&m, n, Level::Tb).unwrap();
            assert_eq!(spmv_merge(&m, &x, &p).unwrap(), m.spmv(&x).unwrap());
        }
        let e = CsrMatrix::from_triplets(0, 0, vec![]).unwrap();
        let p = merge_partition(&e, 3, Level::Tb).unwrap();
        assert_eq!(p.chunks(), 1);
        assert!(spmv_merge(&e, &[], &p).unwrap().is_empty());
        assert!(merge_partition(&m, 0, Level::Tb).is_err());
    }

    #[test]
    fn nested_search_matches_global_search() {
        let m = random_csr(9, 40, 40, 0.15);
        let outer = merge_partition(&m, 3, Level::Tb).unwrap();
        let offs = m.row_offsets();
        let end = PathCoord {
            row: m.n_rows(),
            nnz: m.nnz(),
        };
        for c in 0..3 {
            let (lo, hi) = outer.chunk(c);
            for d in lo.diagonal()..=hi.diagonal() {
                let inner = search(d, lo, hi, |r| offs[r + 1]);
                assert_eq!(inner, search(d, PathCoord::default(), end, |r| offs[r + 1]));
            }
        }
    }

    #[test]
    fn two_level_combine_is_bit_identical() {
        let m = random_csr(4, 50, 50, 0.2);
        let x: Vec<f64> = (0..50).map(|i| 1.0 / (i as f64 + 0.3)).collect();
        let offs = m.row_offsets();
        let outer = merge_partition(&m, 3, Level::Tb).unwrap();
        let mut y = vec![0.0; 50];
        let mut tb_carries = Vec::new();
        for c in 0..3 {
            let (lo, hi) = outer.chunk(c);
            let len = hi.diagonal() - lo.diagonal();
            let cuts: Vec<PathCoord> = (0..=5)
                .map(|t| search(lo.diagonal() + split_diagonal(t, 5, len), lo, hi, |r| offs[r + 1]))
                .collect();
            let mut src = Plain { mat: &m, x: &x };
            let threads: Vec<ChunkCarry> = cuts
                .windows(2)
                .map(|w| {
                    walk_chunk(&mut src, w[0], w[1], |r, v| {
                        y[r] = v;
                        Ok(())
                    })
                })
                .collect::<Result<_>>()
                .unwrap();
            tb_carries.push(
                combine(&threads, |r, v| {
                    y[r] = v;
                    Ok(())
                })
                .unwrap(),
            );
        }
        fixup(&tb_carries, |r, v| {
            y[r] = v;
            Ok(())
        })
        .unwrap();
        assert_eq!(y, m.spmv(&x).unwrap());
    }

    proptest! {
        #[test]
        fn chunk_lengths_differ_by_at_most_one(seed in any::<u64>(), rows in 0usize..40, n in 1usize..50) {
            let m = random_csr(seed, rows, rows.max(1), 0.2);
            let p = merge_partition(&m, n, Level::Thread).unwrap();
            let lens: Vec<usize> = (0..p.chunks()).map(|c| {
                let (s, e) = p.chunk(c);
                e.diagonal() - s.diagonal()
            }).collect();
            prop_assert_eq!(lens.iter().sum::<usize>(), path_len(&m));
            let (lo, hi) = (lens.iter().min().unwrap(), lens.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
            for w in p.bounds.windows(2) {
                prop_assert!(w[0].row <= w[1].row && w[0].nnz <= w[1].nnz);
            }
        }

        #[test]
        fn merge_spmv_is_bit_identical(seed in any::<u64>(), rows in 1usize..40, cols in 1usize..40, n in 1usize..60) {
            let m = random_csr(seed, rows, cols, 0.3);
            let x: Vec<f64> = (0..cols).map(|i| (i as f64 * 0.37).sin()).collect();
            let p = merge_partition(&m, n, Level::Tb).unwrap();
            prop_assert_eq!(spmv_merge(&m, &x, &p).unwrap(), m.spmv(&x).unwrap());
        }
    }
}
