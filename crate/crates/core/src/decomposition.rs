//! Low-rank and group low-rank factorizations of a weight matrix.
//!
//! `W` is always in math orientation: `m` rows (output channels) by `n`
//! columns (`c_in * kh * kw`). Grouping splits the columns into `g`
//! contiguous spans and factors each span on its own at a shared rank `k`.
//! Because each span gets its own optimal rank-k approximation, the grouped
//! residual can never exceed the residual of the whole-matrix truncation
//! restricted to that span, and so `eps_g <= eps`.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, frobenius_norm, hconcat, LinalgError, Matrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecompositionError {
    #[error("rank {rank} outside [1, {max}] for a {rows}x{cols} matrix")]
    RankOutOfBounds {
        rank: usize,
        max: usize,
        rows: usize,
        cols: usize,
    },
    #[error("group count {groups} outside [1, {cols}]")]
    GroupCount { groups: usize, cols: usize },
    #[error("rank {rank} exceeds min(m={rows}, width={width}) of group {group} (columns {start}..{end})")]
    GroupRank {
        rank: usize,
        group: usize,
        rows: usize,
        width: usize,
        start: usize,
        end: usize,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, DecompositionError>;

/// `W ≈ l · r` with `l` m x k and `r` k x n.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankPair {
    pub l: Matrix,
    pub r: Matrix,
    pub rank: usize,
}

impl LowRankPair {
    pub fn new(l: Matrix, r: Matrix) -> Result<Self> {
        let rank = l.cols();
        if r.rows() != rank {
            return Err(LinalgError::DimensionMismatch {
                op: "low-rank pair",
                left: l.shape(),
                right: r.shape(),
            }
            .into());
        }
        let max = l.rows().min(r.cols());
        if rank > max {
            return Err(DecompositionError::RankOutOfBounds {
                rank,
                max,
                rows: l.rows(),
                cols: r.cols(),
            });
        }
        Ok(LowRankPair { l, r, rank })
    }

    pub fn rows(&self) -> usize {
        self.l.rows()
    }

    pub fn cols(&self) -> usize {
        self.r.cols()
    }

    pub fn reconstruct(&self) -> Matrix {
        self.l
            .matmul(&self.r)
            .expect("inner dimensions checked at construction")
    }

    /// `k * (m + n)`.
    pub fn parameter_count(&self) -> usize {
        self.rank * (self.rows() + self.cols())
    }
}

/// One column group of a [`GroupedLowRank`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFactor {
    pub l: Matrix,
    pub r: Matrix,
    pub span: Range<usize>,
}

/// `D_g(W) = [l_1 r_1, ..., l_g r_g]` over contiguous column spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedLowRank {
    pub groups: Vec<GroupFactor>,
    pub rank: usize,
}

impl GroupedLowRank {
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn rows(&self) -> usize {
        self.groups[0].l.rows()
    }

    pub fn cols(&self) -> usize {
        self.groups.last().map_or(0, |g| g.span.end)
    }

    pub fn reconstruct(&self) -> Matrix {
        let blocks: Vec<Matrix> = self
            .groups
            .iter()
            .map(|g| g.l.matmul(&g.r).expect("group factor shapes agree"))
            .collect();
        let refs: Vec<&Matrix> = blocks.iter().collect();
        hconcat(&refs).expect("groups share row count")
    }

    /// `g * m * k + k * n`.
    pub fn parameter_count(&self) -> usize {
        self.group_count() * self.rows() * self.rank + self.rank * self.cols()
    }

    /// `hconcat(l_1, ..., l_g)`, m x (g k).
    pub fn l_concat(&self) -> Matrix {
        let refs: Vec<&Matrix> = self.groups.iter().map(|g| &g.l).collect();
        hconcat(&refs).expect("groups share row count")
    }

    /// Block-diagonal right factor, (g k) x n: row block `i` holds `r_i`
    /// in the columns of span `i` and zeros elsewhere.
    pub fn r_block_diag(&self) -> Matrix {
        let k = self.rank;
        let n = self.cols();
        let mut out = Matrix::zeros(self.group_count() * k, n).expect("non-empty");
        for (gi, g) in self.groups.iter().enumerate() {
            for row in 0..k {
                for (j, col) in g.span.clone().enumerate() {
                    out[(gi * k + row, col)] = g.r[(row, j)];
                }
            }
        }
        out
    }

    pub fn spans(&self) -> Vec<Range<usize>> {
        self.groups.iter().map(|g| g.span.clone()).collect()
    }
}

/// Splits `0..n` into `g` contiguous spans whose widths differ by at most
/// one, wider spans first.
pub fn group_spans(n: usize, g: usize) -> Vec<Range<usize>> {
    let base = n / g;
    let extra = n % g;
    let mut spans = Vec::with_capacity(g);
    let mut start = 0;
    for i in 0..g {
        let width = base + usize::from(i < extra);
        spans.push(start..start + width);
        start += width;
    }
    spans
}

fn check_rank(w: &Matrix, k: usize) -> Result<()> {
    let max = w.rows().min(w.cols());
    if k == 0 || k > max {
        return Err(DecompositionError::RankOutOfBounds {
            rank: k,
            max,
            rows: w.rows(),
            cols: w.cols(),
        });
    }
    Ok(())
}

/// Validates `(k, g)` against an `m x n` matrix and returns the spans.
pub fn validate_grouping(m: usize, n: usize, k: usize, g: usize) -> Result<Vec<Range<usize>>> {
    if g == 0 || g > n {
        return Err(DecompositionError::GroupCount { groups: g, cols: n });
    }
    let spans = group_spans(n, g);
    if k == 0 {
        return Err(DecompositionError::RankOutOfBounds {
            rank: k,
            max: m.min(n),
            rows: m,
            cols: n,
        });
    }
    // The last span is a narrowest one.
    for (i, s) in spans.iter().enumerate().rev() {
        let width = s.len();
        if k > m.min(width) {
            return Err(DecompositionError::GroupRank {
                rank: k,
                group: i,
                rows: m,
                width,
                start: s.start,
                end: s.end,
            });
        }
    }
    Ok(spans)
}

/// Optimal rank-k pair by truncated SVD.
pub fn decompose(w: &Matrix, k: usize) -> Result<LowRankPair> {
    check_rank(w, k)?;
    let s = linalg::svd(w)?;
    let (l, r) = linalg::truncate(&s, k)?;
    Ok(LowRankPair { l, r, rank: k })
}

/// Group low-rank decomposition: each column span factored independently at rank `k`.
pub fn group_decompose(w: &Matrix, k: usize, g: usize) -> Result<GroupedLowRank> {
    let spans = validate_grouping(w.rows(), w.cols(), k, g)?;
    let groups = spans
        .into_par_iter()
        .map(|span| {
            let block = w.submatrix_cols(span.start, span.end)?;
            let s = linalg::svd(&block)?;
            let (l, r) = linalg::truncate(&s, k)?;
            Ok(GroupFactor { l, r, span })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupedLowRank { groups, rank: k })
}

/// Traditional and grouped reconstruction errors for one `(W, k, g)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub epsilon: f64,
    pub epsilon_g: f64,
    pub inequality_holds: bool,
}

impl ErrorReport {
    pub fn new(epsilon: f64, epsilon_g: f64) -> Self {
        ErrorReport {
            epsilon,
            epsilon_g,
            inequality_holds: epsilon_g <= epsilon + 1e-9 * epsilon.max(1.0),
        }
    }

    /// `epsilon - epsilon_g`; negative means the grouped error is larger.
    pub fn margin(&self) -> f64 {
        self.epsilon - self.epsilon_g
    }
}

/// Computes `eps = ||W - D(W)||_F` and `eps_g = ||W - D_g(W)||_F` from the residuals.
pub fn group_bound_check(w: &Matrix, k: usize, g: usize) -> Result<ErrorReport> {
    let pair = decompose(w, k)?;
    let grouped = group_decompose(w, k, g)?;
    let epsilon = frobenius_norm(&w.sub(&pair.reconstruct())?);
    let epsilon_g = frobenius_norm(&w.sub(&grouped.reconstruct())?);
    Ok(ErrorReport::new(epsilon, epsilon_g))
}

/// Singular spectra of each column group, reusable across ranks.
///
/// The rank-k residual of a span is the root of its tail singular values,
/// so one SVD per span answers every rank query.
#[derive(Debug, Clone)]
pub struct GroupSpectra {
    pub rows: usize,
    pub spans: Vec<Range<usize>>,
    pub spectra: Vec<Vec<f64>>,
}

impl GroupSpectra {
    pub fn compute(w: &Matrix, g: usize) -> Result<Self> {
        if g == 0 || g > w.cols() {
            return Err(DecompositionError::GroupCount {
                groups: g,
                cols: w.cols(),
            });
        }
        let spans = group_spans(w.cols(), g);
        let spectra = spans
            .par_iter()
            .map(|span| {
                let block = w.submatrix_cols(span.start, span.end)?;
                Ok(linalg::svd(&block)?.sigma)
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(GroupSpectra {
            rows: w.rows(),
            spans,
            spectra,
        })
    }

    /// `eps_g` at rank `k`, or the grouping error when `k` is infeasible.
    pub fn error_at_rank(&self, k: usize) -> Result<f64> {
        let n = self.spans.last().map_or(0, |s| s.end);
        validate_grouping(self.rows, n, k, self.spans.len())?;
        let sq: f64 = self
            .spectra
            .iter()
            .map(|s| s.iter().skip(k).map(|x| x * x).sum::<f64>())
            .sum();
        Ok(sq.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn spans_are_near_equal_wider_first() {
        assert_eq!(group_spans(144, 4), vec![0..36, 36..72, 72..108, 108..144]);
        assert_eq!(group_spans(10, 3), vec![0..4, 4..7, 7..10]);
        assert_eq!(group_spans(5, 5).len(), 5);
    }

    #[test]
    fn rank_one_outer_product_is_exact() {
        let u = [1.0, -2.0, 0.5];
        let v = [3.0, 1.0, -1.0, 2.0];
        let w = Matrix::from_fn(3, 4, |r, c| u[r] * v[c]).unwrap();
        let p = decompose(&w, 1).unwrap();
        assert!(p.reconstruct().max_abs_diff(&w).unwrap() <= 1e-10);
    }

    #[test]
    fn diagonal_rank_two_error_is_one() {
        let w = Matrix::diag(&[3.0, 2.0, 1.0]).unwrap();
        let p = decompose(&w, 2).unwrap();
        let err = frobenius_norm(&w.sub(&p.reconstruct()).unwrap());
        assert!((err - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resnet_shaped_error_matches_tail() {
        let w = random(16, 144, 5);
        let p = decompose(&w, 8).unwrap();
        let err = frobenius_norm(&w.sub(&p.reconstruct()).unwrap());
        let tail = linalg::svd(&w).unwrap().tail_norm(8);
        assert!((err - tail).abs() <= 1e-9 * tail.max(1.0));
    }

    #[test]
    fn single_group_equals_plain_decomposition() {
        let w = random(7, 12, 9);
        let r = group_bound_check(&w, 3, 1).unwrap();
        assert!((r.epsilon - r.epsilon_g).abs() <= 1e-12);
        assert!(r.inequality_holds);
    }

    #[test]
    fn orthogonal_blocks_are_exact_per_group() {
        // u1 ⊥ u2, so the whole matrix has rank 2 but each half has rank 1.
        let u1 = [1.0, 1.0, 0.0, 0.0];
        let u2 = [0.0, 0.0, 1.0, -1.0];
        let v1 = [2.0, -1.0, 0.5];
        let v2 = [1.0, 3.0, -2.0];
        let w = Matrix::from_fn(4, 6, |r, c| if c < 3 { u1[r] * v1[c] } else { u2[r] * v2[c - 3] }).unwrap();
        let r = group_bound_check(&w, 1, 2).unwrap();
        assert!(r.epsilon_g < 1e-12, "{r:?}");
        assert!(r.epsilon > 0.1);
        assert!(r.inequality_holds);
    }

    #[test]
    fn grouped_widths_and_inequality() {
        let w = random(16, 144, 21);
        let g = group_decompose(&w, 2, 4).unwrap();
        let widths: Vec<usize> = g.spans().iter().map(|s| s.len()).collect();
        assert_eq!(widths, vec![36; 4]);
        assert!(group_bound_check(&w, 2, 4).unwrap().inequality_holds);
    }

    #[test]
    fn full_group_rank_is_lossless() {
        let w = random(4, 13, 4);
        let g = group_decompose(&w, 4, 3).unwrap(); // widths 5,4,4
        let rel = frobenius_norm(&w.sub(&g.reconstruct()).unwrap()) / frobenius_norm(&w);
        assert!(rel <= 1e-9);
    }

    #[test]
    fn reconstruct_matches_loop_oracle() {
        let w = random(8, 12, 77);
        let g = group_decompose(&w, 3, 3).unwrap();
        let rec = g.reconstruct();
        for grp in &g.groups {
            for i in 0..8 {
                for (j, col) in grp.span.clone().enumerate() {
                    let mut acc = 0.0;
                    for p in 0..3 {
                        acc += grp.l[(i, p)] * grp.r[(p, j)];
                    }
                    assert!((rec[(i, col)] - acc).abs() <= 1e-14);
                }
            }
        }
        // L_cat · R_bd is the same matrix.
        let alt = g.l_concat().matmul(&g.r_block_diag()).unwrap();
        assert!(alt.max_abs_diff(&rec).unwrap() <= 1e-12);
    }

    #[test]
    fn parameter_counts() {
        let w = random(16, 144, 1);
        assert_eq!(decompose(&w, 8).unwrap().parameter_count(), 1280);
        assert_eq!(group_decompose(&w, 2, 4).unwrap().parameter_count(), 416);
        assert_eq!(w.rows() * w.cols(), 2304);
    }

    #[test]
    fn rank_errors_name_the_group() {
        let w = random(6, 10, 2);
        // widths 4,3,3 -> k=4 fails on the last group.
        let err = group_decompose(&w, 4, 3).unwrap_err();
        assert_eq!(
            err,
            DecompositionError::GroupRank {
                rank: 4,
                group: 2,
                rows: 6,
                width: 3,
                start: 7,
                end: 10
            }
        );
        assert!(err.to_string().contains("group 2"));
        assert!(matches!(
            decompose(&w, 7),
            Err(DecompositionError::RankOutOfBounds { .. })
        ));
        assert!(matches!(
            group_decompose(&w, 1, 11),
            Err(DecompositionError::GroupCount { .. })
        ));
        assert!(matches!(
            group_decompose(&w, 0, 2),
            Err(DecompositionError::RankOutOfBounds { .. })
        ));
    }

    #[test]
    fn spectra_shortcut_matches_residual() {
        let w = random(9, 20, 8);
        let spectra = GroupSpectra::compute(&w, 4).unwrap();
        for k in 1..=5 {
            let g = group_decompose(&w, k, 4).unwrap();
            let direct = frobenius_norm(&w.sub(&g.reconstruct()).unwrap());
            let fast = spectra.error_at_rank(k).unwrap();
            assert!((direct - fast).abs() <= 1e-9 * direct.max(1.0), "k={k}");
        }
        assert!(spectra.error_at_rank(6).is_err());
    }
}
