//! Thin SVD by Householder QR followed by one-sided (Hestenes) Jacobi.
//!
//! The input is first reduced to its tall orientation. A tall matrix is
//! QR-factored and the Jacobi sweeps run on the square `R` factor; `U` is
//! recovered by applying the stored reflectors. Sweeps visit column pairs
//! in a fixed cyclic order, so identical input bits give identical output
//! bits.

use serde::{Deserialize, Serialize};

use super::{LinalgError, Matrix, Result};

/// Relative off-diagonal threshold: a pair `(p, q)` counts as orthogonal once
/// `|a_p·a_q| <= SVD_TOLERANCE * |a_p| |a_q|`.
pub const SVD_TOLERANCE: f64 = 1e-12;

/// Sweep cap before reporting non-convergence.
pub const SVD_MAX_SWEEPS: usize = 100;

// Squared column norms below this are treated as exact zeros (no rotation,
// singular vector completed from the orthogonal complement).
const NEGLIGIBLE_SQ_NORM: f64 = 1e-280;

/// Thin SVD `a = u · diag(sigma) · vt` with `r = min(m, n)` singular triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    pub fn rank_limit(&self) -> usize {
        self.sigma.len()
    }

    /// `u · diag(sigma) · vt`.
    pub fn reconstruct(&self) -> Matrix {
        let (l, r) = truncate(self, self.sigma.len()).expect("full rank is always in range");
        l.matmul(&r).expect("factor shapes agree")
    }

    /// `sqrt(sigma_{k+1}^2 + ... + sigma_r^2)`, the Frobenius error of the rank-k truncation.
    pub fn tail_norm(&self, k: usize) -> f64 {
        self.sigma.iter().skip(k).map(|s| s * s).sum::<f64>().sqrt()
    }
}

/// Column-major scratch matrix.
struct Cols {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Cols {
    fn from_matrix(a: &Matrix) -> Self {
        let (rows, cols) = a.shape();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = a[(r, c)];
            }
        }
        Cols { rows, cols, data }
    }

    fn from_transpose(a: &Matrix) -> Self {
        // Columns of aᵀ are the rows of a.
        Cols {
            rows: a.cols(),
            cols: a.rows(),
            data: a.as_slice().to_vec(),
        }
    }

    fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Cols { rows: n, cols: n, data }
    }

    fn col(&self, c: usize) -> &[f64] {
        &self.data[c * self.rows..(c + 1) * self.rows]
    }

    fn col_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.rows..(c + 1) * self.rows]
    }

    fn pair_mut(&mut self, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
        debug_assert!(p < q);
        let rows = self.rows;
        let (head, tail) = self.data.split_at_mut(q * rows);
        (&mut head[p * rows..(p + 1) * rows], &mut tail[..rows])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (xi, yi) in x.iter_mut().zip(y.iter_mut()) {
        let (a, b) = (*xi, *yi);
        *xi = c * a - s * b;
        *yi = s * a + c * b;
    }
}

/// Householder QR of a tall column-major matrix. Returns the reflectors
/// (one per column, zero vector meaning identity) and the square `R`.
fn householder_qr(mut a: Cols) -> (Vec<Vec<f64>>, Cols) {
    let (m, n) = (a.rows, a.cols);
    let mut reflectors = Vec::with_capacity(n);
    for j in 0..n {
        let x = &a.col(j)[j..];
        let norm = dot(x, x).sqrt();
        let mut v = x.to_vec();
        if norm == 0.0 {
            reflectors.push(vec![0.0; m - j]);
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vv = dot(&v, &v);
        if vv == 0.0 {
            reflectors.push(vec![0.0; m - j]);
            continue;
        }
        for c in j..n {
            let col = &mut a.col_mut(c)[j..];
            let f = 2.0 * dot(&v, col) / vv;
            for (ci, vi) in col.iter_mut().zip(&v) {
                *ci -= f * vi;
            }
        }
        reflectors.push(v);
    }
    let mut r = Cols {
        rows: n,
        cols: n,
        data: vec![0.0; n * n],
    };
    for c in 0..n {
        for row in 0..=c {
            r.data[c * n + row] = a.data[c * m + row];
        }
    }
    (reflectors, r)
}

/// Applies `Q = H_0 H_1 ... H_{n-1}` to `[x; 0]` for a column-major `x` with `n` rows.
fn apply_q(reflectors: &[Vec<f64>], m: usize, x: &Cols) -> Cols {
    let n = x.rows;
    let mut out = Cols {
        rows: m,
        cols: x.cols,
        data: vec![0.0; m * x.cols],
    };
    for c in 0..x.cols {
        out.col_mut(c)[..n].copy_from_slice(x.col(c));
    }
    for (j, v) in reflectors.iter().enumerate().rev() {
        let vv = dot(v, v);
        if vv == 0.0 {
            continue;
        }
        for c in 0..out.cols {
            let col = &mut out.col_mut(c)[j..];
            let f = 2.0 * dot(v, col) / vv;
            for (ci, vi) in col.iter_mut().zip(v) {
                *ci -= f * vi;
            }
        }
    }
    out
}

/// One-sided Jacobi on a column-major `m x n` matrix with `m >= n`.
/// Returns (left vectors, singular values, right vectors) unsorted.
fn jacobi(mut a: Cols) -> Result<(Cols, Vec<f64>, Cols)> {
    let n = a.cols;
    let mut v = Cols::identity(n);
    let mut sweeps = 0;
    loop {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (ap, aq) = a.pair_mut(p, q);
                let alpha = dot(ap, ap);
                let beta = dot(aq, aq);
                if alpha < NEGLIGIBLE_SQ_NORM || beta < NEGLIGIBLE_SQ_NORM {
                    continue;
                }
                let gamma = dot(ap, aq);
                if gamma.abs() <= SVD_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(ap, aq, c, s);
                let (vp, vq) = v.pair_mut(p, q);
                rotate(vp, vq, c, s);
            }
        }
        sweeps += 1;
        if !rotated {
            break;
        }
        if sweeps >= SVD_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence { sweeps });
        }
    }

    let mut sigma = Vec::with_capacity(n);
    let mut zero_cols = Vec::new();
    for c in 0..n {
        let col = a.col_mut(c);
        let sq = dot(col, col);
        if sq < NEGLIGIBLE_SQ_NORM {
            sigma.push(0.0);
            zero_cols.push(c);
            col.iter_mut().for_each(|x| *x = 0.0);
        } else {
            let s = sq.sqrt();
            col.iter_mut().for_each(|x| *x /= s);
            sigma.push(s);
        }
    }
    complete_orthonormal(&mut a, &zero_cols);
    Ok((a, sigma, v))
}

/// Fills the listed (zeroed) columns with unit vectors orthogonal to all others.
fn complete_orthonormal(u: &mut Cols, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let m = u.rows;
    let mut filled: Vec<usize> = (0..u.cols).filter(|c| !missing.contains(c)).collect();
    for &target in missing {
        let mut best: Option<Vec<f64>> = None;
        let mut best_norm = -1.0;
        for e in 0..m {
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            // Two passes of Gram-Schmidt for numerical orthogonality.
            for _ in 0..2 {
                for &f in &filled {
                    let col = u.col(f);
                    let proj = dot(col, &cand);
                    for (ci, ui) in cand.iter_mut().zip(col) {
                        *ci -= proj * ui;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > best_norm {
                best_norm = norm;
                best = Some(cand);
            }
            if norm > 0.5 {
                break;
            }
        }
        let cand = best.expect("m >= 1");
        let col = u.col_mut(target);
        for (ci, x) in col.iter_mut().zip(&cand) {
            *ci = x / best_norm;
        }
        filled.push(target);
    }
}

/// Thin SVD of `a`. Singular values are sorted non-increasing; each left
/// singular vector has its largest-magnitude entry non-negative.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    let transposed = m < n;
    let work = if transposed {
        Cols::from_transpose(a)
    } else {
        Cols::from_matrix(a)
    };
    // Work matrix is tall: rows >= cols.
    let (tall_rows, r) = (work.rows, work.cols);
    let (left, sigma, right) = if tall_rows > r {
        let (reflectors, rfac) = householder_qr(work);
        let (ur, sigma, v) = jacobi(rfac)?;
        (apply_q(&reflectors, tall_rows, &ur), sigma, v)
    } else {
        jacobi(work)?
    };

    // For the transposed problem aᵀ = left · Σ · rightᵀ, so a = right · Σ · leftᵀ.
    let (u_cols, v_cols) = if transposed { (right, left) } else { (left, right) };

    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));

    let mut u = Matrix::zeros(m, r)?;
    let mut vt = Matrix::zeros(r, n)?;
    let mut sorted_sigma = Vec::with_capacity(r);
    for (dst, &src) in order.iter().enumerate() {
        let ucol = u_cols.col(src);
        let vcol = v_cols.col(src);
        let pivot = ucol
            .iter()
            .enumerate()
            .fold(
                (0, 0.0f64),
                |(bi, bv), (i, x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) },
            )
            .0;
        let sign = if ucol[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (row, x) in ucol.iter().enumerate() {
            u[(row, dst)] = sign * x;
        }
        for (col, x) in vcol.iter().enumerate() {
            vt[(dst, col)] = sign * x;
        }
        sorted_sigma.push(sigma[src]);
    }
    Ok(SvdResult {
        u,
        sigma: sorted_sigma,
        vt,
    })
}

/// Rank-k factors of a truncated SVD: `l = u_k · diag(sigma_k)` (m x k) and
/// `r = vt_k` (k x n).
pub fn truncate(s: &SvdResult, k: usize) -> Result<(Matrix, Matrix)> {
    let max = s.sigma.len();
    if k == 0 || k > max {
        return Err(LinalgError::RankOutOfBounds { rank: k, max });
    }
    let l = Matrix::from_fn(s.u.rows(), k, |r, c| s.u[(r, c)] * s.sigma[c])?;
    let r = Matrix::from_fn(k, s.vt.cols(), |r, c| s.vt[(r, c)])?;
    Ok((l, r))
}
