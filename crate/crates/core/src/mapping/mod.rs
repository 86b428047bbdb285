//! Weight mappings onto crossbar arrays: im2col, shift-and-duplicate-kernel
//! (SDK), and the two-stage low-rank variants of SDK.
//!
//! Two orientations appear here. The *math* orientation follows the
//! operator algebra: a weight matrix has one row per output channel, and
//! `SDK(X)` for an `r x n` matrix `X` is the `N·r x b` product
//!
//! ```text
//! SDK(X) = (I_N ⊗ X) · [P_1ᵀ; P_2ᵀ; ...; P_Nᵀ]
//! ```
//!
//! where `P_s` is the `b x n` padding matrix of shift `s`. For an `r`-row
//! operand the product is `N·r x b` (not `Nn x b`), which is what makes
//! `(I_N ⊗ L) · SDK(R) = SDK(L·R)` type-check.
//!
//! The *physical* orientation is what sits in the array: inputs on rows
//! (wordlines), outputs on columns (bitlines). [`MappedMatrix`] always holds
//! the physical orientation; every builder transposes exactly once on the
//! way out.

mod eval;
mod tensor;

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cycles::ArrayConfig;
use crate::decomposition::{validate_grouping, DecompositionError, GroupedLowRank, LowRankPair};
use crate::linalg::{kronecker_identity, LinalgError, Matrix};

pub use eval::evaluate;
pub use tensor::{conv_oracle, FeatureMap, Kernel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MappingError {
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("parallel window {pw_h}x{pw_w} smaller than kernel {kh}x{kw}")]
    WindowTooSmall {
        pw_h: usize,
        pw_w: usize,
        kh: usize,
        kw: usize,
    },
    #[error("shift index {s} outside [1, {n}]")]
    ShiftOutOfRange { s: usize, n: usize },
    #[error("{what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Decomposition(#[from] DecompositionError),
}

pub type Result<T> = std::result::Result<T, MappingError>;

/// Shape metadata of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawConvLayer", into = "RawConvLayer")]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ih: usize,
    pub iw: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConvLayer {
    c_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ih: usize,
    iw: usize,
    stride: usize,
    pad: usize,
}

impl TryFrom<RawConvLayer> for ConvLayer {
    type Error = MappingError;

    fn try_from(r: RawConvLayer) -> Result<Self> {
        ConvLayer::new(r.c_in, r.c_out, r.kh, r.kw, r.ih, r.iw, r.stride, r.pad)
    }
}

impl From<ConvLayer> for RawConvLayer {
    fn from(l: ConvLayer) -> Self {
        RawConvLayer {
            c_in: l.c_in,
            c_out: l.c_out,
            kh: l.kh,
            kw: l.kw,
            ih: l.ih,
            iw: l.iw,
            stride: l.stride,
            pad: l.pad,
        }
    }
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        ih: usize,
        iw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let layer = ConvLayer {
            c_in,
            c_out,
            kh,
            kw,
            ih,
            iw,
            stride,
            pad,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("c_in", self.c_in),
            ("c_out", self.c_out),
            ("kh", self.kh),
            ("kw", self.kw),
            ("ih", self.ih),
            ("iw", self.iw),
            ("stride", self.stride),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(MappingError::InvalidLayer(format!("{name} must be positive")));
        }
        if self.kh > self.ih + 2 * self.pad || self.kw > self.iw + 2 * self.pad {
            return Err(MappingError::InvalidLayer(format!(
                "kernel {}x{} larger than padded input {}x{}",
                self.kh,
                self.kw,
                self.ih + 2 * self.pad,
                self.iw + 2 * self.pad
            )));
        }
        Ok(())
    }

    /// Output channels, the row count of the math-orientation weight matrix.
    pub fn m(&self) -> usize {
        self.c_out
    }

    /// Flattened kernel length `c_in * kh * kw`.
    pub fn n(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn oh(&self) -> usize {
        (self.ih + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn ow(&self) -> usize {
        (self.iw + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// The parallel window equal to the kernel, i.e. plain im2col.
    pub fn kernel_window(&self) -> ParallelWindow {
        ParallelWindow { h: self.kh, w: self.kw }
    }
}

/// Parallel window size in input pixels (per channel).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParallelWindow {
    pub h: usize,
    pub w: usize,
}

impl std::fmt::Display for ParallelWindow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

impl ParallelWindow {
    pub fn new(h: usize, w: usize) -> Self {
        ParallelWindow { h, w }
    }

    /// Binds the window to a layer, checking it covers the kernel.
    pub fn geometry(&self, layer: &ConvLayer) -> Result<SdkGeometry> {
        if self.h < layer.kh || self.w < layer.kw {
            return Err(MappingError::WindowTooSmall {
                pw_h: self.h,
                pw_w: self.w,
                kh: layer.kh,
                kw: layer.kw,
            });
        }
        let po_h = (self.h - layer.kh) / layer.stride + 1;
        let po_w = (self.w - layer.kw) / layer.stride + 1;
        Ok(SdkGeometry {
            layer: *layer,
            pw: *self,
            po_h,
            po_w,
        })
    }
}

/// A parallel window bound to a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SdkGeometry {
    pub layer: ConvLayer,
    pub pw: ParallelWindow,
    /// Parallel outputs along the height.
    pub po_h: usize,
    /// Parallel outputs along the width.
    pub po_w: usize,
}

impl SdkGeometry {
    /// Number of parallel outputs `N = po_h * po_w`.
    pub fn parallel_outputs(&self) -> usize {
        self.po_h * self.po_w
    }

    /// Flattened window input length `b = c_in * pw_h * pw_w`.
    pub fn b(&self) -> usize {
        self.layer.c_in * self.pw.h * self.pw.w
    }

    /// Window placements needed to cover the output feature map; boundary
    /// windows that overhang the map still count.
    pub fn pw_steps(&self) -> usize {
        self.layer.oh().div_ceil(self.po_h) * self.layer.ow().div_ceil(self.po_w)
    }

    /// Pixel offset `(dy, dx)` of 0-based shift `s`, row-major over outputs.
    pub fn offset(&self, s: usize) -> (usize, usize) {
        let stride = self.layer.stride;
        ((s / self.po_w) * stride, (s % self.po_w) * stride)
    }

    /// Placement function of 0-based shift `s`: kernel flat index → window flat index.
    pub fn placement(&self, s: usize) -> Vec<usize> {
        let l = &self.layer;
        let (dy, dx) = self.offset(s);
        let mut f = Vec::with_capacity(l.n());
        for c in 0..l.c_in {
            for r in 0..l.kh {
                for q in 0..l.kw {
                    f.push(c * self.pw.h * self.pw.w + (r + dy) * self.pw.w + (q + dx));
                }
            }
        }
        f
    }
}

/// Binary `b x n` matrix aligning a flattened kernel with shift `s` of the window.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddingMatrix {
    pub matrix: Matrix,
    /// 1-based shift index.
    pub shift_index: usize,
    /// `f[j]` is the window row that kernel element `j` lands on.
    pub f_table: Vec<usize>,
}

/// Builds `P_s` for the 1-based shift `s`: `[P_s]_{i,j} = 1` iff `i = f(j)`.
pub fn build_padding_matrix(layer: &ConvLayer, pw: ParallelWindow, s: usize) -> Result<PaddingMatrix> {
    let geom = pw.geometry(layer)?;
    let n_par = geom.parallel_outputs();
    if s == 0 || s > n_par {
        return Err(MappingError::ShiftOutOfRange { s, n: n_par });
    }
    let f = geom.placement(s - 1);
    let mut matrix = Matrix::zeros(geom.b(), layer.n())?;
    for (j, &i) in f.iter().enumerate() {
        matrix[(i, j)] = 1.0;
    }
    Ok(PaddingMatrix {
        matrix,
        shift_index: s,
        f_table: f,
    })
}

/// `SDK(X)` in math orientation, `N·r x b`, for any `r x n` matrix `X`.
///
/// Row block `s` is `X · P_sᵀ`, built by scattering column `j` of `X` to
/// column `f_s(j)`.
pub fn sdk_operator(x: &Matrix, geom: &SdkGeometry) -> Result<Matrix> {
    let n = geom.layer.n();
    if x.cols() != n {
        return Err(MappingError::ShapeMismatch {
            what: "SDK operand columns",
            expected: n.to_string(),
            found: x.cols().to_string(),
        });
    }
    let r = x.rows();
    let n_par = geom.parallel_outputs();
    let mut out = Matrix::zeros(n_par * r, geom.b())?;
    for s in 0..n_par {
        let f = geom.placement(s);
        for row in 0..r {
            for (j, &i) in f.iter().enumerate() {
                out[(s * r + row, i)] = x[(row, j)];
            }
        }
    }
    Ok(out)
}

/// Which construction produced a [`MappedMatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MappingKind {
    Im2col,
    Sdk,
    LowrankStageR,
    LowrankStageL,
}

/// Cell occupancy of a physical mapping: `true` where the mapping wrote a
/// weight (stored zeros included), `false` for idle cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occupancy {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
}

impl Occupancy {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Occupancy {
            rows,
            cols,
            cells: vec![false; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Occupancy {
            rows,
            cols,
            cells: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize) {
        self.cells[r * self.cols + c] = true;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    /// Occupied cells divided by all cells of the matrix itself.
    pub fn fraction(&self) -> f64 {
        self.count() as f64 / (self.rows * self.cols) as f64
    }

    /// Per-tile `(active rows, active columns, occupied cells)` for an
    /// `array`-sized ceil tiling, tiles in row-major order. A row or column
    /// is active in a tile when it holds at least one occupied cell there.
    pub fn tile_activity(&self, array: &ArrayConfig) -> Vec<TileActivity> {
        let ar = self.rows.div_ceil(array.rows);
        let ac = self.cols.div_ceil(array.cols);
        let mut tiles = Vec::with_capacity(ar * ac);
        for tr in 0..ar {
            let r0 = tr * array.rows;
            let r1 = (r0 + array.rows).min(self.rows);
            for tc in 0..ac {
                let c0 = tc * array.cols;
                let c1 = (c0 + array.cols).min(self.cols);
                let mut col_active = vec![false; c1 - c0];
                let mut rows_active = 0;
                let mut occupied = 0;
                for r in r0..r1 {
                    let row = &self.cells[r * self.cols + c0..r * self.cols + c1];
                    let mut any = false;
                    for (c, &b) in row.iter().enumerate() {
                        if b {
                            any = true;
                            occupied += 1;
                            col_active[c] = true;
                        }
                    }
                    rows_active += usize::from(any);
                }
                tiles.push(TileActivity {
                    rows_active,
                    cols_active: col_active.iter().filter(|&&b| b).count(),
                    occupied,
                });
            }
        }
        tiles
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileActivity {
    pub rows_active: usize,
    pub cols_active: usize,
    pub occupied: usize,
}

/// A matrix in physical array orientation together with its occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct MappedMatrix {
    pub values: Matrix,
    pub occupancy: Occupancy,
    pub kind: MappingKind,
}

impl MappedMatrix {
    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }
}

/// The two physical stages of a low-rank mapping, in evaluation order R then L.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankMapping {
    pub stage_r: MappedMatrix,
    pub stage_l: MappedMatrix,
}

impl LowRankMapping {
    pub fn stages(&self) -> [&MappedMatrix; 2] {
        [&self.stage_r, &self.stage_l]
    }
}

/// Physical occupancy of `SDK(X)ᵀ` for an `r`-row operand whose entry
/// `(row, j)` is a real cell iff `support(row, j)`.
pub fn sdk_occupancy(geom: &SdkGeometry, r: usize, support: impl Fn(usize, usize) -> bool) -> Occupancy {
    let n_par = geom.parallel_outputs();
    let mut occ = Occupancy::empty(geom.b(), n_par * r);
    for s in 0..n_par {
        let f = geom.placement(s);
        for row in 0..r {
            for (j, &i) in f.iter().enumerate() {
                if support(row, j) {
                    occ.set(i, s * r + row);
                }
            }
        }
    }
    occ
}

/// Physical occupancy of `(I_N ⊗ X)ᵀ` for an `m x r` block `X`: `N` dense
/// `r x m` blocks on the diagonal.
pub fn kron_occupancy(n_par: usize, m: usize, r: usize) -> Occupancy {
    let mut occ = Occupancy::empty(n_par * r, n_par * m);
    for s in 0..n_par {
        for i in 0..r {
            for j in 0..m {
                occ.set(s * r + i, s * m + j);
            }
        }
    }
    occ
}

fn check_weights(w: &Matrix, layer: &ConvLayer) -> Result<()> {
    if w.shape() != (layer.m(), layer.n()) {
        return Err(MappingError::ShapeMismatch {
            what: "weight matrix",
            expected: format!("{}x{}", layer.m(), layer.n()),
            found: format!("{}x{}", w.rows(), w.cols()),
        });
    }
    Ok(())
}

/// im2col: column `j` of the `n x m` physical matrix is output channel `j`'s kernel.
pub fn im2col_map(layer: &ConvLayer, weights: &Kernel) -> Result<MappedMatrix> {
    weights.check_layer(layer)?;
    let values = weights.to_matrix().transpose();
    Ok(MappedMatrix {
        occupancy: Occupancy::full(values.rows(), values.cols()),
        values,
        kind: MappingKind::Im2col,
    })
}

/// SDK mapping of a math-orientation weight matrix, physical shape `b x N·m`.
pub fn sdk_map(w_math: &Matrix, layer: &ConvLayer, pw: ParallelWindow) -> Result<MappedMatrix> {
    check_weights(w_math, layer)?;
    let geom = pw.geometry(layer)?;
    let values = sdk_operator(w_math, &geom)?.transpose();
    let occupancy = sdk_occupancy(&geom, w_math.rows(), |_, _| true);
    Ok(MappedMatrix {
        values,
        occupancy,
        kind: MappingKind::Sdk,
    })
}

/// Low-rank SDK mapping: stage R is `SDK(R)ᵀ` (`b x N·k`), stage L is
/// `(I_N ⊗ L)ᵀ` (`N·k x N·m`). Their product equals `SDK(L·R)ᵀ`.
pub fn sdk_lowrank_map(pair: &LowRankPair, layer: &ConvLayer, pw: ParallelWindow) -> Result<LowRankMapping> {
    if pair.rows() != layer.m() || pair.cols() != layer.n() {
        return Err(MappingError::ShapeMismatch {
            what: "low-rank pair",
            expected: format!("{}x{}", layer.m(), layer.n()),
            found: format!("{}x{}", pair.rows(), pair.cols()),
        });
    }
    let geom = pw.geometry(layer)?;
    let n_par = geom.parallel_outputs();
    let k = pair.rank;
    let stage_r = MappedMatrix {
        values: sdk_operator(&pair.r, &geom)?.transpose(),
        occupancy: sdk_occupancy(&geom, k, |_, _| true),
        kind: MappingKind::LowrankStageR,
    };
    let stage_l = MappedMatrix {
        values: kronecker_identity(n_par, &pair.l)?.transpose(),
        occupancy: kron_occupancy(n_par, layer.m(), k),
        kind: MappingKind::LowrankStageL,
    };
    Ok(LowRankMapping { stage_r, stage_l })
}

fn span_of(spans: &[Range<usize>], rank: usize, row: usize) -> &Range<usize> {
    &spans[row / rank]
}

/// Group low-rank SDK mapping, using `L_cat = [L_1 ... L_g]` and the
/// block-diagonal `R_bd` so that `L_cat · R_bd = D_g(W)`. Stage R cells
/// are occupied only where group `i`'s rows meet the placements of its own
/// column span.
pub fn group_sdk_lowrank_map(
    grouped: &GroupedLowRank,
    layer: &ConvLayer,
    pw: ParallelWindow,
) -> Result<LowRankMapping> {
    if grouped.rows() != layer.m() || grouped.cols() != layer.n() {
        return Err(MappingError::ShapeMismatch {
            what: "grouped decomposition",
            expected: format!("{}x{}", layer.m(), layer.n()),
            found: format!("{}x{}", grouped.rows(), grouped.cols()),
        });
    }
    let geom = pw.geometry(layer)?;
    let n_par = geom.parallel_outputs();
    let k = grouped.rank;
    let gk = grouped.group_count() * k;
    let spans = grouped.spans();
    let l_cat = grouped.l_concat();
    let r_bd = grouped.r_block_diag();
    let stage_r = MappedMatrix {
        values: sdk_operator(&r_bd, &geom)?.transpose(),
        occupancy: sdk_occupancy(&geom, gk, |row, j| span_of(&spans, k, row).contains(&j)),
        kind: MappingKind::LowrankStageR,
    };
    let stage_l = MappedMatrix {
        values: kronecker_identity(n_par, &l_cat)?.transpose(),
        occupancy: kron_occupancy(n_par, layer.m(), gk),
        kind: MappingKind::LowrankStageL,
    };
    Ok(LowRankMapping { stage_r, stage_l })
}

/// Low-rank settings of a layer: rank `k` shared by `g` column groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LowRankShape {
    pub rank: usize,
    pub groups: usize,
}

/// Physical `(rows, cols)` of each stage a layer occupies, without building
/// any values. One stage when uncompressed, R then L when low-rank.
pub fn stage_shapes(
    layer: &ConvLayer,
    pw: ParallelWindow,
    lowrank: Option<LowRankShape>,
) -> Result<Vec<(usize, usize)>> {
    let geom = pw.geometry(layer)?;
    let n_par = geom.parallel_outputs();
    let m = layer.m();
    Ok(match lowrank {
        None => vec![(geom.b(), n_par * m)],
        Some(lr) => {
            validate_grouping(m, layer.n(), lr.rank, lr.groups)?;
            let gk = lr.groups * lr.rank;
            vec![(geom.b(), n_par * gk), (n_par * gk, n_par * m)]
        }
    })
}

/// Structural occupancy of each stage, matching what the value-carrying
/// builders produce for the same settings.
pub fn stage_occupancies(
    layer: &ConvLayer,
    pw: ParallelWindow,
    lowrank: Option<LowRankShape>,
) -> Result<Vec<Occupancy>> {
    let geom = pw.geometry(layer)?;
    let n_par = geom.parallel_outputs();
    let m = layer.m();
    Ok(match lowrank {
        None => vec![sdk_occupancy(&geom, m, |_, _| true)],
        Some(lr) => {
            let spans = validate_grouping(m, layer.n(), lr.rank, lr.groups)?;
            let gk = lr.groups * lr.rank;
            vec![
                sdk_occupancy(&geom, gk, |row, j| span_of(&spans, lr.rank, row).contains(&j)),
                kron_occupancy(n_par, m, gk),
            ]
        }
    })
}

/// Occupied cells over the cells of the ceil-tiled footprint
/// `AR · AC · rows · cols`.
pub fn utilization(mapped: &MappedMatrix, array: &ArrayConfig) -> f64 {
    occupancy_utilization(&mapped.occupancy, array)
}

pub fn occupancy_utilization(occ: &Occupancy, array: &ArrayConfig) -> f64 {
    let ar = occ.rows().div_ceil(array.rows);
    let ac = occ.cols().div_ceil(array.cols);
    occ.count() as f64 / (ar * ac * array.rows * array.cols) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::{decompose, group_decompose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_kernel(layer: &ConvLayer, seed: u64) -> Kernel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = layer.c_out * layer.n();
        Kernel::new(
            [layer.c_out, layer.c_in, layer.kh, layer.kw],
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn random_input(layer: &ConvLayer, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = layer.c_in * layer.ih * layer.iw;
        FeatureMap::new(
            [layer.c_in, layer.ih, layer.iw],
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Literal block product `(I_N ⊗ X) · [P_1ᵀ; ...; P_Nᵀ]`.
    fn sdk_by_block_product(x: &Matrix, layer: &ConvLayer, pw: ParallelWindow) -> Matrix {
        let n_par = pw.geometry(layer).unwrap().parallel_outputs();
        let pts: Vec<Matrix> = (1..=n_par)
            .map(|s| build_padding_matrix(layer, pw, s).unwrap().matrix.transpose())
            .collect();
        let refs: Vec<&Matrix> = pts.iter().collect();
        let stacked = crate::linalg::vconcat(&refs).unwrap();
        kronecker_identity(n_par, x).unwrap().matmul(&stacked).unwrap()
    }

    #[test]
    fn layer_validation() {
        assert!(ConvLayer::new(1, 1, 5, 5, 2, 2, 1, 1).is_err());
        assert!(ConvLayer::new(0, 1, 3, 3, 8, 8, 1, 1).is_err());
        assert!(ConvLayer::new(1, 1, 3, 3, 8, 8, 0, 1).is_err());
        let l = ConvLayer::new(16, 32, 3, 3, 32, 32, 2, 1).unwrap();
        assert_eq!((l.oh(), l.ow(), l.m(), l.n()), (16, 16, 32, 144));
        let bad = r#"{"c_in":1,"c_out":1,"kh":5,"kw":5,"ih":2,"iw":2,"stride":1,"pad":0}"#;
        assert!(serde_json::from_str::<ConvLayer>(bad).is_err());
    }

    #[test]
    fn im2col_small_kernel_column() {
        let layer = ConvLayer::new(1, 1, 2, 2, 4, 4, 1, 0).unwrap();
        let k = Kernel::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = im2col_map(&layer, &k).unwrap();
        assert_eq!(m.values.shape(), (4, 1));
        assert_eq!(m.values.column(0), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.occupancy.count(), 4);
    }

    #[test]
    fn im2col_resnet_shape() {
        let layer = ConvLayer::new(16, 16, 3, 3, 32, 32, 1, 1).unwrap();
        let m = im2col_map(&layer, &random_kernel(&layer, 1)).unwrap();
        assert_eq!(m.shape(), (144, 16));
    }

    #[test]
    fn padding_matrix_examples() {
        let layer = ConvLayer::new(1, 1, 2, 2, 6, 6, 1, 0).unwrap();
        let pw = ParallelWindow::new(3, 3);
        let geom = pw.geometry(&layer).unwrap();
        assert_eq!((geom.parallel_outputs(), geom.b(), layer.n()), (4, 9, 4));
        let p1 = build_padding_matrix(&layer, pw, 1).unwrap();
        assert_eq!(p1.f_table, vec![0, 1, 3, 4]);
        let p4 = build_padding_matrix(&layer, pw, 4).unwrap();
        assert_eq!(p4.f_table, vec![4, 5, 7, 8]);
        assert_eq!(p4.matrix.shape(), (9, 4));
        assert_eq!(p4.matrix[(7, 2)], 1.0);
        assert!(matches!(
            build_padding_matrix(&layer, pw, 5),
            Err(MappingError::ShiftOutOfRange { s: 5, n: 4 })
        ));
        assert!(build_padding_matrix(&layer, pw, 0).is_err());

        let id = build_padding_matrix(&layer, layer.kernel_window(), 1).unwrap();
        assert_eq!(id.matrix, Matrix::identity(4).unwrap());
    }

    #[test]
    fn padding_matrix_brute_force_alignment() {
        // Place a 2x2 kernel at every offset of a 3x3 window by hand and
        // record which window cell each kernel element covers.
        let layer = ConvLayer::new(1, 1, 2, 2, 6, 6, 1, 0).unwrap();
        let pw = ParallelWindow::new(3, 3);
        let mut s = 1;
        for oy in 0..2 {
            for ox in 0..2 {
                let mut expect = Vec::new();
                for r in 0..2 {
                    for q in 0..2 {
                        expect.push((oy + r) * 3 + (ox + q));
                    }
                }
                assert_eq!(build_padding_matrix(&layer, pw, s).unwrap().f_table, expect);
                s += 1;
            }
        }
    }

    #[test]
    fn padding_matrix_structure() {
        let layer = ConvLayer::new(3, 2, 3, 2, 9, 9, 2, 0).unwrap();
        let pw = ParallelWindow::new(6, 5);
        let geom = pw.geometry(&layer).unwrap();
        let n_par = geom.parallel_outputs();
        let mut total = 0;
        for s in 1..=n_par {
            let p = build_padding_matrix(&layer, pw, s).unwrap();
            let mut seen = std::collections::HashSet::new();
            assert!(p.f_table.iter().all(|i| seen.insert(*i)), "f injective");
            for j in 0..layer.n() {
                let ones: usize = (0..geom.b()).filter(|&i| p.matrix[(i, j)] == 1.0).count();
                assert_eq!(ones, 1);
            }
            for i in 0..geom.b() {
                let ones: usize = (0..layer.n()).filter(|&j| p.matrix[(i, j)] == 1.0).count();
                assert!(ones <= 1);
                total += ones;
            }
        }
        assert_eq!(total, n_par * layer.n());
    }

    #[test]
    fn sdk_operator_matches_block_product() {
        let layer = ConvLayer::new(2, 3, 3, 2, 8, 8, 1, 1).unwrap();
        let pw = ParallelWindow::new(5, 4);
        let geom = pw.geometry(&layer).unwrap();
        let w = random_kernel(&layer, 4).to_matrix();
        let fast = sdk_operator(&w, &geom).unwrap();
        let slow = sdk_by_block_product(&w, &layer, pw);
        assert_eq!(fast, slow);
        assert_eq!(fast.shape(), (geom.parallel_outputs() * 3, geom.b()));
    }

    #[test]
    fn sdk_with_kernel_window_is_im2col() {
        let layer = ConvLayer::new(3, 5, 3, 3, 7, 7, 1, 1).unwrap();
        let k = random_kernel(&layer, 9);
        let a = im2col_map(&layer, &k).unwrap();
        let b = sdk_map(&k.to_matrix(), &layer, layer.kernel_window()).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.occupancy, b.occupancy);
    }

    #[test]
    fn sdk_four_by_four_window_shape() {
        let layer = ConvLayer::new(1, 2, 3, 3, 8, 8, 1, 0).unwrap();
        let k = random_kernel(&layer, 2);
        let m = sdk_map(&k.to_matrix(), &layer, ParallelWindow::new(4, 4)).unwrap();
        assert_eq!(m.shape(), (16, 8));
        assert_eq!(m.occupancy.count(), 4 * 2 * 9);
    }

    #[test]
    fn sdk_factorization_identity_small() {
        let layer = ConvLayer::new(1, 6, 3, 3, 8, 8, 1, 1).unwrap();
        let w = random_kernel(&layer, 5).to_matrix();
        let pair = decompose(&w, 2).unwrap();
        let geom = ParallelWindow::new(4, 4).geometry(&layer).unwrap();
        let n_par = geom.parallel_outputs();
        let lhs = kronecker_identity(n_par, &pair.l)
            .unwrap()
            .matmul(&sdk_operator(&pair.r, &geom).unwrap())
            .unwrap();
        let rhs = sdk_by_block_product(&pair.reconstruct(), &layer, geom.pw);
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);

        let mapping = sdk_lowrank_map(&pair, &layer, geom.pw).unwrap();
        assert_eq!(mapping.stage_r.shape(), (16, 8));
        assert_eq!(mapping.stage_l.shape(), (8, 24));
        assert_eq!(mapping.stage_l.occupancy.count(), 48);
        let phys = mapping.stage_r.values.matmul(&mapping.stage_l.values).unwrap();
        assert!(phys.max_abs_diff(&rhs.transpose()).unwrap() <= 1e-10);
    }

    #[test]
    fn lowrank_with_kernel_window_is_plain_two_stage() {
        let layer = ConvLayer::new(2, 4, 3, 3, 6, 6, 1, 0).unwrap();
        let w = random_kernel(&layer, 6).to_matrix();
        let pair = decompose(&w, 3).unwrap();
        let m = sdk_lowrank_map(&pair, &layer, layer.kernel_window()).unwrap();
        assert_eq!(m.stage_r.values, pair.r.transpose());
        assert_eq!(m.stage_l.values, pair.l.transpose());
    }

    #[test]
    fn grouped_mapping_identity_and_occupancy() {
        let layer = ConvLayer::new(2, 8, 3, 3, 8, 8, 1, 1).unwrap();
        let w = random_kernel(&layer, 7).to_matrix();
        let grouped = group_decompose(&w, 2, 2).unwrap();
        let pw = ParallelWindow::new(4, 4);
        let geom = pw.geometry(&layer).unwrap();
        let n_par = geom.parallel_outputs();
        let lhs = kronecker_identity(n_par, &grouped.l_concat())
            .unwrap()
            .matmul(&sdk_operator(&grouped.r_block_diag(), &geom).unwrap())
            .unwrap();
        let rhs = sdk_operator(&grouped.reconstruct(), &geom).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);

        let mapping = group_sdk_lowrank_map(&grouped, &layer, pw).unwrap();
        let gk = 4;
        assert_eq!(mapping.stage_r.shape(), (geom.b(), n_par * gk));
        // Rows touched by group i in shift s are exactly f_s(span_i).
        for s in 0..n_par {
            let p = build_padding_matrix(&layer, pw, s + 1).unwrap();
            for (gi, span) in grouped.spans().iter().enumerate() {
                let expect: std::collections::BTreeSet<usize> = span.clone().map(|j| p.f_table[j]).collect();
                for row in 0..2 {
                    let col = s * gk + gi * 2 + row;
                    let got: std::collections::BTreeSet<usize> = (0..geom.b())
                        .filter(|&i| mapping.stage_r.occupancy.get(i, col))
                        .collect();
                    assert_eq!(got, expect);
                }
            }
        }
        let single = group_decompose(&w, 2, 1).unwrap();
        let pair = decompose(&w, 2).unwrap();
        let a = group_sdk_lowrank_map(&single, &layer, pw).unwrap();
        let b = sdk_lowrank_map(&pair, &layer, pw).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn structural_layouts_match_builders() {
        let layer = ConvLayer::new(3, 6, 3, 3, 9, 9, 1, 1).unwrap();
        let w = random_kernel(&layer, 8).to_matrix();
        let pw = ParallelWindow::new(5, 4);
        let grouped = group_decompose(&w, 2, 3).unwrap();
        let built = group_sdk_lowrank_map(&grouped, &layer, pw).unwrap();
        let lr = Some(LowRankShape { rank: 2, groups: 3 });
        let occ = stage_occupancies(&layer, pw, lr).unwrap();
        assert_eq!(occ[0], built.stage_r.occupancy);
        assert_eq!(occ[1], built.stage_l.occupancy);
        let shapes = stage_shapes(&layer, pw, lr).unwrap();
        assert_eq!(shapes, vec![built.stage_r.shape(), built.stage_l.shape()]);
        let plain = sdk_map(&w, &layer, pw).unwrap();
        assert_eq!(stage_occupancies(&layer, pw, None).unwrap()[0], plain.occupancy);
        assert!(stage_shapes(&layer, pw, Some(LowRankShape { rank: 10, groups: 3 })).is_err());
    }

    #[test]
    fn utilization_examples() {
        let layer = ConvLayer::new(16, 16, 3, 3, 32, 32, 1, 1).unwrap();
        let m = im2col_map(&layer, &random_kernel(&layer, 1)).unwrap();
        assert_eq!(utilization(&m, &ArrayConfig::new(64, 64).unwrap()), 0.1875);
        let full = MappedMatrix {
            values: Matrix::zeros(64, 64).unwrap(),
            occupancy: Occupancy::full(64, 64),
            kind: MappingKind::Im2col,
        };
        assert_eq!(utilization(&full, &ArrayConfig::new(64, 64).unwrap()), 1.0);
    }

    #[test]
    fn stored_zero_still_occupies() {
        let layer = ConvLayer::new(1, 1, 2, 2, 3, 3, 1, 0).unwrap();
        let k = Kernel::new([1, 1, 2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(im2col_map(&layer, &k).unwrap().occupancy.count(), 4);
        let s = sdk_map(&k.to_matrix(), &layer, ParallelWindow::new(3, 3)).unwrap();
        assert_eq!(s.occupancy.count(), 4 * 4);
    }

    #[test]
    fn evaluations_match_direct_convolution() {
        let layer = ConvLayer::new(1, 3, 3, 3, 8, 8, 1, 1).unwrap();
        let k = random_kernel(&layer, 10);
        let input = random_input(&layer, 11);
        let want = conv_oracle(&layer, &k, &input).unwrap();

        let im = im2col_map(&layer, &k).unwrap();
        let got = evaluate(&[&im], &layer, layer.kernel_window(), &input).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-10);

        let pw = ParallelWindow::new(4, 4);
        let sdk = sdk_map(&k.to_matrix(), &layer, pw).unwrap();
        let got = evaluate(&[&sdk], &layer, pw, &input).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-10);
    }

    #[test]
    fn strided_sdk_matches_direct_convolution() {
        let layer = ConvLayer::new(2, 3, 3, 3, 11, 11, 2, 1).unwrap();
        let k = random_kernel(&layer, 12);
        let input = random_input(&layer, 13);
        let want = conv_oracle(&layer, &k, &input).unwrap();
        for pw in [
            ParallelWindow::new(5, 5),
            ParallelWindow::new(3, 7),
            ParallelWindow::new(6, 4),
        ] {
            let sdk = sdk_map(&k.to_matrix(), &layer, pw).unwrap();
            let got = evaluate(&[&sdk], &layer, pw, &input).unwrap();
            assert!(got.max_abs_diff(&want) <= 1e-10, "{pw}");
        }
    }

    #[test]
    fn sdk_occupied_fraction_shrinks_as_window_grows() {
        let layer = ConvLayer::new(4, 8, 3, 3, 16, 16, 1, 1).unwrap();
        let mut last = f64::INFINITY;
        for p in 3..=9 {
            let occ = &stage_occupancies(&layer, ParallelWindow::new(p, 3), None).unwrap()[0];
            assert!(occ.fraction() <= last);
            last = occ.fraction();
        }
    }
}
