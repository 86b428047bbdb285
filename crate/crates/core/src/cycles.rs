//! Array-row / array-column cycle accounting.
//!
//! A physical mapping of `rows x cols` needs `AR = ceil(rows / array.rows)`
//! by `AC = ceil(cols / array.cols)` array tiles. Tiles run one after the
//! other on a single array, and the tile set is replayed once per window
//! placement, so a stage costs `AR · AC · pw_steps`. Low-rank pipelines run
//! stage R then stage L for every placement and their costs add.
//!
//! Bit-serial input cycling multiplies every total by the same activation
//! precision and is left out.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mapping::{self, ConvLayer, MappedMatrix, MappingError, MappingKind, ParallelWindow};
use crate::network::NetworkDescriptor;
use crate::plan::{CompressionPlan, ResolvedLayer};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CycleError {
    #[error("array dimensions must be positive, got {rows}x{cols}")]
    InvalidArray { rows: usize, cols: usize },
    #[error("{what}: expected {expected}, found {found}")]
    Inconsistent {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("candidate cycle count is zero")]
    ZeroCandidate,
    #[error(transparent)]
    Mapping(#[from] MappingError),
}

/// Crossbar size: wordlines (rows) by bitlines (columns).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawArray", into = "RawArray")]
pub struct ArrayConfig {
    pub rows: usize,
    pub cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArray {
    rows: usize,
    cols: usize,
}

impl TryFrom<RawArray> for ArrayConfig {
    type Error = CycleError;

    fn try_from(r: RawArray) -> Result<Self, CycleError> {
        ArrayConfig::new(r.rows, r.cols)
    }
}

impl From<ArrayConfig> for RawArray {
    fn from(a: ArrayConfig) -> Self {
        RawArray {
            rows: a.rows,
            cols: a.cols,
        }
    }
}

impl std::fmt::Display for ArrayConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl ArrayConfig {
    pub fn new(rows: usize, cols: usize) -> Result<Self, CycleError> {
        if rows == 0 || cols == 0 {
            return Err(CycleError::InvalidArray { rows, cols });
        }
        Ok(ArrayConfig { rows, cols })
    }

    pub fn square(n: usize) -> Result<Self, CycleError> {
        ArrayConfig::new(n, n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCycles {
    pub kind: MappingKind,
    pub rows: usize,
    pub cols: usize,
    pub ar: usize,
    pub ac: usize,
    pub pw_steps: usize,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleReport {
    /// Stages in execution order: one when uncompressed, R then L when low-rank.
    pub stages: Vec<StageCycles>,
    pub pw_steps: usize,
    pub total: u64,
}

impl CycleReport {
    /// AR of the first (input-facing) stage.
    pub fn ar(&self) -> usize {
        self.stages[0].ar
    }

    /// AC of the first (input-facing) stage.
    pub fn ac(&self) -> usize {
        self.stages[0].ac
    }
}

/// Cycle report from physical stage shapes and the window step count.
pub fn cycles_for_shapes(
    shapes: &[(usize, usize)],
    kinds: &[MappingKind],
    pw_steps: usize,
    array: &ArrayConfig,
) -> CycleReport {
    let stages: Vec<StageCycles> = shapes
        .iter()
        .zip(kinds)
        .map(|(&(rows, cols), &kind)| {
            let ar = rows.div_ceil(array.rows);
            let ac = cols.div_ceil(array.cols);
            StageCycles {
                kind,
                rows,
                cols,
                ar,
                ac,
                pw_steps,
                cycles: (ar * ac * pw_steps) as u64,
            }
        })
        .collect();
    let total = stages.iter().map(|s| s.cycles).sum();
    CycleReport {
        stages,
        pw_steps,
        total,
    }
}

fn stage_kinds(pw: ParallelWindow, layer: &ConvLayer, stages: usize) -> Vec<MappingKind> {
    if stages == 2 {
        vec![MappingKind::LowrankStageR, MappingKind::LowrankStageL]
    } else if pw == layer.kernel_window() {
        vec![MappingKind::Im2col]
    } else {
        vec![MappingKind::Sdk]
    }
}

/// Cycles of already-built physical stages. `pw = None` means im2col.
pub fn layer_cycles(
    stages: &[&MappedMatrix],
    layer: &ConvLayer,
    pw: Option<ParallelWindow>,
    array: &ArrayConfig,
) -> Result<CycleReport, CycleError> {
    let pw = pw.unwrap_or_else(|| layer.kernel_window());
    let geom = pw.geometry(layer)?;
    let n_par = geom.parallel_outputs();
    if stages.is_empty() || stages.len() > 2 {
        return Err(CycleError::Inconsistent {
            what: "stage count",
            expected: "1 or 2".into(),
            found: stages.len().to_string(),
        });
    }
    let shapes: Vec<(usize, usize)> = stages.iter().map(|s| s.shape()).collect();
    if shapes[0].0 != geom.b() {
        return Err(CycleError::Inconsistent {
            what: "first stage rows",
            expected: geom.b().to_string(),
            found: shapes[0].0.to_string(),
        });
    }
    if shapes.len() == 2 && shapes[0].1 != shapes[1].0 {
        return Err(CycleError::Inconsistent {
            what: "stage chaining",
            expected: shapes[0].1.to_string(),
            found: shapes[1].0.to_string(),
        });
    }
    let last = shapes[shapes.len() - 1].1;
    if last != n_par * layer.m() {
        return Err(CycleError::Inconsistent {
            what: "last stage columns",
            expected: (n_par * layer.m()).to_string(),
            found: last.to_string(),
        });
    }
    let kinds: Vec<MappingKind> = stages.iter().map(|s| s.kind).collect();
    Ok(cycles_for_shapes(&shapes, &kinds, geom.pw_steps(), array))
}

/// Cycles of a layer under resolved settings, from shapes alone.
pub fn resolved_layer_cycles(
    layer: &ConvLayer,
    resolved: &ResolvedLayer,
    array: &ArrayConfig,
) -> Result<CycleReport, CycleError> {
    let shapes = mapping::stage_shapes(layer, resolved.pw, resolved.lowrank)?;
    let steps = resolved.pw.geometry(layer)?.pw_steps();
    let kinds = stage_kinds(resolved.pw, layer, shapes.len());
    Ok(cycles_for_shapes(&shapes, &kinds, steps, array))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCycles {
    pub name: String,
    pub compressible: bool,
    /// `None` for layers left out of compression and cycle accounting.
    pub settings: Option<ResolvedLayer>,
    pub report: Option<CycleReport>,
}

impl LayerCycles {
    pub fn total(&self) -> u64 {
        self.report.as_ref().map_or(0, |r| r.total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCycles {
    pub network: String,
    pub array: ArrayConfig,
    pub layers: Vec<LayerCycles>,
    pub total: u64,
}

/// Sums layer cycles over the network; non-compressible layers contribute zero.
pub fn network_cycles(
    net: &NetworkDescriptor,
    plan: &CompressionPlan,
    array: &ArrayConfig,
) -> crate::Result<NetworkCycles> {
    let resolved = plan.resolve(net, array)?;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (entry, settings) in net.layers.iter().zip(resolved) {
        let report = match &settings {
            Some(s) => Some(resolved_layer_cycles(&entry.layer, s, array)?),
            None => None,
        };
        layers.push(LayerCycles {
            name: entry.name.clone(),
            compressible: entry.compressible,
            settings,
            report,
        });
    }
    let total = layers.iter().map(LayerCycles::total).sum();
    Ok(NetworkCycles {
        network: net.name.clone(),
        array: *array,
        layers,
        total,
    })
}

/// `baseline / candidate`.
pub fn speedup(baseline: u64, candidate: u64) -> Result<f64, CycleError> {
    if candidate == 0 {
        return Err(CycleError::ZeroCandidate);
    }
    Ok(baseline as f64 / candidate as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::{im2col_map, sdk_map, Kernel, LowRankShape};

    fn resnet_layer() -> ConvLayer {
        ConvLayer::new(16, 16, 3, 3, 32, 32, 1, 1).unwrap()
    }

    fn zero_kernel(layer: &ConvLayer) -> Kernel {
        Kernel::new(
            [layer.c_out, layer.c_in, layer.kh, layer.kw],
            vec![0.0; layer.c_out * layer.n()],
        )
        .unwrap()
    }

    /// Counts tiles by walking tile origins instead of dividing.
    fn tile_count(rows: usize, cols: usize, array: &ArrayConfig) -> usize {
        let mut count = 0;
        let mut r = 0;
        while r < rows {
            let mut c = 0;
            while c < cols {
                count += 1;
                c += array.cols;
            }
            r += array.rows;
        }
        count
    }

    #[test]
    fn im2col_resnet_layer() {
        let layer = resnet_layer();
        let array = ArrayConfig::square(64).unwrap();
        let m = im2col_map(&layer, &zero_kernel(&layer)).unwrap();
        let r = layer_cycles(&[&m], &layer, None, &array).unwrap();
        assert_eq!((r.ar(), r.ac(), r.pw_steps, r.total), (3, 1, 1024, 3072));
        assert_eq!(tile_count(144, 16, &array) * 1024, 3072);
    }

    #[test]
    fn sdk_resnet_layer_on_tall_array() {
        let layer = resnet_layer();
        let array = ArrayConfig::new(256, 64).unwrap();
        let pw = ParallelWindow::new(4, 4);
        let m = sdk_map(&zero_kernel(&layer).to_matrix(), &layer, pw).unwrap();
        assert_eq!(m.shape(), (256, 64));
        let r = layer_cycles(&[&m], &layer, Some(pw), &array).unwrap();
        assert_eq!((r.ar(), r.ac(), r.pw_steps, r.total), (1, 1, 256, 256));
    }

    #[test]
    fn tiny_map_single_output() {
        let layer = ConvLayer::new(1, 1, 2, 2, 2, 2, 1, 0).unwrap();
        let m = im2col_map(&layer, &zero_kernel(&layer)).unwrap();
        let r = layer_cycles(&[&m], &layer, None, &ArrayConfig::square(8).unwrap()).unwrap();
        assert_eq!(r.total, 1);
    }

    #[test]
    fn rejects_inconsistent_stages() {
        let layer = resnet_layer();
        let m = im2col_map(&layer, &zero_kernel(&layer)).unwrap();
        let array = ArrayConfig::square(64).unwrap();
        assert!(layer_cycles(&[&m], &layer, Some(ParallelWindow::new(4, 4)), &array).is_err());
        assert!(layer_cycles(&[], &layer, None, &array).is_err());
        assert!(ArrayConfig::new(0, 4).is_err());
    }

    #[test]
    fn lowrank_stages_share_steps() {
        let layer = resnet_layer();
        let array = ArrayConfig::square(128).unwrap();
        let resolved = ResolvedLayer {
            pw: ParallelWindow::new(4, 4),
            lowrank: Some(LowRankShape { rank: 2, groups: 4 }),
        };
        let r = resolved_layer_cycles(&layer, &resolved, &array).unwrap();
        assert_eq!(r.stages.len(), 2);
        assert_eq!(r.stages[0].pw_steps, r.stages[1].pw_steps);
        assert_eq!((r.stages[0].rows, r.stages[0].cols), (256, 32));
        assert_eq!((r.stages[1].rows, r.stages[1].cols), (32, 64));
        assert_eq!(r.total, 3 * 256);
    }

    #[test]
    fn speedup_examples() {
        assert_eq!(speedup(100, 100).unwrap(), 1.0);
        assert_eq!(speedup(100, 50).unwrap(), 2.0);
        assert_eq!(speedup(1, 0), Err(CycleError::ZeroCandidate));
    }
}
