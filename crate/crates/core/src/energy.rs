//! First-order energy estimate over occupied array tiles.
//!
//! Every activated tile pays a fixed overhead, one wordline charge per row
//! that drives at least one stored weight, one ADC conversion per column
//! that senses at least one, and a cell term per stored weight. A tile is
//! activated once per window placement. Idle cells cost nothing on their
//! own: there is no zero-skipping hardware, so all that matters is which
//! rows and columns a tile has to drive and sense.
//!
//! Units are arbitrary; the defaults only encode the usual ordering
//! `cell < wordline < ADC < tile activation`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cycles::{ArrayConfig, CycleReport};
use crate::mapping::{self, Occupancy};
use crate::network::NetworkDescriptor;
use crate::plan::{CompressionPlan, PlanEntry, PwPolicy};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnergyError {
    #[error("energy parameter {name} must be finite and non-negative, got {value}")]
    InvalidParam { name: &'static str, value: f64 },
    #[error("stage {stage}: occupancy is {found:?}, cycle report says {expected:?}")]
    Inconsistent {
        stage: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("{found} occupancy masks for {expected} stages")]
    StageCount { expected: usize, found: usize },
    #[error("baseline energy is zero, cannot normalize")]
    ZeroBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct EnergyParams {
    e_cell: f64,
    e_wordline: f64,
    e_adc: f64,
    e_tile_overhead: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    #[serde(default = "d_cell")]
    e_cell: f64,
    #[serde(default = "d_wordline")]
    e_wordline: f64,
    #[serde(default = "d_adc")]
    e_adc: f64,
    #[serde(default = "d_tile")]
    e_tile_overhead: f64,
}

fn d_cell() -> f64 {
    1.0
}
fn d_wordline() -> f64 {
    4.0
}
fn d_adc() -> f64 {
    16.0
}
fn d_tile() -> f64 {
    64.0
}

impl TryFrom<RawParams> for EnergyParams {
    type Error = EnergyError;

    fn try_from(r: RawParams) -> Result<Self, EnergyError> {
        EnergyParams::new(r.e_cell, r.e_wordline, r.e_adc, r.e_tile_overhead)
    }
}

impl From<EnergyParams> for RawParams {
    fn from(p: EnergyParams) -> Self {
        RawParams {
            e_cell: p.e_cell,
            e_wordline: p.e_wordline,
            e_adc: p.e_adc,
            e_tile_overhead: p.e_tile_overhead,
        }
    }
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams {
            e_cell: d_cell(),
            e_wordline: d_wordline(),
            e_adc: d_adc(),
            e_tile_overhead: d_tile(),
        }
    }
}

impl EnergyParams {
    pub fn new(e_cell: f64, e_wordline: f64, e_adc: f64, e_tile_overhead: f64) -> Result<Self, EnergyError> {
        for (name, value) in [
            ("e_cell", e_cell),
            ("e_wordline", e_wordline),
            ("e_adc", e_adc),
            ("e_tile_overhead", e_tile_overhead),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(EnergyError::InvalidParam { name, value });
            }
        }
        Ok(EnergyParams {
            e_cell,
            e_wordline,
            e_adc,
            e_tile_overhead,
        })
    }

    pub fn e_cell(&self) -> f64 {
        self.e_cell
    }
    pub fn e_wordline(&self) -> f64 {
        self.e_wordline
    }
    pub fn e_adc(&self) -> f64 {
        self.e_adc
    }
    pub fn e_tile_overhead(&self) -> f64 {
        self.e_tile_overhead
    }

    /// `[e_cell, e_wordline, e_adc, e_tile_overhead]`
    pub fn as_array(&self) -> [f64; 4] {
        [self.e_cell, self.e_wordline, self.e_adc, self.e_tile_overhead]
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self, EnergyError> {
        EnergyParams::new(v[0], v[1], v[2], v[3])
    }
}

/// Energy of one activation of every tile of a stage.
fn stage_pass_energy(occ: &Occupancy, array: &ArrayConfig, p: &EnergyParams) -> f64 {
    occ.tile_activity(array)
        .iter()
        .map(|t| {
            p.e_tile_overhead
                + t.rows_active as f64 * p.e_wordline
                + t.cols_active as f64 * p.e_adc
                + t.occupied as f64 * p.e_cell
        })
        .sum()
}

/// Energy of a layer from its stage occupancies and cycle report.
pub fn layer_energy(
    occupancies: &[Occupancy],
    report: &CycleReport,
    array: &ArrayConfig,
    p: &EnergyParams,
) -> Result<f64, EnergyError> {
    if occupancies.len() != report.stages.len() {
        return Err(EnergyError::StageCount {
            expected: report.stages.len(),
            found: occupancies.len(),
        });
    }
    let mut total = 0.0;
    for (i, (occ, stage)) in occupancies.iter().zip(&report.stages).enumerate() {
        if occ.shape() != (stage.rows, stage.cols) {
            return Err(EnergyError::Inconsistent {
                stage: i,
                expected: (stage.rows, stage.cols),
                found: occ.shape(),
            });
        }
        total += stage.pw_steps as f64 * stage_pass_energy(occ, array, p);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub name: String,
    pub energy: f64,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub network: String,
    pub array: ArrayConfig,
    pub params: EnergyParams,
    /// Compressible layers only, in network order.
    pub layers: Vec<LayerEnergy>,
    pub total: f64,
    /// Total of the uncompressed im2col plan on the same network and array.
    pub baseline_total: f64,
    pub normalized: f64,
}

/// Energy of every compressible layer without normalization.
pub fn plan_energy(
    net: &NetworkDescriptor,
    plan: &CompressionPlan,
    array: &ArrayConfig,
    p: &EnergyParams,
) -> crate::Result<Vec<LayerEnergy>> {
    let resolved = plan.resolve(net, array)?;
    let mut out = Vec::new();
    for (entry, settings) in net.layers.iter().zip(resolved) {
        let Some(settings) = settings else { continue };
        let report = crate::cycles::resolved_layer_cycles(&entry.layer, &settings, array)?;
        let occ = mapping::stage_occupancies(&entry.layer, settings.pw, settings.lowrank)?;
        out.push(LayerEnergy {
            name: entry.name.clone(),
            energy: layer_energy(&occ, &report, array, p)?,
            cycles: report.total,
        });
    }
    Ok(out)
}

pub fn baseline_plan() -> CompressionPlan {
    CompressionPlan::uniform(PlanEntry::uncompressed(PwPolicy::Im2col))
}

/// Network energy normalized against uncompressed im2col on the same array.
pub fn network_energy(
    net: &NetworkDescriptor,
    plan: &CompressionPlan,
    array: &ArrayConfig,
    p: &EnergyParams,
) -> crate::Result<EnergyReport> {
    let layers = plan_energy(net, plan, array, p)?;
    let total: f64 = layers.iter().map(|l| l.energy).sum();
    let baseline_total: f64 = if *plan == baseline_plan() {
        total
    } else {
        plan_energy(net, &baseline_plan(), array, p)?
            .iter()
            .map(|l| l.energy)
            .sum()
    };
    if baseline_total == 0.0 {
        return Err(EnergyError::ZeroBaseline.into());
    }
    Ok(EnergyReport {
        network: net.name.clone(),
        array: *array,
        params: *p,
        layers,
        total,
        baseline_total,
        normalized: total / baseline_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cycles::resolved_layer_cycles;
    use crate::mapping::{ConvLayer, ParallelWindow};
    use crate::plan::ResolvedLayer;

    fn layer_energy_of(layer: &ConvLayer, pw: ParallelWindow, array: &ArrayConfig, p: &EnergyParams) -> f64 {
        let resolved = ResolvedLayer { pw, lowrank: None };
        let report = resolved_layer_cycles(layer, &resolved, array).unwrap();
        let occ = mapping::stage_occupancies(layer, pw, None).unwrap();
        layer_energy(&occ, &report, array, p).unwrap()
    }

    #[test]
    fn zero_params_give_zero() {
        let layer = ConvLayer::new(16, 16, 3, 3, 32, 32, 1, 1).unwrap();
        let p = EnergyParams::new(0.0, 0.0, 0.0, 0.0).unwrap();
        let array = ArrayConfig::square(64).unwrap();
        assert_eq!(layer_energy_of(&layer, layer.kernel_window(), &array, &p), 0.0);
    }

    #[test]
    fn dense_single_tile_closed_form() {
        // 1x1 conv, 4 -> 3 channels over a 5x5 map: 4x3 dense map, 25 steps.
        let layer = ConvLayer::new(4, 3, 1, 1, 5, 5, 1, 0).unwrap();
        let p = EnergyParams::new(1.0, 0.0, 0.0, 0.0).unwrap();
        let array = ArrayConfig::square(8).unwrap();
        assert_eq!(
            layer_energy_of(&layer, layer.kernel_window(), &array, &p),
            (4 * 3 * 25) as f64
        );
    }

    #[test]
    fn per_term_closed_form_on_multi_tile_map() {
        // im2col 144x16 on 64x64: tiles of 64, 64, 16 rows, all 16 columns.
        let layer = ConvLayer::new(16, 16, 3, 3, 32, 32, 1, 1).unwrap();
        let array = ArrayConfig::square(64).unwrap();
        let e = |v: [f64; 4]| {
            layer_energy_of(
                &layer,
                layer.kernel_window(),
                &array,
                &EnergyParams::from_array(v).unwrap(),
            )
        };
        assert_eq!(e([1.0, 0.0, 0.0, 0.0]), (144 * 16 * 1024) as f64);
        assert_eq!(e([0.0, 1.0, 0.0, 0.0]), (144 * 1024) as f64);
        assert_eq!(e([0.0, 0.0, 1.0, 0.0]), (3 * 16 * 1024) as f64);
        assert_eq!(e([0.0, 0.0, 0.0, 1.0]), (3 * 1024) as f64);
    }

    #[test]
    fn sdk_beats_im2col_on_resnet_layer() {
        let layer = ConvLayer::new(16, 16, 3, 3, 32, 32, 1, 1).unwrap();
        let array = ArrayConfig::new(256, 64).unwrap();
        let p = EnergyParams::default();
        let im2col = layer_energy_of(&layer, layer.kernel_window(), &array, &p);
        let sdk = layer_energy_of(&layer, ParallelWindow::new(4, 4), &array, &p);
        assert!(sdk < im2col, "{sdk} vs {im2col}");
    }

    #[test]
    fn params_validation_and_serde() {
        assert!(EnergyParams::new(-1.0, 0.0, 0.0, 0.0).is_err());
        assert!(EnergyParams::new(f64::NAN, 0.0, 0.0, 0.0).is_err());
        let p: EnergyParams = serde_json::from_str(r#"{"e_adc": 32}"#).unwrap();
        assert_eq!(p.as_array(), [1.0, 4.0, 32.0, 64.0]);
        assert!(serde_json::from_str::<EnergyParams>(r#"{"e_adc": -1}"#).is_err());
        assert!(serde_json::from_str::<EnergyParams>(r#"{"e_dac": 1}"#).is_err());
    }

    #[test]
    fn baseline_normalizes_to_one() {
        let net = crate::network::preset("resnet20").unwrap();
        let array = ArrayConfig::square(64).unwrap();
        let r = network_energy(&net, &baseline_plan(), &array, &EnergyParams::default()).unwrap();
        assert_eq!(r.normalized, 1.0);
        assert_eq!(r.layers.len(), 20);
    }
}
