//! Report structures for each command and their table/CSV/JSON rendering.

use std::io::Write;
use std::path::Path;

use anyhow::Context;
use imc_lowrank::cycles::ArrayConfig;
use imc_lowrank::mapping::{LowRankShape, MappingKind};
use imc_lowrank::planner::SweepResult;
use serde::Serialize;

use crate::config::Format;

/// Plain rows of cells, rendered as an aligned table or as CSV.
pub struct Table {
    pub headers: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: Vec<&'static str>) -> Self {
        Table {
            headers,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn render_text(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(|h| h.len()).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let line = |cells: &mut dyn Iterator<Item = &str>, out: &mut String| {
            let parts: Vec<String> = cells.zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
        };
        line(&mut self.headers.iter().copied(), &mut out);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&mut rule.iter().map(String::as_str), &mut out);
        for row in &self.rows {
            line(&mut row.iter().map(String::as_str), &mut out);
        }
        out
    }

    pub fn render_csv(&self) -> anyhow::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }
}

/// Something every command can print in all three formats.
pub trait Report: Serialize {
    fn table(&self) -> Table;

    /// Lines printed under the table in text mode.
    fn footer(&self) -> Vec<String> {
        Vec::new()
    }

    fn render(&self, format: Format) -> anyhow::Result<String> {
        Ok(match format {
            Format::Json => serde_json::to_string_pretty(self)? + "\n",
            Format::Csv => self.table().render_csv()?,
            Format::Table => {
                let mut s = self.table().render_text();
                for l in self.footer() {
                    s.push_str(&l);
                    s.push('\n');
                }
                s
            }
        })
    }
}

pub fn emit(text: &str, path: Option<&Path>) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(out.flush()?)
        }
    }
}

fn lowrank_cell(lr: Option<LowRankShape>) -> String {
    match lr {
        None => "-".into(),
        Some(lr) => format!("k={} g={}", lr.rank, lr.groups),
    }
}

fn kind_name(kind: MappingKind) -> &'static str {
    match kind {
        MappingKind::Im2col => "im2col",
        MappingKind::Sdk => "sdk",
        MappingKind::LowrankStageR => "stage-r",
        MappingKind::LowrankStageL => "stage-l",
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

#[derive(Debug, Serialize)]
pub struct StageMap {
    pub kind: MappingKind,
    pub rows: usize,
    pub cols: usize,
    pub ar: usize,
    pub ac: usize,
    pub occupied: usize,
    pub utilization: f64,
}

#[derive(Debug, Serialize)]
pub struct LayerMap {
    pub name: String,
    pub pw: String,
    pub lowrank: Option<LowRankShape>,
    /// The window equals the kernel, so SDK degenerates to im2col.
    pub sdk_equals_im2col: bool,
    pub pw_steps: usize,
    pub stages: Vec<StageMap>,
}

#[derive(Debug, Serialize)]
pub struct MapReport {
    pub network: String,
    pub array: ArrayConfig,
    pub layers: Vec<LayerMap>,
}

impl Report for MapReport {
    fn table(&self) -> Table {
        let mut t = Table::new(vec![
            "layer",
            "pw",
            "lowrank",
            "stage",
            "rows",
            "cols",
            "ar",
            "ac",
            "pw_steps",
            "occupied",
            "utilization",
            "note",
        ]);
        for l in &self.layers {
            for s in &l.stages {
                t.push(vec![
                    l.name.clone(),
                    l.pw.clone(),
                    lowrank_cell(l.lowrank),
                    kind_name(s.kind).into(),
                    s.rows.to_string(),
                    s.cols.to_string(),
                    s.ar.to_string(),
                    s.ac.to_string(),
                    l.pw_steps.to_string(),
                    s.occupied.to_string(),
                    format!("{:.4}", s.utilization),
                    if l.sdk_equals_im2col {
                        "SDK≡im2col".into()
                    } else {
                        String::new()
                    },
                ]);
            }
        }
        t
    }
}

#[derive(Debug, Serialize)]
pub struct LayerCycleRow {
    pub name: String,
    pub pw: String,
    pub lowrank: Option<LowRankShape>,
    pub pw_steps: usize,
    pub stages: Vec<StageCycleRow>,
    pub cycles: u64,
}

#[derive(Debug, Serialize)]
pub struct StageCycleRow {
    pub kind: MappingKind,
    pub rows: usize,
    pub cols: usize,
    pub ar: usize,
    pub ac: usize,
    pub cycles: u64,
}

#[derive(Debug, Serialize)]
pub struct CyclesReport {
    pub network: String,
    pub array: ArrayConfig,
    pub layers: Vec<LayerCycleRow>,
    pub total: u64,
    /// Total of the uncompressed im2col plan on the same network and array.
    pub baseline_total: u64,
    pub speedup: f64,
}

impl Report for CyclesReport {
    fn table(&self) -> Table {
        let mut t = Table::new(vec![
            "layer", "pw", "lowrank", "stage", "rows", "cols", "ar", "ac", "pw_steps", "cycles",
        ]);
        for l in &self.layers {
            for s in &l.stages {
                t.push(vec![
                    l.name.clone(),
                    l.pw.clone(),
                    lowrank_cell(l.lowrank),
                    kind_name(s.kind).into(),
                    s.rows.to_string(),
                    s.cols.to_string(),
                    s.ar.to_string(),
                    s.ac.to_string(),
                    l.pw_steps.to_string(),
                    s.cycles.to_string(),
                ]);
            }
        }
        t
    }

    fn footer(&self) -> Vec<String> {
        vec![
            format!("total cycles: {}", self.total),
            format!(
                "im2col baseline: {} (speedup {:.3}x)",
                self.baseline_total, self.speedup
            ),
        ]
    }
}

#[derive(Debug, Serialize)]
pub struct EnergyOut {
    #[serde(flatten)]
    pub report: imc_lowrank::energy::EnergyReport,
}

impl Report for EnergyOut {
    fn table(&self) -> Table {
        let mut t = Table::new(vec!["layer", "energy", "cycles"]);
        for l in &self.report.layers {
            t.push(vec![l.name.clone(), format!("{:.1}", l.energy), l.cycles.to_string()]);
        }
        t
    }

    fn footer(&self) -> Vec<String> {
        let r = &self.report;
        vec![
            format!("total energy: {:.1}", r.total),
            format!(
                "im2col baseline: {:.1} (normalized {:.4})",
                r.baseline_total, r.normalized
            ),
        ]
    }
}

#[derive(Debug, Serialize)]
pub struct DecomposeRow {
    pub name: String,
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    pub groups: usize,
    /// Whole-matrix rank-k error.
    pub epsilon: f64,
    /// Grouped rank-k error.
    pub epsilon_g: f64,
    pub bound_holds: bool,
    pub original_parameters: usize,
    pub lowrank_parameters: usize,
    pub grouped_parameters: usize,
}

#[derive(Debug, Serialize)]
pub struct DecomposeReport {
    pub network: String,
    pub layers: Vec<DecomposeRow>,
    pub recon_error: f64,
}

impl Report for DecomposeReport {
    fn table(&self) -> Table {
        let mut t = Table::new(vec![
            "layer",
            "m",
            "n",
            "rank",
            "groups",
            "epsilon",
            "epsilon_g",
            "bound_holds",
            "params",
            "lowrank_params",
            "grouped_params",
        ]);
        for l in &self.layers {
            t.push(vec![
                l.name.clone(),
                l.m.to_string(),
                l.n.to_string(),
                l.rank.to_string(),
                l.groups.to_string(),
                format!("{:.6}", l.epsilon),
                format!("{:.6}", l.epsilon_g),
                l.bound_holds.to_string(),
                l.original_parameters.to_string(),
                l.lowrank_parameters.to_string(),
                l.grouped_parameters.to_string(),
            ]);
        }
        t
    }

    fn footer(&self) -> Vec<String> {
        vec![format!("network recon error (grouped): {:.6}", self.recon_error)]
    }
}

#[derive(Debug, Serialize)]
pub struct SweepOut {
    #[serde(flatten)]
    pub result: SweepResult,
}

/// Fixed sweep CSV columns.
pub const SWEEP_COLUMNS: [&str; 9] = [
    "network",
    "array",
    "rank_divisor",
    "groups",
    "pw_policy",
    "recon_error",
    "cycles",
    "normalized_energy",
    "pareto",
];

impl Report for SweepOut {
    fn table(&self) -> Table {
        let mut t = Table::new(SWEEP_COLUMNS.to_vec());
        let r = &self.result;
        for p in &r.points {
            t.push(vec![
                r.network.clone(),
                r.array.to_string(),
                p.rank_divisor.to_string(),
                p.groups.to_string(),
                p.pw_policy.to_string(),
                opt(p.recon_error),
                opt(p.cycles),
                opt(p.normalized_energy),
                p.pareto.to_string(),
            ]);
        }
        t
    }

    fn footer(&self) -> Vec<String> {
        self.result
            .points
            .iter()
            .filter_map(|p| {
                p.infeasible
                    .as_ref()
                    .map(|why| format!("m/{} g={} infeasible: {why}", p.rank_divisor, p.groups))
            })
            .collect()
    }
}

#[derive(Debug, Serialize)]
pub struct VerifyOut {
    #[serde(flatten)]
    pub summary: imc_lowrank::verify::VerifySummary,
}

impl Report for VerifyOut {
    fn table(&self) -> Table {
        let s = &self.summary;
        let mut t = Table::new(vec!["campaign", "trials", "passed", "worst"]);
        t.push(vec![
            "group-bound".into(),
            s.group_bound.trials.to_string(),
            s.group_bound.passed.to_string(),
            format!("margin {:e}", s.group_bound.worst_margin),
        ]);
        t.push(vec![
            "sdk-identity".into(),
            s.sdk_identity.trials.to_string(),
            s.sdk_identity.passed.to_string(),
            format!("max|d|/max|W| {:e}", s.sdk_identity.max_relative_diff),
        ]);
        t
    }

    fn footer(&self) -> Vec<String> {
        vec![if self.summary.all_passed() {
            "all trials passed".into()
        } else {
            "VIOLATIONS FOUND".into()
        }]
    }
}

#[derive(Debug, Serialize)]
pub struct PresetRow {
    pub name: String,
    pub layers: usize,
    pub compressible: usize,
    pub downsample: usize,
    pub notes: String,
}

#[derive(Debug, Serialize)]
pub struct PresetsReport {
    pub presets: Vec<PresetRow>,
}

impl Report for PresetsReport {
    fn table(&self) -> Table {
        let mut t = Table::new(vec!["name", "layers", "compressible", "downsample", "notes"]);
        for p in &self.presets {
            t.push(vec![
                p.name.clone(),
                p.layers.to_string(),
                p.compressible.to_string(),
                p.downsample.to_string(),
                p.notes.clone(),
            ]);
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_table_aligns_columns() {
        let mut t = Table::new(vec!["a", "long"]);
        t.push(vec!["xyz".into(), "1".into()]);
        assert_eq!(t.render_text(), "a    long\n---  ----\nxyz  1\n");
    }

    #[test]
    fn csv_quotes_when_needed() {
        let mut t = Table::new(vec!["a", "b"]);
        t.push(vec!["x,y".into(), "2".into()]);
        assert_eq!(t.render_csv().unwrap(), "a,b\n\"x,y\",2\n");
    }
}
