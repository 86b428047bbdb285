//! Run configuration: one JSON file plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use imc_lowrank::cycles::ArrayConfig;
use imc_lowrank::energy::EnergyParams;
use imc_lowrank::network::{self, NetworkDescriptor};
use imc_lowrank::plan::{parse_window, CompressionPlan, LayerMode, PlanEntry, PwPolicy, RankSpec};
use imc_lowrank::planner::{DEFAULT_GROUPS, DEFAULT_RANK_DIVISORS};
use imc_lowrank::weights::WeightStore;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Table,
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Uncompressed,
    Lowrank,
}

/// Weight source: a manifest path or a seed for synthetic weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightsSource {
    Seed(u64),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_divisors")]
    pub rank_divisors: Vec<usize>,
    #[serde(default = "default_groups")]
    pub groups: Vec<usize>,
    #[serde(default = "default_sweep_pw")]
    pub pw: PwPolicy,
}

fn default_sweep_pw() -> PwPolicy {
    PwPolicy::Auto
}

fn default_divisors() -> Vec<usize> {
    DEFAULT_RANK_DIVISORS.to_vec()
}

fn default_groups() -> Vec<usize> {
    DEFAULT_GROUPS.to_vec()
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            rank_divisors: default_divisors(),
            groups: default_groups(),
            pw: default_sweep_pw(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub format: Format,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Preset name or path to a descriptor JSON.
    #[serde(default = "default_network")]
    pub network: String,
    #[serde(default = "default_weights")]
    pub weights: WeightsSource,
    #[serde(default = "default_array")]
    pub array: ArrayConfig,
    #[serde(default = "default_plan")]
    pub plan: CompressionPlan,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub energy: EnergyParams,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub exclude_downsample: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
}

fn default_network() -> String {
    "resnet20".into()
}

fn default_weights() -> WeightsSource {
    WeightsSource::Seed(1)
}

fn default_array() -> ArrayConfig {
    ArrayConfig::square(128).expect("positive")
}

fn default_plan() -> CompressionPlan {
    CompressionPlan::uniform(PlanEntry::uncompressed(PwPolicy::Im2col))
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: default_network(),
            weights: default_weights(),
            array: default_array(),
            plan: default_plan(),
            sweep: SweepConfig::default(),
            energy: EnergyParams::default(),
            output: OutputConfig::default(),
            exclude_downsample: false,
            jobs: None,
        }
    }
}

/// Flags shared by every computing subcommand. Each one overrides the
/// matching field of the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Preset name (resnet20, wrn16-4) or descriptor JSON path.
    #[arg(long)]
    pub network: Option<String>,
    /// Weight manifest (file or directory) to load instead of synthesizing.
    #[arg(long, value_name = "PATH")]
    pub weights: Option<PathBuf>,
    /// Seed for synthetic weights.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Array size as ROWSxCOLS, e.g. 128x128.
    #[arg(long, value_name = "RxC")]
    pub array: Option<String>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Rank as `m/D` or an integer.
    #[arg(long)]
    pub rank: Option<String>,
    #[arg(long)]
    pub groups: Option<usize>,
    /// Window policy: auto, im2col, or HxW. Applies to the plan and the sweep.
    #[arg(long)]
    pub pw: Option<String>,
    /// Fall back to fewer groups where a layer cannot hold the requested ones.
    #[arg(long)]
    pub group_fallback: bool,
    /// Leave residual 1x1 projections out of the network.
    #[arg(long)]
    pub exclude_downsample: bool,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Comma-separated rank divisors for sweeps, e.g. 2,4,8,16.
    #[arg(long, value_delimiter = ',')]
    pub rank_divisors: Option<Vec<usize>>,
    /// Comma-separated group counts for sweeps, e.g. 1,2,4,8.
    #[arg(long, value_delimiter = ',')]
    pub group_counts: Option<Vec<usize>>,
    #[arg(long)]
    pub e_cell: Option<f64>,
    #[arg(long)]
    pub e_wordline: Option<f64>,
    #[arg(long)]
    pub e_adc: Option<f64>,
    #[arg(long)]
    pub e_tile_overhead: Option<f64>,
}

pub fn parse_array(s: &str) -> anyhow::Result<ArrayConfig> {
    let pw = parse_window(s).with_context(|| format!("bad --array '{s}', expected ROWSxCOLS"))?;
    Ok(ArrayConfig::new(pw.h, pw.w)?)
}

impl RunConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.sweep.rank_divisors.is_empty() || self.sweep.groups.is_empty() {
            bail!("sweep grid must not be empty");
        }
        if self.sweep.rank_divisors.contains(&0) || self.sweep.groups.contains(&0) {
            bail!("sweep rank divisors and group counts must be positive");
        }
        if self.jobs == Some(0) {
            bail!("jobs must be positive");
        }
        Ok(())
    }

    /// Config file (or defaults) with flag overrides applied.
    pub fn from_flags(flags: &RunFlags) -> anyhow::Result<Self> {
        let mut cfg = match &flags.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(n) = &flags.network {
            cfg.network = n.clone();
        }
        if let Some(p) = &flags.weights {
            cfg.weights = WeightsSource::Path(p.clone());
        } else if let Some(s) = flags.seed {
            cfg.weights = WeightsSource::Seed(s);
        }
        if let Some(a) = &flags.array {
            cfg.array = parse_array(a)?;
        }
        cfg.apply_plan_flags(flags)?;
        if flags.exclude_downsample {
            cfg.exclude_downsample = true;
        }
        if let Some(f) = flags.format {
            cfg.output.format = f;
        }
        if let Some(o) = &flags.output {
            cfg.output.path = Some(o.clone());
        }
        if flags.jobs.is_some() {
            cfg.jobs = flags.jobs;
        }
        if let Some(d) = &flags.rank_divisors {
            cfg.sweep.rank_divisors = d.clone();
        }
        if let Some(g) = &flags.group_counts {
            cfg.sweep.groups = g.clone();
        }
        let mut e = cfg.energy.as_array();
        for (i, v) in [flags.e_cell, flags.e_wordline, flags.e_adc, flags.e_tile_overhead]
            .into_iter()
            .enumerate()
        {
            if let Some(v) = v {
                e[i] = v;
            }
        }
        cfg.energy = EnergyParams::from_array(e)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_plan_flags(&mut self, flags: &RunFlags) -> anyhow::Result<()> {
        let entry = &mut self.plan.default;
        let rank: Option<RankSpec> = flags.rank.as_deref().map(str::parse).transpose()?;
        let wants_lowrank =
            flags.mode == Some(Mode::Lowrank) || (flags.mode.is_none() && (rank.is_some() || flags.groups.is_some()));
        if flags.mode == Some(Mode::Uncompressed) {
            if rank.is_some() || flags.groups.is_some() {
                bail!("--rank and --groups need --mode lowrank");
            }
            entry.mode = LayerMode::Uncompressed;
        } else if wants_lowrank {
            let (old_rank, old_groups) = match entry.mode {
                LayerMode::Lowrank { rank, groups } => (rank, groups),
                LayerMode::Uncompressed => (RankSpec::Divisor(8), 1),
            };
            entry.mode = LayerMode::Lowrank {
                rank: rank.unwrap_or(old_rank),
                groups: flags.groups.unwrap_or(old_groups),
            };
            if flags.groups == Some(0) {
                bail!("--groups must be positive");
            }
        }
        if let Some(pw) = &flags.pw {
            entry.pw = pw.parse()?;
            self.sweep.pw = entry.pw;
        }
        if flags.group_fallback {
            self.plan.group_fallback = true;
        }
        Ok(())
    }

    pub fn network(&self) -> anyhow::Result<NetworkDescriptor> {
        let net = if network::PRESET_NAMES.contains(&self.network.as_str()) {
            network::preset(&self.network)?
        } else {
            let path = Path::new(&self.network);
            if !path.exists() {
                bail!(
                    "network '{}' is neither a preset ({}) nor a descriptor file",
                    self.network,
                    network::PRESET_NAMES.join(", ")
                );
            }
            NetworkDescriptor::load(path)?
        };
        Ok(if self.exclude_downsample {
            net.without_downsample()
        } else {
            net
        })
    }

    pub fn weights(&self, net: &NetworkDescriptor) -> anyhow::Result<WeightStore> {
        let store = match &self.weights {
            WeightsSource::Seed(s) => WeightStore::synth(net, *s),
            WeightsSource::Path(p) => WeightStore::load(p)?,
        };
        store.check(net)?;
        Ok(store)
    }
}
