//! Compression plans: per-layer mode, rank, groups and window policy.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::cycles::ArrayConfig;
use crate::decomposition::validate_grouping;
use crate::mapping::{ConvLayer, LowRankShape, ParallelWindow};
use crate::network::NetworkDescriptor;
use crate::planner;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("cannot parse {what} from '{text}'")]
    Parse { what: &'static str, text: String },
    #[error("{what} must be positive")]
    NonPositive { what: &'static str },
    #[error("plan names layer '{0}', which the network does not have")]
    UnknownLayer(String),
    #[error("plan names layer '{0}', which is not compressible")]
    NotCompressible(String),
    #[error("layer '{layer}': rank {rank} with {groups} groups is infeasible ({reason})")]
    Infeasible {
        layer: String,
        rank: usize,
        groups: usize,
        reason: String,
    },
    #[error("layer '{layer}': window {pw} invalid ({reason})")]
    InvalidWindow {
        layer: String,
        pw: ParallelWindow,
        reason: String,
    },
}

/// Rank as an explicit value or as `m / divisor` resolved per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RankSpec {
    Explicit(usize),
    Divisor(usize),
}

impl RankSpec {
    /// `Divisor(d)` becomes `max(1, floor(m / d))`.
    pub fn resolve(&self, m: usize) -> usize {
        match *self {
            RankSpec::Explicit(k) => k,
            RankSpec::Divisor(d) => (m / d).max(1),
        }
    }
}

impl fmt::Display for RankSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankSpec::Explicit(k) => write!(f, "{k}"),
            RankSpec::Divisor(d) => write!(f, "m/{d}"),
        }
    }
}

fn parse_positive(what: &'static str, text: &str) -> Result<usize, PlanError> {
    let v: usize = text.trim().parse().map_err(|_| PlanError::Parse {
        what,
        text: text.to_string(),
    })?;
    if v == 0 {
        return Err(PlanError::NonPositive { what });
    }
    Ok(v)
}

impl FromStr for RankSpec {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, PlanError> {
        match s.trim().strip_prefix("m/") {
            Some(d) => Ok(RankSpec::Divisor(parse_positive("rank divisor", d)?)),
            None => Ok(RankSpec::Explicit(parse_positive("rank", s)?)),
        }
    }
}

impl Serialize for RankSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match *self {
            RankSpec::Explicit(k) => s.serialize_u64(k as u64),
            RankSpec::Divisor(_) => s.collect_str(self),
        }
    }
}

impl<'de> Deserialize<'de> for RankSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(usize),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(0) => Err(serde::de::Error::custom("rank must be positive")),
            Raw::Int(k) => Ok(RankSpec::Explicit(k)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// How the parallel window of a layer is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PwPolicy {
    /// Kernel-size window: plain im2col.
    Im2col,
    /// Planner picks the window with the fewest layer cycles.
    Auto,
    Fixed(ParallelWindow),
}

impl fmt::Display for PwPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PwPolicy::Im2col => f.write_str("im2col"),
            PwPolicy::Auto => f.write_str("auto"),
            PwPolicy::Fixed(pw) => write!(f, "{pw}"),
        }
    }
}

impl FromStr for PwPolicy {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, PlanError> {
        match s.trim() {
            "im2col" => Ok(PwPolicy::Im2col),
            "auto" => Ok(PwPolicy::Auto),
            other => Ok(PwPolicy::Fixed(parse_window(other)?)),
        }
    }
}

/// Parses `HxW`, e.g. `4x4`.
pub fn parse_window(s: &str) -> Result<ParallelWindow, PlanError> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| PlanError::Parse {
        what: "window (HxW)",
        text: s.to_string(),
    })?;
    Ok(ParallelWindow::new(
        parse_positive("window height", h)?,
        parse_positive("window width", w)?,
    ))
}

impl Serialize for PwPolicy {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PwPolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerMode {
    Uncompressed,
    Lowrank { rank: RankSpec, groups: usize },
}

/// One plan entry. In JSON: `{"mode": "lowrank", "rank": "m/8", "groups": 4,
/// "pw": "auto"}` or `{"mode": "uncompressed", "pw": "im2col"}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawPlanEntry", into = "RawPlanEntry")]
pub struct PlanEntry {
    pub mode: LayerMode,
    pub pw: PwPolicy,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ModeTag {
    Uncompressed,
    Lowrank,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlanEntry {
    mode: ModeTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rank: Option<RankSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    groups: Option<usize>,
    #[serde(default = "default_pw")]
    pw: PwPolicy,
}

fn default_pw() -> PwPolicy {
    PwPolicy::Auto
}

impl TryFrom<RawPlanEntry> for PlanEntry {
    type Error = String;

    fn try_from(r: RawPlanEntry) -> Result<Self, String> {
        let mode = match (r.mode, r.rank, r.groups) {
            (ModeTag::Uncompressed, None, None) => LayerMode::Uncompressed,
            (ModeTag::Uncompressed, _, _) => {
                return Err("an uncompressed entry takes no rank or groups".into());
            }
            (ModeTag::Lowrank, Some(rank), groups) => {
                let groups = groups.unwrap_or(1);
                if groups == 0 {
                    return Err("groups must be positive".into());
                }
                LayerMode::Lowrank { rank, groups }
            }
            (ModeTag::Lowrank, None, _) => return Err("a lowrank entry needs a rank".into()),
        };
        Ok(PlanEntry { mode, pw: r.pw })
    }
}

impl From<PlanEntry> for RawPlanEntry {
    fn from(e: PlanEntry) -> Self {
        match e.mode {
            LayerMode::Uncompressed => RawPlanEntry {
                mode: ModeTag::Uncompressed,
                rank: None,
                groups: None,
                pw: e.pw,
            },
            LayerMode::Lowrank { rank, groups } => RawPlanEntry {
                mode: ModeTag::Lowrank,
                rank: Some(rank),
                groups: Some(groups),
                pw: e.pw,
            },
        }
    }
}

impl PlanEntry {
    pub fn uncompressed(pw: PwPolicy) -> Self {
        PlanEntry {
            mode: LayerMode::Uncompressed,
            pw,
        }
    }

    pub fn lowrank(rank: RankSpec, groups: usize, pw: PwPolicy) -> Self {
        PlanEntry {
            mode: LayerMode::Lowrank { rank, groups },
            pw,
        }
    }
}

/// A default entry for every compressible layer plus optional per-layer
/// overrides by layer name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionPlan {
    pub default: PlanEntry,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub layers: BTreeMap<String, PlanEntry>,
    /// When a layer cannot hold `g` groups of rank `k`, use the largest
    /// feasible group count below `g` instead of failing.
    #[serde(default)]
    pub group_fallback: bool,
}

/// Concrete settings for one compressible layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResolvedLayer {
    pub pw: ParallelWindow,
    pub lowrank: Option<LowRankShape>,
}

impl ResolvedLayer {
    /// True when the window equals the kernel, where SDK and im2col coincide.
    pub fn is_im2col(&self, layer: &ConvLayer) -> bool {
        self.pw == layer.kernel_window()
    }
}

impl CompressionPlan {
    pub fn uniform(entry: PlanEntry) -> Self {
        CompressionPlan {
            default: entry,
            layers: BTreeMap::new(),
            group_fallback: false,
        }
    }

    pub fn with_group_fallback(mut self) -> Self {
        self.group_fallback = true;
        self
    }

    pub fn entry_for(&self, name: &str) -> &PlanEntry {
        self.layers.get(name).unwrap_or(&self.default)
    }

    /// Resolves every layer of `net`; `None` for non-compressible layers.
    pub fn resolve(&self, net: &NetworkDescriptor, array: &ArrayConfig) -> crate::Result<Vec<Option<ResolvedLayer>>> {
        for name in self.layers.keys() {
            match net.layer_by_name(name) {
                None => return Err(PlanError::UnknownLayer(name.clone()).into()),
                Some(l) if !l.compressible => return Err(PlanError::NotCompressible(name.clone()).into()),
                Some(_) => {}
            }
        }
        net.layers
            .iter()
            .map(|entry| {
                if !entry.compressible {
                    return Ok(None);
                }
                self.resolve_layer(&entry.name, &entry.layer, array).map(Some)
            })
            .collect()
    }

    pub fn resolve_layer(&self, name: &str, layer: &ConvLayer, array: &ArrayConfig) -> crate::Result<ResolvedLayer> {
        let entry = self.entry_for(name);
        let lowrank = match entry.mode {
            LayerMode::Uncompressed => None,
            LayerMode::Lowrank { rank, groups } => Some(self.lowrank_shape(name, layer, rank, groups)?),
        };
        let pw = match entry.pw {
            PwPolicy::Im2col => layer.kernel_window(),
            PwPolicy::Auto => planner::best_pw(layer, array, lowrank)?,
            PwPolicy::Fixed(pw) => {
                pw.geometry(layer).map_err(|e| PlanError::InvalidWindow {
                    layer: name.to_string(),
                    pw,
                    reason: e.to_string(),
                })?;
                pw
            }
        };
        Ok(ResolvedLayer { pw, lowrank })
    }

    fn lowrank_shape(
        &self,
        name: &str,
        layer: &ConvLayer,
        rank: RankSpec,
        groups: usize,
    ) -> Result<LowRankShape, PlanError> {
        let (m, n) = (layer.m(), layer.n());
        let k = rank.resolve(m);
        let infeasible = |g: usize, reason: String| PlanError::Infeasible {
            layer: name.to_string(),
            rank: k,
            groups: g,
            reason,
        };
        match validate_grouping(m, n, k, groups) {
            Ok(_) => Ok(LowRankShape { rank: k, groups }),
            Err(e) if self.group_fallback => (1..groups)
                .rev()
                .find(|&g| validate_grouping(m, n, k, g).is_ok())
                .map(|g| LowRankShape { rank: k, groups: g })
                .ok_or_else(|| infeasible(groups, e.to_string())),
            Err(e) => Err(infeasible(groups, e.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::preset;

    #[test]
    fn rank_spec_parsing_and_resolution() {
        assert_eq!("m/8".parse::<RankSpec>().unwrap(), RankSpec::Divisor(8));
        assert_eq!("5".parse::<RankSpec>().unwrap(), RankSpec::Explicit(5));
        assert!("m/0".parse::<RankSpec>().is_err());
        assert!("m/x".parse::<RankSpec>().is_err());
        assert_eq!(RankSpec::Divisor(8).resolve(16), 2);
        assert_eq!(RankSpec::Divisor(16).resolve(8), 1);
        assert_eq!(RankSpec::Divisor(2).resolve(64), 32);
    }

    #[test]
    fn pw_policy_parsing() {
        assert_eq!("auto".parse::<PwPolicy>().unwrap(), PwPolicy::Auto);
        assert_eq!("im2col".parse::<PwPolicy>().unwrap(), PwPolicy::Im2col);
        assert_eq!(
            "4x5".parse::<PwPolicy>().unwrap(),
            PwPolicy::Fixed(ParallelWindow::new(4, 5))
        );
        assert!("4by5".parse::<PwPolicy>().is_err());
        assert!("0x3".parse::<PwPolicy>().is_err());
    }

    #[test]
    fn plan_json_round_trip() {
        let mut plan = CompressionPlan::uniform(PlanEntry::lowrank(RankSpec::Divisor(8), 4, PwPolicy::Auto));
        plan.layers.insert(
            "stage1.block0.conv1".into(),
            PlanEntry::uncompressed(PwPolicy::Fixed(ParallelWindow::new(4, 4))),
        );
        let text = serde_json::to_string(&plan).unwrap();
        assert!(text.contains(r#""rank":"m/8""#), "{text}");
        let back: CompressionPlan = serde_json::from_str(&text).unwrap();
        assert_eq!(back, plan);
        let bad = r#"{"default":{"mode":"uncompressed","pw":"auto","extra":1}}"#;
        assert!(serde_json::from_str::<CompressionPlan>(bad).is_err());
    }

    #[test]
    fn resolve_marks_non_compressible_layers() {
        let net = preset("resnet20").unwrap();
        let array = ArrayConfig::square(64).unwrap();
        let plan = CompressionPlan::uniform(PlanEntry::uncompressed(PwPolicy::Im2col));
        let resolved = plan.resolve(&net, &array).unwrap();
        assert!(resolved[0].is_none());
        assert_eq!(resolved.iter().filter(|r| r.is_some()).count(), 20);
        assert!(resolved[1].unwrap().is_im2col(&net.layers[1].layer));
    }

    #[test]
    fn infeasible_rank_is_an_error_unless_fallback() {
        let net = preset("wrn16-4").unwrap();
        let array = ArrayConfig::square(128).unwrap();
        // 1x1 16->64 downsample: n = 16, four groups of width 4 cannot hold rank 8.
        let plan = CompressionPlan::uniform(PlanEntry::lowrank(RankSpec::Divisor(8), 4, PwPolicy::Im2col));
        let err = plan.resolve(&net, &array).unwrap_err();
        assert!(err.to_string().contains("stage1.block0.downsample"), "{err}");
        let resolved = plan.with_group_fallback().resolve(&net, &array).unwrap();
        let idx = net
            .layers
            .iter()
            .position(|l| l.name == "stage1.block0.downsample")
            .unwrap();
        assert_eq!(
            resolved[idx].unwrap().lowrank,
            Some(LowRankShape { rank: 8, groups: 2 })
        );
    }

    #[test]
    fn overrides_must_name_compressible_layers() {
        let net = preset("resnet20").unwrap();
        let array = ArrayConfig::square(64).unwrap();
        let mut plan = CompressionPlan::uniform(PlanEntry::uncompressed(PwPolicy::Im2col));
        plan.layers
            .insert("nope".into(), PlanEntry::uncompressed(PwPolicy::Im2col));
        assert!(plan.resolve(&net, &array).is_err());
        plan.layers.clear();
        plan.layers
            .insert("conv1".into(), PlanEntry::uncompressed(PwPolicy::Im2col));
        assert!(plan.resolve(&net, &array).is_err());
    }
}
