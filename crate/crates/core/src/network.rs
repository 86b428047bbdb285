//! Network descriptors: ordered convolution layer tables.
//!
//! A descriptor is a list of layers, not an executable graph, so adjacent
//! layers need not chain shapes. Fully connected layers are left out: the
//! classifier head is never compressed and is not mapped here.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mapping::ConvLayer;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDescriptor {
    pub name: String,
    pub layers: Vec<NetworkLayer>,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkLayer {
    pub name: String,
    pub layer: ConvLayer,
    pub compressible: bool,
    /// 1x1 projection on a residual shortcut.
    #[serde(default)]
    pub downsample: bool,
}

pub const PRESET_NAMES: [&str; 2] = ["resnet20", "wrn16-4"];

impl NetworkDescriptor {
    pub fn validate(&self) -> Result<()> {
        if !self.layers.iter().any(|l| l.compressible) {
            return Err(Error::Config(format!(
                "network '{}' has no compressible layer",
                self.name
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.layers {
            l.layer.validate()?;
            if !seen.insert(l.name.as_str()) {
                return Err(Error::Config(format!("duplicate layer name '{}'", l.name)));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: NetworkDescriptor = serde_json::from_str(text)?;
        net.validate()?;
        Ok(net)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("descriptor serializes");
        s.push('\n');
        s
    }

    pub fn compressible(&self) -> impl Iterator<Item = &NetworkLayer> {
        self.layers.iter().filter(|l| l.compressible)
    }

    /// The same network with residual downsample projections removed.
    pub fn without_downsample(&self) -> Self {
        let mut net = self.clone();
        net.layers.retain(|l| !l.downsample);
        net.name = format!("{}-no-downsample", self.name);
        net
    }

    pub fn layer_by_name(&self, name: &str) -> Option<&NetworkLayer> {
        self.layers.iter().find(|l| l.name == name)
    }
}

fn conv(
    name: String,
    c_in: usize,
    c_out: usize,
    k: usize,
    ifm: usize,
    stride: usize,
    compressible: bool,
) -> NetworkLayer {
    let pad = k / 2;
    NetworkLayer {
        name,
        layer: ConvLayer::new(c_in, c_out, k, k, ifm, ifm, stride, pad).expect("preset layers are valid"),
        compressible,
        downsample: false,
    }
}

/// CIFAR-style residual network: stem conv, three stages of basic blocks,
/// 1x1 projections where the shortcut changes shape.
fn cifar_resnet(name: &str, widths: [usize; 3], blocks_per_stage: usize, notes: &str) -> NetworkDescriptor {
    let mut layers = vec![conv("conv1".into(), 3, 16, 3, 32, 1, false)];
    let mut c_in = 16;
    let mut ifm = 32;
    for (si, &width) in widths.iter().enumerate() {
        for b in 0..blocks_per_stage {
            let stride = if b == 0 && si > 0 { 2 } else { 1 };
            let prefix = format!("stage{}.block{}", si + 1, b);
            let out_fm = ifm / stride;
            layers.push(conv(format!("{prefix}.conv1"), c_in, width, 3, ifm, stride, true));
            layers.push(conv(format!("{prefix}.conv2"), width, width, 3, out_fm, 1, true));
            if stride != 1 || c_in != width {
                let mut ds = conv(format!("{prefix}.downsample"), c_in, width, 1, ifm, stride, true);
                ds.downsample = true;
                layers.push(ds);
            }
            c_in = width;
            ifm = out_fm;
        }
    }
    NetworkDescriptor {
        name: name.to_string(),
        layers,
        notes: notes.to_string(),
    }
}

/// Built-in network tables.
pub fn preset(name: &str) -> Result<NetworkDescriptor> {
    match name {
        "resnet20" => Ok(cifar_resnet(
            "resnet20",
            [16, 32, 64],
            3,
            "CIFAR ResNet-20, expansion 1. Stem conv not compressible; classifier omitted.",
        )),
        "wrn16-4" => Ok(cifar_resnet(
            "wrn16-4",
            [64, 128, 256],
            2,
            "CIFAR Wide-ResNet 16-4. Stem conv not compressible; classifier omitted.",
        )),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet20_layer_table() {
        let net = preset("resnet20").unwrap();
        assert_eq!(net.layers.len(), 21);
        assert_eq!(net.compressible().count(), 20);
        assert_eq!(net.compressible().filter(|l| l.downsample).count(), 2);
        assert!(!net.layers[0].compressible);
        let first = net.compressible().next().unwrap().layer;
        assert_eq!(first, ConvLayer::new(16, 16, 3, 3, 32, 32, 1, 1).unwrap());
        assert_eq!((first.n(), first.m()), (144, 16));
        let ds = net.layer_by_name("stage3.block0.downsample").unwrap().layer;
        assert_eq!(
            (ds.c_in, ds.c_out, ds.kh, ds.ih, ds.stride, ds.oh()),
            (32, 64, 1, 16, 2, 8)
        );
        net.validate().unwrap();
    }

    #[test]
    fn wrn16_4_layer_table() {
        let net = preset("wrn16-4").unwrap();
        assert_eq!(net.layers.len(), 16);
        assert_eq!(net.compressible().count(), 15);
        let first = net.compressible().next().unwrap().layer;
        assert_eq!((first.c_in, first.c_out), (16, 64));
        assert!(net.layer_by_name("stage1.block0.downsample").is_some());
        let last = net.layers.last().unwrap().layer;
        assert_eq!((last.c_out, last.ih), (256, 8));
    }

    #[test]
    fn unknown_preset_and_json_round_trip() {
        assert!(matches!(preset("vgg"), Err(Error::UnknownPreset(_))));
        let net = preset("resnet20").unwrap();
        assert_eq!(NetworkDescriptor::from_json(&net.to_json()).unwrap(), net);
        let stripped = net.without_downsample();
        assert_eq!(stripped.layers.len(), 19);
    }

    #[test]
    fn descriptor_validation() {
        let mut net = preset("resnet20").unwrap();
        net.layers.iter_mut().for_each(|l| l.compressible = false);
        assert!(net.validate().is_err());
        let text = r#"{"name":"x","layers":[{"name":"a","layer":{"c_in":1,"c_out":1,"kh":3,"kw":3,"ih":4,"iw":4,"stride":1,"pad":0},"compressible":true,"extra":1}]}"#;
        assert!(NetworkDescriptor::from_json(text).is_err());
    }
}
