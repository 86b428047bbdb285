//! Weight stores: a JSON manifest plus one raw little-endian `f32` blob per
//! layer, or seeded synthetic weights.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::mapping::{ConvLayer, Kernel};
use crate::network::NetworkDescriptor;
use crate::Result;

pub const DTYPE_F32LE: &str = "f32le";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WeightsError {
    #[error("layer '{layer}': blob holds {found} floats, expected {expected}")]
    Length {
        layer: String,
        expected: usize,
        found: usize,
    },
    #[error("layer '{layer}': blob size {bytes} bytes is not a whole number of f32 values")]
    TrailingBytes { layer: String, bytes: usize },
    #[error("layer '{layer}': weight shape {found:?} does not match layer shape {expected:?}")]
    Shape {
        layer: String,
        expected: [usize; 4],
        found: [usize; 4],
    },
    #[error("layer '{0}': no weights in store")]
    Missing(String),
    #[error("layer '{layer}': unsupported dtype '{dtype}' (only f32le)")]
    Dtype { layer: String, dtype: String },
    #[error("layer '{0}' listed twice in manifest")]
    Duplicate(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    /// `[c_out, c_in, kh, kw]`
    pub shape: [usize; 4],
    pub dtype: String,
    pub blob: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub network: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub layers: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub name: String,
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

impl WeightTensor {
    pub fn kernel(&self) -> Kernel {
        Kernel::new(self.shape, self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("tensor length checked on construction")
    }

    /// Math-orientation `c_out x (c_in·kh·kw)` matrix. Fails on NaN or
    /// infinite weights.
    pub fn matrix(&self) -> Result<Matrix> {
        let [c_out, c_in, kh, kw] = self.shape;
        let data = self.data.iter().map(|&v| f64::from(v)).collect();
        Ok(Matrix::from_vec(c_out, c_in * kh * kw, data)?)
    }
}

/// Per-layer weights, in network layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    pub network: String,
    pub seed: Option<u64>,
    pub tensors: Vec<WeightTensor>,
}

fn layer_shape(l: &ConvLayer) -> [usize; 4] {
    [l.c_out, l.c_in, l.kh, l.kw]
}

fn decode_blob(layer: &str, bytes: &[u8], expected: usize) -> std::result::Result<Vec<f32>, WeightsError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(WeightsError::TrailingBytes {
            layer: layer.to_string(),
            bytes: bytes.len(),
        });
    }
    if bytes.len() / 4 != expected {
        return Err(WeightsError::Length {
            layer: layer.to_string(),
            expected,
            found: bytes.len() / 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn blob_name(layer: &str) -> String {
    format!("{layer}.f32")
}

impl WeightStore {
    /// Normal weights scaled by `1/sqrt(fan_in)` for every layer of `net`.
    /// Layers draw from one ChaCha stream in descriptor order.
    pub fn synth(net: &NetworkDescriptor, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = net
            .layers
            .iter()
            .map(|entry| {
                let shape = layer_shape(&entry.layer);
                let scale = 1.0 / (entry.layer.n() as f64).sqrt();
                let len: usize = shape.iter().product();
                let data = (0..len)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (z * scale) as f32
                    })
                    .collect();
                WeightTensor {
                    name: entry.name.clone(),
                    shape,
                    data,
                }
            })
            .collect();
        WeightStore {
            network: net.name.clone(),
            seed: Some(seed),
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&WeightTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Checks that every compressible layer has weights of the right shape.
    pub fn check(&self, net: &NetworkDescriptor) -> std::result::Result<(), WeightsError> {
        for entry in &net.layers {
            let want = layer_shape(&entry.layer);
            match self.get(&entry.name) {
                Some(t) if t.shape != want => {
                    return Err(WeightsError::Shape {
                        layer: entry.name.clone(),
                        expected: want,
                        found: t.shape,
                    })
                }
                None if entry.compressible => return Err(WeightsError::Missing(entry.name.clone())),
                _ => {}
            }
        }
        Ok(())
    }

    /// Weight matrix of a named layer.
    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.get(name)
            .ok_or_else(|| WeightsError::Missing(name.to_string()))?
            .matrix()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            network: self.network.clone(),
            seed: self.seed,
            layers: self
                .tensors
                .iter()
                .map(|t| ManifestEntry {
                    name: t.name.clone(),
                    shape: t.shape,
                    dtype: DTYPE_F32LE.to_string(),
                    blob: blob_name(&t.name),
                })
                .collect(),
        }
    }

    /// Writes `manifest.json` and one blob per layer into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        let manifest = self.manifest();
        for (t, entry) in self.tensors.iter().zip(&manifest.layers) {
            let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = dir.join(&entry.blob);
            std::fs::write(&path, bytes).map_err(|e| crate::Error::io(&path, e))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(&path, text).map_err(|e| crate::Error::io(&path, e))
    }

    /// Loads from a manifest file, or from `manifest.json` inside a directory.
    /// Blob paths are relative to the manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| crate::Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut tensors: Vec<WeightTensor> = Vec::with_capacity(manifest.layers.len());
        for entry in &manifest.layers {
            if entry.dtype != DTYPE_F32LE {
                return Err(WeightsError::Dtype {
                    layer: entry.name.clone(),
                    dtype: entry.dtype.clone(),
                }
                .into());
            }
            if tensors.iter().any(|t| t.name == entry.name) {
                return Err(WeightsError::Duplicate(entry.name.clone()).into());
            }
            let blob_path = base.join(&entry.blob);
            let bytes = std::fs::read(&blob_path).map_err(|e| crate::Error::io(&blob_path, e))?;
            let data = decode_blob(&entry.name, &bytes, entry.shape.iter().product())?;
            tensors.push(WeightTensor {
                name: entry.name.clone(),
                shape: entry.shape,
                data,
            });
        }
        Ok(WeightStore {
            network: manifest.network,
            seed: manifest.seed,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::preset;

    #[test]
    fn synth_is_deterministic_and_scaled() {
        let net = preset("resnet20").unwrap();
        let a = WeightStore::synth(&net, 7);
        let b = WeightStore::synth(&net, 7);
        assert_eq!(a, b);
        assert_ne!(a, WeightStore::synth(&net, 8));
        a.check(&net).unwrap();
        let t = a.get("stage3.block1.conv1").unwrap();
        let n = 64 * 9;
        let var = t.data.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / t.data.len() as f64;
        assert!((var * n as f64 - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn blob_length_checks() {
        let ok = vec![0u8; 2304 * 4];
        assert_eq!(decode_blob("l", &ok, 2304).unwrap().len(), 2304);
        let short = vec![0u8; 2303 * 4];
        let err = decode_blob("l", &short, 2304).unwrap_err();
        assert_eq!(
            err,
            WeightsError::Length {
                layer: "l".into(),
                expected: 2304,
                found: 2303
            }
        );
        assert!(err.to_string().contains("2304"));
        assert!(matches!(
            decode_blob("l", &[0u8; 7], 2),
            Err(WeightsError::TrailingBytes { .. })
        ));
    }

    #[test]
    fn little_endian_decoding() {
        let bytes = [0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0];
        assert_eq!(decode_blob("l", &bytes, 2).unwrap(), vec![1.0, -2.0]);
    }

    #[test]
    fn shape_check_names_layer() {
        let net = preset("resnet20").unwrap();
        let mut store = WeightStore::synth(&net, 1);
        store.tensors[3].shape = [16, 16, 1, 9];
        let err = store.check(&net).unwrap_err();
        assert!(err.to_string().contains(&net.layers[3].name), "{err}");
        store.tensors.remove(3);
        assert!(matches!(store.check(&net), Err(WeightsError::Missing(_))));
    }
}
