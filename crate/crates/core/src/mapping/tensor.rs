//! Kernel and feature-map tensors plus the direct-convolution reference.

use serde::{Deserialize, Serialize};

use super::{ConvLayer, MappingError, Result};
use crate::linalg::Matrix;

/// Convolution weights, `c_out x c_in x kh x kw`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub c_out: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub data: Vec<f64>,
}

impl Kernel {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let [c_out, c_in, kh, kw] = shape;
        let expected = c_out * c_in * kh * kw;
        if data.len() != expected {
            return Err(MappingError::ShapeMismatch {
                what: "kernel data",
                expected: format!("{expected} values"),
                found: format!("{} values", data.len()),
            });
        }
        Ok(Kernel {
            c_out,
            c_in,
            kh,
            kw,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kh, self.kw]
    }

    #[inline]
    pub fn at(&self, o: usize, c: usize, r: usize, q: usize) -> f64 {
        self.data[((o * self.c_in + c) * self.kh + r) * self.kw + q]
    }

    pub fn check_layer(&self, layer: &ConvLayer) -> Result<()> {
        let want = [layer.c_out, layer.c_in, layer.kh, layer.kw];
        if self.shape() != want {
            return Err(MappingError::ShapeMismatch {
                what: "kernel",
                expected: format!("{want:?}"),
                found: format!("{:?}", self.shape()),
            });
        }
        Ok(())
    }

    /// Math-orientation weight matrix: row `o` is output channel `o`
    /// flattened channel-major, then kernel row, then kernel column.
    pub fn to_matrix(&self) -> Matrix {
        let n = self.c_in * self.kh * self.kw;
        Matrix::from_vec(self.c_out, n, self.data.clone()).expect("kernel entries are finite")
    }

    /// Inverse of [`Kernel::to_matrix`] for the given layer shape.
    pub fn from_matrix(w: &Matrix, layer: &ConvLayer) -> Result<Self> {
        if w.shape() != (layer.m(), layer.n()) {
            return Err(MappingError::ShapeMismatch {
                what: "weight matrix",
                expected: format!("{}x{}", layer.m(), layer.n()),
                found: format!("{}x{}", w.rows(), w.cols()),
            });
        }
        Kernel::new([layer.c_out, layer.c_in, layer.kh, layer.kw], w.as_slice().to_vec())
    }
}

/// Feature map, `channels x height x width`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let [c, h, w] = shape;
        if data.len() != c * h * w {
            return Err(MappingError::ShapeMismatch {
                what: "feature map data",
                expected: format!("{} values", c * h * w),
                found: format!("{} values", data.len()),
            });
        }
        Ok(FeatureMap {
            channels: c,
            height: h,
            width: w,
            data,
        })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    /// Reads with zero padding: signed coordinates outside the map give 0.
    #[inline]
    pub fn padded(&self, c: usize, y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
            0.0
        } else {
            self.at(c, y as usize, x as usize)
        }
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        assert_eq!(
            (self.channels, self.height, self.width),
            (other.channels, other.height, other.width)
        );
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }
}

/// Direct convolution with zero padding, by explicit loops.
pub fn conv_oracle(layer: &ConvLayer, kernel: &Kernel, input: &FeatureMap) -> Result<FeatureMap> {
    kernel.check_layer(layer)?;
    if (input.channels, input.height, input.width) != (layer.c_in, layer.ih, layer.iw) {
        return Err(MappingError::ShapeMismatch {
            what: "input feature map",
            expected: format!("{}x{}x{}", layer.c_in, layer.ih, layer.iw),
            found: format!("{}x{}x{}", input.channels, input.height, input.width),
        });
    }
    let (oh, ow) = (layer.oh(), layer.ow());
    let mut out = FeatureMap::zeros(layer.c_out, oh, ow);
    let pad = layer.pad as isize;
    let stride = layer.stride as isize;
    for o in 0..layer.c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..layer.c_in {
                    for r in 0..layer.kh {
                        for q in 0..layer.kw {
                            let y = oy as isize * stride - pad + r as isize;
                            let x = ox as isize * stride - pad + q as isize;
                            acc += kernel.at(o, c, r, q) * input.padded(c, y, x);
                        }
                    }
                }
                *out.at_mut(o, oy, ox) = acc;
            }
        }
    }
    Ok(out)
}
