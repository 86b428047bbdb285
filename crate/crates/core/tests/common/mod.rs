#![allow(dead_code)]

use std::path::PathBuf;

use imc_lowrank::linalg::Matrix;
use imc_lowrank::mapping::{ConvLayer, FeatureMap, Kernel};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)).unwrap()
}

pub fn random_kernel(rng: &mut ChaCha8Rng, layer: &ConvLayer) -> Kernel {
    let len = layer.c_out * layer.n();
    Kernel::new(
        [layer.c_out, layer.c_in, layer.kh, layer.kw],
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn random_input(rng: &mut ChaCha8Rng, layer: &ConvLayer) -> FeatureMap {
    let len = layer.c_in * layer.ih * layer.iw;
    FeatureMap::new(
        [layer.c_in, layer.ih, layer.iw],
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Small random layer: channels up to 8, feature maps up to 12.
pub fn random_small_layer(rng: &mut ChaCha8Rng) -> ConvLayer {
    let kh = rng.random_range(1..=3);
    let kw = rng.random_range(1..=3);
    let pad = rng.random_range(0..=1);
    let stride = rng.random_range(1..=2);
    let ih = rng.random_range(kh.max(3)..=12);
    let iw = rng.random_range(kw.max(3)..=12);
    ConvLayer::new(
        rng.random_range(1..=8),
        rng.random_range(1..=8),
        kh,
        kw,
        ih,
        iw,
        stride,
        pad,
    )
    .unwrap()
}
