mod common;

use imc_lowrank::cycles::{network_cycles, ArrayConfig};
use imc_lowrank::network::{preset, NetworkDescriptor};
use imc_lowrank::plan::{CompressionPlan, PlanEntry, PwPolicy};

fn im2col_plan() -> CompressionPlan {
    CompressionPlan::uniform(PlanEntry::uncompressed(PwPolicy::Im2col))
}

#[test]
fn presets_match_golden_descriptors_byte_for_byte() {
    for name in ["resnet20", "wrn16-4"] {
        let text = std::fs::read_to_string(common::golden(&format!("{name}.json"))).unwrap();
        let net = preset(name).unwrap();
        assert_eq!(net.to_json(), text, "{name}");
        assert_eq!(NetworkDescriptor::from_json(&text).unwrap(), net);
    }
}

/// Per-layer rows of the committed spreadsheet: (layer, cycles on 64x64, cycles on 128x128).
fn spreadsheet() -> (Vec<(String, u64, u64)>, u64, u64) {
    let text = std::fs::read_to_string(common::golden("resnet20_im2col_cycles.csv")).unwrap();
    let mut rows = Vec::new();
    let mut totals = (0, 0);
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 12, "{line}");
        if f[0] == "total" {
            totals = (f[8].parse().unwrap(), f[11].parse().unwrap());
        } else {
            rows.push((f[0].to_string(), f[8].parse().unwrap(), f[11].parse().unwrap()));
        }
    }
    (rows, totals.0, totals.1)
}

#[test]
fn resnet20_im2col_cycles_match_spreadsheet() {
    let net = preset("resnet20").unwrap();
    let (rows, t64, t128) = spreadsheet();
    assert_eq!((t64, t128), (29120, 18752));
    for (size, want_total) in [(64, t64), (128, t128)] {
        let r = network_cycles(&net, &im2col_plan(), &ArrayConfig::square(size).unwrap()).unwrap();
        assert_eq!(r.total, want_total);
        let got: Vec<(String, u64)> = r
            .layers
            .iter()
            .filter(|l| l.compressible)
            .map(|l| (l.name.clone(), l.total()))
            .collect();
        let want: Vec<(String, u64)> = rows
            .iter()
            .map(|(n, a, b)| (n.clone(), if size == 64 { *a } else { *b }))
            .collect();
        assert_eq!(got, want);
        assert_eq!(r.layers[0].total(), 0, "stem conv is excluded");
    }
}

#[test]
fn network_cycles_are_additive() {
    let net = preset("resnet20").unwrap();
    let array = ArrayConfig::square(64).unwrap();
    let one = NetworkDescriptor {
        name: "one".into(),
        layers: vec![net.layers[1].clone()],
        notes: String::new(),
    };
    let mut second = net.layers[1].clone();
    second.name = "copy".into();
    let two = NetworkDescriptor {
        name: "two".into(),
        layers: vec![net.layers[1].clone(), second],
        notes: String::new(),
    };
    let single = network_cycles(&one, &im2col_plan(), &array).unwrap();
    assert_eq!(single.total, 3072);
    assert_eq!(single.layers[0].report.as_ref().unwrap().total, single.total);
    assert_eq!(
        network_cycles(&two, &im2col_plan(), &array).unwrap().total,
        2 * single.total
    );
}

#[test]
fn excluding_downsample_drops_their_cycles() {
    let net = preset("resnet20").unwrap();
    let array = ArrayConfig::square(64).unwrap();
    let full = network_cycles(&net, &im2col_plan(), &array).unwrap().total;
    let stripped = network_cycles(&net.without_downsample(), &im2col_plan(), &array)
        .unwrap()
        .total;
    assert_eq!(full - stripped, 256 + 64);
}
