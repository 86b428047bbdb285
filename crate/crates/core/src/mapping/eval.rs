//! Functional evaluation of physical mappings over input patches.
//!
//! Each window placement is flattened channel-major into a `b`-vector and
//! pushed through the stages in order (`x ← xᵀ · stage`). The final vector
//! holds `N` blocks of `m` outputs; block `s` is the output pixel at shift
//! `s` of that placement. Outputs falling past the feature-map edge are
//! dropped.

use super::{ConvLayer, FeatureMap, MappedMatrix, MappingError, ParallelWindow, Result};

pub fn evaluate(
    stages: &[&MappedMatrix],
    layer: &ConvLayer,
    pw: ParallelWindow,
    input: &FeatureMap,
) -> Result<FeatureMap> {
    let geom = pw.geometry(layer)?;
    let n_par = geom.parallel_outputs();
    let b = geom.b();
    let m = layer.m();
    if (input.channels, input.height, input.width) != (layer.c_in, layer.ih, layer.iw) {
        return Err(MappingError::ShapeMismatch {
            what: "input feature map",
            expected: format!("{}x{}x{}", layer.c_in, layer.ih, layer.iw),
            found: format!("{}x{}x{}", input.channels, input.height, input.width),
        });
    }
    let first = stages.first().ok_or_else(|| MappingError::ShapeMismatch {
        what: "stage list",
        expected: "at least one stage".into(),
        found: "none".into(),
    })?;
    if first.values.rows() != b {
        return Err(MappingError::ShapeMismatch {
            what: "first stage rows",
            expected: b.to_string(),
            found: first.values.rows().to_string(),
        });
    }
    for pair in stages.windows(2) {
        if pair[0].values.cols() != pair[1].values.rows() {
            return Err(MappingError::ShapeMismatch {
                what: "stage chaining",
                expected: pair[0].values.cols().to_string(),
                found: pair[1].values.rows().to_string(),
            });
        }
    }
    let last_cols = stages[stages.len() - 1].values.cols();
    if last_cols != n_par * m {
        return Err(MappingError::ShapeMismatch {
            what: "last stage columns",
            expected: (n_par * m).to_string(),
            found: last_cols.to_string(),
        });
    }

    let (oh, ow) = (layer.oh(), layer.ow());
    let stride = layer.stride as isize;
    let pad = layer.pad as isize;
    let mut out = FeatureMap::zeros(m, oh, ow);
    let mut patch = vec![0.0; b];
    for py in 0..oh.div_ceil(geom.po_h) {
        for px in 0..ow.div_ceil(geom.po_w) {
            let y0 = (py * geom.po_h) as isize * stride - pad;
            let x0 = (px * geom.po_w) as isize * stride - pad;
            for c in 0..layer.c_in {
                for r in 0..pw.h {
                    for q in 0..pw.w {
                        patch[(c * pw.h + r) * pw.w + q] = input.padded(c, y0 + r as isize, x0 + q as isize);
                    }
                }
            }
            let mut v = patch.clone();
            for stage in stages {
                let mat = &stage.values;
                let mut next = vec![0.0; mat.cols()];
                for (i, &xi) in v.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    for (o, w) in next.iter_mut().zip(mat.row(i)) {
                        *o += xi * w;
                    }
                }
                v = next;
            }
            for s in 0..n_par {
                let oy = py * geom.po_h + s / geom.po_w;
                let ox = px * geom.po_w + s % geom.po_w;
                if oy >= oh || ox >= ow {
                    continue;
                }
                for j in 0..m {
                    *out.at_mut(j, oy, ox) = v[s * m + j];
                }
            }
        }
    }
    Ok(out)
}
