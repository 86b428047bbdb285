//! Window selection and the (rank, group) design-space sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cycles::{self, ArrayConfig};
use crate::decomposition::GroupSpectra;
use crate::energy::{self, EnergyParams};
use crate::mapping::{ConvLayer, LowRankShape, ParallelWindow};
use crate::network::NetworkDescriptor;
use crate::plan::{CompressionPlan, PlanEntry, PwPolicy, RankSpec, ResolvedLayer};
use crate::weights::WeightStore;
use crate::{Error, Result};

/// Largest growth of the window past the kernel, per dimension.
pub const PW_GROWTH: usize = 8;

/// Rank divisors and group counts of the standard grid.
pub const DEFAULT_RANK_DIVISORS: [usize; 4] = [2, 4, 8, 16];
pub const DEFAULT_GROUPS: [usize; 4] = [1, 2, 4, 8];

/// Largest window input length `b` the search admits: as many array rows
/// as im2col already occupies, so a larger window never adds row tiles.
pub fn row_budget(layer: &ConvLayer, array: &ArrayConfig) -> usize {
    array.rows * layer.n().div_ceil(array.rows)
}

/// Candidate windows: `[kh, kh+8] x [kw, kw+8]`, no larger than the padded
/// input, with `b` within [`row_budget`]. The kernel window is always in.
pub fn pw_candidates(layer: &ConvLayer, array: &ArrayConfig) -> Vec<ParallelWindow> {
    let budget = row_budget(layer, array);
    let max_h = (layer.kh + PW_GROWTH).min(layer.ih + 2 * layer.pad);
    let max_w = (layer.kw + PW_GROWTH).min(layer.iw + 2 * layer.pad);
    let mut out = Vec::new();
    for h in layer.kh..=max_h {
        for w in layer.kw..=max_w {
            let pw = ParallelWindow::new(h, w);
            if pw == layer.kernel_window() || layer.c_in * h * w <= budget {
                out.push(pw);
            }
        }
    }
    out
}

/// Window with the fewest layer cycles; ties go to smaller `b`, then
/// smaller height.
pub fn best_pw(layer: &ConvLayer, array: &ArrayConfig, lowrank: Option<LowRankShape>) -> Result<ParallelWindow> {
    let mut best: Option<((u64, usize, usize), ParallelWindow)> = None;
    for pw in pw_candidates(layer, array) {
        let total = cycles::resolved_layer_cycles(layer, &ResolvedLayer { pw, lowrank }, array)?.total;
        let key = (total, layer.c_in * pw.h * pw.w, pw.h);
        if best.as_ref().is_none_or(|(k, _)| key < *k) {
            best = Some((key, pw));
        }
    }
    Ok(best.expect("kernel window is always a candidate").1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub rank_divisors: Vec<usize>,
    pub groups: Vec<usize>,
    pub pw: PwPolicy,
    pub energy: EnergyParams,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            rank_divisors: DEFAULT_RANK_DIVISORS.to_vec(),
            groups: DEFAULT_GROUPS.to_vec(),
            pw: PwPolicy::Auto,
            energy: EnergyParams::default(),
        }
    }
}

/// One evaluated (rank divisor, group count) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub rank_divisor: usize,
    pub groups: usize,
    pub pw_policy: PwPolicy,
    /// Root of summed squared per-layer Frobenius errors; the accuracy proxy.
    pub recon_error: Option<f64>,
    pub cycles: Option<u64>,
    pub normalized_energy: Option<f64>,
    pub parameters: Option<usize>,
    /// Why the combination cannot be built, when it cannot.
    pub infeasible: Option<String>,
    pub pareto: bool,
}

impl SweepPoint {
    pub fn feasible(&self) -> bool {
        self.infeasible.is_none()
    }

    pub fn plan(&self) -> CompressionPlan {
        CompressionPlan::uniform(PlanEntry::lowrank(
            RankSpec::Divisor(self.rank_divisor),
            self.groups,
            self.pw_policy,
        ))
    }

    fn objectives(&self) -> Option<(f64, u64)> {
        Some((self.recon_error?, self.cycles?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub network: String,
    pub array: ArrayConfig,
    pub points: Vec<SweepPoint>,
}

/// `a` dominates `b`: no worse in both objectives, better in one.
pub fn dominates(a: (f64, u64), b: (f64, u64)) -> bool {
    a.0 <= b.0 && a.1 <= b.1 && (a.0 < b.0 || a.1 < b.1)
}

/// Flags the non-dominated feasible points. Exact ties are all kept.
pub fn flag_pareto(points: &mut [SweepPoint]) {
    let objs: Vec<Option<(f64, u64)>> = points.iter().map(SweepPoint::objectives).collect();
    for (i, p) in points.iter_mut().enumerate() {
        p.pareto = match objs[i] {
            None => false,
            Some(me) => !objs.iter().flatten().any(|&other| dominates(other, me)),
        };
    }
}

fn par_map_collect<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync + Send) -> Result<Vec<U>> {
    items.par_iter().map(f).collect()
}

/// Evaluates every (rank divisor, group) combination on `net` with the given
/// weights. Combinations some layer cannot hold are reported as infeasible.
pub fn sweep(
    net: &NetworkDescriptor,
    weights: &WeightStore,
    array: &ArrayConfig,
    spec: &SweepSpec,
) -> Result<SweepResult> {
    weights.check(net)?;
    let mut divisors = spec.rank_divisors.clone();
    divisors.sort_unstable();
    divisors.dedup();
    let mut groups = spec.groups.clone();
    groups.sort_unstable();
    groups.dedup();
    if divisors.contains(&0) || groups.contains(&0) {
        return Err(Error::Config("rank divisors and group counts must be positive".into()));
    }

    let layers: Vec<_> = net.compressible().collect();
    // One SVD per (layer, group count, span); every rank reuses the spectra.
    let jobs: Vec<(usize, usize)> = groups
        .iter()
        .flat_map(|&g| (0..layers.len()).map(move |li| (g, li)))
        .collect();
    let spectra: Vec<Option<GroupSpectra>> = par_map_collect(&jobs, |&(g, li)| {
        let w = weights.matrix(&layers[li].name)?;
        if g > w.cols() {
            return Ok(None);
        }
        Ok(Some(GroupSpectra::compute(&w, g)?))
    })?;
    let spectra_of = |g: usize, li: usize| {
        let gi = groups.iter().position(|&x| x == g).expect("group in grid");
        spectra[gi * layers.len() + li].as_ref()
    };

    let combos: Vec<(usize, usize)> = divisors
        .iter()
        .flat_map(|&d| groups.iter().map(move |&g| (d, g)))
        .collect();
    let mut points = par_map_collect(&combos, |&(d, g)| {
        let mut point = SweepPoint {
            rank_divisor: d,
            groups: g,
            pw_policy: spec.pw,
            recon_error: None,
            cycles: None,
            normalized_energy: None,
            parameters: None,
            infeasible: None,
            pareto: false,
        };
        let mut sq = 0.0;
        let mut params = 0;
        for (li, entry) in layers.iter().enumerate() {
            let (m, n) = (entry.layer.m(), entry.layer.n());
            let k = RankSpec::Divisor(d).resolve(m);
            let err = match spectra_of(g, li) {
                None => Err(format!("{g} groups exceed {n} columns")),
                Some(s) => s.error_at_rank(k).map_err(|e| e.to_string()),
            };
            match err {
                Ok(e) => sq += e * e,
                Err(reason) => {
                    point.infeasible = Some(format!("layer '{}': {reason}", entry.name));
                    return Ok(point);
                }
            }
            params += g * m * k + k * n;
        }
        let plan = point.plan();
        let report = energy::network_energy(net, &plan, array, &spec.energy)?;
        point.recon_error = Some(sq.sqrt());
        point.cycles = Some(report.layers.iter().map(|l| l.cycles).sum());
        point.normalized_energy = Some(report.normalized);
        point.parameters = Some(params);
        Ok(point)
    })?;
    points.sort_by_key(|p| (p.rank_divisor, p.groups));
    flag_pareto(&mut points);
    Ok(SweepResult {
        network: net.name.clone(),
        array: *array,
        points,
    })
}
