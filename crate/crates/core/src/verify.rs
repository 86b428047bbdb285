//! Seeded randomized campaigns for the two core identities: grouped
//! low-rank error never exceeds whole-matrix low-rank error, and the
//! low-rank factorization commutes with the SDK operator.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomposition::{decompose, group_decompose, group_bound_check, ErrorReport};
use crate::linalg::{kronecker_identity, Matrix};
use crate::mapping::{sdk_operator, ConvLayer, ParallelWindow};
use crate::Result;

/// Absolute-plus-relative slack on `eps_g <= eps`.
pub const GROUP_BOUND_TOL: f64 = 1e-9;
/// Identity tolerance, relative to `max|W|`.
pub const IDENTITY_TOL: f64 = 1e-10;

/// Shape family of a random matrix in the error-bound campaign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixFamily {
    Tall,
    Wide,
    Square,
    RankDeficient,
    Integer,
}

const FAMILIES: [MatrixFamily; 5] = [
    MatrixFamily::Tall,
    MatrixFamily::Wide,
    MatrixFamily::Square,
    MatrixFamily::RankDeficient,
    MatrixFamily::Integer,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTrial {
    pub family: MatrixFamily,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub g: usize,
    pub report: ErrorReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub trials: usize,
    pub passed: usize,
    /// Smallest `eps - eps_g` seen; negative means a grouped error exceeded
    /// the whole-matrix error by that much.
    pub worst_margin: f64,
    pub failures: Vec<BoundTrial>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityTrial {
    pub layer: ConvLayer,
    pub pw: ParallelWindow,
    pub rank: usize,
    pub groups: usize,
    pub max_abs_diff: f64,
    pub max_abs_w: f64,
}

impl IdentityTrial {
    pub fn passes(&self) -> bool {
        self.max_abs_diff <= IDENTITY_TOL * self.max_abs_w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySummary {
    pub trials: usize,
    pub passed: usize,
    pub max_abs_diff: f64,
    /// Largest `max|Δ| / max|W|` over all trials.
    pub max_relative_diff: f64,
    pub failures: Vec<IdentityTrial>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub seed: u64,
    pub group_bound: BoundSummary,
    pub sdk_identity: IdentitySummary,
}

impl VerifySummary {
    pub fn all_passed(&self) -> bool {
        self.group_bound.passed == self.group_bound.trials && self.sdk_identity.passed == self.sdk_identity.trials
    }
}

/// Independent per-trial seeds drawn from one master stream, so trial `i`
/// is the same regardless of scheduling.
fn trial_seeds(seed: u64, salt: u64, trials: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    (0..trials).map(|_| rng.next_u64()).collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, family: MatrixFamily) -> Matrix {
    let (m, n) = match family {
        MatrixFamily::Tall => {
            let n = rng.random_range(2..=32);
            (rng.random_range(n..=64), n)
        }
        MatrixFamily::Wide => {
            let m = rng.random_range(2..=32);
            (m, rng.random_range(m..=64))
        }
        MatrixFamily::Square => {
            let s = rng.random_range(2..=64);
            (s, s)
        }
        _ => (rng.random_range(2..=64), rng.random_range(2..=64)),
    };
    match family {
        MatrixFamily::RankDeficient => {
            let r = rng.random_range(1..=m.min(n));
            let a = Matrix::from_fn(m, r, |_, _| rng.random_range(-1.0..1.0)).expect("finite");
            let b = Matrix::from_fn(r, n, |_, _| rng.random_range(-1.0..1.0)).expect("finite");
            a.matmul(&b).expect("shapes chain")
        }
        MatrixFamily::Integer => Matrix::from_fn(m, n, |_, _| f64::from(rng.random_range(-5i32..=5))).expect("finite"),
        _ => Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0)).expect("finite"),
    }
}

fn bound_trial(seed: u64, family: MatrixFamily) -> Result<BoundTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_matrix(&mut rng, family);
    let (m, n) = w.shape();
    let g = rng.random_range(1..=n.min(8));
    let k = rng.random_range(1..=m.min(n / g));
    let report = group_bound_check(&w, k, g)?;
    Ok(BoundTrial {
        family,
        m,
        n,
        k,
        g,
        report,
    })
}

/// Checks `eps_g <= eps + 1e-9·max(1, eps)` on `trials` random instances
/// with `m, n` in `[2, 64]`, cycling through the matrix families.
pub fn group_bound_campaign(seed: u64, trials: usize) -> Result<BoundSummary> {
    let seeds = trial_seeds(seed, 0x6b6f_7267, trials);
    let results: Vec<BoundTrial> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| bound_trial(s, FAMILIES[i % FAMILIES.len()]))
        .collect::<Result<_>>()?;
    let passed = results.iter().filter(|t| t.report.inequality_holds).count();
    let worst_margin = results.iter().map(|t| t.report.margin()).fold(f64::INFINITY, f64::min);
    Ok(BoundSummary {
        trials,
        passed,
        worst_margin,
        failures: results.into_iter().filter(|t| !t.report.inequality_holds).collect(),
    })
}

fn random_layer(rng: &mut ChaCha8Rng) -> (ConvLayer, ParallelWindow) {
    let kh = rng.random_range(1..=3);
    let kw = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=1);
    let ih = rng.random_range(kh.max(2)..=10);
    let iw = rng.random_range(kw.max(2)..=10);
    let c_in = rng.random_range(1..=4);
    let c_out = rng.random_range(1..=8);
    let layer = ConvLayer::new(c_in, c_out, kh, kw, ih, iw, stride, pad).expect("generated layer is valid");
    let pw = ParallelWindow::new(rng.random_range(kh..=kh + 4), rng.random_range(kw..=kw + 4));
    (layer, pw)
}

fn identity_trial(seed: u64, grouped: bool) -> Result<IdentityTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (layer, pw) = random_layer(&mut rng);
    let (m, n) = (layer.m(), layer.n());
    let w = Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))?;
    let geom = pw.geometry(&layer)?;
    let n_par = geom.parallel_outputs();
    let (l, r, groups, rank) = if grouped && n >= 2 {
        let g = rng.random_range(2..=n.min(4));
        let k = rng.random_range(1..=m.min(n / g));
        let d = group_decompose(&w, k, g)?;
        (d.l_concat(), d.r_block_diag(), g, k)
    } else {
        let k = rng.random_range(1..=m.min(n));
        let p = decompose(&w, k)?;
        (p.l, p.r, 1, k)
    };
    let lhs = kronecker_identity(n_par, &l)?.matmul(&sdk_operator(&r, &geom)?)?;
    let rhs = sdk_operator(&l.matmul(&r)?, &geom)?;
    Ok(IdentityTrial {
        layer,
        pw,
        rank,
        groups,
        max_abs_diff: lhs.max_abs_diff(&rhs)?,
        max_abs_w: w.max_abs(),
    })
}

/// Checks `(I_N ⊗ L)·SDK(R) = SDK(L·R)` on random layers, windows and
/// factorizations; odd trials use grouped factors.
pub fn sdk_identity_campaign(seed: u64, trials: usize) -> Result<IdentitySummary> {
    let seeds = trial_seeds(seed, 0x7364_6b21, trials);
    let results: Vec<IdentityTrial> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| identity_trial(s, i % 2 == 1))
        .collect::<Result<_>>()?;
    let passed = results.iter().filter(|t| t.passes()).count();
    let max_abs_diff = results.iter().map(|t| t.max_abs_diff).fold(0.0, f64::max);
    let max_relative_diff = results
        .iter()
        .map(|t| {
            if t.max_abs_w > 0.0 {
                t.max_abs_diff / t.max_abs_w
            } else {
                t.max_abs_diff
            }
        })
        .fold(0.0, f64::max);
    Ok(IdentitySummary {
        trials,
        passed,
        max_abs_diff,
        max_relative_diff,
        failures: results.into_iter().filter(|t| !t.passes()).collect(),
    })
}

pub fn run(seed: u64, bound_trials: usize, identity_trials: usize) -> Result<VerifySummary> {
    Ok(VerifySummary {
        seed,
        group_bound: group_bound_campaign(seed, bound_trials)?,
        sdk_identity: sdk_identity_campaign(seed, identity_trials)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn campaigns_are_deterministic() {
        let a = run(5, 40, 20).unwrap();
        let b = run(5, 40, 20).unwrap();
        assert_eq!(a, b);
        assert!(a.all_passed());
    }

    #[test]
    fn families_respect_shape_ranges() {
        for (i, s) in trial_seeds(9, 1, 200).into_iter().enumerate() {
            let t = bound_trial(s, FAMILIES[i % 5]).unwrap();
            assert!((2..=64).contains(&t.m) && (2..=64).contains(&t.n));
            match t.family {
                MatrixFamily::Tall => assert!(t.m >= t.n),
                MatrixFamily::Wide => assert!(t.m <= t.n),
                MatrixFamily::Square => assert_eq!(t.m, t.n),
                _ => {}
            }
            assert!(t.k * t.g <= t.n && t.k <= t.m);
        }
    }
}
