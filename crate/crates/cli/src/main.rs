//! `imclr`: map, cost and sweep low-rank compression plans for IMC arrays.
//!
//! Exit codes: 0 success, 1 computation failure (including verification
//! violations), 2 configuration failure.

mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use imc_lowrank::cycles::{self, ArrayConfig};
use imc_lowrank::decomposition::group_bound_check;
use imc_lowrank::energy::{self, baseline_plan};
use imc_lowrank::mapping::{self, Occupancy};
use imc_lowrank::network::{self, NetworkDescriptor};
use imc_lowrank::plan::{CompressionPlan, LayerMode, RankSpec};
use imc_lowrank::planner::{self, SweepSpec};
use imc_lowrank::weights::WeightStore;
use imc_lowrank::{verify, Error};
use rayon::prelude::*;

use config::{Format, RunConfig, RunFlags};
use report::*;

#[derive(Debug, Parser)]
#[command(
    name = "imclr",
    version,
    about = "Low-rank weight mapping and cost model for IMC crossbar arrays"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-layer stage shapes, occupancy and utilization.
    Map {
        #[command(flatten)]
        run: RunFlags,
        /// Write one PBM occupancy mask per layer stage into this directory.
        #[arg(long, value_name = "DIR")]
        mask_dir: Option<PathBuf>,
    },
    /// Cycle counts per layer and in total, with the im2col baseline.
    Cycles {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Energy per layer, normalized against the im2col baseline.
    Energy {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Whole-matrix and grouped reconstruction errors per layer. An
    /// uncompressed plan is treated as rank m/8 with one group.
    Decompose {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Evaluate the rank-divisor x group-count grid and flag the Pareto front.
    Sweep {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Seeded randomized checks of the grouped error bound and the SDK
    /// factorization identity.
    Verify(VerifyArgs),
    /// List the built-in network presets, or print one as descriptor JSON.
    Presets {
        /// Print this preset's descriptor instead of the listing.
        #[arg(long, value_name = "NAME")]
        show: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Write synthetic weights for a network as a manifest plus blobs.
    ExportWeights {
        #[arg(long, default_value = "resnet20")]
        network: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Trials of the grouped error bound.
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Trials of the SDK factorization identity.
    #[arg(long, default_value_t = 200)]
    identity_trials: usize,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
}

/// A failed run and the exit code it maps to.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Compute(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Compute(_) => 1,
            Failure::Config(_) => 2,
        }
    }
}

type Outcome<T> = Result<T, Failure>;

/// Errors during setup are configuration failures.
fn setup<T>(r: anyhow::Result<T>) -> Outcome<T> {
    r.map_err(Failure::Config)
}

/// Errors during computation are classified by cause: bad plans, missing
/// weights and I/O still count as configuration failures.
fn compute<T>(r: imc_lowrank::Result<T>) -> Outcome<T> {
    r.map_err(|e| match e {
        Error::Plan(_)
        | Error::Weights(_)
        | Error::UnknownPreset(_)
        | Error::Config(_)
        | Error::Io { .. }
        | Error::Json(_) => Failure::Config(e.into()),
        _ => Failure::Compute(e.into()),
    })
}

fn thread_pool(jobs: Option<usize>) -> anyhow::Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        b = b.num_threads(j);
    }
    b.build().context("building thread pool")
}

/// Resolved inputs shared by the run commands.
struct Ctx {
    cfg: RunConfig,
    net: NetworkDescriptor,
}

impl Ctx {
    fn new(flags: &RunFlags) -> Outcome<Self> {
        let cfg = setup(RunConfig::from_flags(flags))?;
        let net = setup(cfg.network())?;
        Ok(Ctx { cfg, net })
    }

    fn array(&self) -> ArrayConfig {
        self.cfg.array
    }

    fn weights(&self) -> Outcome<WeightStore> {
        setup(self.cfg.weights(&self.net))
    }

    fn emit(&self, r: &impl Report) -> Outcome<()> {
        let text = setup(r.render(self.cfg.output.format))?;
        setup(emit(&text, self.cfg.output.path.as_deref()))
    }
}

fn write_mask(dir: &Path, name: &str, stage: usize, occ: &Occupancy) -> anyhow::Result<()> {
    let mut s = format!("P1\n{} {}\n", occ.cols(), occ.rows());
    for r in 0..occ.rows() {
        let row: Vec<&str> = (0..occ.cols()).map(|c| if occ.get(r, c) { "1" } else { "0" }).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    let path = dir.join(format!("{name}.stage{stage}.pbm"));
    std::fs::write(&path, s).with_context(|| format!("writing {}", path.display()))
}

fn cmd_map(ctx: &Ctx, mask_dir: Option<&Path>) -> Outcome<()> {
    let array = ctx.array();
    let resolved = compute(ctx.cfg.plan.resolve(&ctx.net, &array))?;
    if let Some(dir) = mask_dir {
        setup(std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())))?;
    }
    let mut layers = Vec::new();
    for (entry, settings) in ctx.net.layers.iter().zip(resolved) {
        let Some(settings) = settings else { continue };
        let occs =
            compute(mapping::stage_occupancies(&entry.layer, settings.pw, settings.lowrank).map_err(Error::from))?;
        let cyc = compute(cycles::resolved_layer_cycles(&entry.layer, &settings, &array).map_err(Error::from))?;
        let mut stages = Vec::new();
        for (i, (occ, st)) in occs.iter().zip(&cyc.stages).enumerate() {
            if let Some(dir) = mask_dir {
                setup(write_mask(dir, &entry.name, i, occ))?;
            }
            stages.push(StageMap {
                kind: st.kind,
                rows: st.rows,
                cols: st.cols,
                ar: st.ar,
                ac: st.ac,
                occupied: occ.count(),
                utilization: mapping::occupancy_utilization(occ, &array),
            });
        }
        layers.push(LayerMap {
            name: entry.name.clone(),
            pw: settings.pw.to_string(),
            lowrank: settings.lowrank,
            sdk_equals_im2col: settings.is_im2col(&entry.layer),
            pw_steps: cyc.pw_steps,
            stages,
        });
    }
    ctx.emit(&MapReport {
        network: ctx.net.name.clone(),
        array,
        layers,
    })
}

fn cmd_cycles(ctx: &Ctx) -> Outcome<()> {
    let array = ctx.array();
    let run = compute(cycles::network_cycles(&ctx.net, &ctx.cfg.plan, &array))?;
    let base = compute(cycles::network_cycles(&ctx.net, &baseline_plan(), &array))?;
    let speedup = compute(cycles::speedup(base.total, run.total).map_err(Error::from))?;
    let layers = run
        .layers
        .iter()
        .filter_map(|l| {
            let (settings, rep) = (l.settings?, l.report.as_ref()?);
            Some(LayerCycleRow {
                name: l.name.clone(),
                pw: settings.pw.to_string(),
                lowrank: settings.lowrank,
                pw_steps: rep.pw_steps,
                stages: rep
                    .stages
                    .iter()
                    .map(|s| StageCycleRow {
                        kind: s.kind,
                        rows: s.rows,
                        cols: s.cols,
                        ar: s.ar,
                        ac: s.ac,
                        cycles: s.cycles,
                    })
                    .collect(),
                cycles: rep.total,
            })
        })
        .collect();
    ctx.emit(&CyclesReport {
        network: run.network,
        array,
        layers,
        total: run.total,
        baseline_total: base.total,
        speedup,
    })
}

fn cmd_energy(ctx: &Ctx) -> Outcome<()> {
    let report = compute(energy::network_energy(
        &ctx.net,
        &ctx.cfg.plan,
        &ctx.array(),
        &ctx.cfg.energy,
    ))?;
    ctx.emit(&EnergyOut { report })
}

fn cmd_decompose(ctx: &Ctx) -> Outcome<()> {
    let weights = ctx.weights()?;
    let mut plan: CompressionPlan = ctx.cfg.plan.clone();
    if plan.default.mode == LayerMode::Uncompressed {
        plan.default.mode = LayerMode::Lowrank {
            rank: RankSpec::Divisor(8),
            groups: 1,
        };
    }
    let resolved = compute(plan.resolve(&ctx.net, &ctx.array()))?;
    let jobs: Vec<_> = ctx
        .net
        .layers
        .iter()
        .zip(resolved)
        .filter_map(|(entry, s)| Some((entry, s?.lowrank?)))
        .collect();
    let layers = compute(
        jobs.par_iter()
            .map(|(entry, lr)| {
                let w = weights.matrix(&entry.name)?;
                let (m, n) = w.shape();
                let (k, g) = (lr.rank, lr.groups);
                let rep = group_bound_check(&w, k, g)?;
                Ok(DecomposeRow {
                    name: entry.name.clone(),
                    m,
                    n,
                    rank: k,
                    groups: g,
                    epsilon: rep.epsilon,
                    epsilon_g: rep.epsilon_g,
                    bound_holds: rep.inequality_holds,
                    original_parameters: m * n,
                    lowrank_parameters: m * k + k * n,
                    grouped_parameters: g * m * k + k * n,
                })
            })
            .collect::<imc_lowrank::Result<Vec<_>>>(),
    )?;
    let recon_error = layers.iter().map(|l| l.epsilon_g * l.epsilon_g).sum::<f64>().sqrt();
    ctx.emit(&DecomposeReport {
        network: ctx.net.name.clone(),
        layers,
        recon_error,
    })
}

fn cmd_sweep(ctx: &Ctx) -> Outcome<()> {
    let weights = ctx.weights()?;
    let spec = SweepSpec {
        rank_divisors: ctx.cfg.sweep.rank_divisors.clone(),
        groups: ctx.cfg.sweep.groups.clone(),
        pw: ctx.cfg.sweep.pw,
        energy: ctx.cfg.energy,
    };
    let result = compute(planner::sweep(&ctx.net, &weights, &ctx.array(), &spec))?;
    ctx.emit(&SweepOut { result })
}

fn cmd_verify(args: &VerifyArgs) -> Outcome<()> {
    let summary = compute(verify::run(args.seed, args.trials, args.identity_trials))?;
    let passed = summary.all_passed();
    let out = VerifyOut { summary };
    let text = setup(out.render(args.format))?;
    setup(emit(&text, args.output.as_deref()))?;
    if passed {
        Ok(())
    } else {
        Err(Failure::Compute(anyhow!("verification found violations")))
    }
}

fn cmd_presets(show: Option<&str>, format: Format) -> Outcome<()> {
    if let Some(name) = show {
        let net = setup(network::preset(name).map_err(anyhow::Error::from))?;
        return setup(emit(&net.to_json(), None));
    }
    let presets = network::PRESET_NAMES
        .iter()
        .map(|&name| {
            let net = network::preset(name).expect("built-in preset");
            PresetRow {
                name: name.to_string(),
                layers: net.layers.len(),
                compressible: net.compressible().count(),
                downsample: net.layers.iter().filter(|l| l.downsample).count(),
                notes: net.notes.clone(),
            }
        })
        .collect();
    let text = setup(PresetsReport { presets }.render(format))?;
    setup(emit(&text, None))
}

fn cmd_export_weights(network: &str, seed: u64, out: &Path) -> Outcome<()> {
    let cfg = RunConfig {
        network: network.to_string(),
        ..RunConfig::default()
    };
    let net = setup(cfg.network())?;
    compute(WeightStore::synth(&net, seed).save(out))
}

fn run(cli: &Cli) -> Outcome<()> {
    match &cli.command {
        Command::Map { run, mask_dir } => {
            let ctx = Ctx::new(run)?;
            let pool = setup(thread_pool(ctx.cfg.jobs))?;
            pool.install(|| cmd_map(&ctx, mask_dir.as_deref()))
        }
        Command::Cycles { run } => cmd_cycles(&Ctx::new(run)?),
        Command::Energy { run } => cmd_energy(&Ctx::new(run)?),
        Command::Decompose { run } => {
            let ctx = Ctx::new(run)?;
            let pool = setup(thread_pool(ctx.cfg.jobs))?;
            pool.install(|| cmd_decompose(&ctx))
        }
        Command::Sweep { run } => {
            let ctx = Ctx::new(run)?;
            let pool = setup(thread_pool(ctx.cfg.jobs))?;
            pool.install(|| cmd_sweep(&ctx))
        }
        Command::Verify(args) => {
            if args.jobs == Some(0) {
                return Err(Failure::Config(anyhow!("--jobs must be positive")));
            }
            let pool = setup(thread_pool(args.jobs))?;
            pool.install(|| cmd_verify(args))
        }
        Command::Presets { show, format } => cmd_presets(show.as_deref(), *format),
        Command::ExportWeights { network, seed, out } => cmd_export_weights(network, *seed, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Config(e) | Failure::Compute(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}
