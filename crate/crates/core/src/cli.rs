//! Command-line layer: argument types, command implementations and exit codes.
//!
//! Every command that takes `--seed` is reproducible byte for byte; wall-clock
//! numbers only ever appear under a `timing` key in JSON reports.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::abm::{simulate, stream_rng, GraphTrace, ModelParams, SimConfig};
use crate::config::RunConfig;
use crate::diagnostics::{corner_data, posterior_sample, ppc, sbc, PpcSummary, SbcResult, Summary, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::model::Fingerprint;
use crate::store::{self, CheckpointMeta};
use crate::training::{generate_corpus, train, Corpus, Timing};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Numeric { .. } | Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Simulation { source, .. } => exit_code(source),
        Error::Dimension { .. } | Error::Usage(_) | Error::Config(_) | Error::Domain(_) | Error::Validation(_) => {
            EXIT_USAGE
        }
    }
}

fn parse_theta(s: &str) -> std::result::Result<ModelParams, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let a: [f64; 4] = parts
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected 4 comma-separated values (rho,eps,lam,p), got {}", v.len()))?;
    Ok(ModelParams::from_array(a))
}

#[derive(Debug, Parser)]
#[command(name = "graph-npe", version, about = "Neural posterior estimation for the Hopfield opinion/tie model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one trace at a given parameter vector.
    Simulate(SimulateArgs),
    /// Generate a prior-predictive training corpus.
    GenData(GenDataArgs),
    /// Train the embedder and flow on a corpus.
    Train(TrainArgs),
    /// Draw posterior samples for an observed trace.
    Posterior(PosteriorArgs),
    /// Calibration (SBC) and posterior predictive checks.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `rho,eps,lam,p`
    #[arg(long, value_parser = parse_theta, allow_hyphen_values = true)]
    pub theta: ModelParams,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output corpus directory (holds one trace).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads for simulation; output does not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training report path; defaults to `<out>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PosteriorArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Corpus directory holding exactly one observed trace.
    #[arg(long)]
    pub obs: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Samples file (n×4 little-endian f64).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub corner: Option<PathBuf>,
    #[arg(long, value_parser = parse_theta, allow_hyphen_values = true)]
    pub truth: Option<ModelParams>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Number of SBC runs.
    #[arg(long)]
    pub sbc: Option<usize>,
    /// Posterior draws per SBC run.
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
    /// Number of posterior predictive simulations (requires `--obs`).
    #[arg(long)]
    pub ppc: Option<usize>,
    #[arg(long)]
    pub obs: Option<PathBuf>,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Posterior(a) => cmd_posterior(&a),
        Command::Diagnose(a) => cmd_diagnose(&a),
    }
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    a.theta.validate()?;
    let prior = cfg.prior_box();
    // Boundary values (e.g. λ = 0, frozen ties) are valid simulator inputs.
    let inside = a
        .theta
        .to_array()
        .iter()
        .enumerate()
        .all(|(d, &x)| (prior.lower[d]..=prior.upper[d]).contains(&x));
    if !inside {
        return Err(Error::Domain(format!("theta {:?} is outside the prior box", a.theta.to_array())));
    }
    let sim = cfg.sim_config(a.seed);
    let trace = simulate(&a.theta, &sim)?;
    trace.validate()?;
    let corpus = Corpus {
        sim,
        prior,
        seed: a.seed,
        thetas: vec![a.theta],
        traces: vec![trace],
    };
    store::write_corpus(&a.out, &corpus, &cfg.data_hash())?;
    Ok(())
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    if a.n == 0 || a.jobs == 0 {
        return Err(Error::Usage("--n and --jobs must be positive".into()));
    }
    let sim = cfg.sim_config(a.seed);
    let corpus = generate_corpus(&sim, &cfg.prior_box(), a.n, a.seed, a.jobs)?;
    store::write_corpus(&a.out, &corpus, &cfg.data_hash())?;
    Ok(())
}

#[derive(Serialize)]
struct DivergenceReport<'a> {
    schema_version: u32,
    status: &'static str,
    error: String,
    epoch: usize,
    batch: usize,
    loss: f64,
    timing: &'a Timing,
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let (corpus, manifest) = store::read_corpus(&a.corpus)?;
    let hash = cfg.data_hash();
    if manifest.config_hash != hash {
        return Err(Error::Validation(format!(
            "corpus config hash {} does not match config {hash}",
            manifest.config_hash
        )));
    }
    let report_path = a.report.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".report.json");
        PathBuf::from(s)
    });

    let start = Instant::now();
    match train(&corpus, &cfg.arch, &cfg.train) {
        Ok((mut model, report)) => {
            model.round_to_f32();
            let meta = CheckpointMeta {
                config_hash: hash,
                training_seed: cfg.train.seed,
                epoch: report.best_epoch,
                val_loss: report.best_val_loss,
            };
            store::write_checkpoint(&a.out, &model, &meta)?;
            #[derive(Serialize)]
            struct Wrapped<'a> {
                schema_version: u32,
                status: &'static str,
                #[serde(flatten)]
                report: &'a crate::training::TrainReport,
            }
            store::write_json(
                &report_path,
                &Wrapped {
                    schema_version: REPORT_SCHEMA_VERSION,
                    status: "ok",
                    report: &report,
                },
            )
        }
        Err(e @ Error::Divergence { epoch, batch, loss }) => {
            let timing = Timing {
                wall_clock_secs: start.elapsed().as_secs_f64(),
            };
            store::write_json(
                &report_path,
                &DivergenceReport {
                    schema_version: REPORT_SCHEMA_VERSION,
                    status: "diverged",
                    error: e.to_string(),
                    epoch,
                    batch,
                    // JSON has no infinities; a non-finite loss is written as null.
                    loss,
                    timing: &timing,
                },
            )?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

/// Loads the single trace of an observation directory.
pub fn read_observation(dir: &Path) -> Result<GraphTrace> {
    let (mut corpus, _) = store::read_corpus(dir)?;
    if corpus.len() != 1 {
        return Err(Error::Usage(format!(
            "observation {} holds {} traces, expected exactly 1",
            dir.display(),
            corpus.len()
        )));
    }
    Ok(corpus.traces.remove(0))
}

pub fn cmd_posterior(a: &PosteriorArgs) -> Result<()> {
    let (model, _) = store::read_checkpoint(&a.ckpt)?;
    let obs = read_observation(&a.obs)?;
    if a.n == 0 || a.bins == 0 {
        return Err(Error::Usage("--n and --bins must be positive".into()));
    }
    let draws = posterior_sample(&model, &obs, a.n, &mut stream_rng(a.seed, 0))?;
    let flat: Vec<f64> = draws.thetas.iter().flat_map(|t| t.to_array()).collect();
    store::write_f64s(&a.out, &flat)?;
    if let Some(path) = &a.corner {
        let corner = corner_data(&draws.thetas, a.bins, a.truth, &store::model_prior(&model))?;
        store::write_json(path, &corner)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct DiagnoseReport {
    pub schema_version: u32,
    pub checkpoint_config_hash: String,
    pub seed: u64,
    pub sbc: Option<SbcResult>,
    pub ppc: Option<Vec<PpcSummary>>,
    pub timing: Timing,
}

pub fn cmd_diagnose(a: &DiagnoseArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let (model, header) = store::read_checkpoint(&a.ckpt)?;
    let sim: SimConfig = cfg.sim_config(0);
    if Fingerprint::of_config(&sim) != model.fingerprint {
        return Err(Error::Usage(format!(
            "config simulates {:?} but the checkpoint expects {:?}",
            Fingerprint::of_config(&sim),
            model.fingerprint
        )));
    }
    if a.sbc.is_none() && a.ppc.is_none() {
        return Err(Error::Usage("nothing to do: pass --sbc and/or --ppc".into()));
    }
    let start = Instant::now();
    let sbc_result = match a.sbc {
        Some(runs) => Some(sbc(&model, &sim, &cfg.prior_box(), runs, a.draws, &mut stream_rng(a.seed, 0))?),
        None => None,
    };
    let ppc_result = match a.ppc {
        Some(n) => {
            let path = a.obs.as_ref().ok_or_else(|| Error::Usage("--ppc requires --obs".into()))?;
            let obs = read_observation(path)?;
            Some(ppc(&model, &obs, &sim, n, &Summary::DEFAULTS, &mut stream_rng(a.seed, 1))?)
        }
        None => None,
    };
    let report = DiagnoseReport {
        schema_version: REPORT_SCHEMA_VERSION,
        checkpoint_config_hash: header.config_hash,
        seed: a.seed,
        sbc: sbc_result,
        ppc: ppc_result,
        timing: Timing {
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    };
    store::write_json(&a.out, &report)
}
