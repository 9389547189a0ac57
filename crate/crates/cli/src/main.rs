//! `kvsculpt`: generate toy caches, compress them, plan budgets and evaluate.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.
//! `KVSCULPT_THREADS` caps the worker count.

mod commands;
mod config;
mod reports;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{overlay, CommonFlags, CompressFlags, ModelFlags, RunConfig};
use kvsculpt_core::pipeline::with_threads;
use kvsculpt_core::FloatDtype;

#[derive(Debug)]
pub struct UsageError(pub String);

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<UsageError> for CliError {
    fn from(e: UsageError) -> Self {
        CliError::Usage(e.0)
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<kvsculpt_core::Error> for CliError {
    fn from(e: kvsculpt_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "kvsculpt",
    version,
    about = "KV-cache distillation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
struct OutputFlags {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Float width of written KVD tensors.
    #[arg(long, value_enum)]
    dtype: Option<DtypeArg>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a context from a seeded toy model and write its full cache.
    Gen {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        output: OutputFlags,
    },
    /// Compress a full cache into a compressed KVD file.
    Compress {
        #[command(flatten)]
        common: CommonFlags,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[command(flatten)]
        compress: CompressFlags,
        #[command(flatten)]
        output: OutputFlags,
        /// JSON report path; stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-step distillation trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Pilot reports used for allocation, as a JSON array.
        #[arg(long)]
        pilot_out: Option<PathBuf>,
    },
    /// Turn pilot MSEs into a per-head budget plan.
    Allocate {
        #[command(flatten)]
        common: CommonFlags,
        #[arg(long)]
        pilot: Option<PathBuf>,
        /// Total pairs across all heads.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        /// uniform | layer | head
        #[arg(long)]
        alloc: Option<kvsculpt_core::AllocMode>,
        #[arg(long)]
        k_min_floor: Option<usize>,
        /// Per-head cap, normally N - m; defaults to the budget.
        #[arg(long)]
        cap: Option<usize>,
        /// Plan path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a compressed cache, or sweep ratios with --ratios.
    Eval {
        #[command(flatten)]
        common: CommonFlags,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        compressed: Option<PathBuf>,
        /// Comma-separated ratios; compresses and evaluates each.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[command(flatten)]
        compress: CompressFlags,
        /// Synthetic queries for the attention cosine proxy.
        #[arg(long)]
        n_s: Option<usize>,
        #[arg(long)]
        near: Option<usize>,
        #[arg(long)]
        far: Option<usize>,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for sweep reports.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// CSV prefix for per-token KL and layer profile series.
        #[arg(long)]
        plot_data: Option<PathBuf>,
    },
}

impl OutputFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        overlay!(self, cfg; out);
        if let Some(d) = self.dtype {
            cfg.dtype = match d {
                DtypeArg::F32 => FloatDtype::F32,
                DtypeArg::F64 => FloatDtype::F64,
            };
        }
    }
}

fn base_config(common: &CommonFlags) -> Result<RunConfig, UsageError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    overlay!(common, cfg; seed);
    Ok(cfg)
}

type Runner = fn(&RunConfig) -> Result<(), CliError>;

fn resolve(command: Command) -> Result<(RunConfig, Runner), UsageError> {
    Ok(match command {
        Command::Gen {
            common,
            model,
            output,
        } => {
            let mut cfg = base_config(&common)?;
            model.apply(&mut cfg);
            output.apply(&mut cfg);
            (cfg, commands::gen)
        }
        Command::Compress {
            common,
            cache,
            compress,
            output,
            report,
            trace,
            pilot_out,
        } => {
            let mut cfg = base_config(&common)?;
            compress.apply(&mut cfg);
            output.apply(&mut cfg);
            cfg.cache = cache.or(cfg.cache);
            cfg.report = report.or(cfg.report);
            cfg.trace = trace.or(cfg.trace);
            cfg.pilot_out = pilot_out.or(cfg.pilot_out);
            (cfg, commands::compress)
        }
        Command::Allocate {
            common,
            pilot,
            budget,
            alpha,
            alloc,
            k_min_floor,
            cap,
            out,
        } => {
            let mut cfg = base_config(&common)?;
            cfg.pilot = pilot.or(cfg.pilot);
            cfg.budget = budget.or(cfg.budget);
            cfg.cap = cap.or(cfg.cap);
            cfg.out = out.or(cfg.out);
            cfg.alpha = alpha.unwrap_or(cfg.alpha);
            cfg.alloc = alloc.unwrap_or(cfg.alloc);
            cfg.k_min_floor = k_min_floor.unwrap_or(cfg.k_min_floor);
            (cfg, commands::allocate)
        }
        Command::Eval {
            common,
            cache,
            compressed,
            ratios,
            compress,
            n_s,
            near,
            far,
            out,
            out_dir,
            plot_data,
        } => {
            let mut cfg = base_config(&common)?;
            compress.apply(&mut cfg);
            cfg.cache = cache.or(cfg.cache);
            cfg.compressed = compressed.or(cfg.compressed);
            cfg.ratios = ratios.unwrap_or(cfg.ratios);
            cfg.n_s = n_s.unwrap_or(cfg.n_s);
            cfg.near = near.or(cfg.near);
            cfg.far = far.or(cfg.far);
            cfg.out = out.or(cfg.out);
            cfg.out_dir = out_dir.or(cfg.out_dir);
            cfg.plot_data = plot_data.or(cfg.plot_data);
            (cfg, commands::eval)
        }
    })
}

fn thread_cap() -> Result<usize, UsageError> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("KVSCULPT_THREADS") {
        Err(_) => Ok(available),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n.min(available)),
            _ => Err(UsageError(format!(
                "KVSCULPT_THREADS must be a positive integer, got '{v}'"
            ))),
        },
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (cfg, runner) = resolve(cli.command)?;
    let threads = thread_cap()?;
    log::debug!("running with {threads} threads");
    with_threads(threads, || runner(&cfg))?
}

/// Error chain on one line, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun with --help for usage.");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
