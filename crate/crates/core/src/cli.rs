//! Command-line front end: `run` simulates one configuration, `compare` runs
//! the same model and seeds with the optimism controller on and off.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::kernel::{run_sequential, KernelError, Rng, DEFAULT_MOVE_BUDGET};
use crate::lpcc::{ActuatorSample, LpccConfig, ACTUATOR_CSV_HEADER};
use crate::model::{parse_str, Model, ParseError};
use crate::sync::{render_table, stats_records, FinalReport};
use crate::timewarp::{Cancellation, LpConfig, LpStats};
use crate::transport::{
    run_parallel, DeterministicOptions, ParallelConfig, RunError, TransportMode,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_BUDGET: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "gpss-warp",
    version,
    about = "Optimistic parallel GPSS/H simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a model and write the report.
    Run(RunArgs),
    /// Run a model with the optimism controller on and off and compare.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Engine {
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CancellationArg {
    Lazy,
    Aggressive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransportArg {
    Deterministic,
    Concurrent,
}

/// Settings shared by `run` and `compare`.
#[derive(Debug, Clone, Args)]
pub struct SimArgs {
    /// Model source file.
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "lazy")]
    pub cancellation: CancellationArg,
    /// Seed of the model's random draws.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Seed of the deterministic transport's scheduling.
    #[arg(long, default_value_t = 0)]
    pub interleave_seed: u64,
    #[arg(long, value_enum, default_value = "deterministic")]
    pub transport: TransportArg,
    #[arg(long, default_value_t = 1)]
    pub checkpoint_interval: u32,
    #[arg(long, default_value_t = 50.0)]
    pub gvt_period_ms: f64,
    /// Limit on executed moves over all processes.
    #[arg(long)]
    pub move_budget: Option<u64>,
    #[command(flatten)]
    pub tuning: LpccTuning,
}

/// Overrides of the optimism controller's defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct LpccTuning {
    #[arg(long)]
    pub lpcc_eval_every: Option<u64>,
    #[arg(long)]
    pub lpcc_merge_radius: Option<f64>,
    #[arg(long)]
    pub lpcc_capacity: Option<usize>,
    #[arg(long)]
    pub lpcc_margin: Option<f64>,
    #[arg(long)]
    pub lpcc_hysteresis: Option<f64>,
    #[arg(long)]
    pub lpcc_floor: Option<u64>,
    #[arg(long)]
    pub lpcc_ceiling: Option<u64>,
}

impl LpccTuning {
    pub fn apply(&self, mut c: LpccConfig) -> LpccConfig {
        if let Some(v) = self.lpcc_eval_every {
            c.eval_every_moves = v;
        }
        if let Some(v) = self.lpcc_merge_radius {
            c.merge_radius = v;
        }
        if let Some(v) = self.lpcc_capacity {
            c.capacity = v;
        }
        if let Some(v) = self.lpcc_margin {
            c.improvement_margin = v;
        }
        if let Some(v) = self.lpcc_hysteresis {
            c.hysteresis = v;
        }
        if let Some(v) = self.lpcc_floor {
            c.floor = v;
        }
        if let Some(v) = self.lpcc_ceiling {
            c.ceiling = v;
        }
        c
    }

    fn any(&self) -> bool {
        self.lpcc_eval_every.is_some()
            || self.lpcc_merge_radius.is_some()
            || self.lpcc_capacity.is_some()
            || self.lpcc_margin.is_some()
            || self.lpcc_hysteresis.is_some()
            || self.lpcc_floor.is_some()
            || self.lpcc_ceiling.is_some()
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    #[arg(long, value_enum, default_value = "parallel")]
    pub engine: Engine,
    #[arg(long, value_enum, default_value = "off")]
    pub lpcc: Switch,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Per-process statistics as JSON lines.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Actuator trace; one file per process, named `<stem>-<partition>.<ext>`.
    #[arg(long)]
    pub actuator_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub sim: SimArgs,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Kernel(KernelError),
    #[error("{0}")]
    Run(RunError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Kernel(KernelError::BudgetExceeded { .. })
            | CliError::Run(RunError::BudgetExceeded { .. }) => EXIT_BUDGET,
            _ => EXIT_CONFIG,
        }
    }
}

/// Parallel configuration for `sim`, validated.
pub fn parallel_config(sim: &SimArgs, lpcc: bool) -> Result<ParallelConfig, CliError> {
    if sim.cancellation == CancellationArg::Aggressive && sim.move_budget.is_none() {
        return Err(CliError::Config(
            "aggressive cancellation can loop forever; give an explicit --move-budget".into(),
        ));
    }
    if sim.checkpoint_interval == 0 {
        return Err(CliError::Config(
            "--checkpoint-interval must be at least 1".into(),
        ));
    }
    if sim.gvt_period_ms.is_nan() || sim.gvt_period_ms <= 0.0 {
        return Err(CliError::Config("--gvt-period-ms must be positive".into()));
    }
    let transport = match sim.transport {
        TransportArg::Deterministic => TransportMode::Deterministic(DeterministicOptions {
            interleave_seed: sim.interleave_seed,
            ..DeterministicOptions::default()
        }),
        TransportArg::Concurrent => TransportMode::Concurrent,
    };
    Ok(ParallelConfig {
        lp: LpConfig {
            cancellation: match sim.cancellation {
                CancellationArg::Lazy => Cancellation::Lazy,
                CancellationArg::Aggressive => Cancellation::Aggressive,
            },
            checkpoint_interval: sim.checkpoint_interval,
            lpcc: lpcc.then(|| sim.tuning.apply(LpccConfig::default())),
            ..LpConfig::default()
        },
        gvt_period_ms: sim.gvt_period_ms,
        move_budget: sim.move_budget.unwrap_or(DEFAULT_MOVE_BUDGET),
        transport,
        trace_envelopes: log::log_enabled!(log::Level::Trace),
    })
}

fn load_model(path: &Path) -> Result<Arc<Model>, CliError> {
    let source = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Arc::new(parse_str(&path.display().to_string(), &source)?))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Actuator trace as CSV, header included.
pub fn actuator_csv(trace: &[ActuatorSample]) -> String {
    let mut out = String::from(ACTUATOR_CSV_HEADER);
    out.push('\n');
    for s in trace {
        out.push_str(&s.csv_row());
        out.push('\n');
    }
    out
}

/// Path of the actuator CSV written for `partition`.
pub fn actuator_csv_path(base: &Path, partition: &str) -> PathBuf {
    let stem = base
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let name = match base.extension() {
        Some(ext) => format!("{stem}-{partition}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{partition}"),
    };
    base.with_file_name(name)
}

/// The three move rows (committed, rolled back, total), one column per process.
pub fn render_stats(names: &[&str], stats: &[LpStats]) -> String {
    crate::sync::render_stats_table(names, stats)
}

/// Per process, the LPCC on and off columns side by side plus the change in
/// rolled-back moves.
pub fn render_comparison(names: &[&str], on: &[LpStats], off: &[LpStats]) -> String {
    let mut out = String::new();
    for ((name, a), b) in names.iter().zip(on).zip(off) {
        let _ = writeln!(out, "{name}");
        out.push_str(&render_table(&[
            ("LPCC on".to_string(), a),
            ("LPCC off".to_string(), b),
        ]));
        let _ = writeln!(
            out,
            "Rolled-back moves reduction: {}",
            reduction(a.moves_rolled_back, b.moves_rolled_back)
        );
        out.push('\n');
    }
    out
}

fn reduction(on: u64, off: u64) -> String {
    if off == 0 {
        return "n/a".into();
    }
    format!("{:.1}%", 100.0 * (off as f64 - on as f64) / off as f64)
}

fn partition_names(model: &Model) -> Vec<&str> {
    model.partitions.iter().map(|p| p.name.as_str()).collect()
}

fn budget_message(model: &Model, e: &RunError) -> String {
    let mut msg = format!("error: {e}\n");
    if let RunError::BudgetExceeded { stats, .. } = e {
        msg.push_str("partial statistics:\n");
        msg.push_str(&render_stats(&partition_names(model), stats));
    }
    msg
}

fn run(args: &RunArgs) -> Result<(), CliError> {
    let lpcc = args.lpcc == Switch::On;
    if args.engine == Engine::Sequential {
        if lpcc {
            return Err(CliError::Config(
                "--lpcc on requires --engine parallel".into(),
            ));
        }
        if args.sim.cancellation == CancellationArg::Aggressive {
            return Err(CliError::Config(
                "--cancellation applies to the parallel engine only".into(),
            ));
        }
    }
    if !lpcc && args.sim.tuning.any() {
        return Err(CliError::Config(
            "LPCC tuning options need --lpcc on".into(),
        ));
    }
    let model = load_model(&args.sim.model)?;
    let names = partition_names(&model);

    let report = match args.engine {
        Engine::Sequential => {
            let budget = args.sim.move_budget.unwrap_or(DEFAULT_MOVE_BUDGET);
            let start = Instant::now();
            let seq = run_sequential(&model, Rng::new(args.sim.seed), budget)
                .map_err(CliError::Kernel)?;
            FinalReport::from_sequential(&model, &seq.end, start.elapsed().as_secs_f64())
        }
        Engine::Parallel => {
            let config = parallel_config(&args.sim, lpcc)?;
            match run_parallel(model.clone(), Rng::new(args.sim.seed), &config) {
                Ok(out) => {
                    if !out.safety.is_clean() {
                        log::warn!("transport safety log: {:?}", out.safety);
                    }
                    out.report
                }
                Err(e) => {
                    if let (RunError::BudgetExceeded { stats, .. }, Some(path)) = (&e, &args.stats)
                    {
                        write_file(path, &stats_records(stats))?;
                    }
                    eprint!("{}", budget_message(&model, &e));
                    return Err(CliError::Run(e));
                }
            }
        }
    };

    let text = report.render_text(&model);
    match &args.report {
        Some(path) => write_file(path, &text)?,
        None => print!("{text}"),
    }
    if let Some(path) = &args.stats {
        write_file(path, &stats_records(&report.lp_stats))?;
    }
    if let Some(base) = &args.actuator_csv {
        for (name, trace) in names.iter().zip(&report.actuator_traces) {
            write_file(&actuator_csv_path(base, name), &actuator_csv(trace))?;
        }
    }
    Ok(())
}

fn compare(args: &CompareArgs) -> Result<(), CliError> {
    let model = load_model(&args.sim.model)?;
    let mut results = Vec::new();
    for lpcc in [true, false] {
        let config = parallel_config(&args.sim, lpcc)?;
        match run_parallel(model.clone(), Rng::new(args.sim.seed), &config) {
            Ok(out) => results.push(out.report),
            Err(e) => {
                eprint!("{}", budget_message(&model, &e));
                return Err(CliError::Run(e));
            }
        }
    }
    let (on, off) = (&results[0], &results[1]);
    print!(
        "{}",
        render_comparison(&partition_names(&model), &on.lp_stats, &off.lp_stats)
    );
    println!(
        "Wall clock: LPCC on {:.3} s, LPCC off {:.3} s",
        on.wall_secs, off.wall_secs
    );
    Ok(())
}

/// Runs the command line `args` (program name first); returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Run(a) => run(a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            if !matches!(e, CliError::Run(_)) {
                eprintln!("error: {e}");
            }
            e.exit_code()
        }
    }
}
