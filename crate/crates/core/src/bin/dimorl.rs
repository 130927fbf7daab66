use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dimorl::config::RunConfig;
use dimorl::error::{DimorlError, EXIT_DEGENERATE, EXIT_NUMERIC, EXIT_OK};
use dimorl::pipeline::{CellFilter, JobStatus, Pipeline, Stage, StageSummary};

#[derive(Parser)]
#[command(name = "dimorl", version, about = "Domain-invariant model-based offline RL pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate demonstrator datasets.
    GenData(Common),
    /// Train environment-model ensembles, one per (β, seed).
    TrainModel(Common),
    /// Score ensembles on held-out demonstrators.
    EvalModel(Common),
    /// Train offline SAC policies, one per (cell, seed).
    TrainPolicy(Common),
    /// Evaluate policies in the true environment.
    EvalPolicy(Common),
    /// Build the report from whatever artifacts exist.
    Analyze(Common),
    /// Run every stage in order.
    RunAll(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long, short)]
    config: PathBuf,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Concurrent (cell, seed) jobs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output root; overrides the config's `out`.
    #[arg(long, env = "DIMORL_OUT")]
    out: Option<PathBuf>,
    /// Restrict the sweep, e.g. `β=20,λ=1,h=5,σ=0`.
    #[arg(long)]
    cell: Option<String>,
}

fn pipeline(c: &Common) -> Result<Pipeline, DimorlError> {
    let config = RunConfig::parse_file(&c.config)?;
    let mut p = Pipeline::new(config).with_jobs(c.jobs);
    if let Some(out) = &c.out {
        p = p.with_out(out.clone());
    }
    if let Some(seed) = c.seed {
        p = p.with_seed(seed);
    }
    if let Some(cell) = &c.cell {
        p = p.with_filter(cell.parse::<CellFilter>()?);
    }
    Ok(p)
}

fn print_summary(s: &StageSummary) {
    for job in &s.jobs {
        let label = if job.label.is_empty() { "." } else { job.label.as_str() };
        eprintln!("{:<13} {label}: {}", s.stage, job.status);
    }
}

fn exit_code(summaries: &[StageSummary]) -> i32 {
    let failed = summaries.iter().any(|s| s.failed() > 0);
    let reported = summaries.iter().any(|s| s.stage == Stage::Analyze && s.jobs.iter().all(|j| !matches!(j.status, JobStatus::Failed(_))));
    match (failed, reported) {
        (true, false) => EXIT_NUMERIC,
        (true, true) => EXIT_DEGENERATE,
        (false, _) if summaries.iter().any(|s| s.degenerate) => EXIT_DEGENERATE,
        _ => EXIT_OK,
    }
}

fn run(cli: Cli) -> Result<i32, DimorlError> {
    let (stage, common) = match &cli.command {
        Command::GenData(c) => (Some(Stage::GenData), c),
        Command::TrainModel(c) => (Some(Stage::TrainModel), c),
        Command::EvalModel(c) => (Some(Stage::EvalModel), c),
        Command::TrainPolicy(c) => (Some(Stage::TrainPolicy), c),
        Command::EvalPolicy(c) => (Some(Stage::EvalPolicy), c),
        Command::Analyze(c) => (Some(Stage::Analyze), c),
        Command::RunAll(c) => (None, c),
    };
    let p = pipeline(common)?;
    let stages = stage.map_or_else(|| Stage::ALL.to_vec(), |s| vec![s]);
    let mut summaries = Vec::new();
    for s in stages {
        let summary = p.run_stage(s)?;
        print_summary(&summary);
        summaries.push(summary);
    }
    if summaries.iter().any(|s| s.stage == Stage::Analyze) {
        eprintln!("report: {}", p.report_dir().join("report.json").display());
    }
    Ok(exit_code(&summaries))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
