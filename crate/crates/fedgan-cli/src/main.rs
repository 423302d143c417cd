//! `fedgan`: deterministic federated GAN experiments from JSON configs.
//!
//! A config file holds either a single run (an object without a `kind`
//! key) or an experiment plan (`kind` is one of `client_sweep`,
//! `learning_curve`, `attack`, `single`). Plans expand to a matrix of
//! runs over architectures, client counts and seeds. All outputs land
//! under `--out`: `results.csv` with one row per metric round,
//! checkpoints under `checkpoints/<run_id>/round-NNNNNN/`, and data or
//! summary files from the other subcommands.
//!
//! Every non-timing output is a pure function of the config, so reruns
//! are byte-identical except for the `wall_seconds` column.

use std::error::Error;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedgan::experiment::{
    execute_run, load_config, parse_results_csv, rows_to_csv, run_experiment, summarize,
    summary_to_csv, summary_to_text, write_data_files, ConfigFile, ExperimentPlan, ResultRow,
    RunRecord,
};
use fedgan::RunConfig;

#[derive(Parser)]
#[command(name = "fedgan", version, about = "Deterministic federated GAN simulator")]
struct Cli {
    /// Worker threads for the run matrix; 0 picks the core count.
    #[arg(long, global = true, env = "FEDGAN_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the datasets a config trains on to <out>/data/.
    GenData(ConfigArgs),
    /// Execute one run: results.csv plus a checkpoint per metric round.
    Run(RunArgs),
    /// Execute a whole experiment plan.
    Sweep(ConfigArgs),
    /// Execute a plan that has an adversary configured.
    Attack(ConfigArgs),
    /// Summarise <out>/results.csv into summary.csv and a table.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run config or experiment plan.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Replace the seed (for plans: the whole seed list).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Checkpoint directory (round-NNNNNN) to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory containing results.csv.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

type CliError = Box<dyn Error>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match &cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args, false),
        Command::Attack(args) => cmd_sweep(args, true),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Loads a config that must boil down to exactly one run.
fn single_run(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    match load_config(&args.config)? {
        ConfigFile::Run(mut config) => {
            if let Some(seed) = args.seed {
                config.seed = seed;
            }
            Ok(*config)
        }
        ConfigFile::Plan(plan) => {
            let mut configs = expand_plan(*plan, args.seed)?;
            if configs.len() > 1 {
                return Err(format!(
                    "config is a plan with {} runs; use `fedgan sweep`",
                    configs.len()
                )
                .into());
            }
            Ok(configs.remove(0))
        }
    }
}

fn expand_plan(mut plan: ExperimentPlan, seed: Option<u64>) -> Result<Vec<RunConfig>, CliError> {
    if let Some(seed) = seed {
        plan.seeds = vec![seed];
    }
    Ok(plan.to_run_configs()?)
}

fn cmd_gen_data(args: &ConfigArgs) -> Result<(), CliError> {
    let config = match load_config(&args.config)? {
        ConfigFile::Run(mut config) => {
            if let Some(seed) = args.seed {
                config.seed = seed;
            }
            *config
        }
        ConfigFile::Plan(plan) => {
            let mut configs = expand_plan(*plan, args.seed)?;
            if configs.len() > 1 {
                log::warn!(
                    "plan expands to {} runs; writing data for the first ({})",
                    configs.len(),
                    configs[0].run_id()
                );
            }
            configs.remove(0)
        }
    };
    for path in write_data_files(&config, &args.out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let config = single_run(&args.common)?;
    let out = &args.common.out;
    fs::create_dir_all(out)?;
    let clf = fedgan::experiment::load_or_train_classifier(&config.data.mixture, out)?;
    let record = execute_run(&config, out, &clf, args.resume.as_deref())?;
    fs::write(out.join("results.csv"), rows_to_csv(&record.rows))?;
    print_outcome(out, std::slice::from_ref(&record));
    match record.failure {
        Some(message) => Err(message.into()),
        None => Ok(()),
    }
}

fn cmd_sweep(args: &ConfigArgs, require_attack: bool) -> Result<(), CliError> {
    let plan = match load_config(&args.config)? {
        ConfigFile::Plan(plan) => *plan,
        ConfigFile::Run(_) => {
            return Err("config is a single run; use `fedgan run`".into());
        }
    };
    if require_attack && plan.attack.is_none() {
        return Err("attack needs a plan with an `attack` block".into());
    }
    let mut plan = plan;
    if let Some(seed) = args.seed {
        plan.seeds = vec![seed];
    }
    let records = run_experiment(&plan, &args.out)?;
    print_outcome(&args.out, &records);
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    let path = args.out.join("results.csv");
    let rows = parse_results_csv(&fs::read_to_string(&path)?)?;
    if rows.is_empty() {
        return Err(format!("{} has no result rows", path.display()).into());
    }
    let summaries = summarize(&rows);
    fs::write(args.out.join("summary.csv"), summary_to_csv(&summaries))?;
    print!("{}", summary_to_text(&summaries));
    Ok(())
}

fn print_outcome(out: &std::path::Path, records: &[RunRecord]) {
    let rows: Vec<ResultRow> = records.iter().flat_map(|r| r.rows.clone()).collect();
    print!("{}", summary_to_text(&summarize(&rows)));
    let failed = records.iter().filter(|r| r.failure.is_some()).count();
    println!(
        "{} run(s), {} failed; rows in {}",
        records.len(),
        failed,
        out.join("results.csv").display()
    );
    for record in records {
        if let Some(message) = &record.failure {
            println!("  {} failed: {}", record.config.run_id(), message);
        }
    }
}
