mod commands;
mod config;
mod manifest;
mod report;
mod results;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use commands::{Failure, Run, RuntimeContext};

const OUTPUT_ENV: &str = "ATA_OUTPUT_DIR";

/// Few-shot meta-learning experiments with adversarial task augmentation.
#[derive(Parser)]
#[command(name = "ata", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the encoder with a linear classifier on the source domain.
    Pretrain(RunArgs),
    /// Meta-train with task augmentation; writes a checkpoint and a JSONL log.
    MetaTrain(RunArgs),
    /// Evaluate a checkpoint on the target domains.
    Eval(RunArgs),
    /// Fine-tuning baseline and meta-learner adaptation on target tasks.
    Finetune(RunArgs),
    /// Compare ascent without regulariser, with the Euclidean and with the MMD one.
    AblateReg(RunArgs),
    /// Aggregate result CSV files into a table and an optional plot.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment file (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config entry, e.g. `--set augment.t_max=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory [default: config `output_dir`, then $ATA_OUTPUT_DIR, then `runs`].
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Result CSV files [default: <output dir>/results.csv].
    csv: Vec<PathBuf>,
    /// Output directory [default: $ATA_OUTPUT_DIR, then `runs`].
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Also write an SVG bar chart.
    #[arg(long)]
    plot: bool,
}

fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn prepare(command: &'static str, args: RunArgs) -> Result<Run, Failure> {
    let (cfg, resolved) = config::load(&args.config, &args.overrides).map_err(Failure::Usage)?;
    let out = args
        .output_dir
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(default_output_dir);
    fs::create_dir_all(&out)
        .with_context(|| format!("cannot create output directory {}", out.display()))
        .runtime()?;
    Ok(Run {
        command,
        cfg,
        resolved,
        config_path: args.config,
        out,
    })
}

fn report(args: ReportArgs) -> Result<(), Failure> {
    let out = args.output_dir.unwrap_or_else(default_output_dir);
    let files = if args.csv.is_empty() { vec![out.join("results.csv")] } else { args.csv };
    let mut rows = Vec::new();
    for f in &files {
        rows.extend(results::read(f).runtime()?);
    }
    let table = report::table(&rows);
    print!("{table}");
    fs::create_dir_all(&out).runtime()?;
    fs::write(out.join("report.md"), &table).runtime()?;
    if args.plot {
        let path = out.join("report.svg");
        fs::write(&path, report::svg(&rows)).runtime()?;
        println!("plot written to {}", path.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Pretrain(a) => commands::pretrain(&prepare("pretrain", a)?),
        Command::MetaTrain(a) => commands::meta_train(&prepare("meta-train", a)?),
        Command::Eval(a) => commands::eval(&prepare("eval", a)?),
        Command::Finetune(a) => commands::finetune(&prepare("finetune", a)?),
        Command::AblateReg(a) => commands::ablate_reg(&prepare("ablate-reg", a)?),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
