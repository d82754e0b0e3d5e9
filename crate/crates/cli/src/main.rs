use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use study_cli::{AblationKind, CliError, ExperimentConfig, ModelKind, StageDir};
use study_core::model::MaskMode;
use study_core::pipeline::Grouping;

#[derive(Parser)]
#[command(name = "study", version, about = "Socially-aware sequential recommender experiments")]
struct Args {
    /// TOML experiment config; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory; overrides the config's.
    #[arg(long, global = true)]
    stage_dir: Option<PathBuf>,
    /// Model to train or evaluate. Evaluation defaults to every model.
    #[arg(long, global = true, value_parser = parse::<ModelKind>)]
    model: Option<ModelKind>,
    /// Attention mask of the joint model.
    #[arg(long, global = true, value_parser = parse::<MaskMode>)]
    mask_mode: Option<MaskMode>,
    /// How the joint model groups students.
    #[arg(long, global = true, value_parser = parse::<Grouping>)]
    grouping: Option<Grouping>,
    /// Use the built-in 2,000-student smoke config as the base.
    #[arg(long, global = true)]
    smoke: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort.
    Generate,
    /// Split, build the vocabulary, tokenize and pack.
    Preprocess,
    /// Train one model (study by default).
    Train,
    /// Rank every test event.
    Eval,
    /// Run a comparative study: force-mix, grouping or tapering.
    Ablate {
        #[arg(value_parser = parse::<AblationKind>)]
        kind: AblationKind,
    },
    /// Aggregate evaluated models into metric, table and slice reports.
    Report,
    /// Every stage from generation to report.
    RunAll,
    /// Print the resolved config.
    ShowConfig,
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

fn resolve(args: &Args) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match (&args.config, args.smoke) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, true) => ExperimentConfig::smoke(),
        (None, false) => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &args.stage_dir {
        cfg.paths.stage_dir = dir.clone();
    }
    if let Some(mode) = args.mask_mode {
        cfg.decoder.mask_mode = mode;
    }
    if let Some(g) = args.grouping {
        cfg.pipeline.grouping = g;
    }
    Ok(cfg.resolved())
}

fn run(args: Args) -> Result<(), CliError> {
    let cfg = resolve(&args)?;
    if let Command::ShowConfig = args.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let stages = StageDir::new(cfg)?;
    match args.command {
        Command::Generate => drop(stages.generate()?),
        Command::Preprocess => drop(stages.preprocess()?),
        Command::Train => drop(stages.train(args.model.unwrap_or(ModelKind::Study))?),
        Command::Eval => match args.model {
            Some(m) => drop(stages.eval(m)?),
            None => {
                for m in ModelKind::ALL {
                    stages.eval(m)?;
                }
            }
        },
        Command::Ablate { kind } => drop(stages.ablate(kind)?),
        Command::Report => {
            stages.report()?;
            print!("{}", std::fs::read_to_string(stages.path("reports/table.txt"))?);
        }
        Command::RunAll => {
            stages.run_all()?;
            print!("{}", std::fs::read_to_string(stages.path("reports/table.txt"))?);
        }
        Command::ShowConfig => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
