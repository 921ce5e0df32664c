use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ffn_nas::pipeline::{Run, RunConfig};
use ffn_nas::search::Stage;
use ffn_nas::Error;

#[derive(Debug, Parser)]
#[command(
    name = "ffn-nas",
    version,
    about = "Search transformer feed-forward architectures at desk scale"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Where artifacts are read from and written to.
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
    /// `key=value` configuration override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the corpus and task fixtures, or check them against recorded hashes.
    GenData {
        #[arg(long)]
        verify: bool,
    },
    /// Train the multi-task teacher.
    TrainTeacher,
    /// Warm-up distillation of the supernet.
    PretrainSupernet,
    /// Run one search stage.
    Search {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
    },
    /// Retrain the final genotype with warm-up distillation.
    Retrain {
        /// Start from the multi-task stage-3 supernet and fine-tune directly.
        #[arg(long)]
        plus: bool,
        #[arg(long)]
        genotype: Option<PathBuf>,
    },
    /// Holdout metrics of retrained models and the run report.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Parameter and Mult-Add table.
    Cost,
    /// FFN nonlinearity surface over a 2-D input grid.
    NonlinSurface {
        #[arg(long)]
        genotype: Option<PathBuf>,
    },
    /// Search-vs-retrain rank correlation study.
    Rankcorr,
    /// Depth-doubled variant of the final genotype.
    Deepen {
        #[arg(long)]
        genotype: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingArtifact(_) => 2,
        Error::Config(_) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut overrides = cli.common.overrides;
    if let Some(seed) = cli.common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = RunConfig::resolve(cli.common.config.as_deref(), &overrides)?;
    let run = Run::new(cfg, cli.common.out_dir)?;
    match cli.command {
        Command::GenData { verify } => {
            let hashes = run.gen_data(verify)?;
            let verb = if verify { "verified" } else { "wrote" };
            println!("{verb} {} fixtures", hashes.len());
        }
        Command::TrainTeacher => {
            let m = run.train_teacher()?;
            println!("teacher: {} parameters", m.num_params());
        }
        Command::PretrainSupernet => {
            let h = run.pretrain_supernet()?;
            println!("supernet: {} steps, sha256 {}", h.steps(), h.sha256()?);
        }
        Command::Search { stage } => {
            let stage = Stage::from_number(stage).expect("range-checked by the parser");
            let g = run.search(stage)?;
            println!("stage {} winner: {}", stage.number(), g.to_json());
        }
        Command::Retrain { plus, genotype } => {
            let m = run.retrain(plus, genotype.as_deref())?;
            println!("retrained: {} parameters", m.num_params());
        }
        Command::Eval { model } => {
            let v = run.eval(model.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
        Command::Cost => print!("{}", run.cost()?),
        Command::NonlinSurface { genotype } => {
            let csv = run.surface(genotype.as_deref())?;
            let rows = csv.lines().filter(|l| !l.starts_with('#')).count() - 1;
            println!("surface: {rows} rows");
        }
        Command::Rankcorr => {
            let v = run.rankcorr()?;
            println!("tau overall {} per task {}", v["overall"], v["per_task"]);
        }
        Command::Deepen { genotype } => {
            let g = run.deepen(genotype.as_deref())?;
            println!("deepened to {} layers", g.layers.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                // usage errors are configuration errors
                _ => ExitCode::from(3),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
