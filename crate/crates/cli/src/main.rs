use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use atlseg::commands::{
    self, cmd_ablate, cmd_count_params, cmd_eval, cmd_gradcheck, cmd_predict, cmd_train,
    format_param_report, render_metrics, CliError,
};
use atlseg::config::RunConfig;

/// Adapter-tuning segmentation workbench: train bottleneck adapters and a
/// mask decoder around a frozen ViT encoder, evaluate binary masks, and run
/// the full ablation grid.
#[derive(Parser)]
#[command(name = "atlseg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Path to a TOML run configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: `toy` or `vitl-shape`.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut config = match (&self.config, &self.preset) {
            (Some(path), None) => RunConfig::from_file(path)?,
            (None, Some(preset)) => RunConfig::preset(preset)?,
            (None, None) => {
                return Err(CliError::Usage(
                    "provide --config <path> or --preset <toy|vitl-shape>".into(),
                ))
            }
            (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
        };
        if let Some(seed) = self.seed {
            config.train.seed = seed;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Trains on the configured dataset and writes checkpoint, history CSV,
    /// final metrics and the effective config echo.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluates a checkpoint on its validation split (or a directory).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate this `images/` + `masks/` directory instead.
        #[arg(long)]
        dataset_dir: Option<PathBuf>,
    },
    /// Runs the full ablation grid and writes a CSV + aligned report.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated training seeds (default: the configured seed).
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Predicts a binary mask PGM for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints total/trainable parameter counts for a configuration.
    CountParams {
        #[command(flatten)]
        config: ConfigArgs,
        /// Count everything as trainable.
        #[arg(long)]
        all_trainable: bool,
    },
    /// Verifies reverse-mode gradients against finite differences.
    Gradcheck,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config } => {
            let config = config.resolve()?;
            let artifacts = cmd_train(&config)?;
            println!("effective config: {}", artifacts.output_dir.join("config.toml").display());
            println!("history:          {}", artifacts.output_dir.join("history.csv").display());
            println!("checkpoint:       {}", artifacts.checkpoint_path.display());
            println!();
            println!("{}", format_param_report(&artifacts.report));
            println!("final validation metrics:");
            print!("{}", render_metrics("trained", &artifacts.final_metrics));
            Ok(())
        }
        Command::Eval { checkpoint, dataset_dir } => {
            let metrics = cmd_eval(&checkpoint, dataset_dir.as_deref())?;
            print!("{}", render_metrics("eval", &metrics));
            Ok(())
        }
        Command::Ablate { config, seeds } => {
            let config = config.resolve()?;
            let seeds = match seeds {
                Some(list) => list
                    .split(',')
                    .map(|s| {
                        s.trim().parse::<u64>().map_err(|_| {
                            CliError::Usage(format!("bad seed {s:?} in --seeds"))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?,
                None => vec![config.train.seed],
            };
            if seeds.is_empty() {
                return Err(CliError::Usage("--seeds needs at least one value".into()));
            }
            let report = cmd_ablate(&config, &seeds)?;
            std::fs::create_dir_all(&config.output_dir)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            std::fs::write(config.output_dir.join("config.toml"), config.to_toml())
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let csv_path = config.output_dir.join("ablation.csv");
            std::fs::write(&csv_path, report.csv()).map_err(|e| CliError::Runtime(e.to_string()))?;
            print!("{}", report.render_table());
            println!("\nwrote {}", csv_path.display());
            if report.any_failed() {
                return Err(CliError::Runtime("one or more ablation runs failed".into()));
            }
            Ok(())
        }
        Command::Predict { checkpoint, image, out } => {
            cmd_predict(&checkpoint, &image, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::CountParams { config, all_trainable } => {
            let config = config.resolve()?;
            let report = cmd_count_params(&config, all_trainable)?;
            print!("{}", format_param_report(&report));
            Ok(())
        }
        Command::Gradcheck => {
            let report = cmd_gradcheck();
            print!("{}", report.render());
            if report.all_pass() {
                println!("all families < {:.0e}", commands::GRADCHECK_TOLERANCE);
                Ok(())
            } else {
                Err(CliError::Runtime("gradient check failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
