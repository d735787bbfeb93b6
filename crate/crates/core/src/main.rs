use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fuzzboost::cli::{cmd_evaluate, cmd_experiment, cmd_fit, cmd_predict, cmd_synth, ExperimentConfig};
use fuzzboost::Error;

#[derive(Parser)]
#[command(name = "fuzzboost", version, about = "Gradient-boosted Takagi-Sugeno fuzzy regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an ensemble and write model.json and trace.csv.
    Fit(ConfigArgs),
    /// Predict a CSV with a trained model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Append per-rule terms of the stage with the largest factor.
        #[arg(long)]
        explain: bool,
    },
    /// Report RMSE of a trained model on a labelled CSV.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Target column; defaults to the one the model was trained on.
        #[arg(long)]
        target: Option<String>,
    },
    /// Run a fixed-vs-dynamic factor comparison or a cluster/fuzzifier sweep.
    Experiment(ConfigArgs),
    /// Write the synthetic dataset as CSV.
    Synth {
        #[arg(long, default_value_t = 4000)]
        count: usize,
        #[arg(long, default_value_t = 1.0)]
        min: f64,
        #[arg(long, default_value_t = 4000.0)]
        max: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Error> {
    let overrides = args
        .overrides
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    ExperimentConfig::from_file(args.config.as_deref(), &overrides)
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|source| Error::Write {
            path: p.to_path_buf(),
            source,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Fit(args) => {
            let summary = cmd_fit(&load_config(&args)?)?;
            println!("{summary}");
            println!("wrote {} and {}", summary.model_path.display(), summary.trace_path.display());
        }
        Command::Predict {
            model,
            input,
            output,
            explain,
        } => {
            let text = cmd_predict(&model, &input, explain)?;
            write_output(output.as_deref(), &text)?;
        }
        Command::Evaluate { model, input, target } => {
            let report = cmd_evaluate(&model, &input, target.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Experiment(args) => {
            let summary = cmd_experiment(&load_config(&args)?)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Synth { count, min, max, out } => cmd_synth(count, min, max, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
