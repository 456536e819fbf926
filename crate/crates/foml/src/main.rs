use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use foml::config::{parse_flags, ExperimentConfig};
use foml::dataset::{self, Encoding};
use foml::runner::{self, RunError};

#[derive(Parser)]
#[command(name = "foml", version, about = "Fully online meta-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment. Settings come from --config and `--key=value` flags.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Continue a run from a checkpoint. The configuration defaults to the
    /// config.toml next to the checkpoint.
    Resume {
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Convert an IDX image/label pair (e.g. MNIST) to a FOMLDS v1 file.
    ConvertDataset {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "binary")]
        encoding: Encoding,
        /// Keep only the first N images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run one experiment per value of a config key, e.g. `--param K
    /// --values 1,2,3,5,10`.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        quiet: bool,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn read_text(path: Option<&PathBuf>) -> Result<String, RunError> {
    match path {
        Some(p) => std::fs::read_to_string(p).map_err(|source| RunError::Io {
            path: p.display().to_string(),
            source,
        }),
        None => Ok(String::new()),
    }
}

fn execute(command: Command) -> Result<(), RunError> {
    match command {
        Command::Run {
            config,
            quiet,
            overrides,
        } => {
            let flags = parse_flags(&overrides)?;
            let cfg = ExperimentConfig::from_text_and_flags(&read_text(config.as_ref())?, &flags)?;
            let record = runner::run_experiment(&cfg, quiet)?;
            report(&cfg, &record);
        }
        Command::Resume {
            checkpoint,
            config,
            quiet,
            overrides,
        } => {
            let path = config.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .unwrap_or(std::path::Path::new("."))
                    .join(runner::CONFIG_FILE)
            });
            let flags = parse_flags(&overrides)?;
            let cfg = ExperimentConfig::from_text_and_flags(&read_text(Some(&path))?, &flags)?;
            let record = runner::resume(&checkpoint, &cfg, quiet)?;
            report(&cfg, &record);
        }
        Command::ConvertDataset {
            images,
            labels,
            out,
            encoding,
            limit,
        } => {
            let data = dataset::convert_idx(&images, &labels, &out, encoding, limit)?;
            println!(
                "wrote {} images of {}x{} to {}",
                data.len(),
                data.height,
                data.width,
                out.display()
            );
        }
        Command::Sweep {
            config,
            param,
            values,
            quiet,
            overrides,
        } => {
            let flags = parse_flags(&overrides)?;
            let text = read_text(config.as_ref())?;
            let cfg = ExperimentConfig::from_text_and_flags(&text, &flags)?;
            let points = runner::sweep(&cfg, &param, &values, &text, &flags, quiet)?;
            for p in points {
                println!(
                    "{param} = {}: last-10 error {:.4}, mean error {:.4}",
                    p.value, p.last10_error, p.mean_error
                );
            }
        }
    }
    Ok(())
}

fn report(cfg: &ExperimentConfig, record: &foml::foml_core::eval::MetricsRecord) {
    if let Some(cum) = record.cum_mean_errors().last() {
        println!(
            "{} tasks, last-10 error {:.4}, cumulative error {:.4}; outputs in {}",
            record.per_task.len(),
            record.last_tasks_mean_error(10),
            cum,
            cfg.run.out_dir.display()
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
