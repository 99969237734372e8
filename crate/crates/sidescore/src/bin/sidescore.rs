//! Thin command-line wrapper over the library's `cli` module.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sidescore::cli;

#[derive(Parser)]
#[command(
    name = "sidescore",
    version,
    about = "Score learning with side information"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config; writes checkpoint, manifest, history
    Train {
        #[arg(long)]
        config: PathBuf,
        /// output directory (default: $SIDESCORE_OUT or ./runs)
        #[arg(long)]
        out: Option<PathBuf>,
        /// override the training seed from the config
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the held-out split; writes metrics files
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// evaluate this CSV instead of the config's test split
        #[arg(long, requires = "schema")]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        schema: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write posterior means and variances as delimited text
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, requires = "schema")]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        schema: Option<PathBuf>,
        /// output file
        #[arg(long)]
        out: PathBuf,
        /// extra columns: side, label, score, inferred_side (comma separated)
        #[arg(long, value_delimiter = ',')]
        with: Vec<String>,
    },
    /// PCA-project an embeddings file to 2-D and render a colored scatter
    PlotLatent {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        color_by: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the divergence property suites and print a pass/fail report
    Divcheck {
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// negative control: evaluate the unscaled-mean interpolant, which
        /// must fail the endpoint property
        #[arg(long, default_value_t = false)]
        inject_broken_mean: bool,
    },
}

fn run(args: Args) -> sidescore::Result<ExitCode> {
    match args.command {
        Command::Train { config, out, seed } => {
            let outputs = cli::cmd_train(&config, out.as_deref(), seed)?;
            println!("checkpoint: {}", outputs.checkpoint.display());
            println!("manifest:   {}", outputs.manifest.display());
            println!("history:    {}", outputs.history.display());
            if let Some(l) = outputs.final_losses {
                println!("final total loss: {}", l.total);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoint,
            config,
            data,
            schema,
            out,
        } => {
            let overrides = data.as_deref().zip(schema.as_deref());
            let (report, path) = cli::cmd_eval(&checkpoint, &config, overrides, out.as_deref())?;
            print!("{}", report.to_text());
            println!("written: {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Embed {
            checkpoint,
            config,
            data,
            schema,
            out,
            with,
        } => {
            let overrides = data.as_deref().zip(schema.as_deref());
            let extras = with
                .iter()
                .map(|s| cli::ExtraColumn::parse(s))
                .collect::<sidescore::Result<Vec<_>>>()?;
            let path = cli::cmd_embed(&checkpoint, &config, overrides, &out, &extras)?;
            println!("written: {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::PlotLatent {
            embeddings,
            color_by,
            out,
        } => {
            let path = cli::cmd_plot_latent(&embeddings, &color_by, &out)?;
            println!("written: {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Divcheck {
            trials,
            seed,
            inject_broken_mean,
        } => {
            let report = cli::cmd_divcheck(trials, seed, inject_broken_mean);
            print!("{}", report.to_text());
            if report.all_pass() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match run(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
