use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rectflow::cli::{
    cmd_eval, cmd_gradcheck, cmd_ood, cmd_sample, cmd_simulate, cmd_speed, cmd_train, exit_code,
    load_config, Overrides, OUTPUT_DIR_ENV,
};
use rectflow::error::{Error, Result};

/// Rectangular normalizing flows: train on data concentrated near a
/// low-dimensional manifold, evaluate exact log-likelihoods on it, and
/// inspect what the injective decoder learned.
#[derive(Parser)]
#[command(name = "rectflow", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON; unknown keys are rejected).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory (beats RECTFLOW_OUTPUT_DIR, which
    /// beats the config file).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override the config's epoch cap.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Override the reconstruction weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Override the learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Override the batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override the early-stopping patience.
    #[arg(long)]
    patience: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<rectflow::cli::ExperimentConfig> {
        let overrides = Overrides {
            seed: self.seed,
            output_dir: self.output_dir.clone().or_else(env_output_dir),
            max_epochs: self.max_epochs,
            beta: self.beta,
            lr: self.lr,
            batch_size: self.batch_size,
            patience: self.patience,
        };
        load_config(&self.config, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw the synthetic circle dataset and write it as a headerless CSV.
    Simulate(ConfigArgs),
    /// Train the configured model; writes metric CSVs, the best and final
    /// checkpoints, and a JSON summary.
    Train(ConfigArgs),
    /// Exact log-likelihoods, reconstruction errors, and the moment
    /// distance for a checkpoint, on its test split or on a given CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Headerless numeric CSV to score instead of the test split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint (deterministic per checkpoint).
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Score in- vs out-of-distribution CSVs by log-likelihood; writes a
    /// JSON report and a histogram CSV.
    Ood {
        #[arg(long)]
        checkpoint: PathBuf,
        /// In-distribution points (headerless CSV).
        #[arg(long = "in", value_name = "CSV")]
        in_csv: PathBuf,
        /// Out-of-distribution points (headerless CSV).
        #[arg(long = "out", value_name = "CSV")]
        out_csv: PathBuf,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Map a uniform latent grid through the decoder and record the arc
    /// length of each step (one-dimensional latent spaces only).
    Speed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = -3.0, allow_hyphen_values = true)]
        lo: f64,
        #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
        hi: f64,
        #[arg(long, default_value_t = 513)]
        steps: usize,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run the gradient and solver self-checks on the configured model;
    /// exits nonzero if any suite fails.
    Gradcheck(ConfigArgs),
}

fn env_output_dir() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => {
            let cfg = args.load()?;
            let path = cmd_simulate(&cfg)?;
            println!(
                "wrote {} ({} points, seed {})",
                path.display(),
                cfg.dataset.circle_n(),
                cfg.seed
            );
        }
        Command::Train(args) => {
            let cfg = args.load()?;
            let out = cmd_train(&cfg)?;
            println!(
                "trained for {} epochs (best value {} at epoch {}{})",
                out.report.epochs.len(),
                out.report.best_value,
                out.report.best_epoch,
                if out.report.stopped_early {
                    ", stopped early"
                } else {
                    ""
                },
            );
            println!("checkpoint: {}", out.best_checkpoint.display());
            println!("metrics:    {}", out.metrics_csv.display());
        }
        Command::Eval {
            checkpoint,
            data,
            output_dir,
        } => {
            let dir = output_dir.or_else(env_output_dir);
            let out = cmd_eval(&checkpoint, data.as_deref(), dir.as_deref())?;
            let s = &out.summary;
            match s.mean_log_likelihood {
                Some(ll) => println!(
                    "{} points ({} excluded), mean log-likelihood {ll}, mean reconstruction {}, moment distance {}",
                    s.points, s.excluded, s.mean_reconstruction, s.fid_like
                ),
                None => println!(
                    "{} points, all excluded as ill-conditioned; mean reconstruction {}",
                    s.points, s.mean_reconstruction
                ),
            }
            println!("wrote {}", out.csv.display());
        }
        Command::Sample {
            checkpoint,
            n,
            output_dir,
        } => {
            let dir = output_dir.or_else(env_output_dir);
            let path = cmd_sample(&checkpoint, n, dir.as_deref())?;
            println!("wrote {} ({n} samples)", path.display());
        }
        Command::Ood {
            checkpoint,
            in_csv,
            out_csv,
            bins,
            output_dir,
        } => {
            let dir = output_dir.or_else(env_output_dir);
            let out = cmd_ood(&checkpoint, &in_csv, &out_csv, bins, dir.as_deref())?;
            println!(
                "threshold {} separates the groups with accuracy {}",
                out.report.threshold, out.report.accuracy
            );
            println!("wrote {}", out.report_json.display());
            println!("wrote {}", out.histogram_csv.display());
        }
        Command::Speed {
            checkpoint,
            lo,
            hi,
            steps,
            output_dir,
        } => {
            let dir = output_dir.or_else(env_output_dir);
            let out = cmd_speed(&checkpoint, lo, hi, steps, dir.as_deref())?;
            println!("wrote {} (max/min speed ratio {})", out.csv.display(), out.ratio);
        }
        Command::Gradcheck(args) => {
            let cfg = args.load()?;
            let report = cmd_gradcheck(&cfg)?;
            print!("{}", report.table());
            if !report.passed() {
                return Err(Error::GradCheck(format!(
                    "{} of {} suites failed",
                    report.failures(),
                    report.lines.len()
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Clap handles --help/--version and usage errors itself (exit code 2).
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
