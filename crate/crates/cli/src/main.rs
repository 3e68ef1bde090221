use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hagroute::run::{self, EvalSplit, GRADCHECK_TOLERANCE};
use hagroute::{CliResult, Failure, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "hagroute", version, about = "Train and inspect hard-attention-gated models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `run.seed` and `model.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `data.path`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides `run.out_dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> CliResult<RunConfig> {
        RunConfig::load(
            &self.config,
            &Overrides {
                seed: self.seed,
                data: self.data.clone(),
                out_dir: self.out_dir.clone(),
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train, keep the best checkpoint by validation loss, report on the test split.
    Train(Common),
    /// Evaluate checkpoints; test-split results are consolidated across folds.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint manifest (repeat for several folds).
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
    },
    /// Finite-difference gradient check of the configured model and losses.
    Gradcheck(Common),
    /// Per-gate score statistics of a checkpoint.
    Gatestats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Write the configured synthetic dataset to CSV.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the dataset seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path; defaults to `<out-dir>/synthetic.csv`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(c) => {
            let s = run::run_train(&c.load()?)?;
            println!(
                "best epoch {} (val loss {:.6}); artifacts in {}",
                s.best_epoch,
                s.best_val_loss,
                s.out_dir.display()
            );
            println!("{}", serde_json::to_string_pretty(&s.test)?);
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let s = run::run_eval(&common.load()?, &checkpoint, split)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Gradcheck(c) => {
            let cfg = c.load()?;
            let s = run::run_gradcheck(&cfg)?;
            for (obj, module, err) in &s.per_module {
                println!("{obj:>14}  {module:<32} {err:.3e}");
            }
            println!("max relative error {:.3e} over {} parameters", s.max_rel_error, s.params);
            if c.out_dir.is_some() {
                let _lock = run::OutDirLock::acquire(&cfg.run.out_dir)?;
                run::write_gradcheck(&cfg.run.out_dir.join("gradcheck.csv"), &s)?;
            }
            if !s.passed() {
                return Err(Failure::Threshold(format!(
                    "max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
                    s.max_rel_error
                )));
            }
        }
        Command::Gatestats { checkpoint, out_dir } => {
            for r in run::run_gatestats(&checkpoint, &out_dir)? {
                println!("layer {} {:<16} n={:<4} mean {:.4} std {:.4}", r.layer, r.position, r.n, r.mean, r.std);
            }
        }
        Command::Synth {
            config,
            seed,
            data,
            out_dir,
        } => {
            let cfg = RunConfig::load(&config, &Overrides::default())?;
            let out = data.unwrap_or_else(|| out_dir.unwrap_or(cfg.run.out_dir.clone()).join("synthetic.csv"));
            println!("{}", run::run_synth(&cfg, seed, &out)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
