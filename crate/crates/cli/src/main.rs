use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adapter_cli::commands::{self, default_n_list};
use adapter_cli::{CliError, ExperimentConfig};
use adapter_core::synthdata::Dataset;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adapters", version, about = "Adapter transfer experiments on synthetic CTC tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a TOML spec.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train under the configured transfer policy.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Report mean CTC loss and WER of a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Top-n fine-tune vs top-n adapter sweep.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Held-out set; defaults to the `data.eval_fraction` tail of --data.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated layer counts; defaults to 1,2,4,...,num_layers.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
    },
    /// Parameter accounting and multi-task storage projection.
    Params {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        tasks: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let s = commands::synth(&config, &out, seed)?;
            println!("utterances {} frames {} vocab {}", s.utterances, s.frames, s.vocab_size);
        }
        Command::Train { config, data, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let o = commands::train(&cfg, &data, &out)?;
            if let Some(s) = o.last_step {
                println!("step {} loss {:.6} lr {:e}", s.step, s.loss, s.lr);
            }
            println!(
                "trainable {} / {} ({:.4}); {:?} checkpoint {}",
                o.report.trainable,
                o.report.total,
                o.report.fraction,
                o.checkpoint_kind,
                out.display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            out,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let r = commands::eval(&cfg, &checkpoint, &data)?;
            println!("loss {:.6} wer {:.4} ({} edits / {} tokens)", r.mean_loss, r.wer, r.edits, r.reference_tokens);
            if let Some(out) = out {
                write(&out, &commands::eval_csv(&cfg, &r))?;
            }
        }
        Command::Ablate {
            config,
            data,
            eval,
            out,
            seed,
            n,
        } => {
            let cfg = load_config(&config, seed)?;
            let ns = n.unwrap_or_else(|| default_n_list(cfg.model.num_layers));
            let full = Dataset::load(&data)?;
            let (train, test) = match eval {
                Some(p) => (full, Dataset::load(&p)?),
                None if cfg.data.eval_fraction > 0.0 => full.split_tail(cfg.data.eval_fraction),
                None => {
                    return Err(CliError::Config(
                        "ablate needs --eval or a positive data.eval_fraction".into(),
                    ))
                }
            };
            let rows = commands::ablate(&cfg, &train, &test, &ns)?;
            let csv = commands::ablation_csv(&cfg, &rows);
            print!("{csv}");
            write(&out, &csv)?;
        }
        Command::Params { config, out, tasks, seed } => {
            let cfg = load_config(&config, seed)?;
            let rows = commands::params(&cfg, tasks)?;
            let csv = commands::params_csv(&cfg, &rows);
            print!("{csv}");
            let configured = adapter_core::transfer::count_params_for(
                &cfg.model,
                cfg.adapter_config()?.as_ref().filter(|_| cfg.policy().is_ok_and(|p| p.mode.needs_adapters())),
                &cfg.policy()?,
            )?;
            println!("\n# breakdown for {}", cfg.policy()?);
            print!("{}", configured.to_csv());
            if let Some(out) = out {
                write(&out, &csv)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
