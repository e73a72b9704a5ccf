use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use darn_cli::*;

#[derive(Parser)]
#[command(name = "darn", version, about = "Train and evaluate complexity-aware segmentation decoders on synthetic scenes")]
#[command(after_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes metrics.csv, last.ckpt and best.ckpt.
    Train(ConfigArgs),
    /// Validation metrics of a checkpoint; writes eval.csv.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the five-arm component ladder over several seeds; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Corruption grid, mCE and FGSM for a checkpoint; writes robustness.csv.
    Robustness {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// One training run per value of a numeric key; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        key: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write the configured synthetic dataset to a DSYN file.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
}

fn config(a: &ConfigArgs) -> Result<darn_core::config::RunConfig> {
    load_config(a.config.as_deref(), &a.set)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(a) => {
            let out = cmd_train(&config(&a)?)?;
            println!(
                "best val mIoU {:.6} after {} epochs; outputs in {}",
                out.trainer.best_miou,
                out.trainer.epoch,
                out.out_dir.display()
            );
        }
        Command::Eval { cfg, checkpoint } => print!("{}", cmd_eval(&config(&cfg)?, &checkpoint)?),
        Command::Ablate { cfg, seeds } => print!("{}", cmd_ablate(&config(&cfg)?, &seeds)?),
        Command::Robustness { cfg, checkpoint } => print!("{}", cmd_robustness(&config(&cfg)?, &checkpoint)?.0),
        Command::Sweep { cfg, key, values } => print!("{}", cmd_sweep(&config(&cfg)?, &key, &values)?),
        Command::Gradcheck { seed, inject_fault } => {
            let (text, ok) = cmd_gradcheck(seed, inject_fault.as_deref())?;
            print!("{text}");
            println!("{}", if ok { "gradcheck PASS" } else { "gradcheck FAIL" });
            return Ok(ok);
        }
        Command::GenData { cfg, output, split } => {
            let split = match split {
                SplitArg::Train => SplitChoice::Train,
                SplitArg::Val => SplitChoice::Val,
                SplitArg::All => SplitChoice::All,
            };
            let n = cmd_gen_data(&config(&cfg)?, split, &output)?;
            println!("wrote {n} samples to {}", output.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
