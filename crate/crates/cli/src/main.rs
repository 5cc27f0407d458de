use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cleargcd::commands::{self, SweepSpec, TrainOptions};
use cleargcd::{CliError, RunConfig};

/// Planted-shortcut category discovery: data, training, evaluation and
/// ablation sweeps.
///
/// Exit codes: 0 success, 1 runtime error (or a failed gradient check),
/// 2 configuration or usage error. CLEARGCD_THREADS caps internal
/// parallelism; every kernel is single-threaded, so it defaults to 1.
#[derive(Debug, Parser)]
#[command(name = "cleargcd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a planted-shortcut dataset and its labeled/unlabeled split.
    GenData {
        /// Run config JSON; only the `data` section is used.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for meta.json, images.bin and labels.bin.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory; writes metrics.jsonl, steps.jsonl and checkpoint/.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Disable semantic view alignment regardless of the config.
        #[arg(long)]
        no_sva: bool,
        /// Disable shortcut suppression regardless of the config.
        #[arg(long)]
        no_ssr: bool,
        /// Log elapsed milliseconds in wall_ms (otherwise 0, keeping logs byte-identical).
        #[arg(long)]
        record_wall_time: bool,
    },
    /// Score a checkpoint on the unlabeled part of a dataset.
    Eval {
        /// Checkpoint directory (meta.json + params.bin).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Seed of the background swap used for shortcut_gap.
        #[arg(long, default_value_t = 0)]
        swap_seed: u64,
    },
    /// Finite-difference check of every loss; exits 1 if any check fails.
    Gradcheck {
        /// Random instances per loss.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Inject a wrong backward rule chosen by this seed (negative control).
        #[arg(long)]
        fault_seed: Option<u64>,
    },
    /// Run a sweep over one axis and seeds; writes ablation.csv.
    Ablate {
        /// Base run config.
        #[arg(long)]
        config: PathBuf,
        /// Sweep JSON: {"axis": "components"|"replace_count"|"beta", "values": [...], "seeds": [...]}.
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let threads = commands::thread_cap()?;
    log::debug!("thread cap {threads}");
    match cli.command {
        Command::GenData { config, out } => {
            let config = RunConfig::load(&config)?;
            commands::gen_data(&config, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Train {
            config,
            data,
            out,
            no_sva,
            no_ssr,
            record_wall_time,
        } => {
            let config = RunConfig::load(&config)?;
            let options = TrainOptions {
                no_sva,
                no_ssr,
                record_wall_time,
            };
            let outcome = commands::train(&config, options, &data, &out)?;
            if let Some(last) = outcome.run.epochs.last().and_then(|e| e.probe) {
                println!(
                    "probe all {:.4} old {:.4} new {:.4} shortcut_gap {:.4}",
                    last.all, last.old, last.new, last.shortcut_gap
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            swap_seed,
        } => {
            let doc = commands::eval(&checkpoint, &data, &out, swap_seed)?;
            let r = &doc.report;
            println!(
                "all {:.4} old {:.4} new {:.4} shortcut_gap {:.4}",
                r.acc_all,
                r.acc_old,
                r.acc_new,
                r.shortcut_gap.unwrap_or(0.0)
            );
        }
        Command::Gradcheck {
            instances,
            seed,
            fault_seed,
        } => {
            let checks = commands::gradcheck(instances, seed, fault_seed)?;
            print!("{}", commands::gradcheck_table(&checks));
            return Ok(checks.iter().all(|c| c.passed()));
        }
        Command::Ablate { config, sweep, out } => {
            let config = RunConfig::load(&config)?;
            let sweep = SweepSpec::load(&sweep)?;
            let rows = commands::ablate(&config, &sweep, &out)?;
            print!("{}", commands::CSV_HEADER);
            for r in rows.iter().filter(|r| r.seed == "mean") {
                println!(
                    "{},mean,{:.4},{:.4},{:.4},{:.4}",
                    r.setting, r.acc_all, r.acc_old, r.acc_new, r.shortcut_gap
                );
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
