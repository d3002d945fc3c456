use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use minisinga::job::{self, Job};
use minisinga::Error;

/// Train, evaluate and plan partitioned neural nets.
#[derive(Parser)]
#[command(name = "minisinga", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training job and write its metrics as CSV.
    Train {
        config: PathBuf,
        /// Metrics file; standard output when absent.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Partition plan written by `plan`, applied to the net first.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the job's test data.
    Eval { config: PathBuf, checkpoint: PathBuf },
    /// Recommend per-layer partitioning for a config or a profile file.
    Plan {
        config: PathBuf,
        /// Effective mini-batch size, summed over the workers of a group.
        #[arg(long = "b", allow_negative_numbers = true)]
        b: i64,
        /// Workers per group.
        #[arg(long = "k", allow_negative_numbers = true)]
        k: i64,
    },
    /// Time iterations with and without overlapped parameter fetches.
    Bench {
        config: PathBuf,
        #[arg(long = "latency-ms", allow_negative_numbers = true)]
        latency_ms: f64,
        /// Batch sizes to time; the config's batch size when absent.
        #[arg(long, value_delimiter = ',')]
        batches: Vec<usize>,
        #[arg(long, default_value_t = 30)]
        iterations: u64,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, metrics, plan } => {
            let mut job = Job::load(&config)?;
            if let Some(p) = plan {
                job.apply_plan(&job::read_plan(&p)?)?;
            }
            let report = job::train(&job)?;
            match metrics {
                Some(path) => job::write_metrics(BufWriter::new(File::create(path)?), &report.metrics)?,
                None => job::write_metrics(io::stdout().lock(), &report.metrics)?,
            }
            let c = report.counters;
            eprintln!(
                "{:?}: {} iterations in {:.1} ms, {} messages, {} updates applied",
                report.framework, job.config.iterations, report.train_ms, c.messages_sent, c.updates_applied
            );
            for p in &report.checkpoints {
                eprintln!("checkpoint {}", p.display());
            }
        }
        Command::Eval { config, checkpoint } => {
            let job = Job::load(&config)?;
            let (iteration, m) = job::eval(&job, &checkpoint)?;
            print!("{}", job::eval_csv(iteration, &m)?);
        }
        Command::Plan { config, b, k } => {
            let out = job::plan(&config, b, k)?;
            let mut stdout = io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, &out)?;
            writeln!(stdout)?;
        }
        Command::Bench {
            config,
            latency_ms,
            batches,
            iterations,
        } => {
            let job = Job::load(&config)?;
            let batches = if batches.is_empty() { vec![job.config.batch_size] } else { batches };
            let rows = job::bench(&job, latency_ms, &batches, iterations)?;
            println!("{:>8} {:>11} {:>13} {:>14} {:>8}", "batch", "latency_ms", "overlap_on_ms", "overlap_off_ms", "benefit");
            for r in rows {
                println!(
                    "{:>8} {:>11.3} {:>13.3} {:>14.3} {:>7.1}%",
                    r.batch,
                    r.latency_ms,
                    r.overlap_on_ms,
                    r.overlap_off_ms,
                    100.0 * r.benefit()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Validation { .. } | Error::Config(_) | Error::Partition(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
