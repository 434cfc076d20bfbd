use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use oht_es::cli::{self, exit_code, parse_config_text, RunConfig};
use oht_es::harness::{Prop1Estimator, DEFAULT_ANCHORS};

#[derive(Parser)]
#[command(name = "oht-es", version, about = "Online hyper-parameter tuning with evolutionary strategies")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and log evaluation curves.
    Run {
        /// key=value config file; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        algo: Option<String>,
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        delay: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra key=value overrides, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Compare the ES hyper-gradient estimate with the analytic value.
    Prop1 {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.01, 0.001])]
        sigmas: Vec<f64>,
        #[arg(long = "n", value_delimiter = ',', default_values_t = vec![1_000_000])]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Estimator::Antithetic)]
        estimator: Estimator,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Aggregate normalized scores over run directories.
    Stats {
        /// Run directories, optionally labelled as LABEL=DIR.
        #[arg(required = true)]
        runs: Vec<String>,
        /// task,low,high file; defaults to the built-in anchors.
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Estimator {
    Plain,
    Antithetic,
}

fn fail(e: oht_es::Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e) as u8)
}

fn main() -> ExitCode {
    match Args::parse().command {
        Command::Run { config, algo, env, delay, steps, seed, out, set } => {
            let mut map = match config.map(std::fs::read_to_string).transpose() {
                Ok(text) => match parse_config_text(text.as_deref().unwrap_or("")) {
                    Ok(m) => m,
                    Err(e) => return fail(e),
                },
                Err(e) => return fail(e.into()),
            };
            let flags = [
                ("algo", algo),
                ("env", env),
                ("delay", delay.map(|v| v.to_string())),
                ("steps", steps.map(|v| v.to_string())),
                ("seed", seed.map(|v| v.to_string())),
                ("out", out.map(|p| p.display().to_string())),
            ];
            for (k, v) in flags {
                if let Some(v) = v {
                    map.insert(k.to_string(), v);
                }
            }
            match parse_config_text(&set.join("\n")) {
                Ok(extra) => map.extend(extra),
                Err(e) => return fail(e),
            }
            let cfg = match RunConfig::from_map(&map) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match cli::run(&cfg) {
                Ok(s) => {
                    println!("{} steps, {} evaluations, final eval return {}", s.env_steps, s.rows, cli::fmt_sig9(s.final_eval));
                    ExitCode::SUCCESS
                }
                Err(f) => {
                    if f.checkpointed {
                        eprintln!("checkpoint written to {}", cfg.out.join("checkpoint.bin").display());
                    }
                    fail(f.error)
                }
            }
        }
        Command::Prop1 { sigmas, counts, seed, estimator, out } => {
            let form = match estimator {
                Estimator::Plain => Prop1Estimator::Plain,
                Estimator::Antithetic => Prop1Estimator::Antithetic,
            };
            match cli::prop1(&sigmas, &counts, seed, form, &out) {
                Ok(rows) => {
                    println!("wrote {} rows to {}", rows.len(), out.join("prop1.csv").display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Stats { runs, anchors, out } => {
            let runs: Vec<(String, PathBuf)> = runs
                .iter()
                .map(|r| match r.split_once('=') {
                    Some((label, dir)) => (label.to_string(), PathBuf::from(dir)),
                    None => {
                        let p = PathBuf::from(r);
                        let label = p.file_name().map_or_else(|| r.clone(), |n| n.to_string_lossy().into_owned());
                        (label, p)
                    }
                })
                .collect();
            let text = match anchors.map(std::fs::read_to_string).transpose() {
                Ok(t) => t.unwrap_or_else(|| DEFAULT_ANCHORS.to_string()),
                Err(e) => return fail(e.into()),
            };
            match cli::stats(&runs, &text, &out) {
                Ok(c) => {
                    println!("wrote statistics for {} algorithms to {}", c.len(), out.join("stats.csv").display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
    }
}
