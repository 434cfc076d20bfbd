//! Recomputes the score anchors in `data/anchors.csv`.
//!
//! low: mean return of the uniform-random policy over 100 episodes.
//! high: best evaluation return seen in default TD3 reference runs.
//!
//! Usage: cargo run --release --example calibrate_anchors -- [steps] [seeds]

use oht_es::cli::{self, parse_config_text, RunConfig};
use oht_es::envs::{make_env, ENV_NAMES};
use oht_es::harness::evaluate_policy;
use oht_es::rollout::UniformPolicy;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).map_or(Ok(30_000), |s| s.parse())?;
    let seeds: u64 = args.get(2).map_or(Ok(2), |s| s.parse())?;
    let dir = std::env::temp_dir().join("oht-es-anchors");
    println!("task,low,high");
    for task in ENV_NAMES {
        let env = make_env(task, 1)?;
        let low = evaluate_policy(&UniformPolicy::for_env(env.as_ref()), env.as_ref(), 100, 0)?;
        let mut high = f64::NEG_INFINITY;
        for seed in 0..seeds {
            let out = dir.join(format!("{task}-{seed}"));
            let text = format!("algo=td3\nenv={task}\nsteps={steps}\nseed={seed}\nout={}\n", out.display());
            let cfg = RunConfig::from_map(&parse_config_text(&text)?)?;
            cli::run(&cfg).map_err(|f| f.error)?;
            let log = cli::read_run(&out)?;
            high = log.eval.iter().cloned().fold(high, f64::max);
        }
        println!("{task},{},{}", cli::fmt_sig9(low), cli::fmt_sig9(high));
    }
    Ok(())
}
