//! Success rate of a policy across observation-noise levels.
//!
//! `cargo run --release --example noise_sweep -- [policy.bin]`
//! Without a checkpoint an untrained policy is swept, which mostly shows
//! the bookkeeping.

use std::path::Path;

use rolldrop::config::ExperimentConfig;
use rolldrop::harness::{run_noise_sweep, NoiseSweepSpec};
use rolldrop::nn::load_policy;
use rolldrop::ppo::Trainer;

fn main() -> rolldrop::Result<()> {
    let cfg = ExperimentConfig::desk();
    let policy = match std::env::args().nth(1) {
        Some(p) => load_policy(Path::new(&p))?,
        None => Trainer::new(cfg.clone(), 0)?.policy,
    };
    let spec = NoiseSweepSpec {
        levels: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
        runs_per_level: 20,
        ..cfg.eval.clone()
    };
    let result = run_noise_sweep(&policy, &cfg.env, &spec)?;
    println!("noise  success  falls  too_short");
    for l in &result.levels {
        println!(
            "{:>5.2}  {:>7.2}  {:>5}  {:>9}",
            l.level, l.success_rate, l.failures_fall, l.failures_distance
        );
    }
    Ok(())
}
