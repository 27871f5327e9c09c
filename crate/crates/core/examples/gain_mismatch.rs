//! Evaluate two policies at the training stiffness and at a softer
//! deployment stiffness.
//!
//! `cargo run --release --example gain_mismatch -- [rolldrop.bin baseline.bin]`

use std::path::Path;

use rolldrop::config::ExperimentConfig;
use rolldrop::harness::{run_mismatch, MismatchSpec};
use rolldrop::nn::load_policy;
use rolldrop::ppo::Trainer;

fn main() -> rolldrop::Result<()> {
    let cfg = ExperimentConfig::desk();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (a, b) = if args.len() == 2 {
        (load_policy(Path::new(&args[0]))?, load_policy(Path::new(&args[1]))?)
    } else {
        (Trainer::new(cfg.clone(), 1)?.policy, Trainer::new(cfg.clone(), 2)?.policy)
    };
    let spec = MismatchSpec {
        episodes: 10,
        ..cfg.mismatch.clone()
    };
    let rows = run_mismatch(&spec, &cfg.env, &[("rolldrop", &a), ("baseline", &b)])?;
    println!("variant    kp  falls  vx_rms  mean|qd|");
    for r in rows {
        println!(
            "{:<9} {:>4}  {:>5}  {:>6.3}  {:>8.3}",
            r.variant, r.kp, r.falls, r.vx_rms, r.mean_abs_qd
        );
    }
    Ok(())
}
