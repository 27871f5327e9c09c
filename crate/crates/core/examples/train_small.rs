//! Train a reduced desk configuration for a few iterations and print the
//! learning curve.
//!
//! `cargo run --release --example train_small -- [iterations] [out_dir]`

use std::path::PathBuf;

use rolldrop::config::ExperimentConfig;
use rolldrop::ppo::train;

fn main() -> rolldrop::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: u64 = args.next().map_or(5, |a| a.parse().expect("iterations"));
    let out = args.next().map_or_else(|| std::env::temp_dir().join("rolldrop_train_small"), PathBuf::from);

    let mut cfg = ExperimentConfig::desk();
    cfg.ppo.num_envs = 16;
    cfg.ppo.steps_per_env = 100;
    cfg.ppo.minibatch_size = 400;
    cfg.ppo.epochs = 4;
    cfg.ppo.total_iterations = iterations;
    cfg.ppo.checkpoint_every = 0;
    cfg.ppo.rolldrop_p = 1e-3;

    let outcome = train(&cfg, 0, &out, &mut |_, _| {})?;
    println!("iteration  reward/step  sigma  drops  episodes");
    for r in &outcome.records {
        println!(
            "{:>9}  {:>11.4}  {:>5.3}  {:>5}  {:>8}",
            r.iteration, r.mean_reward, r.mean_sigma, r.drop_events, r.episodes_finished
        );
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
