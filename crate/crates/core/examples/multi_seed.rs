//! Baseline and Roll-Drop reward curves over several seeds, reduced to a
//! handful of short runs.

use rolldrop::config::ExperimentConfig;
use rolldrop::harness::{mean_std, multi_seed_report, Variant};

fn main() -> rolldrop::Result<()> {
    let mut cfg = ExperimentConfig::desk();
    cfg.ppo.num_envs = 8;
    cfg.ppo.steps_per_env = 100;
    cfg.ppo.minibatch_size = 400;
    cfg.ppo.epochs = 2;
    cfg.ppo.total_iterations = 3;
    cfg.ppo.checkpoint_every = 0;
    let out = std::env::temp_dir().join("rolldrop_multi_seed");
    let report = multi_seed_report(&cfg, &[Variant::baseline(), Variant::rolldrop(1e-4)], &[0, 1, 2], &out)?;
    for v in &report.variants {
        let (m, s) = mean_std(&v.final_rewards(0.34));
        println!("{:<9} final reward {m:.4} +- {s:.4} over seeds {:?}", v.variant.name, v.seeds);
    }
    Ok(())
}
