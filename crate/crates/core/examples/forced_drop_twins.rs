//! Two rollouts that differ only by one forced Roll-Drop firing: every
//! other environment stays bit-identical, and the touched environment
//! diverges from the drop onward.

use rolldrop::config::ExperimentConfig;
use rolldrop::rollout::{collect, CollectOptions, ForcedDrop};
use rolldrop::ppo::Trainer;

fn main() -> rolldrop::Result<()> {
    let mut cfg = ExperimentConfig::desk();
    cfg.ppo.num_envs = 8;
    cfg.ppo.minibatch_size = 400;
    let steps = 80;
    let trainer = Trainer::new(cfg, 3)?;
    let plain = trainer.policy.clone();
    let mut dropping = plain.clone();
    dropping.set_rolldrop_p(1e-9)?;

    let (env, step) = (2u32, 30usize);
    let opts = CollectOptions::default();
    let forced = CollectOptions {
        forced_drops: vec![ForcedDrop {
            env_id: env,
            step,
            units: vec![0, 1, 2],
        }],
        ..CollectOptions::default()
    };
    let a = collect(&plain, &trainer.value, &mut trainer.envs.clone(), steps, &opts)?;
    let b = collect(&dropping, &trainer.value, &mut trainer.envs.clone(), steps, &forced)?;

    for e in 0..a.num_envs {
        let first = (0..steps).find(|&t| a.action_at(e * steps + t) != b.action_at(e * steps + t));
        match first {
            Some(t) => println!("env {e}: first differing action at step {t}"),
            None => println!("env {e}: identical"),
        }
    }
    println!("drop events in the second run: {:?}", b.drop_events);
    Ok(())
}
