use std::sync::Arc;

use rolldrop::env::{generate_terrain, DoneReason, EnvConfig, Walker, ACT_DIM, OBS_DIM};
use rolldrop::nn::{Activation, DropoutSpec, NetMode, PolicyNet, ValueNet};
use rolldrop::rng::{EnvStreams, RngStream, StreamId};
use rolldrop::rollout::{collect, evaluate_episode, CollectOptions, EvalOptions, RolloutBatch, VecEnv};

fn nets(p: f64) -> (PolicyNet, ValueNet) {
    let mut rng = RngStream::new(8, 0, StreamId::Init);
    let policy = PolicyNet::init(
        &[OBS_DIM, 24, 16, ACT_DIM],
        Activation::Tanh,
        1.0,
        DropoutSpec {
            position: 2,
            rolldrop_p: p,
            train_p: 0.0,
        },
        &mut rng,
    )
    .unwrap();
    let value = ValueNet::init(&[OBS_DIM, 24, 16, 1], Activation::Tanh, &mut rng).unwrap();
    (policy, value)
}

fn walker(episode_steps: u64) -> Walker {
    let cfg = EnvConfig::default();
    let terrain = generate_terrain(&cfg.terrain, 3).unwrap();
    Walker::new(cfg, Arc::new(terrain))
        .unwrap()
        .with_episode_steps(episode_steps)
}

fn run(p: f64, envs: usize, steps: usize, seed: u64) -> RolloutBatch {
    let (policy, value) = nets(p);
    let mut v = VecEnv::new(walker(40), envs, seed);
    collect(&policy, &value, &mut v, steps, &CollectOptions::default()).unwrap()
}

#[test]
fn collection_is_reproducible() {
    assert_eq!(run(0.01, 4, 30, 2), run(0.01, 4, 30, 2));
    assert_ne!(run(0.01, 4, 30, 2).actions, run(0.01, 4, 30, 3).actions);
}

#[test]
fn env_trajectory_does_not_depend_on_env_count() {
    // each env owns its streams, so adding envs leaves the others untouched
    let small = run(0.01, 2, 25, 5);
    let large = run(0.01, 6, 25, 5);
    let n = 2 * 25;
    assert_eq!(small.actions[..n * ACT_DIM], large.actions[..n * ACT_DIM]);
    assert_eq!(small.rewards[..n], large.rewards[..n]);
}

#[test]
fn timeouts_reset_in_place() {
    let b = run(0.0, 3, 100, 1);
    for e in 0..3 {
        let dones: Vec<usize> = (0..100).filter(|&t| b.dones[e * 100 + t]).collect();
        assert!(!dones.is_empty(), "env {e} never reset");
        let first = dones[0];
        if b.done_reasons[e * 100 + first] == Some(DoneReason::Timeout) {
            assert_eq!(first, 39);
        }
        // the step after a reset starts a fresh episode from the spawn pose
        if first + 1 < 100 {
            assert_ne!(b.obs_at(e * 100 + first + 1), b.obs_at(e * 100 + first));
        }
    }
    assert!(b.finished_returns.len() >= 3);
}

#[test]
fn log_probs_match_stored_actions() {
    let (policy, _) = nets(0.0);
    let b = run(0.0, 2, 20, 4);
    for i in 0..b.len() {
        let mean = policy.mean_action(b.obs_at(i)).unwrap();
        let lp = rolldrop::nn::gaussian_log_prob(&mean, policy.log_std(), b.action_at(i)).unwrap();
        assert!((lp - b.log_probs[i]).abs() < 1e-12);
    }
}

#[test]
fn drop_events_are_sparse_and_logged() {
    let quiet = run(0.0, 4, 50, 6);
    assert!(quiet.drop_events.is_empty());
    let noisy = run(0.05, 4, 50, 6);
    assert!(!noisy.drop_events.is_empty());
    for ev in &noisy.drop_events {
        assert_eq!(ev.layer, 2);
        assert!(ev.env_id < 4 && ev.step < 50 && !ev.units.is_empty());
        assert!(ev.units.iter().all(|&u| u < 16));
    }
    // roughly p * width * transitions dropped units
    let units: usize = noisy.drop_events.iter().map(|e| e.units.len()).sum();
    let expected = 0.05 * 16.0 * 200.0;
    assert!((units as f64 - expected).abs() < 5.0 * expected.sqrt(), "{units} vs {expected}");
}

#[test]
fn batch_dump_round_trips() {
    let b = run(0.0, 2, 10, 7);
    let back = RolloutBatch::from_bytes(&b.to_bytes()).unwrap();
    assert_eq!(back.obs, b.obs);
    assert_eq!(back.actions, b.actions);
    assert_eq!(back.dones, b.dones);
    assert!(RolloutBatch::from_bytes(&b.to_bytes()[..20]).is_err());
    let mut csv = Vec::new();
    b.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 21);
}

#[test]
fn evaluation_streams_are_isolated() {
    let (policy, _) = nets(0.0);
    let w = walker(60).for_evaluation().with_episode_steps(60);
    let cmd = rolldrop::env::Command {
        vx: 0.5,
        pitch_rate: 0.0,
    };
    let opts = EvalOptions::default();
    let mut s1 = EnvStreams::new(1, 0);
    let mut s2 = EnvStreams::new(1, 0);
    // burning dropout and action-noise draws must not change a mean-action run
    s2.dropout.next_u64();
    s2.action_noise.next_u64();
    let a = evaluate_episode(&policy, &w, cmd, 0.2, 60, &mut s1, &opts).unwrap();
    let b = evaluate_episode(&policy, &w, cmd, 0.2, 60, &mut s2, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(s1.obs_noise.counter(), a.steps * OBS_DIM as u64);
    assert_eq!(s1.dropout.counter(), 0);
    let (_, ld) = policy
        .forward(&[0.0; OBS_DIM], NetMode::Update, &mut s1.dropout)
        .unwrap();
    assert!(ld.is_none());
}
