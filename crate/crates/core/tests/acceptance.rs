//! Acceptance criteria.
//!
//! Every criterion prints one line, `PASS`, `FAIL` or `SKIP`, with its
//! number, name, measured values and wall time. The property suites (1-7)
//! always run. The hour-scale reproductions (8-13) run only with
//! `cargo test --test acceptance -- --ignored` (or `--include-ignored`);
//! their training runs are cached under `ROLLDROP_ACCEPTANCE_DIR`
//! (default: `<target>/tmp/acceptance-runs`) and reused when the stored
//! manifest matches.
//!
//! A positional argument filters criteria by key substring.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rolldrop::config::{load_config, ExperimentConfig, ExperimentManifest};
use rolldrop::env::dynamics::{contact_forces, kinematics, BodyParams, Cholesky, ContactParams, NDOF};
use rolldrop::env::{generate_terrain, Command, EnvConfig, Terrain, TerrainConfig, Walker, ACT_DIM, OBS_DIM};
use rolldrop::harness::{
    inject_noise, mean_std, run_mismatch, write_mismatch_csv, MAX_NOISE, run_noise_sweep, tail_mean, MismatchSpec, NoiseSweepSpec, SweepResult, Variant,
};
use rolldrop::nn::{
    gaussian_log_prob, gaussian_log_prob_grads, load_policy, Activation, BatchTape, DropoutSpec, Mlp, NetMode,
    PolicyNet, Tape, SIGMA_MIN,
};
use rolldrop::ppo::{gae, read_train_records, train, update, Optimizer, TrainRecord, Trainer, UpdateBatch};
use rolldrop::rng::{EnvStreams, RngStream, StreamId};
use rolldrop::rollout::{collect, CollectOptions, ForcedDrop, RolloutBatch};

type Outcome = Result<String, String>;

struct Criterion {
    id: u8,
    key: &'static str,
    slow: bool,
    budget_s: Option<f64>,
    run: fn() -> Outcome,
}

fn criteria() -> Vec<Criterion> {
    let c = |id, key, slow, budget_s, run| Criterion {
        id,
        key,
        slow,
        budget_s,
        run,
    };
    vec![
        c(1, "gradient_exactness", false, Some(10.0), gradient_exactness as fn() -> Outcome),
        c(2, "gae_oracle", false, Some(5.0), gae_oracle),
        c(3, "twin_run_forced_drop", false, Some(30.0), twin_run_forced_drop),
        c(4, "observation_noise_properties", false, Some(5.0), observation_noise_properties),
        c(5, "determinism_from_manifest", false, Some(300.0), determinism_from_manifest),
        c(6, "sigma_floor", false, Some(30.0), sigma_floor),
        c(7, "physics_sanity", false, Some(30.0), physics_sanity),
        c(8, "training_convergence", true, None, training_convergence),
        c(9, "sigma_divergence_ordering", true, None, sigma_divergence_ordering),
        c(10, "robustness_ordering", true, None, robustness_ordering),
        c(11, "train_dropout_detriment", true, None, train_dropout_detriment),
        c(12, "gain_mismatch_ordering", true, None, gain_mismatch_ordering),
        c(13, "multi_seed_consistency", true, None, multi_seed_consistency),
    ]
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let only_slow = args.iter().any(|a| a == "--ignored");
    let with_slow = only_slow || args.iter().any(|a| a == "--include-ignored");
    let filters: Vec<&str> = args
        .iter()
        .filter(|a| !a.starts_with('-'))
        .map(String::as_str)
        .collect();
    if args.iter().any(|a| a == "--list") {
        for c in criteria() {
            println!("{}: test", c.key);
        }
        return;
    }

    let mut failed = 0;
    for c in criteria() {
        if !filters.is_empty() && !filters.iter().any(|f| c.key.contains(f)) {
            continue;
        }
        if c.slow && !with_slow {
            println!("SKIP [{:>2}] {} (slow suite, run with --ignored)", c.id, c.key);
            continue;
        }
        if !c.slow && only_slow {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let result = match (result, c.budget_s) {
            (Ok(d), Some(b)) if secs > b => Err(format!("{d}; runtime {secs:.1} s exceeds {b} s")),
            (r, _) => r,
        };
        match result {
            Ok(d) => println!("PASS [{:>2}] {}: {d} ({secs:.1} s)", c.id, c.key),
            Err(d) => {
                failed += 1;
                println!("FAIL [{:>2}] {}: {d} ({secs:.1} s)", c.id, c.key);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// 1. Gradient exactness

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn random_sizes(rng: &mut RngStream) -> Vec<usize> {
    let mut sizes = vec![1 + rng.below(4)];
    for _ in 0..1 + rng.below(3) {
        sizes.push(1 + rng.below(6));
    }
    sizes.push(1 + rng.below(3));
    sizes
}

fn mlp_param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn gradient_exactness() -> Outcome {
    const H: f64 = 1e-5;
    let mut rng = RngStream::new(11, 0, StreamId::Init);
    let (mut nets, mut checked, mut worst) = (0, 0usize, 0.0f64);
    while nets < 100 {
        let sizes = random_sizes(&mut rng);
        let out = *sizes.last().unwrap();
        let gaussian_head = nets % 3 == 2;
        let total = mlp_param_count(&sizes) + if gaussian_head { out } else { 0 };
        if total > 64 {
            continue;
        }
        let act = if rng.below(4) == 0 { Activation::Identity } else { Activation::Tanh };
        let mut trunk = Mlp::init(&sizes, act, 1.0, &mut rng).map_err(err)?;
        for p in trunk.params_mut() {
            *p = rng.uniform_range(-1.0, 1.0);
        }
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.uniform_range(-2.0, 2.0)).collect();


        let (analytic, theta0, loss): (Vec<f64>, Vec<f64>, Box<dyn Fn(&[f64]) -> f64>) = if gaussian_head {
            let log_std: Vec<f64> = (0..out).map(|_| rng.uniform_range(-1.0, 0.5)).collect();
            let spec = DropoutSpec {
                position: 1,
                rolldrop_p: 0.0,
                train_p: 0.0,
            };
            let policy = PolicyNet::new(trunk, log_std, spec).map_err(err)?;
            let a: Vec<f64> = (0..out).map(|_| rng.uniform_range(-1.5, 1.5)).collect();
            let mut tape = Tape::default();
            let mut unused = RngStream::new(0, 0, StreamId::Dropout);
            policy
                .forward_tape(&x, NetMode::Update, &mut unused, &[], &mut tape)
                .map_err(err)?;
            let (gm, gs) = gaussian_log_prob_grads(tape.output(), policy.log_std(), &a);
            let mut g = vec![0.0; policy.num_params()];
            policy.backward(&tape, &gm, &gs, &mut g).map_err(err)?;
            let theta0 = policy.flat_params();
            let f = move |theta: &[f64]| {
                let mut p = policy.clone();
                p.set_flat_params(theta).unwrap();
                let m = p.mean_action(&x).unwrap();
                gaussian_log_prob(&m, p.log_std(), &a).unwrap()
            };
            (g, theta0, Box::new(f))
        } else {
            // dropout-style mask on a random hidden layer for half the nets
            let mask = (rng.below(2) == 0).then(|| {
                let l = rng.below(sizes.len() - 2);
                let m: Vec<f64> = (0..sizes[l + 1])
                    .map(|_| if rng.below(3) == 0 { 0.0 } else { 1.25 })
                    .collect();
                (l, m)
            });
            let c: Vec<f64> = (0..out).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let mut tape = Tape::default();
            trunk.forward_tape(&x, mask.clone(), &mut tape).map_err(err)?;
            let mut g = vec![0.0; trunk.params().len()];
            trunk.backward(&tape, &c, &mut g).map_err(err)?;

            // the batched kernel must agree on a batch of three copies
            let rows = 3;
            let mut bt = BatchTape::default();
            let xs: Vec<f64> = x.iter().cycle().take(rows * x.len()).copied().collect();
            let bmask = mask
                .clone()
                .map(|(l, m)| (l, m.iter().cycle().take(rows * m.len()).copied().collect()));
            trunk.forward_batch(&xs, rows, bmask, &mut bt).map_err(err)?;
            let cs: Vec<f64> = c.iter().cycle().take(rows * c.len()).copied().collect();
            let mut gb = vec![0.0; g.len()];
            trunk.backward_batch(&bt, &cs, &mut gb).map_err(err)?;
            for (a, b) in g.iter().zip(&gb) {
                check(rel_err(3.0 * a, *b) <= 1e-12, || format!("batched gradient {b} vs 3 x {a}"))?;
            }

            let theta0 = trunk.params().to_vec();
            let f = move |theta: &[f64]| {
                let mut t = trunk.clone();
                t.params_mut().copy_from_slice(theta);
                let mut tape = Tape::default();
                t.forward_tape(&x, mask.clone(), &mut tape).unwrap();
                tape.output().iter().zip(&c).map(|(y, c)| y * c).sum()
            };
            (g, theta0, Box::new(f))
        };

        for i in 0..theta0.len() {
            let mut tp = theta0.clone();
            let mut tm = theta0.clone();
            tp[i] += H;
            tm[i] -= H;
            let fd = (loss(&tp) - loss(&tm)) / (2.0 * H);
            let e = rel_err(analytic[i], fd);
            check(e <= 1e-5, || {
                format!("net {nets} sizes {sizes:?} param {i}: analytic {} vs fd {fd} (rel {e:.2e})", analytic[i])
            })?;
            worst = worst.max(e);
        }
        checked += theta0.len();
        nets += 1;
    }
    Ok(format!("100 nets, {checked} parameters, worst relative error {worst:.2e} <= 1e-5"))
}

// ---------------------------------------------------------------------------
// 2. GAE against weighted n-step sums

/// `(1 - λ) Σ λ^(n-1) A^(n)` with the tail weight on the longest n-step
/// estimate the segment allows.
fn brute_force_gae(r: &[f64], v: &[f64], d: &[bool], boot: f64, g: f64, l: f64) -> Vec<f64> {
    let n = r.len();
    (0..n)
        .map(|t| {
            let mut h = 0;
            let mut terminal = false;
            for &done in &d[t..] {
                h += 1;
                if done {
                    terminal = true;
                    break;
                }
            }
            let nstep = |m: usize| {
                let mut s = 0.0;
                for k in 0..m {
                    s += g.powi(k as i32) * r[t + k];
                }
                let tail = if m < h {
                    v[t + m]
                } else if terminal {
                    0.0
                } else {
                    boot
                };
                s + g.powi(m as i32) * tail - v[t]
            };
            let mut a = 0.0;
            for m in 1..h {
                a += (1.0 - l) * l.powi(m as i32 - 1) * nstep(m);
            }
            a + l.powi(h as i32 - 1) * nstep(h)
        })
        .collect()
}

fn gae_oracle() -> Outcome {
    let grid = [0.0, 0.5, 0.95, 1.0];
    let mut rng = RngStream::new(13, 0, StreamId::Init);
    let (mut cases, mut worst) = (0usize, 0.0f64);
    for len in 1..=6usize {
        for pattern in 0..1u32 << len {
            let dones: Vec<bool> = (0..len).map(|i| pattern >> i & 1 == 1).collect();
            for _ in 0..8 {
                let r: Vec<f64> = (0..len).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
                let v: Vec<f64> = (0..len).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
                let boot = rng.uniform_range(-2.0, 2.0);
                for &g in &grid {
                    for &l in &grid {
                        let (adv, ret) = gae(&r, &v, &dones, boot, g, l).map_err(err)?;
                        let want = brute_force_gae(&r, &v, &dones, boot, g, l);
                        for t in 0..len {
                            let diff = (adv[t] - want[t]).abs();
                            worst = worst.max(diff);
                            check(diff <= 1e-12, || {
                                format!("len {len} dones {dones:?} g {g} l {l} t {t}: {} vs {}", adv[t], want[t])
                            })?;
                            check(ret[t] == adv[t] + v[t], || "returns are not advantage + value".into())?;
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{cases} trajectories x (gamma, lambda) pairs, max abs diff {worst:.2e} <= 1e-12"))
}

// ---------------------------------------------------------------------------
// 3. Twin runs with a forced drop

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn step_identical(a: &RolloutBatch, b: &RolloutBatch, i: usize) -> bool {
    same_bits(a.obs_at(i), b.obs_at(i))
        && same_bits(a.action_at(i), b.action_at(i))
        && a.log_probs[i].to_bits() == b.log_probs[i].to_bits()
        && a.rewards[i].to_bits() == b.rewards[i].to_bits()
        && a.raw_rewards[i].to_bits() == b.raw_rewards[i].to_bits()
        && a.values[i].to_bits() == b.values[i].to_bits()
        && a.dones[i] == b.dones[i]
}

fn twin_run_forced_drop() -> Outcome {
    let cfg = ExperimentConfig::desk();
    let trainer = Trainer::new(cfg.clone(), 7).map_err(err)?;
    let plain = trainer.policy.clone();
    let mut dropping = plain.clone();
    dropping.set_rolldrop_p(1e-9).map_err(err)?;
    let (e, k, unit) = (37u32, 50usize, 5usize);
    let steps = cfg.ppo.steps_per_env;
    let opts = CollectOptions {
        reward_scale: cfg.ppo.reward_scale,
        timeout_bootstrap_gamma: Some(cfg.ppo.gamma),
        ..CollectOptions::default()
    };
    let forced = CollectOptions {
        forced_drops: vec![ForcedDrop {
            env_id: e,
            step: k,
            units: vec![unit],
        }],
        ..opts.clone()
    };
    let mut envs_a = trainer.envs.clone();
    let mut envs_b = trainer.envs.clone();
    let a = collect(&plain, &trainer.value, &mut envs_a, steps, &opts).map_err(err)?;
    let b = collect(&dropping, &trainer.value, &mut envs_b, steps, &forced).map_err(err)?;

    check(a.drop_events.is_empty(), || format!("p = 0 run logged {} drops", a.drop_events.len()))?;
    check(
        b.drop_events.len() == 1
            && b.drop_events[0].env_id == e
            && b.drop_events[0].step == k as u64
            && b.drop_events[0].units == vec![unit],
        || format!("p > 0 run logged {:?}, expected only the forced drop", b.drop_events),
    )?;
    let mut first_diff = None;
    for env in 0..a.num_envs {
        for t in 0..steps {
            let same = step_identical(&a, &b, env * steps + t);
            if env as u32 != e || t < k {
                check(same, || format!("env {env} step {t} differs"))?;
            } else if !same && first_diff.is_none() {
                first_diff = Some(t);
            }
        }
        if env as u32 != e {
            check(
                a.bootstrap_values[env].to_bits() == b.bootstrap_values[env].to_bits()
                    && envs_a.slots[env].state == envs_b.slots[env].state,
                || format!("env {env} final state differs"),
            )?;
        }
    }
    let t = first_diff.ok_or_else(|| format!("env {e} never diverged after the forced drop"))?;
    Ok(format!(
        "{} envs x {steps} steps identical except env {e} from step {t} (drop at step {k})",
        a.num_envs
    ))
}

// ---------------------------------------------------------------------------
// 4. Observation noise model

fn observation_noise_properties() -> Outcome {
    let mut gen = RngStream::new(17, 0, StreamId::Init);
    let mut noise = RngStream::new(17, 0, StreamId::ObsNoise);
    let (mut components, mut worst) = (0usize, 0.0f64);
    for case in 0..100_000 {
        let len = 1 + gen.below(80);
        let s: Vec<f64> = match case % 4 {
            1 => vec![0.0; len],
            _ => (0..len)
                .map(|_| {
                    if gen.below(6) == 0 {
                        0.0
                    } else {
                        gen.uniform_range(-1.0, 1.0) * 10f64.powi(gen.below(7) as i32 - 3)
                    }
                })
                .collect(),
        };
        let n = if case % 4 == 0 { 0.0 } else { gen.uniform_range(0.0, MAX_NOISE) };
        let mut out = s.clone();
        let before = noise.counter();
        inject_noise(&mut out, n, &mut noise).map_err(err)?;
        check(noise.counter() - before == len as u64, || "noise must draw one word per component".into())?;
        for (x, y) in s.iter().zip(&out) {
            let d = (y - x).abs();
            // one rounding of the final sum is allowed on top of n|s|
            check(d <= n * x.abs() + f64::EPSILON * x.abs(), || {
                format!("case {case}: |{y} - {x}| > {n} * |{x}|")
            })?;
            if n == 0.0 {
                check(y.to_bits() == x.to_bits(), || format!("n = 0 changed {x} to {y}"))?;
            }
            if *x == 0.0 {
                check(*y == 0.0, || format!("zero component moved to {y}"))?;
            }
            if *x != 0.0 && n > 0.0 {
                worst = worst.max(d / (n * x.abs()));
            }
        }
        components += len;
    }
    Ok(format!(
        "100000 cases, {components} components, max |ds|/(n|s|) = {worst:.6}, n = 0 identity and zero fixed point exact"
    ))
}

// ---------------------------------------------------------------------------
// 5. Determinism from one manifest

fn strip_last_column(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect()
}

fn dir_files(dir: &Path) -> Result<Vec<String>, String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(err)?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    names.sort();
    Ok(names)
}

fn determinism_from_manifest() -> Outcome {
    let root = tempfile::tempdir().map_err(err)?;
    let mut cfg = ExperimentConfig::desk();
    cfg.ppo.total_iterations = 20;
    cfg.ppo.checkpoint_every = 10;
    cfg.ppo.rolldrop_p = 1e-3;
    let manifest = root.path().join("manifest.json");
    ExperimentManifest::new(cfg, 5, "train", root.path())
        .write(&manifest)
        .map_err(err)?;
    let m = ExperimentManifest::load(&manifest).map_err(err)?;
    check(load_config(&manifest).map_err(err)? == m.config, || "config does not round-trip".into())?;

    let da = root.path().join("a");
    let db = root.path().join("b");
    let a = train(&m.config, m.seed, &da, &mut |_, _| {}).map_err(err)?;
    let b = train(&m.config, m.seed, &db, &mut |_, _| {}).map_err(err)?;
    check(a.records.len() == 20 && b.records.len() == 20, || "expected 20 records per run".into())?;
    for (i, (x, y)) in a.records.iter().zip(&b.records).enumerate() {
        check(x.same_outcome(y), || format!("TrainRecord of iteration {i} differs"))?;
    }
    let ca = dir_files(&da.join("checkpoints"))?;
    check(ca == dir_files(&db.join("checkpoints"))?, || "checkpoint sets differ".into())?;
    check(ca.len() == 4, || format!("expected 4 checkpoint files, found {ca:?}"))?;
    let mut compared = 0;
    let files = ca
        .iter()
        .map(|n| format!("checkpoints/{n}"))
        .chain(["policy.bin", "value.bin", "drop_events.csv"].map(String::from));
    for f in files {
        let (x, y) = (fs::read(da.join(&f)).map_err(err)?, fs::read(db.join(&f)).map_err(err)?);
        check(x == y, || format!("{f} differs"))?;
        compared += x.len();
    }
    let ra = fs::read_to_string(da.join("train_record.csv")).map_err(err)?;
    let rb = fs::read_to_string(db.join("train_record.csv")).map_err(err)?;
    check(strip_last_column(&ra) == strip_last_column(&rb), || "train_record.csv differs".into())?;
    let drops: u64 = a.records.iter().map(|r| r.drop_events).sum();
    Ok(format!(
        "2 x 20 iterations: {} checkpoint files, {compared} bytes and 20 records identical ({drops} drop events)",
        ca.len()
    ))
}

// ---------------------------------------------------------------------------
// 6. Sigma floor

fn sigma_floor() -> Outcome {
    let mut cfg = ExperimentConfig::desk();
    cfg.ppo.learning_rate = 0.05;
    cfg.ppo.epochs = 1;
    cfg.ppo.minibatch_size = 256;
    let rows = cfg.ppo.minibatch_size;
    let Trainer {
        mut policy, mut value, ..
    } = Trainer::new(cfg.clone(), 3).map_err(err)?;
    let mut opt = Optimizer::new(&policy, &value, &cfg.ppo);
    let mut gen = RngStream::new(3, 1, StreamId::Init);
    let mut shuffle = RngStream::new(3, 0, StreamId::Shuffle);
    let mut td = RngStream::new(3, 0, StreamId::TrainDropout);
    let mut reached = None;
    for step in 0..50 {
        // actions at the mean with positive advantage: the surrogate only
        // improves by narrowing the Gaussian
        let obs: Vec<f64> = (0..rows * OBS_DIM).map(|_| gen.uniform_range(-1.0, 1.0)).collect();
        let mut actions = Vec::with_capacity(rows * ACT_DIM);
        let mut old = Vec::with_capacity(rows);
        for r in 0..rows {
            let m = policy.mean_action(&obs[r * OBS_DIM..(r + 1) * OBS_DIM]).map_err(err)?;
            old.push(gaussian_log_prob(&m, policy.log_std(), &m).map_err(err)?);
            actions.extend(m);
        }
        let batch = UpdateBatch {
            obs,
            actions,
            old_log_probs: old,
            advantages: vec![1.0; rows],
            returns: vec![0.0; rows],
        };
        let stats = update(&mut policy, &mut value, &mut opt, &batch, &cfg.ppo, &mut shuffle, &mut td).map_err(err)?;
        check(stats.steps == 1, || format!("expected one optimiser step, got {}", stats.steps))?;
        let min = policy.std().into_iter().fold(f64::INFINITY, f64::min);
        check(min >= SIGMA_MIN, || format!("step {step}: std {min} below the floor"))?;
        if min == SIGMA_MIN && reached.is_none() {
            reached = Some(step + 1);
        }
    }
    let min = policy.std().into_iter().fold(f64::INFINITY, f64::min);
    check(min == SIGMA_MIN, || format!("min std {min:.17} after 50 updates, expected exactly {SIGMA_MIN}"))?;
    Ok(format!(
        "min std = {min} exactly after 50 updates (floor first reached at update {})",
        reached.unwrap_or(0)
    ))
}

// ---------------------------------------------------------------------------
// 7. Physics sanity

fn free_fall_drift() -> Result<(f64, f64), String> {
    let mut cfg = EnvConfig::default();
    cfg.kp = 0.0;
    cfg.kd = 0.0;
    cfg.motor_static_friction = 0.0;
    cfg.motor_dynamic_friction = 0.0;
    let walker = Walker::new(cfg.clone(), Arc::new(Terrain::flat(-50.0, 100.0, 0.5)))
        .map_err(err)?
        .with_episode_steps(u64::MAX);
    let mut s = walker.state_at(0.0, cfg.nominal_pose, Command::default());
    s.q[1] = 5.0;
    s.qd = [0.4, 0.5, 0.3, 0.8, -0.6, -0.5, 0.7];
    let e0 = walker.energy(&s);
    let target = s.joints();
    let mut drift = 0.0f64;
    for _ in 0..cfg.steps_for(1.0) {
        let out = walker.step(&s, &target);
        check(out.state.contacts == [false, false], || "free fall touched the ground".into())?;
        check(out.state.joints().iter().all(|q| q.abs() < cfg.joint_limit), || "joint limit reached".into())?;
        s = out.state;
        drift = drift.max((walker.energy(&s) - e0).abs());
    }
    Ok((drift / e0.abs(), drift))
}

fn physics_sanity() -> Outcome {
    let (rel, joules) = free_fall_drift()?;
    check(rel < 0.01, || format!("free-fall energy drift {:.3}% >= 1%", rel * 100.0))?;

    let cfg = EnvConfig::default();
    let body = BodyParams::default();
    let params = ContactParams::default();
    let mu = cfg.ground_friction;
    let terrain = generate_terrain(&TerrainConfig::rough(0.03, 0.25), 9).map_err(err)?;
    let (lo, hi) = terrain.extent();
    let mid = 0.5 * (lo + hi);
    let mut rng = RngStream::new(29, 0, StreamId::Terrain);
    let (mut touching, mut released, mut sliding) = (0usize, 0usize, 0usize);
    for case in 0..10_000 {
        let mut q = [
            mid + rng.uniform_range(-1.0, 1.0),
            0.0,
            rng.uniform_range(-0.4, 0.4),
            0.5 + rng.uniform_range(-0.4, 0.4),
            -1.0 + rng.uniform_range(-0.4, 0.4),
            0.5 + rng.uniform_range(-0.4, 0.4),
            -1.0 + rng.uniform_range(-0.4, 0.4),
        ];
        let k0 = kinematics(&body, &q, &[0.0; NDOF]);
        let clearance = k0
            .feet
            .iter()
            .map(|f| f.pos[1] - terrain.height(f.pos[0]))
            .fold(f64::INFINITY, f64::min);
        q[1] = -clearance - rng.uniform_range(-0.01, 0.03);
        let mut qd = [0.0; NDOF];
        for (i, v) in qd.iter_mut().enumerate() {
            let scale = if i < 3 { 3.0 } else { 6.0 };
            *v = rng.uniform_range(-scale, scale);
        }
        let kin = kinematics(&body, &q, &qd);
        let chol = Cholesky::factor(&kin.mass_matrix()).ok_or("mass matrix is not positive definite")?;
        let mut free = kin.passive_force(cfg.gravity);
        for f in &mut free[3..] {
            *f += rng.uniform_range(-10.0, 10.0);
        }
        let anchors: [Option<[f64; 2]>; 2] = std::array::from_fn(|leg| {
            let p = kin.feet[leg].pos;
            let shift = rng.uniform_range(-0.02, 0.02);
            (rng.below(2) == 0).then_some([p[0] + shift, p[1]])
        });
        let forces = contact_forces(&kin, &chol, &free, &qd, cfg.sim_dt, &terrain, &params, mu, &anchors);
        for (leg, f) in forces.iter().enumerate() {
            let p = kin.feet[leg].pos;
            let slope = terrain.slope(p[0]);
            let inv = 1.0 / (1.0 + slope * slope).sqrt();
            let depth = (terrain.height(p[0]) - p[1]) * inv;
            let fnorm = -slope * inv * f.force[0] + inv * f.force[1];
            let ftan = inv * f.force[0] + slope * inv * f.force[1];
            let scale = 1.0 + f.normal.abs() + f.tangential.abs();
            check(f.normal >= 0.0 && fnorm >= -1e-9 * scale, || {
                format!("case {case} leg {leg}: pulling force {fnorm}")
            })?;
            check((fnorm - f.normal).abs() <= 1e-9 * scale && (ftan - f.tangential).abs() <= 1e-9 * scale, || {
                format!("case {case} leg {leg}: world force does not match its components")
            })?;
            check(f.tangential.abs() <= mu * f.normal * (1.0 + 1e-12) + 1e-12, || {
                format!("case {case} leg {leg}: |{}| outside the cone of {}", f.tangential, f.normal)
            })?;
            if depth <= 0.0 {
                check(f.force == [0.0, 0.0] && f.anchor.is_none(), || {
                    format!("case {case} leg {leg}: force without penetration")
                })?;
            } else {
                touching += 1;
                if f.normal == 0.0 {
                    released += 1;
                } else if f.tangential.abs() >= mu * f.normal * (1.0 - 1e-9) {
                    sliding += 1;
                }
            }
        }
    }
    check(released > 0 && sliding > 0, || {
        format!("impacts did not exercise release ({released}) and the cone clamp ({sliding})")
    })?;
    Ok(format!(
        "free-fall drift {:.4}% of total energy ({joules:.3} J); 10000 impacts, {touching} touching feet, \
         {released} released, {sliding} on the cone edge, no pulling or out-of-cone force",
        rel * 100.0
    ))
}

// ---------------------------------------------------------------------------
// Slow suite: cached desk training runs

const TUNING_SEED: u64 = 1;
const ROLLDROP_P: f64 = 1e-4;

fn runs_dir() -> PathBuf {
    std::env::var_os("ROLLDROP_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-runs"))
}

fn run_name(prefix: &str, v: &Variant) -> String {
    format!("{prefix}{}_rd{:e}_td{:e}", v.name, v.rolldrop_p, v.train_dropout_p)
}

/// Train `cfg` with `seed` into the run cache, reusing a complete run whose
/// manifest matches.
fn trained(name: &str, cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<TrainRecord>, PathBuf), String> {
    let dir = runs_dir().join(format!("{name}_seed{seed}"));
    if let Ok(m) = ExperimentManifest::load(&dir.join("manifest.json")) {
        if m.config == *cfg && m.seed == seed && dir.join("policy.bin").exists() {
            if let Ok(records) = read_train_records(&dir.join("train_record.csv")) {
                if records.len() as u64 == cfg.ppo.total_iterations {
                    return Ok((records, dir));
                }
            }
        }
    }
    eprintln!("training {name} seed {seed} into {}", dir.display());
    let outcome = train(cfg, seed, &dir, &mut |it, _| {
        if it % 100 == 0 {
            eprintln!("  {name} seed {seed}: iteration {it}");
        }
    })
    .map_err(err)?;
    Ok((outcome.records, dir))
}

fn variant_run(v: &Variant, seed: u64) -> Result<(Vec<TrainRecord>, PathBuf), String> {
    trained(&run_name("", v), &v.apply(&ExperimentConfig::desk()), seed)
}

fn last_mean(records: &[TrainRecord], n: usize, f: impl Fn(&TrainRecord) -> f64) -> f64 {
    let tail = &records[records.len().saturating_sub(n)..];
    tail.iter().map(f).sum::<f64>() / tail.len().max(1) as f64
}

/// Mean per-step reward of the walker holding its nominal pose (zero
/// action) over full episodes drawn like training resets.
fn standing_plateau(cfg: &ExperimentConfig, seed: u64) -> Result<f64, String> {
    let trainer = Trainer::new(cfg.clone(), seed).map_err(err)?;
    let walker = &trainer.envs.walker;
    let target = walker.target_from_action(&[0.0; ACT_DIM]);
    let (mut sum, mut n) = (0.0, 0u64);
    for e in 0..32 {
        let mut streams = EnvStreams::new(seed, 1000 + e);
        let (mut s, _) = walker.reset(&mut streams.reset, None);
        loop {
            let out = walker.step(&s, &target);
            sum += out.reward_total;
            n += 1;
            s = out.state;
            if out.done.is_some() {
                break;
            }
        }
    }
    Ok(sum / n as f64)
}

// 8
fn training_convergence() -> Outcome {
    let cfg = ExperimentConfig::desk();
    let (records, _) = variant_run(&Variant::baseline(), TUNING_SEED)?;
    let reward = last_mean(&records, 100, |r| r.mean_reward);
    let vx_err = last_mean(&records, 100, |r| r.mean_vx_error);
    let plateau = standing_plateau(&cfg, TUNING_SEED)?;
    let detail = format!(
        "final 100-iteration reward {reward:.3} vs standing plateau {plateau:.3} (ratio {:.2}, need >= 5), \
         mean |vx - vx*| {vx_err:.3} m/s (need < 0.15)",
        reward / plateau
    );
    if reward > 0.0 && reward >= 5.0 * plateau && vx_err < 0.15 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 9
fn sigma_divergence_ordering() -> Outcome {
    let mut tails = Vec::new();
    for p in [1e-4, 1e-3, 1e-2] {
        let (records, _) = variant_run(&Variant::rolldrop(p), TUNING_SEED)?;
        tails.push((p, tail_mean(&records, 0.1, |r| r.mean_sigma)));
    }
    let increasing = tails.windows(2).all(|w| w[1].1 > w[0].1);
    let margin = tails[2].1 - SIGMA_MIN;
    let detail = format!(
        "tail sigma {} (strictly increasing: {increasing}); largest p exceeds floor by {margin:.3} (need >= 0.2)",
        tails
            .iter()
            .map(|(p, s)| format!("p={p:e}: {s:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    if increasing && margin >= 0.2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Sweeps {
    levels: Vec<f64>,
    rolldrop: Vec<f64>,
    baseline: Vec<f64>,
    train_dropout: Vec<f64>,
}

fn sweeps() -> Result<&'static Sweeps, String> {
    static CELL: OnceLock<Result<Sweeps, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ExperimentConfig::desk();
        let spec: NoiseSweepSpec = cfg.eval.clone();
        let out = runs_dir().join("sweeps");
        fs::create_dir_all(&out).map_err(err)?;
        let mut rates = Vec::new();
        for v in [
            Variant::rolldrop(ROLLDROP_P),
            Variant::baseline(),
            Variant::new("train_dropout", 0.0, 1e-3),
        ] {
            let (_, dir) = variant_run(&v, TUNING_SEED)?;
            let policy = load_policy(&dir.join("policy.bin")).map_err(err)?;
            let result: SweepResult = run_noise_sweep(&policy, &cfg.env, &spec).map_err(err)?;
            let file = fs::File::create(out.join(format!("{}.csv", v.name))).map_err(err)?;
            result.write_csv(file).map_err(err)?;
            rates.push(result.success_rates());
        }
        let train_dropout = rates.pop().unwrap();
        let baseline = rates.pop().unwrap();
        let rolldrop = rates.pop().unwrap();
        Ok(Sweeps {
            levels: spec.levels,
            rolldrop,
            baseline,
            train_dropout,
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn in_window(level: f64) -> bool {
    (0.15 - 1e-9..=0.35 + 1e-9).contains(&level)
}

fn area(levels: &[f64], y: &[f64]) -> f64 {
    levels
        .windows(2)
        .zip(y.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * 0.5 * (y[0] + y[1]))
        .sum()
}

// 10
fn robustness_ordering() -> Outcome {
    let s = sweeps()?;
    let best = s
        .levels
        .iter()
        .enumerate()
        .filter(|(_, &l)| in_window(l))
        .filter(|(i, _)| s.rolldrop[*i] - s.baseline[*i] >= 0.15 && s.rolldrop[*i] >= 0.6)
        .map(|(i, &l)| (l, s.rolldrop[i], s.baseline[i]))
        .next();
    let at = |l: f64| s.levels.iter().position(|&x| (x - l).abs() < 1e-9);
    let reference = at(0.25)
        .map(|i| {
            format!(
                "at n = 0.25: Roll-Drop {:.2}, baseline {:.2}, train-dropout {:.2} (paper: 0.80 vs < 0.40)",
                s.rolldrop[i], s.baseline[i], s.train_dropout[i]
            )
        })
        .unwrap_or_default();
    match best {
        Some((l, r, b)) => Ok(format!("n* = {l:.2}: Roll-Drop {r:.2} vs baseline {b:.2}; {reference}")),
        None => Err(format!(
            "no level in [0.15, 0.35] with a >= 15 point lead and >= 0.6 success; {reference}"
        )),
    }
}

// 11
fn train_dropout_detriment() -> Outcome {
    let s = sweeps()?;
    let mut worst_excess = f64::NEG_INFINITY;
    for (i, &l) in s.levels.iter().enumerate() {
        if l >= 0.15 - 1e-9 {
            worst_excess = worst_excess.max(s.train_dropout[i] - s.rolldrop[i]);
        }
    }
    let (auc_td, auc_rd) = (area(&s.levels, &s.train_dropout), area(&s.levels, &s.rolldrop));
    let detail = format!(
        "max (train-dropout - Roll-Drop) at n >= 0.15: {worst_excess:+.2} (need <= +0.05); \
         AUC {auc_td:.4} vs {auc_rd:.4}"
    );
    if worst_excess <= 0.05 && auc_td < auc_rd {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 12
fn gain_mismatch_ordering() -> Outcome {
    let base = ExperimentConfig::desk();
    let spec: MismatchSpec = base.mismatch.clone();
    let mut policies = Vec::new();
    let mut env = base.env.clone();
    for v in [Variant::rolldrop(ROLLDROP_P), Variant::baseline()] {
        let mut cfg = v.apply(&base);
        cfg.env.kp = spec.train_kp;
        env = cfg.env.clone();
        let (_, dir) = trained(&run_name("kp20_", &v), &cfg, TUNING_SEED)?;
        policies.push((v.name.clone(), load_policy(&dir.join("policy.bin")).map_err(err)?));
    }
    let named: Vec<(&str, &PolicyNet)> = policies.iter().map(|(n, p)| (n.as_str(), p)).collect();
    let rows = run_mismatch(&spec, &env, &named).map_err(err)?;
    let out = runs_dir().join("mismatch.csv");
    write_mismatch_csv(&rows, fs::File::create(&out).map_err(err)?).map_err(err)?;
    let deploy = |name: &str| {
        rows.iter()
            .find(|r| r.variant == name && r.kp == spec.deploy_kp)
            .cloned()
            .ok_or_else(|| format!("no {name} row at the deployment gain"))
    };
    let (rd, bl) = (deploy("rolldrop")?, deploy("baseline")?);
    let detail = format!(
        "Kp {} -> {}: falls {}/{} vs {}/{}, mean |qd| {:.3} vs {:.3} rad/s (Roll-Drop vs baseline)",
        spec.train_kp, spec.deploy_kp, rd.falls, rd.episodes, bl.falls, bl.episodes, rd.mean_abs_qd, bl.mean_abs_qd
    );
    if rd.fall_rate <= bl.fall_rate && rd.mean_abs_qd <= bl.mean_abs_qd {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 13
fn multi_seed_consistency() -> Outcome {
    let fraction = ExperimentConfig::desk().tune.tail_fraction;
    let seeds: Vec<u64> = (TUNING_SEED..TUNING_SEED + 5).collect();
    let mut finals = Vec::new();
    for v in [Variant::baseline(), Variant::rolldrop(ROLLDROP_P)] {
        let mut per_seed = Vec::new();
        for &s in &seeds {
            let (records, _) = variant_run(&v, s)?;
            per_seed.push(tail_mean(&records, fraction, |r| r.mean_reward));
        }
        finals.push((v.name.clone(), per_seed));
    }
    let (_, sd_base) = mean_std(&finals[0].1);
    let (_, sd_rd) = mean_std(&finals[1].1);
    let mut best = (String::new(), 0u64, f64::NEG_INFINITY);
    for (name, per_seed) in &finals {
        for (s, r) in seeds.iter().zip(per_seed) {
            if *r > best.2 {
                best = (name.clone(), *s, *r);
            }
        }
    }
    let detail = format!(
        "final-reward std Roll-Drop {sd_rd:.3} vs baseline {sd_base:.3}; highest final {:.3} by {} seed {}",
        best.2, best.0, best.1
    );
    if sd_rd <= sd_base && best.0 == "baseline" && best.1 == TUNING_SEED {
        Ok(detail)
    } else {
        Err(detail)
    }
}
