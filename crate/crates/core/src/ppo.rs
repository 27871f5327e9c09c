//! Clipped-surrogate PPO with GAE and the training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ExperimentManifest};
use crate::env::{generate_terrain, RewardTerms, Walker, ACT_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::nn::{
    check_probability, gaussian_entropy, gaussian_log_prob, gaussian_log_prob_grads, save_policy,
    save_value, write_drop_events_csv, BatchTape, DropEvent, DropoutSpec, NetMode, PolicyNet, ValueNet,
};
use crate::rng::{RngStream, StreamId};
use crate::rollout::{collect, CollectOptions, RolloutBatch, VecEnv};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub num_envs: usize,
    pub steps_per_env: usize,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub clip_range: f64,
    pub entropy_coef: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub learning_rate: f64,
    pub value_coef: f64,
    pub grad_norm_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Conventional dropout during updates (inverted scaling).
    pub train_dropout_p: f64,
    /// Roll-Drop probability during collection.
    pub rolldrop_p: f64,
    pub total_iterations: u64,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: u64,
    /// Multiplier from the reward table to the learning signal.
    pub reward_scale: f64,
    /// Add `gamma * V(s_T)` to rewards of time-limit truncations.
    pub bootstrap_timeouts: bool,
    /// Consecutive aborted updates tolerated before training stops.
    pub max_consecutive_aborts: u32,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            num_envs: 128,
            steps_per_env: 200,
            minibatch_size: 6400,
            epochs: 8,
            clip_range: 0.2,
            entropy_coef: 0.0,
            gamma: 0.996,
            gae_lambda: 0.95,
            learning_rate: 1e-4,
            value_coef: 0.5,
            grad_norm_clip: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            train_dropout_p: 0.0,
            rolldrop_p: 0.0,
            total_iterations: 1500,
            checkpoint_every: 100,
            reward_scale: 0.02,
            bootstrap_timeouts: true,
            max_consecutive_aborts: 5,
        }
    }
}

impl PpoConfig {
    pub fn batch_size(&self) -> usize {
        self.num_envs * self.steps_per_env
    }

    pub fn num_minibatches(&self) -> usize {
        self.batch_size() / self.minibatch_size.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ppo.num_envs", self.num_envs),
            ("ppo.steps_per_env", self.steps_per_env),
            ("ppo.minibatch_size", self.minibatch_size),
            ("ppo.epochs", self.epochs),
        ];
        for (path, v) in positive {
            if v == 0 {
                return Err(Error::config(path, "must be positive"));
            }
        }
        if self.batch_size() % self.minibatch_size != 0 {
            return Err(Error::config(
                "ppo.minibatch_size",
                format!("batch size {} is not divisible by {}", self.batch_size(), self.minibatch_size),
            ));
        }
        for (path, v) in [("ppo.gamma", self.gamma), ("ppo.gae_lambda", self.gae_lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(path, "must lie in [0, 1]"));
            }
        }
        check_probability("ppo.train_dropout_p", self.train_dropout_p)?;
        check_probability("ppo.rolldrop_p", self.rolldrop_p)?;
        let nonneg = [
            ("ppo.clip_range", self.clip_range),
            ("ppo.entropy_coef", self.entropy_coef),
            ("ppo.value_coef", self.value_coef),
            ("ppo.reward_scale", self.reward_scale),
        ];
        for (path, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(path, "must be finite and non-negative"));
            }
        }
        for (path, v) in [
            ("ppo.learning_rate", self.learning_rate),
            ("ppo.grad_norm_clip", self.grad_norm_clip),
            ("ppo.adam_eps", self.adam_eps),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(path, "must be finite and positive"));
            }
        }
        for (path, v) in [("ppo.adam_beta1", self.adam_beta1), ("ppo.adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(path, "must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Advantages

/// Backward GAE recursion over one trajectory segment.
///
/// `dones[t]` cuts the bootstrap from step `t` to `t + 1`; `bootstrap_value`
/// is `V` of the state after the last step.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::contract("gae inputs must have equal length"));
    }
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap_value;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shift to zero mean and scale to unit (population) std. A constant batch
/// is only centred.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    adv.iter_mut().for_each(|a| *a -= mean);
    let var = adv.iter().map(|a| a * a).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 1e-12 {
        adv.iter_mut().for_each(|a| *a /= std);
        // second centring pass removes the rounding residue of the first
        let m2 = adv.iter().sum::<f64>() / n;
        adv.iter_mut().for_each(|a| *a -= m2);
    }
}

/// Everything the update consumes, flattened over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateBatch {
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl UpdateBatch {
    pub fn len(&self) -> usize {
        self.old_log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_log_probs.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if self.obs.len() != n * OBS_DIM
            || self.actions.len() != n * ACT_DIM
            || self.advantages.len() != n
            || self.returns.len() != n
        {
            return Err(Error::contract("update batch arrays do not conform"));
        }
        Ok(())
    }
}

/// GAE per environment segment, then optional per-batch normalisation.
pub fn prepare_update_batch(batch: &RolloutBatch, cfg: &PpoConfig, normalize: bool) -> Result<UpdateBatch> {
    let t = batch.steps;
    let mut advantages = Vec::with_capacity(batch.len());
    let mut returns = Vec::with_capacity(batch.len());
    for e in 0..batch.num_envs {
        let r = e * t..(e + 1) * t;
        let (a, ret) = gae(
            &batch.rewards[r.clone()],
            &batch.values[r.clone()],
            &batch.dones[r],
            batch.bootstrap_values[e],
            cfg.gamma,
            cfg.gae_lambda,
        )?;
        advantages.extend(a);
        returns.extend(ret);
    }
    if normalize {
        normalize_advantages(&mut advantages);
    }
    Ok(UpdateBatch {
        obs: batch.obs.clone(),
        actions: batch.actions.clone(),
        old_log_probs: batch.log_probs.clone(),
        advantages,
        returns,
    })
}

// ---------------------------------------------------------------------------
// Loss

/// Per-sample clipped surrogate `min(rho A, clip(rho) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    (ratio * advantage).min(clipped * advantage)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

struct Workspace {
    ptape: BatchTape,
    vtape: BatchTape,
    obs: Vec<f64>,
    pgrads: Vec<f64>,
    vgrads: Vec<f64>,
}

/// Loss over `idx` and, when `grads` is set, its gradient accumulated into
/// the workspace. The policy is evaluated in Update mode.
#[allow(clippy::too_many_arguments)]
fn loss_on(
    idx: &[usize],
    data: &UpdateBatch,
    policy: &PolicyNet,
    value_net: &ValueNet,
    cfg: &PpoConfig,
    rng: &mut RngStream,
    ws: &mut Workspace,
    grads: bool,
) -> Result<LossComponents> {
    let rows = idx.len();
    let b = rows as f64;
    ws.obs.clear();
    for &i in idx {
        ws.obs.extend_from_slice(&data.obs[i * OBS_DIM..(i + 1) * OBS_DIM]);
    }
    policy.forward_batch(&ws.obs, rows, NetMode::Update, rng, &mut ws.ptape)?;
    value_net.forward_batch(&ws.obs, rows, &mut ws.vtape)?;

    let mut c = LossComponents::default();
    let mut clipped = 0usize;
    let log_std = policy.log_std();
    let lo = 1.0 - cfg.clip_range;
    let hi = 1.0 + cfg.clip_range;
    let mut gmean = vec![0.0; rows * ACT_DIM];
    let mut gls = vec![0.0; ACT_DIM];
    let mut gval = vec![0.0; rows];
    for (r, &i) in idx.iter().enumerate() {
        let act = &data.actions[i * ACT_DIM..(i + 1) * ACT_DIM];
        let mean = &ws.ptape.output()[r * ACT_DIM..(r + 1) * ACT_DIM];
        let lp = gaussian_log_prob(mean, log_std, act)?;
        let log_ratio = lp - data.old_log_probs[i];
        let ratio = log_ratio.exp();
        let a = data.advantages[i];
        c.policy -= clipped_surrogate(ratio, a, cfg.clip_range) / b;
        c.approx_kl += ((ratio - 1.0) - log_ratio) / b;
        if (ratio - 1.0).abs() > cfg.clip_range {
            clipped += 1;
        }
        let err = ws.vtape.output()[r] - data.returns[i];
        c.value += cfg.value_coef * err * err / b;

        if grads {
            // d(-surrogate)/d(lp) is -rho A while the unclipped branch is active
            let unclipped_active = ratio * a <= ratio.clamp(lo, hi) * a;
            let dlp = if unclipped_active { -ratio * a / b } else { 0.0 };
            if dlp != 0.0 {
                let (gm, gs) = gaussian_log_prob_grads(mean, log_std, act);
                for j in 0..ACT_DIM {
                    gmean[r * ACT_DIM + j] = dlp * gm[j];
                    gls[j] += dlp * gs[j];
                }
            }
            gval[r] = 2.0 * cfg.value_coef * err / b;
        }
    }
    let entropy = gaussian_entropy(log_std);
    if grads {
        gls.iter_mut().for_each(|g| *g -= cfg.entropy_coef);
        policy.backward_batch(&ws.ptape, &gmean, &gls, &mut ws.pgrads)?;
        value_net.backward_batch(&ws.vtape, &gval, &mut ws.vgrads)?;
    }
    c.entropy = entropy;
    c.clip_fraction = clipped as f64 / b.max(1.0);
    c.total = c.policy + c.value - cfg.entropy_coef * entropy;
    if !c.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {}", c.total)));
    }
    Ok(c)
}

/// PPO loss over the whole batch without touching any parameter.
pub fn ppo_loss(
    data: &UpdateBatch,
    policy: &PolicyNet,
    value_net: &ValueNet,
    cfg: &PpoConfig,
    train_dropout_rng: &mut RngStream,
) -> Result<LossComponents> {
    data.check()?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut ws = workspace(policy, value_net);
    loss_on(&idx, data, policy, value_net, cfg, train_dropout_rng, &mut ws, false)
}

/// Loss and gradients (policy, value) over the whole batch.
pub fn ppo_gradients(
    data: &UpdateBatch,
    policy: &PolicyNet,
    value_net: &ValueNet,
    cfg: &PpoConfig,
    train_dropout_rng: &mut RngStream,
) -> Result<(LossComponents, Vec<f64>, Vec<f64>)> {
    data.check()?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut ws = workspace(policy, value_net);
    let c = loss_on(&idx, data, policy, value_net, cfg, train_dropout_rng, &mut ws, true)?;
    Ok((c, ws.pgrads, ws.vgrads))
}

fn workspace(policy: &PolicyNet, value_net: &ValueNet) -> Workspace {
    Workspace {
        ptape: BatchTape::default(),
        vtape: BatchTape::default(),
        obs: Vec::new(),
        pgrads: vec![0.0; policy.num_params()],
        vgrads: vec![0.0; value_net.num_params()],
    }
}

// ---------------------------------------------------------------------------
// Optimiser

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, cfg: &PpoConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Scale both gradient vectors so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(a: &mut [f64], b: &mut [f64], max_norm: f64) -> f64 {
    let norm = a.iter().chain(b.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        a.iter_mut().chain(b.iter_mut()).for_each(|g| *g *= s);
    }
    norm
}

/// Optimiser state carried across iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub policy: Adam,
    pub value: Adam,
}

impl Optimizer {
    pub fn new(policy: &PolicyNet, value_net: &ValueNet, cfg: &PpoConfig) -> Self {
        Self {
            policy: Adam::new(policy.num_params(), cfg),
            value: Adam::new(value_net.num_params(), cfg),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub loss: LossComponents,
    pub grad_norm: f64,
    pub steps: u64,
}

/// `epochs` passes of shuffled minibatch Adam steps; the std floor is
/// re-imposed after every step.
///
/// The minibatch count is `len / cfg.minibatch_size` (at least one); the
/// permutation is drawn from `shuffle`, update-time dropout masks from
/// `train_dropout`.
pub fn update(
    policy: &mut PolicyNet,
    value_net: &mut ValueNet,
    opt: &mut Optimizer,
    data: &UpdateBatch,
    cfg: &PpoConfig,
    shuffle: &mut RngStream,
    train_dropout: &mut RngStream,
) -> Result<UpdateStats> {
    data.check()?;
    let n = data.len();
    if n == 0 {
        return Ok(UpdateStats::default());
    }
    let mb = cfg.minibatch_size.min(n).max(1);
    let num_mb = (n / mb).max(1);
    let mut ws = workspace(policy, value_net);
    let mut stats = UpdateStats::default();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut pparams = policy.flat_params();
    for _ in 0..cfg.epochs {
        shuffle.shuffle(&mut perm);
        for k in 0..num_mb {
            let idx = &perm[k * mb..(k + 1) * mb];
            ws.pgrads.iter_mut().for_each(|g| *g = 0.0);
            ws.vgrads.iter_mut().for_each(|g| *g = 0.0);
            let c = loss_on(idx, data, policy, value_net, cfg, train_dropout, &mut ws, true)?;
            let norm = clip_global_norm(&mut ws.pgrads, &mut ws.vgrads, cfg.grad_norm_clip);
            if !norm.is_finite() {
                return Err(Error::Numerical("non-finite gradient norm".into()));
            }
            opt.policy.step(&mut pparams, &ws.pgrads);
            policy.set_flat_params(&pparams)?;
            policy.clamp_sigma();
            pparams.copy_from_slice(&policy.flat_params());
            opt.value.step(value_net.trunk_mut().params_mut(), &ws.vgrads);

            let s = stats.steps as f64;
            let w = 1.0 / (s + 1.0);
            stats.loss.total += (c.total - stats.loss.total) * w;
            stats.loss.policy += (c.policy - stats.loss.policy) * w;
            stats.loss.value += (c.value - stats.loss.value) * w;
            stats.loss.entropy += (c.entropy - stats.loss.entropy) * w;
            stats.loss.approx_kl += (c.approx_kl - stats.loss.approx_kl) * w;
            stats.loss.clip_fraction += (c.clip_fraction - stats.loss.clip_fraction) * w;
            stats.grad_norm += (norm - stats.grad_norm) * w;
            stats.steps += 1;
        }
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Training records

/// One row of `train_record.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: u64,
    /// Mean per-step total of the reward table.
    pub mean_reward: f64,
    pub terms: RewardTerms,
    pub mean_sigma: f64,
    pub drop_events: u64,
    pub episodes_finished: u64,
    /// Mean undiscounted return of episodes that finished (NaN if none).
    pub mean_episode_return: f64,
    pub mean_vx_error: f64,
    pub loss: LossComponents,
    pub grad_norm: f64,
    /// The update produced a non-finite loss and was rolled back.
    pub aborted: bool,
    pub wall_time: f64,
}

impl TrainRecord {
    pub fn csv_header() -> Vec<String> {
        let mut h: Vec<String> = ["iteration", "mean_reward"].map(String::from).to_vec();
        h.extend(RewardTerms::NAMES.iter().map(|n| format!("r_{n}")));
        h.extend(
            [
                "mean_sigma",
                "drop_events",
                "episodes_finished",
                "mean_episode_return",
                "mean_vx_error",
                "loss_total",
                "loss_policy",
                "loss_value",
                "entropy",
                "approx_kl",
                "clip_fraction",
                "grad_norm",
                "aborted",
                "wall_time",
            ]
            .map(String::from),
        );
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut r = vec![self.iteration.to_string(), self.mean_reward.to_string()];
        r.extend(self.terms.values().iter().map(|v| v.to_string()));
        r.extend([
            self.mean_sigma.to_string(),
            self.drop_events.to_string(),
            self.episodes_finished.to_string(),
            self.mean_episode_return.to_string(),
            self.mean_vx_error.to_string(),
            self.loss.total.to_string(),
            self.loss.policy.to_string(),
            self.loss.value.to_string(),
            self.loss.entropy.to_string(),
            self.loss.approx_kl.to_string(),
            self.loss.clip_fraction.to_string(),
            self.grad_norm.to_string(),
            u8::from(self.aborted).to_string(),
            self.wall_time.to_string(),
        ]);
        r
    }

    /// Bitwise equality of everything except wall time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let strip = |r: &Self| {
            let mut r = r.clone();
            r.wall_time = 0.0;
            r.csv_row()
        };
        strip(self) == strip(other)
    }
}

/// Read back a `train_record.csv`.
pub fn read_train_records(path: &Path) -> Result<Vec<TrainRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row?;
        let line = i as u64 + 2;
        let f = |k: usize| -> Result<f64> {
            row.get(k)
                .ok_or_else(|| Error::Parse { line, message: format!("missing column {k}") })?
                .parse::<f64>()
                .map_err(|e| Error::Parse { line, message: format!("column {k}: {e}") })
        };
        let mut v = Vec::with_capacity(27);
        for k in 0..TrainRecord::csv_header().len() {
            v.push(f(k)?);
        }
        out.push(TrainRecord {
            iteration: v[0] as u64,
            mean_reward: v[1],
            terms: RewardTerms {
                orientation: v[2],
                lin_vel: v[3],
                ang_vel: v[4],
                action_smoothness: v[5],
                feet_clearance: v[6],
                foot_slip: v[7],
                joint_pos: v[8],
                joint_vel: v[9],
                torque: v[10],
                swing_duration: v[11],
                pronking: v[12],
            },
            mean_sigma: v[13],
            drop_events: v[14] as u64,
            episodes_finished: v[15] as u64,
            mean_episode_return: v[16],
            mean_vx_error: v[17],
            loss: LossComponents {
                total: v[18],
                policy: v[19],
                value: v[20],
                entropy: v[21],
                approx_kl: v[22],
                clip_fraction: v[23],
            },
            grad_norm: v[24],
            aborted: v[25] != 0.0,
            wall_time: v[26],
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Trainer

/// Networks, optimiser, environments and random streams of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub policy: PolicyNet,
    pub value: ValueNet,
    pub optimizer: Optimizer,
    pub envs: VecEnv,
    shuffle: RngStream,
    train_dropout: RngStream,
    iteration: u64,
    consecutive_aborts: u32,
}

/// Result of one training iteration.
#[derive(Debug, Clone)]
pub struct IterationOutput {
    pub record: TrainRecord,
    pub drop_events: Vec<DropEvent>,
}

impl Trainer {
    pub fn new(config: ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let terrain = Arc::new(generate_terrain(&config.env.terrain, seed)?);
        let walker = Walker::new(config.env.clone(), terrain)?;
        let envs = VecEnv::new(walker, config.ppo.num_envs, seed);
        let mut init = RngStream::new(seed, 0, StreamId::Init);
        let pc = &config.policy;
        let mut sizes = vec![OBS_DIM];
        sizes.extend(&pc.hidden);
        sizes.push(ACT_DIM);
        let policy = PolicyNet::init(
            &sizes,
            pc.activation,
            pc.init_std,
            DropoutSpec {
                position: pc.rolldrop_position,
                rolldrop_p: config.ppo.rolldrop_p,
                train_p: config.ppo.train_dropout_p,
            },
            &mut init,
        )?;
        let mut vsizes = vec![OBS_DIM];
        vsizes.extend(&pc.value_hidden);
        vsizes.push(1);
        let value = ValueNet::init(&vsizes, pc.activation, &mut init)?;
        let optimizer = Optimizer::new(&policy, &value, &config.ppo);
        Ok(Self {
            shuffle: RngStream::new(seed, 0, StreamId::Shuffle),
            train_dropout: RngStream::new(seed, 0, StreamId::TrainDropout),
            config,
            seed,
            policy,
            value,
            optimizer,
            envs,
            iteration: 0,
            consecutive_aborts: 0,
        })
    }

    /// Number of completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Collect, update, and summarise one iteration. `observer` sees the raw
    /// batch before the update.
    pub fn run_iteration(&mut self, observer: &mut dyn FnMut(u64, &RolloutBatch)) -> Result<IterationOutput> {
        let start = Instant::now();
        let cfg = self.config.ppo.clone();
        let opts = CollectOptions {
            mode: NetMode::Rollout,
            iteration: self.iteration,
            reward_scale: cfg.reward_scale,
            timeout_bootstrap_gamma: cfg.bootstrap_timeouts.then_some(cfg.gamma),
            forced_drops: Vec::new(),
        };
        let batch = collect(&self.policy, &self.value, &mut self.envs, cfg.steps_per_env, &opts)?;
        observer(self.iteration, &batch);
        let data = prepare_update_batch(&batch, &cfg, true)?;

        let snapshot = (self.policy.clone(), self.value.clone(), self.optimizer.clone());
        let (stats, aborted) = match update(
            &mut self.policy,
            &mut self.value,
            &mut self.optimizer,
            &data,
            &cfg,
            &mut self.shuffle,
            &mut self.train_dropout,
        ) {
            Ok(s) => (s, false),
            Err(Error::Numerical(_)) => {
                (self.policy, self.value, self.optimizer) = snapshot;
                (
                    UpdateStats {
                        loss: LossComponents {
                            total: f64::NAN,
                            ..Default::default()
                        },
                        ..Default::default()
                    },
                    true,
                )
            }
            Err(e) => return Err(e),
        };
        self.consecutive_aborts = if aborted { self.consecutive_aborts + 1 } else { 0 };

        let n = batch.len().max(1) as f64;
        let finished = batch.finished_returns.len();
        let record = TrainRecord {
            iteration: self.iteration,
            mean_reward: batch.mean_raw_reward(),
            terms: batch.term_means(),
            mean_sigma: self.policy.std().iter().sum::<f64>() / ACT_DIM as f64,
            drop_events: batch.drop_events.len() as u64,
            episodes_finished: finished as u64,
            mean_episode_return: if finished == 0 {
                f64::NAN
            } else {
                batch.finished_returns.iter().sum::<f64>() / finished as f64
            },
            mean_vx_error: batch.vx_error_sum / n,
            loss: stats.loss,
            grad_norm: stats.grad_norm,
            aborted,
            wall_time: start.elapsed().as_secs_f64(),
        };
        self.iteration += 1;
        if self.consecutive_aborts >= cfg.max_consecutive_aborts.max(1) {
            return Err(Error::Numerical(format!(
                "{} consecutive updates produced non-finite losses",
                self.consecutive_aborts
            )));
        }
        Ok(IterationOutput {
            record,
            drop_events: batch.drop_events,
        })
    }
}

/// Paths written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub records: PathBuf,
    pub drop_events: PathBuf,
    pub policy: PathBuf,
    pub value: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            manifest: dir.join("manifest.json"),
            records: dir.join("train_record.csv"),
            drop_events: dir.join("drop_events.csv"),
            policy: dir.join("policy.bin"),
            value: dir.join("value.bin"),
            checkpoints: Vec::new(),
        }
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub artifacts: TrainArtifacts,
    pub policy: PolicyNet,
    pub value: ValueNet,
}

/// Run `config.ppo.total_iterations` iterations into `out`.
///
/// The manifest is written before anything else. Records and drop events
/// are flushed every iteration, so a numerical failure leaves a usable
/// partial run (plus `policy.bin` of the last good parameters) behind.
pub fn train(
    config: &ExperimentConfig,
    seed: u64,
    out: &Path,
    observer: &mut dyn FnMut(u64, &RolloutBatch),
) -> Result<TrainOutcome> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut art = TrainArtifacts::in_dir(out);
    ExperimentManifest::new(config.clone(), seed, "train", out).write(&art.manifest)?;

    let mut trainer = Trainer::new(config.clone(), seed)?;
    let ckpt_dir = out.join("checkpoints");
    let every = config.ppo.checkpoint_every;
    if every > 0 {
        fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    }
    let rec_file = File::create(&art.records).map_err(|e| Error::io(&art.records, e))?;
    let mut rec_w = csv::Writer::from_writer(BufWriter::new(rec_file));
    rec_w.write_record(TrainRecord::csv_header())?;
    let ev_file = File::create(&art.drop_events).map_err(|e| Error::io(&art.drop_events, e))?;
    let mut ev_w = BufWriter::new(ev_file);
    write_drop_events_csv(&mut ev_w, &[])?;

    let mut records = Vec::new();
    let result = (|| -> Result<()> {
        for _ in 0..config.ppo.total_iterations {
            let it = trainer.run_iteration(observer)?;
            rec_w.write_record(it.record.csv_row())?;
            rec_w.flush().map_err(|e| Error::io(&art.records, e))?;
            append_drop_events(&mut ev_w, &it.drop_events)?;
            ev_w.flush().map_err(|e| Error::io(&art.drop_events, e))?;
            records.push(it.record);
            let done = trainer.iteration();
            if every > 0 && done % every == 0 {
                let p = ckpt_dir.join(format!("policy_{done:06}.bin"));
                let v = ckpt_dir.join(format!("value_{done:06}.bin"));
                save_policy(&p, &trainer.policy)?;
                save_value(&v, &trainer.value)?;
                art.checkpoints.push(p);
            }
        }
        Ok(())
    })();
    save_policy(&art.policy, &trainer.policy)?;
    save_value(&art.value, &trainer.value)?;
    result?;
    Ok(TrainOutcome {
        records,
        artifacts: art,
        policy: trainer.policy,
        value: trainer.value,
    })
}

fn append_drop_events<W: Write>(w: &mut W, events: &[DropEvent]) -> Result<()> {
    let mut buf = Vec::new();
    write_drop_events_csv(&mut buf, events)?;
    // skip the header line the writer always emits
    let body = buf.splitn(2, |&b| b == b'\n').nth(1).unwrap_or(&[]);
    w.write_all(body).map_err(|e| Error::io("<drop events>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_td() {
        let (a, r) = gae(&[2.0], &[0.5], &[false], 1.5, 1.0, 1.0).unwrap();
        assert_eq!(a, vec![2.0 + 1.5 - 0.5]);
        assert_eq!(r, vec![3.5]);
    }

    #[test]
    fn two_step_example() {
        let (a, _) = gae(&[1.0, 1.0], &[0.5, 0.5], &[false, false], 0.5, 0.99, 0.95).unwrap();
        assert!((a[1] - 0.995).abs() < 1e-12);
        assert!((a[0] - (0.995 + 0.9405 * 0.995)).abs() < 1e-12);
    }

    #[test]
    fn terminal_masks_bootstrap() {
        let (a, _) = gae(&[1.0, 5.0], &[0.3, 9.0], &[true, false], 7.0, 0.9, 0.9).unwrap();
        assert_eq!(a[0], 1.0 - 0.3);
    }

    #[test]
    fn clip_arithmetic() {
        assert_eq!(clipped_surrogate(1.5, 2.0, 0.2), 2.4);
        assert_eq!(clipped_surrogate(1.0, -3.0, 0.2), -3.0);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
    }

    #[test]
    fn normalisation() {
        let mut a = vec![1.0, 2.0, 3.0, 10.0];
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-12);
        assert!((std - 1.0).abs() < 1e-9);
        let mut z = vec![0.7; 5];
        normalize_advantages(&mut z);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = PpoConfig::default();
        let mut adam = Adam::new(2, &cfg);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - (1.0 - 1e-4)).abs() < 1e-10);
        assert!((p[1] - (-1.0 + 1e-4)).abs() < 1e-10);
    }

    #[test]
    fn global_norm_clip() {
        let mut a = vec![3.0];
        let mut b = vec![4.0];
        let n = clip_global_norm(&mut a, &mut b, 1.0);
        assert_eq!(n, 5.0);
        assert!((a[0] - 0.6).abs() < 1e-15 && (b[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn minibatch_divisibility() {
        let cfg = PpoConfig {
            minibatch_size: 7000,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!(PpoConfig::default().num_minibatches(), 4);
        assert_eq!(PpoConfig::default().batch_size(), 25600);
    }
}
