//! Vectorised trajectory collection and evaluation episodes.
//!
//! Every environment owns its state and its [`EnvStreams`]; collection runs
//! each environment's whole horizon independently (in parallel when a rayon
//! pool has more than one thread) and writes into its own slice of the
//! batch, so the result does not depend on scheduling.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Command, DoneReason, Observation, RewardTerms, Walker, WalkerState, ACT_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::harness::inject_noise;
use crate::nn::{sample_action, DropEvent, NetMode, PolicyNet, ValueNet};
use crate::rng::EnvStreams;

/// One environment slot of a vectorised collector.
#[derive(Debug, Clone)]
pub struct EnvSlot {
    pub env_id: u32,
    pub state: WalkerState,
    pub obs: Observation,
    pub streams: EnvStreams,
    /// Undiscounted return of the episode in progress.
    pub episode_return: f64,
}

/// A set of independent walkers sharing one configuration and terrain.
#[derive(Debug, Clone)]
pub struct VecEnv {
    pub walker: Walker,
    pub slots: Vec<EnvSlot>,
}

impl VecEnv {
    /// `num_envs` walkers, each reset from its own stream of `seed`.
    pub fn new(walker: Walker, num_envs: usize, seed: u64) -> Self {
        let slots = (0..num_envs as u32)
            .map(|env_id| {
                let mut streams = EnvStreams::new(seed, env_id);
                let (state, obs) = walker.reset(&mut streams.reset, None);
                EnvSlot {
                    env_id,
                    state,
                    obs,
                    streams,
                    episode_return: 0.0,
                }
            })
            .collect();
        Self { walker, slots }
    }

    pub fn num_envs(&self) -> usize {
        self.slots.len()
    }
}

/// A drop forced at a given `(env, step)` in addition to the random mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcedDrop {
    pub env_id: u32,
    pub step: usize,
    pub units: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CollectOptions {
    pub mode: NetMode,
    pub iteration: u64,
    /// Multiplier from reward terms to the learning signal.
    pub reward_scale: f64,
    /// When set, time-limit truncations add `gamma * V(s_T)` to the reward.
    pub timeout_bootstrap_gamma: Option<f64>,
    pub forced_drops: Vec<ForcedDrop>,
}

impl Default for CollectOptions {
    fn default() -> Self {
        Self {
            mode: NetMode::Rollout,
            iteration: 0,
            reward_scale: 1.0,
            timeout_bootstrap_gamma: None,
            forced_drops: Vec::new(),
        }
    }
}

/// Transitions of `num_envs x steps`, stored env-major (`env * steps + t`).
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub num_envs: usize,
    pub steps: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    /// Joint positions (rad) at observation time, `ACT_DIM` per transition.
    pub joint_pos: Vec<f64>,
    /// Joint speeds (rad/s) at observation time.
    pub joint_vel: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Learning signal (scaled, timeout-bootstrapped).
    pub rewards: Vec<f64>,
    /// Unscaled per-step total of the reward table.
    pub raw_rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub done_reasons: Vec<Option<DoneReason>>,
    /// Value of the observation following the last step of each env.
    pub bootstrap_values: Vec<f64>,
    pub drop_events: Vec<DropEvent>,
    /// Sum of each reward term over the batch.
    pub term_sums: [f64; 11],
    /// Sum of |vx - vx*| over the batch.
    pub vx_error_sum: f64,
    /// Returns of episodes that ended during collection.
    pub finished_returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.num_envs * self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn obs_at(&self, i: usize) -> &[f64] {
        &self.obs[i * OBS_DIM..(i + 1) * OBS_DIM]
    }

    pub fn action_at(&self, i: usize) -> &[f64] {
        &self.actions[i * ACT_DIM..(i + 1) * ACT_DIM]
    }

    pub fn mean_raw_reward(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.raw_rewards.iter().sum::<f64>() / self.len() as f64
    }

    pub fn term_means(&self) -> RewardTerms {
        let n = self.len().max(1) as f64;
        let v = self.term_sums.map(|s| s / n);
        RewardTerms {
            orientation: v[0],
            lin_vel: v[1],
            ang_vel: v[2],
            action_smoothness: v[3],
            feet_clearance: v[4],
            foot_slip: v[5],
            joint_pos: v[6],
            joint_vel: v[7],
            torque: v[8],
            swing_duration: v[9],
            pronking: v[10],
        }
    }

    fn empty(num_envs: usize, steps: usize) -> Self {
        let n = num_envs * steps;
        Self {
            num_envs,
            steps,
            obs: vec![0.0; n * OBS_DIM],
            actions: vec![0.0; n * ACT_DIM],
            joint_pos: vec![0.0; n * ACT_DIM],
            joint_vel: vec![0.0; n * ACT_DIM],
            log_probs: vec![0.0; n],
            rewards: vec![0.0; n],
            raw_rewards: vec![0.0; n],
            values: vec![0.0; n],
            dones: vec![false; n],
            done_reasons: vec![None; n],
            bootstrap_values: vec![0.0; num_envs],
            drop_events: Vec::new(),
            term_sums: [0.0; 11],
            vx_error_sum: 0.0,
            finished_returns: Vec::new(),
        }
    }
}

struct EnvChunk {
    obs: Vec<f64>,
    actions: Vec<f64>,
    joint_pos: Vec<f64>,
    joint_vel: Vec<f64>,
    log_probs: Vec<f64>,
    rewards: Vec<f64>,
    raw_rewards: Vec<f64>,
    values: Vec<f64>,
    dones: Vec<bool>,
    reasons: Vec<Option<DoneReason>>,
    bootstrap: f64,
    drops: Vec<DropEvent>,
    term_sums: [f64; 11],
    vx_error_sum: f64,
    finished: Vec<f64>,
}

fn collect_env(
    slot: &mut EnvSlot,
    walker: &Walker,
    policy: &PolicyNet,
    value_net: &ValueNet,
    steps: usize,
    opts: &CollectOptions,
) -> Result<EnvChunk> {
    let mut c = EnvChunk {
        obs: Vec::with_capacity(steps * OBS_DIM),
        actions: Vec::with_capacity(steps * ACT_DIM),
        joint_pos: Vec::with_capacity(steps * ACT_DIM),
        joint_vel: Vec::with_capacity(steps * ACT_DIM),
        log_probs: Vec::with_capacity(steps),
        rewards: Vec::with_capacity(steps),
        raw_rewards: Vec::with_capacity(steps),
        values: Vec::with_capacity(steps),
        dones: Vec::with_capacity(steps),
        reasons: Vec::with_capacity(steps),
        bootstrap: 0.0,
        drops: Vec::new(),
        term_sums: [0.0; 11],
        vx_error_sum: 0.0,
        finished: Vec::new(),
    };
    let mut tape = crate::nn::Tape::default();
    for t in 0..steps {
        let forced: Vec<usize> = opts
            .forced_drops
            .iter()
            .filter(|f| f.env_id == slot.env_id && f.step == t)
            .flat_map(|f| f.units.iter().copied())
            .collect();
        let obs = slot.obs.as_slice();
        let dropped =
            policy.forward_tape(obs, opts.mode, &mut slot.streams.dropout, &forced, &mut tape)?;
        if let Some(d) = dropped {
            c.drops.push(DropEvent {
                iteration: opts.iteration,
                env_id: slot.env_id,
                step: t as u64,
                layer: d.layer,
                units: d.units,
            });
        }
        let (action, log_prob) =
            sample_action(tape.output(), policy.log_std(), &mut slot.streams.action_noise)?;
        let value = value_net.value(obs)?;
        let target = walker.target_from_action(&action);
        let out = walker.step(&slot.state, &target);

        let raw = out.reward_total;
        for (acc, v) in c.term_sums.iter_mut().zip(out.reward.values()) {
            *acc += v;
        }
        c.vx_error_sum += (out.state.qd[0] - out.state.command.vx).abs();
        let mut reward = raw * opts.reward_scale;
        if let (Some(DoneReason::Timeout), Some(gamma)) = (out.done, opts.timeout_bootstrap_gamma) {
            reward += gamma * value_net.value(out.obs.as_slice())?;
        }

        c.obs.extend_from_slice(obs);
        c.actions.extend_from_slice(&action);
        c.joint_pos.extend_from_slice(&slot.state.joints());
        c.joint_vel.extend_from_slice(&slot.state.joint_vels());
        c.log_probs.push(log_prob);
        c.rewards.push(reward);
        c.raw_rewards.push(raw);
        c.values.push(value);
        c.dones.push(out.done.is_some());
        c.reasons.push(out.done);
        slot.episode_return += raw;

        if out.done.is_some() {
            c.finished.push(slot.episode_return);
            slot.episode_return = 0.0;
            let (state, obs) = walker.reset(&mut slot.streams.reset, None);
            slot.state = state;
            slot.obs = obs;
        } else {
            slot.state = out.state;
            slot.obs = out.obs;
        }
    }
    c.bootstrap = value_net.value(slot.obs.as_slice())?;
    Ok(c)
}

/// Roll every environment forward `steps` control steps.
///
/// Environments whose episode ends are reset in place from their reset
/// stream. Drop events are logged with the step index inside this call.
pub fn collect(
    policy: &PolicyNet,
    value_net: &ValueNet,
    envs: &mut VecEnv,
    steps: usize,
    opts: &CollectOptions,
) -> Result<RolloutBatch> {
    if policy.obs_dim() != OBS_DIM || policy.act_dim() != ACT_DIM {
        return Err(Error::contract("policy dimensions do not match the walker"));
    }
    let walker = &envs.walker;
    let chunks: Vec<Result<EnvChunk>> = envs
        .slots
        .par_iter_mut()
        .map(|slot| collect_env(slot, walker, policy, value_net, steps, opts))
        .collect();

    let mut batch = RolloutBatch::empty(envs.slots.len(), steps);
    for (e, chunk) in chunks.into_iter().enumerate() {
        let c = chunk?;
        let r = e * steps..(e + 1) * steps;
        batch.obs[r.start * OBS_DIM..r.end * OBS_DIM].copy_from_slice(&c.obs);
        batch.actions[r.start * ACT_DIM..r.end * ACT_DIM].copy_from_slice(&c.actions);
        batch.joint_pos[r.start * ACT_DIM..r.end * ACT_DIM].copy_from_slice(&c.joint_pos);
        batch.joint_vel[r.start * ACT_DIM..r.end * ACT_DIM].copy_from_slice(&c.joint_vel);
        batch.log_probs[r.clone()].copy_from_slice(&c.log_probs);
        batch.rewards[r.clone()].copy_from_slice(&c.rewards);
        batch.raw_rewards[r.clone()].copy_from_slice(&c.raw_rewards);
        batch.values[r.clone()].copy_from_slice(&c.values);
        batch.dones[r.clone()].copy_from_slice(&c.dones);
        batch.done_reasons[r].copy_from_slice(&c.reasons);
        batch.bootstrap_values[e] = c.bootstrap;
        batch.drop_events.extend(c.drops);
        for (acc, v) in batch.term_sums.iter_mut().zip(c.term_sums) {
            *acc += v;
        }
        batch.vx_error_sum += c.vx_error_sum;
        batch.finished_returns.extend(c.finished);
    }
    Ok(batch)
}

// ---------------------------------------------------------------------------
// Batch dump: "RLDRPBAT", version u32, num_envs u32, steps u32, obs_dim u32,
// act_dim u32, then obs, actions, log_probs, rewards, values (f64 LE) and
// dones (u8), all env-major.

const BATCH_MAGIC: &[u8; 8] = b"RLDRPBAT";
pub const BATCH_FORMAT_VERSION: u32 = 1;

impl RolloutBatch {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BATCH_MAGIC);
        for v in [
            BATCH_FORMAT_VERSION,
            self.num_envs as u32,
            self.steps as u32,
            OBS_DIM as u32,
            ACT_DIM as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for arr in [&self.obs, &self.actions, &self.log_probs, &self.rewards, &self.values] {
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend(self.dones.iter().map(|&d| d as u8));
        out
    }

    /// Restore the transition arrays of a dump. Diagnostics that are not
    /// part of the format (drop events, term sums) come back empty.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = 8 + 5 * 4;
        if bytes.len() < header {
            return Err(Error::Corrupt("truncated batch header".into()));
        }
        if &bytes[..8] != BATCH_MAGIC {
            return Err(Error::Corrupt("not a rollout batch (bad magic)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != BATCH_FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: BATCH_FORMAT_VERSION,
            });
        }
        let (num_envs, steps) = (word(1) as usize, word(2) as usize);
        if word(3) as usize != OBS_DIM || word(4) as usize != ACT_DIM {
            return Err(Error::Corrupt("batch dimensions do not match the walker".into()));
        }
        let n = num_envs * steps;
        let floats = n * (OBS_DIM + ACT_DIM + 3);
        if bytes.len() != header + floats * 8 + n {
            return Err(Error::Corrupt(format!(
                "batch payload has {} bytes, expected {}",
                bytes.len(),
                header + floats * 8 + n
            )));
        }
        let mut pos = header;
        let mut take = |len: usize| -> Vec<f64> {
            let v = bytes[pos..pos + len * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += len * 8;
            v
        };
        let mut b = Self::empty(num_envs, steps);
        b.obs = take(n * OBS_DIM);
        b.actions = take(n * ACT_DIM);
        b.log_probs = take(n);
        b.rewards = take(n);
        b.values = take(n);
        let done_start = header + floats * 8;
        b.dones = bytes[done_start..].iter().map(|&d| d != 0).collect();
        Ok(b)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["env", "step", "reward", "raw_reward", "value", "log_prob", "done"]
            .map(String::from)
            .to_vec();
        header.extend((0..ACT_DIM).map(|j| format!("action{j}")));
        header.extend((0..OBS_DIM).map(|j| format!("obs{j}")));
        w.write_record(&header)?;
        for e in 0..self.num_envs {
            for t in 0..self.steps {
                let i = e * self.steps + t;
                let mut row = vec![
                    e.to_string(),
                    t.to_string(),
                    self.rewards[i].to_string(),
                    self.raw_rewards[i].to_string(),
                    self.values[i].to_string(),
                    self.log_probs[i].to_string(),
                    u8::from(self.dones[i]).to_string(),
                ];
                row.extend(self.action_at(i).iter().map(|v| v.to_string()));
                row.extend(self.obs_at(i).iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush().map_err(|e| Error::io("<batch csv>", e))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Keep Roll-Drop live during evaluation.
    pub rolldrop: bool,
    /// Sample actions instead of using the mean.
    pub stochastic: bool,
    /// Required displacement along the command (m).
    pub success_distance: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            rolldrop: false,
            stochastic: false,
            success_distance: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub distance_along_command: f64,
    pub fall: bool,
    pub steps: u64,
    pub done_reason: Option<DoneReason>,
    /// RMS of `vx - vx*` over the episode.
    pub vx_rms: f64,
    /// RMS of `pitch_rate - pitch_rate*`.
    pub pitch_rate_rms: f64,
    /// Mean absolute joint speed over joints and steps.
    pub mean_abs_qd: f64,
}

/// Success rule: no fall and at least `success_distance` travelled along the
/// commanded direction.
pub fn episode_success(fall: bool, distance_along_command: f64, success_distance: f64) -> bool {
    !fall && distance_along_command >= success_distance
}

/// Run one evaluation episode from a reset drawn on `streams.reset`.
///
/// Observation noise of level `noise` is drawn from `streams.obs_noise` and
/// applied before the policy sees each observation. By default the mean
/// action is used and Roll-Drop is off.
pub fn evaluate_episode(
    policy: &PolicyNet,
    walker: &Walker,
    cmd: Command,
    noise: f64,
    max_steps: u64,
    streams: &mut EnvStreams,
    opts: &EvalOptions,
) -> Result<EpisodeResult> {
    crate::harness::check_noise_level(noise)?;
    let (mut state, mut obs) = walker.reset(&mut streams.reset, Some(cmd));
    let x0 = state.q[0];
    let dir = cmd.vx.signum() * if cmd.vx == 0.0 { 0.0 } else { 1.0 };
    let mut reason = None;
    let mut steps = 0;
    let (mut vx_sq, mut pr_sq, mut qd_abs) = (0.0, 0.0, 0.0);
    while steps < max_steps {
        let mut seen = obs.0.clone();
        inject_noise(&mut seen, noise, &mut streams.obs_noise)?;
        let mean = if opts.rolldrop {
            policy.forward(&seen, NetMode::Rollout, &mut streams.dropout)?.0
        } else {
            policy.mean_action(&seen)?
        };
        let action = if opts.stochastic {
            sample_action(&mean, policy.log_std(), &mut streams.action_noise)?.0
        } else {
            mean
        };
        let out = walker.step(&state, &walker.target_from_action(&action));
        steps += 1;
        vx_sq += (out.state.qd[0] - cmd.vx).powi(2);
        pr_sq += (out.state.qd[2] - cmd.pitch_rate).powi(2);
        qd_abs += out.state.joint_vels().iter().map(|v| v.abs()).sum::<f64>() / 4.0;
        state = out.state;
        obs = out.obs;
        if let Some(d) = out.done {
            if d != DoneReason::Timeout {
                reason = Some(d);
                break;
            }
        }
    }
    let fall = reason.is_some_and(|r| r.is_failure());
    let distance = (state.q[0] - x0) * dir;
    let n = steps.max(1) as f64;
    Ok(EpisodeResult {
        success: episode_success(fall, distance, opts.success_distance),
        distance_along_command: distance,
        fall,
        steps,
        done_reason: reason,
        vx_rms: (vx_sq / n).sqrt(),
        pitch_rate_rms: (pr_sq / n).sqrt(),
        mean_abs_qd: qd_abs / n,
    })
}
