//! Robustness evaluation battery: observation-noise sweeps, dropout-probability
//! tuning, gain mismatch and multi-seed comparisons.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::env::{generate_terrain, Command, DoneReason, EnvConfig, TerrainConfig, Walker};
use crate::error::{Error, Result};
use crate::nn::{PolicyNet, SIGMA_MIN};
use crate::ppo::{train, TrainRecord};
use crate::rng::{EnvStreams, RngStream};
use crate::rollout::{evaluate_episode, EpisodeResult, EvalOptions};

/// Upper (exclusive) bound of the multiplicative noise level.
pub const MAX_NOISE: f64 = 0.6;

/// Multiplicative uniform observation noise: `s_i <- s_i * (1 + n * u_i)`,
/// `u_i ~ U(-1, 1)`. Always consumes one word per component.
pub fn inject_noise(obs: &mut [f64], n: f64, rng: &mut RngStream) -> Result<()> {
    check_noise_level(n)?;
    for s in obs.iter_mut() {
        let u = rng.uniform_range(-1.0, 1.0);
        *s += n * u * *s;
    }
    Ok(())
}

/// Apply the noise model with explicit draws `u`.
pub fn inject_noise_with(obs: &mut [f64], n: f64, u: &[f64]) -> Result<()> {
    check_noise_level(n)?;
    if u.len() != obs.len() {
        return Err(Error::contract("one draw per observation component required"));
    }
    for (s, u) in obs.iter_mut().zip(u) {
        *s += n * u * *s;
    }
    Ok(())
}

pub fn check_noise_level(n: f64) -> Result<()> {
    if !(0.0..MAX_NOISE).contains(&n) {
        return Err(Error::config("noise", format!("level {n} outside [0, {MAX_NOISE})")));
    }
    Ok(())
}

/// Terrain used by the robustness evaluations.
pub fn eval_terrain() -> TerrainConfig {
    TerrainConfig::rough(0.02, 0.25)
}

// ---------------------------------------------------------------------------
// Noise sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSweepSpec {
    pub levels: Vec<f64>,
    pub runs_per_level: usize,
    pub terrain: TerrainConfig,
    /// Commanded forward speed (m/s); the pitch-rate command is zero.
    pub command_vx: f64,
    pub success_distance: f64,
    /// Episode length in control steps; `None` uses the evaluation length.
    pub max_steps: Option<u64>,
    pub rolldrop: bool,
    pub stochastic: bool,
    /// Seed of terrain, spawn and noise draws.
    pub seed: u64,
}

impl Default for NoiseSweepSpec {
    fn default() -> Self {
        Self {
            levels: (0..12).map(|i| i as f64 * 0.05).collect(),
            runs_per_level: 100,
            terrain: eval_terrain(),
            command_vx: 0.5,
            success_distance: 1.0,
            max_steps: None,
            rolldrop: false,
            stochastic: false,
            seed: 0,
        }
    }
}

impl NoiseSweepSpec {
    pub fn validate(&self) -> Result<()> {
        for &n in &self.levels {
            check_noise_level(n).map_err(|_| Error::config("eval.levels", format!("{n} outside [0, 0.6)")))?;
        }
        if self.runs_per_level == 0 {
            return Err(Error::config("eval.runs_per_level", "must be at least 1"));
        }
        self.terrain.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelResult {
    pub level: f64,
    pub successes: usize,
    pub failures_fall: usize,
    pub failures_distance: usize,
    pub success_rate: f64,
    pub runs: Vec<EpisodeResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub levels: Vec<LevelResult>,
}

pub const SWEEP_CSV_HEADER: &str = "level,runs,successes,failures_fall,failures_distance,success_rate";
pub const SWEEP_RUNS_CSV_HEADER: &str = "level,run,success,fall,distance_m,steps,done_reason,vx_rms,mean_abs_qd";

impl SweepResult {
    pub fn from_runs(levels: &[f64], runs: Vec<Vec<EpisodeResult>>) -> Self {
        let levels = levels
            .iter()
            .zip(runs)
            .map(|(&level, runs)| {
                let successes = runs.iter().filter(|r| r.success).count();
                let failures_fall = runs.iter().filter(|r| !r.success && r.fall).count();
                let failures_distance = runs.len() - successes - failures_fall;
                LevelResult {
                    level,
                    successes,
                    failures_fall,
                    failures_distance,
                    success_rate: successes as f64 / runs.len().max(1) as f64,
                    runs,
                }
            })
            .collect();
        Self { levels }
    }

    pub fn success_rates(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.success_rate).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SWEEP_CSV_HEADER.split(','))?;
        for l in &self.levels {
            w.write_record([
                l.level.to_string(),
                l.runs.len().to_string(),
                l.successes.to_string(),
                l.failures_fall.to_string(),
                l.failures_distance.to_string(),
                l.success_rate.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<sweep csv>", e))?;
        Ok(())
    }

    pub fn write_runs_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SWEEP_RUNS_CSV_HEADER.split(','))?;
        for l in &self.levels {
            for (i, r) in l.runs.iter().enumerate() {
                w.write_record([
                    l.level.to_string(),
                    i.to_string(),
                    u8::from(r.success).to_string(),
                    u8::from(r.fall).to_string(),
                    r.distance_along_command.to_string(),
                    r.steps.to_string(),
                    done_reason_name(r.done_reason).to_string(),
                    r.vx_rms.to_string(),
                    r.mean_abs_qd.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<sweep csv>", e))?;
        Ok(())
    }
}

fn done_reason_name(r: Option<DoneReason>) -> &'static str {
    match r {
        None => "",
        Some(DoneReason::FallHeight) => "fall_height",
        Some(DoneReason::FallPitch) => "fall_pitch",
        Some(DoneReason::TorsoContact) => "torso_contact",
        Some(DoneReason::Timeout) => "timeout",
        Some(DoneReason::Numerical) => "numerical",
    }
}

/// Walker for evaluation: `env` with the sweep terrain and the evaluation
/// episode length.
pub fn eval_walker(env: &EnvConfig, terrain: &TerrainConfig, seed: u64) -> Result<Walker> {
    let mut cfg = env.clone();
    cfg.terrain = terrain.clone();
    let t = Arc::new(generate_terrain(&cfg.terrain, seed)?);
    Ok(Walker::new(cfg, t)?.for_evaluation())
}

/// Run `runs_per_level` episodes at every noise level.
///
/// Run `r` uses the streams of environment slot `r`, so every level sees the
/// same spawn points and only the noise magnitude changes.
pub fn run_noise_sweep(policy: &PolicyNet, env: &EnvConfig, spec: &NoiseSweepSpec) -> Result<SweepResult> {
    spec.validate()?;
    let walker = eval_walker(env, &spec.terrain, spec.seed)?;
    let max_steps = spec.max_steps.unwrap_or(walker.episode_steps());
    let opts = EvalOptions {
        rolldrop: spec.rolldrop,
        stochastic: spec.stochastic,
        success_distance: spec.success_distance,
    };
    let cmd = Command {
        vx: spec.command_vx,
        pitch_rate: 0.0,
    };
    let jobs: Vec<(usize, usize)> = (0..spec.levels.len())
        .flat_map(|l| (0..spec.runs_per_level).map(move |r| (l, r)))
        .collect();
    let results: Vec<Result<EpisodeResult>> = jobs
        .par_iter()
        .map(|&(l, r)| {
            let mut streams = EnvStreams::new(spec.seed, r as u32);
            evaluate_episode(policy, &walker, cmd, spec.levels[l], max_steps, &mut streams, &opts)
        })
        .collect();
    let mut per_level: Vec<Vec<EpisodeResult>> = vec![Vec::with_capacity(spec.runs_per_level); spec.levels.len()];
    for ((l, _), r) in jobs.into_iter().zip(results) {
        per_level[l].push(r?);
    }
    Ok(SweepResult::from_runs(&spec.levels, per_level))
}

// ---------------------------------------------------------------------------
// Dropout tuning

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneSpec {
    /// Candidate Roll-Drop probabilities, largest first.
    pub candidate_ps: Vec<f64>,
    /// Iterations per candidate run.
    pub iterations: u64,
    /// Minimum ratio of candidate to baseline final reward.
    pub reward_ratio: f64,
    /// Allowed distance of the tail mean std from the floor.
    pub sigma_tolerance: f64,
    /// Fraction of iterations forming the "final" window.
    pub tail_fraction: f64,
}

impl Default for TuneSpec {
    fn default() -> Self {
        Self {
            candidate_ps: vec![0.01, 0.001, 0.0001],
            iterations: 1500,
            reward_ratio: 0.8,
            sigma_tolerance: 0.05,
            tail_fraction: 0.1,
        }
    }
}

impl TuneSpec {
    pub fn validate(&self) -> Result<()> {
        for &p in &self.candidate_ps {
            crate::nn::check_probability("tune.candidate_ps", p)?;
        }
        if self.candidate_ps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::config("tune.candidate_ps", "must be strictly descending"));
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return Err(Error::config("tune.tail_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Mean of `f` over the last `fraction` of `records` (at least one record).
pub fn tail_mean(records: &[TrainRecord], fraction: f64, f: impl Fn(&TrainRecord) -> f64) -> f64 {
    if records.is_empty() {
        return f64::NAN;
    }
    let k = ((records.len() as f64 * fraction).ceil() as usize).clamp(1, records.len());
    records[records.len() - k..].iter().map(f).sum::<f64>() / k as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub p: f64,
    pub final_reward: f64,
    pub tail_sigma: f64,
    pub reward_ok: bool,
    pub sigma_ok: bool,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub baseline: CandidateReport,
    pub candidates: Vec<CandidateReport>,
    /// Largest stable candidate, if any.
    pub chosen: Option<f64>,
}

pub const TUNE_CSV_HEADER: &str = "p,final_reward,tail_sigma,reward_ok,sigma_ok,stable";

impl TuneReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TUNE_CSV_HEADER.split(','))?;
        for c in std::iter::once(&self.baseline).chain(&self.candidates) {
            w.write_record([
                c.p.to_string(),
                c.final_reward.to_string(),
                c.tail_sigma.to_string(),
                u8::from(c.reward_ok).to_string(),
                u8::from(c.sigma_ok).to_string(),
                u8::from(c.stable).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<tune csv>", e))?;
        Ok(())
    }
}

/// Stability verdict of one run against the p = 0 final reward.
pub fn classify_run(p: f64, records: &[TrainRecord], baseline_reward: f64, spec: &TuneSpec) -> CandidateReport {
    let final_reward = tail_mean(records, spec.tail_fraction, |r| r.mean_reward);
    let tail_sigma = tail_mean(records, spec.tail_fraction, |r| r.mean_sigma);
    let reward_ok = final_reward >= spec.reward_ratio * baseline_reward;
    let sigma_ok = tail_sigma - SIGMA_MIN <= spec.sigma_tolerance;
    CandidateReport {
        p,
        final_reward,
        tail_sigma,
        reward_ok,
        sigma_ok,
        stable: reward_ok && sigma_ok,
    }
}

/// Pick the largest stable candidate given already-trained runs.
pub fn choose_dropout(baseline: &[TrainRecord], runs: &[(f64, Vec<TrainRecord>)], spec: &TuneSpec) -> Result<TuneReport> {
    let base_reward = tail_mean(baseline, spec.tail_fraction, |r| r.mean_reward);
    if !(base_reward > 0.0) {
        return Err(Error::contract(format!(
            "baseline run did not converge (final reward {base_reward}); tuning needs a positive p = 0 reward"
        )));
    }
    let baseline = classify_run(0.0, baseline, base_reward, spec);
    let candidates: Vec<CandidateReport> = runs
        .iter()
        .map(|(p, recs)| classify_run(*p, recs, base_reward, spec))
        .collect();
    let chosen = candidates.iter().filter(|c| c.stable).map(|c| c.p).reduce(f64::max);
    Ok(TuneReport {
        baseline,
        candidates,
        chosen,
    })
}

/// Train at p = 0 and at every candidate, then choose. Runs go to
/// `out/p_<p>`.
pub fn tune_dropout(base: &ExperimentConfig, seed: u64, out: &Path) -> Result<TuneReport> {
    let spec = &base.tune;
    spec.validate()?;
    let run = |p: f64| -> Result<Vec<TrainRecord>> {
        let mut cfg = base.clone();
        cfg.ppo.rolldrop_p = p;
        cfg.ppo.total_iterations = spec.iterations;
        Ok(train(&cfg, seed, &out.join(format!("p_{p}")), &mut |_, _| {})?.records)
    };
    let baseline = run(0.0)?;
    let mut runs = Vec::new();
    for &p in &spec.candidate_ps {
        runs.push((p, run(p)?));
    }
    choose_dropout(&baseline, &runs, spec)
}

// ---------------------------------------------------------------------------
// Gain mismatch

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MismatchSpec {
    pub train_kp: f64,
    pub deploy_kp: f64,
    pub episodes: usize,
    pub terrain: TerrainConfig,
    pub max_steps: Option<u64>,
    pub seed: u64,
}

impl Default for MismatchSpec {
    fn default() -> Self {
        Self {
            train_kp: 20.0,
            deploy_kp: 15.0,
            episodes: 20,
            terrain: TerrainConfig::default(),
            max_steps: None,
            seed: 0,
        }
    }
}

impl MismatchSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_kp > 0.0 && self.deploy_kp > 0.0) {
            return Err(Error::config("mismatch.train_kp", "gains must be positive"));
        }
        if self.episodes == 0 {
            return Err(Error::config("mismatch.episodes", "must be at least 1"));
        }
        self.terrain.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchRow {
    pub variant: String,
    pub kp: f64,
    pub episodes: usize,
    pub falls: usize,
    pub fall_rate: f64,
    pub vx_rms: f64,
    pub pitch_rate_rms: f64,
    pub mean_abs_qd: f64,
}

pub const MISMATCH_CSV_HEADER: &str = "variant,kp,episodes,falls,fall_rate,vx_rms,pitch_rate_rms,mean_abs_qd";

pub fn write_mismatch_csv<W: Write>(rows: &[MismatchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MISMATCH_CSV_HEADER.split(','))?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.kp.to_string(),
            r.episodes.to_string(),
            r.falls.to_string(),
            r.fall_rate.to_string(),
            r.vx_rms.to_string(),
            r.pitch_rate_rms.to_string(),
            r.mean_abs_qd.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<mismatch csv>", e))?;
    Ok(())
}

/// Evaluate a policy for `episodes` zero-command episodes at gain `kp`.
pub fn evaluate_at_gain(
    name: &str,
    policy: &PolicyNet,
    env: &EnvConfig,
    kp: f64,
    spec: &MismatchSpec,
) -> Result<MismatchRow> {
    let mut cfg = env.clone();
    cfg.kp = kp;
    let walker = eval_walker(&cfg, &spec.terrain, spec.seed)?;
    let max_steps = spec.max_steps.unwrap_or(walker.episode_steps());
    let cmd = Command { vx: 0.0, pitch_rate: 0.0 };
    let runs: Vec<Result<EpisodeResult>> = (0..spec.episodes)
        .into_par_iter()
        .map(|e| {
            let mut streams = EnvStreams::new(spec.seed, e as u32);
            evaluate_episode(policy, &walker, cmd, 0.0, max_steps, &mut streams, &EvalOptions::default())
        })
        .collect();
    let runs: Vec<EpisodeResult> = runs.into_iter().collect::<Result<_>>()?;
    let n = runs.len() as f64;
    let falls = runs.iter().filter(|r| r.fall).count();
    Ok(MismatchRow {
        variant: name.to_string(),
        kp,
        episodes: runs.len(),
        falls,
        fall_rate: falls as f64 / n,
        vx_rms: runs.iter().map(|r| r.vx_rms).sum::<f64>() / n,
        pitch_rate_rms: runs.iter().map(|r| r.pitch_rate_rms).sum::<f64>() / n,
        mean_abs_qd: runs.iter().map(|r| r.mean_abs_qd).sum::<f64>() / n,
    })
}

/// Evaluate every policy at the training gain (sanity arm) and at the
/// deployment gain.
pub fn run_mismatch(spec: &MismatchSpec, env: &EnvConfig, policies: &[(&str, &PolicyNet)]) -> Result<Vec<MismatchRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for kp in [spec.train_kp, spec.deploy_kp] {
        for (name, p) in policies {
            rows.push(evaluate_at_gain(name, p, env, kp, spec)?);
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Training variants and multi-seed reports

/// A point in the (Roll-Drop, train-dropout) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub rolldrop_p: f64,
    pub train_dropout_p: f64,
}

impl Variant {
    pub fn new(name: &str, rolldrop_p: f64, train_dropout_p: f64) -> Self {
        Self {
            name: name.to_string(),
            rolldrop_p,
            train_dropout_p,
        }
    }

    pub fn baseline() -> Self {
        Self::new("baseline", 0.0, 0.0)
    }

    pub fn rolldrop(p: f64) -> Self {
        Self::new("rolldrop", p, 0.0)
    }

    /// No randomisation, Roll-Drop, train-time dropout, and both combined.
    pub fn comparison_set() -> Vec<Self> {
        vec![
            Self::baseline(),
            Self::rolldrop(1e-4),
            Self::new("train_dropout", 0.0, 1e-3),
            Self::new("train_dropout_rolldrop", 1e-4, 1e-3),
        ]
    }

    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        c.ppo.rolldrop_p = self.rolldrop_p;
        c.ppo.train_dropout_p = self.train_dropout_p;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantCurves {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    /// `rewards[s][i]`: mean reward of seed `s` at iteration `i`.
    pub rewards: Vec<Vec<f64>>,
}

impl VariantCurves {
    /// Cross-seed mean and population std per iteration.
    pub fn mean_std(&self) -> Vec<(f64, f64)> {
        let len = self.rewards.iter().map(Vec::len).min().unwrap_or(0);
        (0..len)
            .map(|i| mean_std(&self.rewards.iter().map(|r| r[i]).collect::<Vec<_>>()))
            .collect()
    }

    /// Mean reward of each seed over the final `fraction` of iterations.
    pub fn final_rewards(&self, fraction: f64) -> Vec<f64> {
        self.rewards
            .iter()
            .map(|r| {
                let k = ((r.len() as f64 * fraction).ceil() as usize).clamp(1, r.len().max(1));
                r[r.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
            })
            .collect()
    }
}

pub fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub variants: Vec<VariantCurves>,
}

impl MultiSeedReport {
    /// `iteration,<v>_mean,<v>_std,...` for every variant.
    pub fn write_curves_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["iteration".to_string()];
        for v in &self.variants {
            header.push(format!("{}_mean", v.variant.name));
            header.push(format!("{}_std", v.variant.name));
        }
        w.write_record(&header)?;
        let curves: Vec<Vec<(f64, f64)>> = self.variants.iter().map(|v| v.mean_std()).collect();
        let len = curves.iter().map(Vec::len).min().unwrap_or(0);
        for i in 0..len {
            let mut row = vec![i.to_string()];
            for c in &curves {
                row.push(c[i].0.to_string());
                row.push(c[i].1.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<multi-seed csv>", e))?;
        Ok(())
    }

    /// `variant,seed,final_reward`.
    pub fn write_final_csv<W: Write>(&self, fraction: f64, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["variant", "seed", "final_reward"])?;
        for v in &self.variants {
            for (s, r) in v.seeds.iter().zip(v.final_rewards(fraction)) {
                w.write_record([v.variant.name.clone(), s.to_string(), r.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<multi-seed csv>", e))?;
        Ok(())
    }
}

/// Train every variant on every seed into `out/<variant>/seed_<s>`.
pub fn multi_seed_report(
    config: &ExperimentConfig,
    variants: &[Variant],
    seeds: &[u64],
    out: &Path,
) -> Result<MultiSeedReport> {
    let mut report = MultiSeedReport { variants: Vec::new() };
    for v in variants {
        let cfg = v.apply(config);
        let mut rewards = Vec::new();
        for &s in seeds {
            let dir = out.join(&v.name).join(format!("seed_{s}"));
            let outcome = train(&cfg, s, &dir, &mut |_, _| {})?;
            rewards.push(outcome.records.iter().map(|r| r.mean_reward).collect());
        }
        report.variants.push(VariantCurves {
            variant: v.clone(),
            seeds: seeds.to_vec(),
            rewards,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::RewardTerms;
    use crate::ppo::LossComponents;

    #[test]
    fn noise_examples() {
        let mut s = vec![1.0, 2.0];
        inject_noise_with(&mut s, 0.2, &[0.5, -0.2]).unwrap();
        assert!((s[0] - 1.1).abs() < 1e-15 && (s[1] - 1.92).abs() < 1e-15);
        let mut rng = RngStream::new(0, 0, crate::rng::StreamId::ObsNoise);
        let mut z = vec![0.0; 5];
        inject_noise(&mut z, 0.5, &mut rng).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let mut o = vec![0.3, -2.0];
        inject_noise(&mut o, 0.0, &mut rng).unwrap();
        assert_eq!(o, vec![0.3, -2.0]);
        assert!(inject_noise(&mut o, 0.6, &mut rng).is_err());
        assert!(inject_noise(&mut o, -0.1, &mut rng).is_err());
    }

    #[test]
    fn default_grid_has_twelve_levels() {
        let s = NoiseSweepSpec::default();
        assert_eq!(s.levels.len(), 12);
        assert!((s.levels[11] - 0.55).abs() < 1e-12);
        s.validate().unwrap();
    }

    fn record(mean_reward: f64, mean_sigma: f64) -> TrainRecord {
        TrainRecord {
            iteration: 0,
            mean_reward,
            terms: RewardTerms::default(),
            mean_sigma,
            drop_events: 0,
            episodes_finished: 0,
            mean_episode_return: f64::NAN,
            mean_vx_error: 0.0,
            loss: LossComponents::default(),
            grad_norm: 0.0,
            aborted: false,
            wall_time: 0.0,
        }
    }

    #[test]
    fn tuning_picks_largest_stable() {
        let spec = TuneSpec::default();
        let base: Vec<_> = (0..10).map(|_| record(10.0, 0.21)).collect();
        let runs = vec![
            (0.01, (0..10).map(|_| record(9.0, 0.6)).collect()),
            (0.001, (0..10).map(|_| record(8.5, 0.22)).collect()),
            (0.0001, (0..10).map(|_| record(9.9, 0.2)).collect()),
        ];
        let rep = choose_dropout(&base, &runs, &spec).unwrap();
        assert!(rep.baseline.stable);
        assert!(!rep.candidates[0].stable && !rep.candidates[0].sigma_ok);
        assert_eq!(rep.chosen, Some(0.001));
    }

    #[test]
    fn tuning_reports_no_choice() {
        let spec = TuneSpec::default();
        let base: Vec<_> = (0..10).map(|_| record(10.0, 0.2)).collect();
        let runs = vec![(0.01, (0..10).map(|_| record(1.0, 0.2)).collect())];
        assert_eq!(choose_dropout(&base, &runs, &spec).unwrap().chosen, None);
    }

    #[test]
    fn count_arithmetic() {
        let mk = |success, fall| EpisodeResult {
            success,
            distance_along_command: 0.0,
            fall,
            steps: 1,
            done_reason: None,
            vx_rms: 0.0,
            pitch_rate_rms: 0.0,
            mean_abs_qd: 0.0,
        };
        let r = SweepResult::from_runs(&[0.0], vec![vec![mk(true, false), mk(false, true), mk(false, false), mk(true, false)]]);
        let l = &r.levels[0];
        assert_eq!((l.successes, l.failures_fall, l.failures_distance), (2, 1, 1));
        assert_eq!(l.success_rate, 0.5);
    }

    #[test]
    fn multi_seed_statistics() {
        let v = VariantCurves {
            variant: Variant::baseline(),
            seeds: vec![0, 1],
            rewards: vec![vec![1.0, 2.0, 3.0], vec![3.0, 4.0, 5.0]],
        };
        assert_eq!(v.mean_std(), vec![(2.0, 1.0), (3.0, 1.0), (4.0, 1.0)]);
        assert_eq!(v.final_rewards(0.1), vec![3.0, 5.0]);
    }
}
