//! Deterministic planar two-legged walker.
//!
//! A torso with a front and a hind leg (hip + knee each, four actuated
//! joints) driven by impedance control through a motor delay line, standing
//! on a penalty-contact heightfield. `step` is a pure function of the state,
//! the joint targets and the configuration.

pub mod dynamics;
pub mod reward;
pub mod terrain;

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub use dynamics::{BodyParams, ContactParams, NDOF, NJ};
pub use reward::{compute_reward, RewardInput, RewardTerms, RewardWeights};
pub use terrain::{generate_terrain, Terrain, TerrainConfig, TerrainKind};

use dynamics::{contact_forces, kinematics, Cholesky, Vec7};

/// History depth of the joint error and velocity buffers.
pub const HISTORY: usize = 7;
/// Observation layout: gravity projection 2, base velocity 3, joint error
/// history 28, joint velocity history 28, previous action 4, contacts 2,
/// command 2.
pub const OBS_DIM: usize = 2 + 3 + HISTORY * NJ * 2 + NJ + 2 + 2;
pub const ACT_DIM: usize = NJ;

pub mod obs_index {
    use super::{HISTORY, NJ};
    pub const GRAVITY: usize = 0;
    pub const BASE_VEL: usize = 2;
    pub const JOINT_ERR: usize = 5;
    pub const JOINT_VEL: usize = JOINT_ERR + HISTORY * NJ;
    pub const PREV_ACTION: usize = JOINT_VEL + HISTORY * NJ;
    pub const CONTACTS: usize = PREV_ACTION + NJ;
    pub const COMMAND: usize = CONTACTS + 2;
}

/// Multipliers applied to raw quantities when forming the observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObsScales {
    pub lin_vel: f64,
    pub ang_vel: f64,
    pub joint_err: f64,
    pub joint_vel: f64,
}

impl Default for ObsScales {
    fn default() -> Self {
        Self {
            lin_vel: 2.0,
            ang_vel: 0.25,
            joint_err: 1.0,
            joint_vel: 0.05,
        }
    }
}

/// Training command distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommandRanges {
    pub vx_max: f64,
    pub pitch_rate_max: f64,
}

impl Default for CommandRanges {
    fn default() -> Self {
        Self {
            vx_max: 1.0,
            pitch_rate_max: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Impedance stiffness (N·m/rad).
    pub kp: f64,
    /// Impedance damping (N·m·s/rad).
    pub kd: f64,
    /// Torque saturation (N·m).
    pub torque_limit: f64,
    /// Coulomb motor friction (N·m).
    pub motor_static_friction: f64,
    /// Viscous motor friction (N·m·s/rad).
    pub motor_dynamic_friction: f64,
    /// Joint speed below which static friction is not applied (rad/s).
    pub static_friction_threshold: f64,
    /// Target-to-torque latency (s).
    pub motor_delay: f64,
    pub ground_friction: f64,
    pub gravity: f64,
    pub sim_dt: f64,
    pub control_dt: f64,
    /// Training episode length (s).
    pub episode_length: f64,
    /// Evaluation episode length (s).
    pub eval_episode_length: f64,
    pub terrain: TerrainConfig,
    pub body: BodyParams,
    pub contact: ContactParams,
    /// Standing joint pose `[hip_f, knee_f, hip_h, knee_h]` (rad).
    pub nominal_pose: [f64; 4],
    pub joint_limit: f64,
    /// Policy action `a` maps to targets `nominal_pose + action_scale * a`.
    pub action_scale: f64,
    /// Uniform joint perturbation at reset (rad).
    pub reset_perturbation: f64,
    pub fall_height: f64,
    pub fall_pitch: f64,
    pub commands: CommandRanges,
    pub rewards: RewardWeights,
    pub obs_scales: ObsScales,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            kp: 15.0,
            kd: 1.0,
            torque_limit: 20.0,
            motor_static_friction: 0.2,
            motor_dynamic_friction: 0.01,
            static_friction_threshold: 1e-3,
            motor_delay: 0.012,
            ground_friction: 0.4,
            gravity: -9.81,
            sim_dt: 0.002,
            control_dt: 0.02,
            episode_length: 4.0,
            eval_episode_length: 10.0,
            terrain: TerrainConfig::default(),
            body: BodyParams::default(),
            contact: ContactParams::default(),
            nominal_pose: [0.5, -1.0, 0.5, -1.0],
            joint_limit: 2.6,
            action_scale: 0.25,
            reset_perturbation: 0.05,
            fall_height: 0.12,
            fall_pitch: 1.0,
            commands: CommandRanges::default(),
            rewards: RewardWeights::default(),
            obs_scales: ObsScales::default(),
        }
    }
}

impl EnvConfig {
    /// Substeps per control step.
    pub fn substeps(&self) -> usize {
        (self.control_dt / self.sim_dt).round() as usize
    }

    /// Length of the motor delay line in substeps.
    pub fn delay_substeps(&self) -> usize {
        (self.motor_delay / self.sim_dt).round() as usize
    }

    pub fn steps_for(&self, seconds: f64) -> u64 {
        (seconds / self.control_dt).round() as u64
    }

    /// Base height above the terrain in the nominal pose.
    pub fn nominal_height(&self) -> f64 {
        let q = self.nominal_pose;
        0.5 * (self.body.leg_height(q[0], q[1]) + self.body.leg_height(q[2], q[3]))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("env.sim_dt", self.sim_dt),
            ("env.control_dt", self.control_dt),
            ("env.episode_length", self.episode_length),
            ("env.eval_episode_length", self.eval_episode_length),
            ("env.torque_limit", self.torque_limit),
            ("env.joint_limit", self.joint_limit),
        ];
        for (path, v) in positive {
            if !(v > 0.0) {
                return Err(Error::config(path, format!("must be positive, got {v}")));
            }
        }
        let ratio = self.control_dt / self.sim_dt;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::config(
                "env.control_dt",
                "must be an integer multiple of sim_dt",
            ));
        }
        if self.motor_delay < 0.0 {
            return Err(Error::config("env.motor_delay", "must be >= 0"));
        }
        if self.ground_friction < 0.0 {
            return Err(Error::config("env.ground_friction", "must be >= 0"));
        }
        self.terrain.validate()
    }
}

/// Velocity command.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub vx: f64,
    pub pitch_rate: f64,
}

/// Full simulator state.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkerState {
    /// `[x, z, pitch, hip_f, knee_f, hip_h, knee_h]`.
    pub q: Vec7,
    pub qd: Vec7,
    pub contacts: [bool; 2],
    pub anchors: [Option<[f64; 2]>; 2],
    pub air_time: [f64; 2],
    /// Ring buffer of joint targets, one entry per substep of latency.
    pub delay: Vec<[f64; 4]>,
    pub delay_head: usize,
    /// Most recent joint target.
    pub target: [f64; 4],
    /// Newest-first histories.
    pub joint_err_hist: [[f64; 4]; HISTORY],
    pub joint_vel_hist: [[f64; 4]; HISTORY],
    pub command: Command,
    pub time: f64,
    pub steps: u64,
}

impl WalkerState {
    pub fn joints(&self) -> [f64; 4] {
        [self.q[3], self.q[4], self.q[5], self.q[6]]
    }

    pub fn joint_vels(&self) -> [f64; 4] {
        [self.qd[3], self.qd[4], self.qd[5], self.qd[6]]
    }

    pub fn pitch(&self) -> f64 {
        self.q[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoneReason {
    FallHeight,
    FallPitch,
    TorsoContact,
    Timeout,
    Numerical,
}

impl DoneReason {
    pub fn is_fall(self) -> bool {
        matches!(
            self,
            DoneReason::FallHeight | DoneReason::FallPitch | DoneReason::TorsoContact
        )
    }

    pub fn is_failure(self) -> bool {
        self != DoneReason::Timeout
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: WalkerState,
    pub obs: Observation,
    pub reward: RewardTerms,
    /// Learning-signal total of `reward`.
    pub reward_total: f64,
    pub done: Option<DoneReason>,
    /// Mean joint torque over the substeps.
    pub torque: [f64; 4],
}

/// Impedance law with motor friction and saturation.
pub fn impedance_torque(
    q_target: &[f64; 4],
    q: &[f64; 4],
    qd: &[f64; 4],
    cfg: &EnvConfig,
) -> [f64; 4] {
    let mut out = [0.0; 4];
    for j in 0..4 {
        let mut t = cfg.kp * (q_target[j] - q[j]) - cfg.kd * qd[j];
        t -= cfg.motor_dynamic_friction * qd[j];
        if qd[j].abs() > cfg.static_friction_threshold {
            t -= cfg.motor_static_friction * qd[j].signum();
        }
        out[j] = t.clamp(-cfg.torque_limit, cfg.torque_limit);
    }
    out
}

/// Fall test on a state: base too low, pitched too far or torso touching.
pub fn fall_detector(state: &WalkerState, cfg: &EnvConfig, terrain: &Terrain) -> Option<DoneReason> {
    let base_h = state.q[1] - terrain.height(state.q[0]);
    if base_h < cfg.fall_height {
        return Some(DoneReason::FallHeight);
    }
    if state.q[2].abs() > cfg.fall_pitch {
        return Some(DoneReason::FallPitch);
    }
    let kin = kinematics(&cfg.body, &state.q, &state.qd);
    for c in kin.torso_corners(&cfg.body, state.q[2]) {
        if c[1] <= terrain.height(c[0]) {
            return Some(DoneReason::TorsoContact);
        }
    }
    None
}

/// A walker bound to its configuration and terrain.
#[derive(Debug, Clone)]
pub struct Walker {
    cfg: EnvConfig,
    terrain: Arc<Terrain>,
    episode_steps: u64,
}

impl Walker {
    pub fn new(cfg: EnvConfig, terrain: Arc<Terrain>) -> Result<Self> {
        cfg.validate()?;
        let episode_steps = cfg.steps_for(cfg.episode_length);
        Ok(Self {
            cfg,
            terrain,
            episode_steps,
        })
    }

    /// Use the evaluation episode length instead of the training one.
    pub fn for_evaluation(mut self) -> Self {
        self.episode_steps = self.cfg.steps_for(self.cfg.eval_episode_length);
        self
    }

    pub fn with_episode_steps(mut self, steps: u64) -> Self {
        self.episode_steps = steps;
        self
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn terrain(&self) -> &Terrain {
        &self.terrain
    }

    pub fn episode_steps(&self) -> u64 {
        self.episode_steps
    }

    /// Joint targets for a policy action.
    pub fn target_from_action(&self, action: &[f64]) -> [f64; 4] {
        let mut t = self.cfg.nominal_pose;
        for (tj, a) in t.iter_mut().zip(action) {
            *tj += self.cfg.action_scale * a;
        }
        t
    }

    /// Fresh episode. Draws, in order: spawn x, four joint perturbations and
    /// two command components (even when `command` is given).
    pub fn reset(&self, rng: &mut RngStream, command: Option<Command>) -> (WalkerState, Observation) {
        let cfg = &self.cfg;
        let (lo, hi) = self.terrain.extent();
        let x = rng.uniform_range(lo, hi);
        let mut joints = cfg.nominal_pose;
        for j in &mut joints {
            let u = rng.uniform_range(-1.0, 1.0);
            *j += cfg.reset_perturbation * u;
        }
        let sampled = Command {
            vx: rng.uniform_range(-cfg.commands.vx_max, cfg.commands.vx_max),
            pitch_rate: rng.uniform_range(-cfg.commands.pitch_rate_max, cfg.commands.pitch_rate_max),
        };
        let state = self.state_at(x, joints, command.unwrap_or(sampled));
        let obs = self.observe(&state);
        (state, obs)
    }

    /// Standing state at abscissa `x` with the given joint angles.
    pub fn state_at(&self, x: f64, joints: [f64; 4], command: Command) -> WalkerState {
        let cfg = &self.cfg;
        let z = self.terrain.height(x) + cfg.nominal_height();
        let q = [x, z, 0.0, joints[0], joints[1], joints[2], joints[3]];
        WalkerState {
            q,
            qd: [0.0; NDOF],
            contacts: [false; 2],
            anchors: [None; 2],
            air_time: [0.0; 2],
            delay: vec![cfg.nominal_pose; cfg.delay_substeps()],
            delay_head: 0,
            target: cfg.nominal_pose,
            joint_err_hist: [[0.0; 4]; HISTORY],
            joint_vel_hist: [[0.0; 4]; HISTORY],
            command,
            time: 0.0,
            steps: 0,
        }
    }

    pub fn observe(&self, s: &WalkerState) -> Observation {
        let sc = &self.cfg.obs_scales;
        let mut o = Vec::with_capacity(OBS_DIM);
        let (sn, cs) = s.q[2].sin_cos();
        o.push(sn);
        o.push(cs);
        // base-frame linear velocity
        o.push(sc.lin_vel * (cs * s.qd[0] + sn * s.qd[1]));
        o.push(sc.lin_vel * (-sn * s.qd[0] + cs * s.qd[1]));
        o.push(sc.ang_vel * s.qd[2]);
        for frame in &s.joint_err_hist {
            o.extend(frame.iter().map(|v| sc.joint_err * v));
        }
        for frame in &s.joint_vel_hist {
            o.extend(frame.iter().map(|v| sc.joint_vel * v));
        }
        for j in 0..NJ {
            o.push((s.target[j] - self.cfg.nominal_pose[j]) / self.cfg.action_scale);
        }
        o.extend(s.contacts.iter().map(|&c| if c { 1.0 } else { 0.0 }));
        o.push(sc.lin_vel * s.command.vx);
        o.push(sc.ang_vel * s.command.pitch_rate);
        debug_assert_eq!(o.len(), OBS_DIM);
        Observation(o)
    }

    /// Advance one control step with joint targets `q_target`.
    pub fn step(&self, state: &WalkerState, q_target: &[f64; 4]) -> StepOutcome {
        let cfg = &self.cfg;
        let mut s = state.clone();
        let n_sub = cfg.substeps();
        let dt = cfg.sim_dt;
        let mut torque_sum = [0.0; 4];
        let mut done = None;

        if !q_target.iter().all(|v| v.is_finite()) {
            done = Some(DoneReason::Numerical);
        }

        let mut contact_now = [false; 2];
        if done.is_none() {
            for _ in 0..n_sub {
                let applied = if s.delay.is_empty() {
                    *q_target
                } else {
                    let old = s.delay[s.delay_head];
                    s.delay[s.delay_head] = *q_target;
                    s.delay_head = (s.delay_head + 1) % s.delay.len();
                    old
                };
                let tau = impedance_torque(&applied, &s.joints(), &s.joint_vels(), cfg);
                for j in 0..4 {
                    torque_sum[j] += tau[j];
                }
                let kin = kinematics(&cfg.body, &s.q, &s.qd);
                let mut f = kin.passive_force(cfg.gravity);
                for j in 0..4 {
                    f[3 + j] += tau[j];
                }
                let Some(chol) = Cholesky::factor(&kin.mass_matrix()) else {
                    done = Some(DoneReason::Numerical);
                    break;
                };
                let contacts = contact_forces(
                    &kin,
                    &chol,
                    &f,
                    &s.qd,
                    dt,
                    &self.terrain,
                    &cfg.contact,
                    cfg.ground_friction,
                    &s.anchors,
                );
                for leg in 0..2 {
                    let c = &contacts[leg];
                    s.anchors[leg] = c.anchor;
                    contact_now[leg] = c.normal > 0.0;
                    let foot = &kin.feet[leg];
                    for k in 0..NDOF {
                        f[k] += foot.jac[0][k] * c.force[0] + foot.jac[1][k] * c.force[1];
                    }
                }
                let acc = chol.solve(&f);
                let mut next = s.clone();
                for k in 0..NDOF {
                    next.qd[k] += dt * acc[k];
                    next.q[k] += dt * next.qd[k];
                }
                for j in 3..NDOF {
                    if next.q[j].abs() > cfg.joint_limit {
                        next.q[j] = next.q[j].clamp(-cfg.joint_limit, cfg.joint_limit);
                        next.qd[j] = 0.0;
                    }
                }
                if !next.q.iter().chain(&next.qd).all(|v| v.is_finite() && v.abs() < 1e6) {
                    done = Some(DoneReason::Numerical);
                    break;
                }
                s = next;
            }
        }

        let torque = torque_sum.map(|t| t / n_sub as f64);
        let prev_target = s.target;
        s.target = *q_target;
        s.steps += 1;
        s.time = s.steps as f64 * cfg.control_dt;

        let kin = kinematics(&cfg.body, &s.q, &s.qd);
        let mut foot_height = [0.0; 2];
        let mut foot_vx = [0.0; 2];
        let mut touchdown = [None; 2];
        for leg in 0..2 {
            let p = kin.feet[leg].pos;
            foot_height[leg] = p[1] - self.terrain.height(p[0]);
            foot_vx[leg] = kin.feet[leg].velocity(&s.qd)[0];
            if contact_now[leg] {
                if !s.contacts[leg] && s.air_time[leg] > 0.0 {
                    touchdown[leg] = Some(s.air_time[leg]);
                }
                s.air_time[leg] = 0.0;
            } else {
                s.air_time[leg] += cfg.control_dt;
            }
        }
        s.contacts = contact_now;

        let joints = s.joints();
        let vels = s.joint_vels();
        s.joint_err_hist.copy_within(0..HISTORY - 1, 1);
        s.joint_vel_hist.copy_within(0..HISTORY - 1, 1);
        for j in 0..4 {
            s.joint_err_hist[0][j] = q_target[j] - joints[j];
            s.joint_vel_hist[0][j] = vels[j];
        }

        let reward = if done.is_some() {
            RewardTerms::default()
        } else {
            compute_reward(
                &RewardInput {
                    pitch: s.q[2],
                    vx: s.qd[0],
                    pitch_rate: s.qd[2],
                    cmd_vx: s.command.vx,
                    cmd_pitch_rate: s.command.pitch_rate,
                    prev_target,
                    target: *q_target,
                    foot_height,
                    foot_contact: contact_now,
                    foot_vx,
                    q: joints,
                    q_nominal: cfg.nominal_pose,
                    qd: vels,
                    torque,
                    touchdown_air_time: touchdown,
                },
                &cfg.rewards,
            )
        };

        if done.is_none() {
            done = fall_detector(&s, cfg, &self.terrain);
        }
        if done.is_none() && s.steps >= self.episode_steps {
            done = Some(DoneReason::Timeout);
        }
        let obs = self.observe(&s);
        StepOutcome {
            state: s,
            obs,
            reward_total: cfg.rewards.total(&reward),
            reward,
            done,
            torque,
        }
    }

    /// Total mechanical energy of a state (potential zero at z = 0).
    pub fn energy(&self, s: &WalkerState) -> f64 {
        kinematics(&self.cfg.body, &s.q, &s.qd).energy(&s.qd, self.cfg.gravity)
    }

    /// Foot positions `[front, hind]`.
    pub fn feet(&self, s: &WalkerState) -> [[f64; 2]; 2] {
        let k = kinematics(&self.cfg.body, &s.q, &s.qd);
        [k.feet[0].pos, k.feet[1].pos]
    }
}

/// Per-control-step episode trace writer.
pub struct TraceWriter<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut out = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "step", "time", "x", "z", "pitch", "vx", "vz", "pitch_rate",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for j in 0..NJ {
            header.push(format!("q{j}"));
        }
        for j in 0..NJ {
            header.push(format!("qd{j}"));
        }
        for j in 0..NJ {
            header.push(format!("target{j}"));
        }
        header.extend(RewardTerms::NAMES.iter().map(|n| format!("r_{n}")));
        header.extend(["reward_total", "contact_front", "contact_hind", "done"].map(String::from));
        out.write_record(&header)?;
        Ok(Self { out })
    }

    pub fn record(&mut self, o: &StepOutcome) -> Result<()> {
        let s = &o.state;
        let mut row = vec![s.steps.to_string(), s.time.to_string()];
        row.extend([s.q[0], s.q[1], s.q[2], s.qd[0], s.qd[1], s.qd[2]].map(|v| v.to_string()));
        row.extend(s.joints().map(|v| v.to_string()));
        row.extend(s.joint_vels().map(|v| v.to_string()));
        row.extend(s.target.map(|v| v.to_string()));
        row.extend(o.reward.values().map(|v| v.to_string()));
        row.push(o.reward_total.to_string());
        row.extend(s.contacts.map(|c| u8::from(c).to_string()));
        row.push(
            o.done
                .map(|d| serde_json::to_value(d).unwrap().as_str().unwrap().to_string())
                .unwrap_or_default(),
        );
        self.out.write_record(&row)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out
            .flush()
            .map_err(|e| Error::io("<episode trace>", e))
    }
}
