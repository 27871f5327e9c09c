//! Planar analogues of the locomotion reward table.

use serde::{Deserialize, Serialize};

/// Term weights. Penalty terms are multiplied by `k_c` as well.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub orientation: f64,
    pub lin_vel: f64,
    pub ang_vel: f64,
    pub action_smoothness: f64,
    pub feet_clearance: f64,
    pub foot_slip: f64,
    pub joint_pos: f64,
    pub joint_vel: f64,
    pub torque: f64,
    pub swing_duration: f64,
    pub pronking: f64,
    /// Sharpness of the squared-exponential tracking kernel.
    pub tracking_sharpness: f64,
    /// Target swing-foot height (m).
    pub clearance_height: f64,
    /// Swing duration that earns zero bonus (s).
    pub swing_target: f64,
    pub k_c: f64,
    /// Floor the per-step total at zero so that ending an episode early
    /// can never raise the return.
    pub only_positive_total: bool,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            orientation: -30.0,
            lin_vel: 15.0,
            ang_vel: 15.0,
            action_smoothness: -7.0,
            feet_clearance: -400.0,
            foot_slip: -8.0,
            joint_pos: -4.0,
            joint_vel: -0.01,
            torque: -0.4,
            swing_duration: 8.0,
            pronking: -35.0,
            tracking_sharpness: 5.0,
            clearance_height: 0.1,
            swing_target: 0.5,
            k_c: 1.0,
            only_positive_total: true,
        }
    }
}

impl RewardWeights {
    /// Per-step total used as the learning signal.
    pub fn total(&self, terms: &RewardTerms) -> f64 {
        let t = terms.total();
        if self.only_positive_total {
            t.max(0.0)
        } else {
            t
        }
    }
}

/// Everything the reward looks at after one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardInput {
    pub pitch: f64,
    pub vx: f64,
    pub pitch_rate: f64,
    pub cmd_vx: f64,
    pub cmd_pitch_rate: f64,
    pub prev_target: [f64; 4],
    pub target: [f64; 4],
    /// Foot height above the terrain (m).
    pub foot_height: [f64; 2],
    pub foot_contact: [bool; 2],
    /// Horizontal foot velocity (m/s).
    pub foot_vx: [f64; 2],
    pub q: [f64; 4],
    pub q_nominal: [f64; 4],
    pub qd: [f64; 4],
    pub torque: [f64; 4],
    /// Air time of feet that touched down during this step.
    pub touchdown_air_time: [Option<f64>; 2],
}

/// Weighted reward terms of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    pub orientation: f64,
    pub lin_vel: f64,
    pub ang_vel: f64,
    pub action_smoothness: f64,
    pub feet_clearance: f64,
    pub foot_slip: f64,
    pub joint_pos: f64,
    pub joint_vel: f64,
    pub torque: f64,
    pub swing_duration: f64,
    pub pronking: f64,
}

impl RewardTerms {
    pub const NAMES: [&'static str; 11] = [
        "orientation",
        "lin_vel",
        "ang_vel",
        "action_smoothness",
        "feet_clearance",
        "foot_slip",
        "joint_pos",
        "joint_vel",
        "torque",
        "swing_duration",
        "pronking",
    ];

    pub fn values(&self) -> [f64; 11] {
        [
            self.orientation,
            self.lin_vel,
            self.ang_vel,
            self.action_smoothness,
            self.feet_clearance,
            self.foot_slip,
            self.joint_pos,
            self.joint_vel,
            self.torque,
            self.swing_duration,
            self.pronking,
        ]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, f64)> {
        Self::NAMES.into_iter().zip(self.values())
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }
}

fn sq(v: f64) -> f64 {
    v * v
}

fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum()
}

/// `exp(-k (a - b)^2)`.
pub fn tracking_kernel(a: f64, b: f64, k: f64) -> f64 {
    (-k * sq(a - b)).exp()
}

pub fn compute_reward(input: &RewardInput, w: &RewardWeights) -> RewardTerms {
    let kc = w.k_c;
    let mut clearance = 0.0;
    let mut slip = 0.0;
    let mut swing = 0.0;
    for f in 0..2 {
        if input.foot_contact[f] {
            slip += sq(input.foot_vx[f]);
        } else {
            clearance += sq(w.clearance_height - input.foot_height[f]);
        }
        if let Some(t_air) = input.touchdown_air_time[f] {
            swing += t_air - w.swing_target;
        }
    }
    let smooth: Vec<f64> = input
        .target
        .iter()
        .zip(&input.prev_target)
        .map(|(a, b)| a - b)
        .collect();
    let jp: Vec<f64> = input
        .q
        .iter()
        .zip(&input.q_nominal)
        .map(|(a, b)| a - b)
        .collect();
    let airborne = !input.foot_contact[0] && !input.foot_contact[1];
    RewardTerms {
        orientation: w.orientation
            * kc
            * (sq(input.pitch.sin()) + sq(1.0 - input.pitch.cos())),
        lin_vel: w.lin_vel * tracking_kernel(input.cmd_vx, input.vx, w.tracking_sharpness),
        ang_vel: w.ang_vel
            * tracking_kernel(input.cmd_pitch_rate, input.pitch_rate, w.tracking_sharpness),
        action_smoothness: w.action_smoothness * kc * norm_sq(&smooth),
        feet_clearance: w.feet_clearance * kc * clearance,
        foot_slip: w.foot_slip * kc * slip,
        joint_pos: w.joint_pos * kc * norm_sq(&jp),
        joint_vel: w.joint_vel * kc * norm_sq(&input.qd),
        torque: w.torque * kc * norm_sq(&input.torque),
        swing_duration: w.swing_duration * swing,
        pronking: w.pronking * kc * if airborne { 1.0 } else { 0.0 },
    }
}
