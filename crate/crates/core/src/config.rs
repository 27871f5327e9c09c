//! Experiment configuration, presets and run manifests.
//!
//! A configuration file is a JSON object whose keys mirror the field names
//! below. Missing keys take the value of the selected preset (`desk` unless
//! `"preset": "paper"` is given); unknown keys are rejected with their path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::harness::{MismatchSpec, NoiseSweepSpec, TuneSpec};
use crate::nn::Activation;
use crate::ppo::PpoConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub activation: Activation,
    /// 1-based hidden layer after which Roll-Drop acts.
    pub rolldrop_position: usize,
    pub init_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64, 64],
            value_hidden: vec![128, 64, 64],
            activation: Activation::Tanh,
            rolldrop_position: 2,
            init_std: 1.0,
        }
    }
}

/// Placeholder for episodic random base-force injection. Not implemented:
/// enabling it is a configuration error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErfiConfig {
    pub enabled: bool,
    /// Maximum horizontal base force (N).
    pub max_force: f64,
    /// Probability that an episode receives a force offset.
    pub episode_fraction: f64,
}

impl Default for ErfiConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            max_force: 0.0,
            episode_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub ppo: PpoConfig,
    pub tune: TuneSpec,
    pub eval: NoiseSweepSpec,
    pub mismatch: MismatchSpec,
    pub erfi: ErfiConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// 128 envs x 200 steps, hidden [128, 64, 64], 1500 iterations.
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            env: EnvConfig::default(),
            policy: PolicyConfig::default(),
            ppo: PpoConfig::default(),
            tune: TuneSpec::default(),
            eval: NoiseSweepSpec::default(),
            mismatch: MismatchSpec::default(),
            erfi: ErfiConfig::default(),
        }
    }

    /// Published hyper-parameters with hidden [512, 256, 256]. Compute heavy.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.preset = Preset::Paper;
        c.policy.hidden = vec![512, 256, 256];
        c.policy.value_hidden = vec![512, 256, 256];
        c.ppo.total_iterations = 3000;
        c
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.ppo.validate()?;
        let p = &self.policy;
        if p.hidden.is_empty() || p.hidden.contains(&0) {
            return Err(Error::config("policy.hidden", "needs at least one positive width"));
        }
        if p.value_hidden.contains(&0) {
            return Err(Error::config("policy.value_hidden", "widths must be positive"));
        }
        if p.rolldrop_position == 0 || p.rolldrop_position > p.hidden.len() {
            return Err(Error::config(
                "policy.rolldrop_position",
                format!("must index a hidden layer in 1..={}", p.hidden.len()),
            ));
        }
        if !(p.init_std.is_finite() && p.init_std > 0.0) {
            return Err(Error::config("policy.init_std", "must be positive"));
        }
        self.tune.validate()?;
        self.eval.validate()?;
        self.mismatch.validate()?;
        if self.erfi.enabled {
            return Err(Error::config("erfi.enabled", "the ERFI baseline is not implemented"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// Overlay `patch` onto `base`, recursing into objects. Keys absent from
/// `base` are kept so that deserialisation can reject them by path.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Parse and validate a configuration document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let user: Value = serde_json::from_str(text)?;
    if !user.is_object() {
        return Err(Error::config("<root>", "configuration must be a JSON object"));
    }
    let preset = match user.get("preset") {
        None => Preset::Desk,
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::config("preset", e.to_string()))?,
    };
    let mut tree = serde_json::to_value(ExperimentConfig::preset(preset))?;
    merge(&mut tree, user);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(tree).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load a configuration file, or the config embedded in a manifest.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let probe: Value = serde_json::from_str(&text)?;
    if probe.get("manifest_version").is_some() {
        return Ok(ExperimentManifest::parse(&text)?.config);
    }
    parse_config(&text)
}

pub const MANIFEST_VERSION: u32 = 1;

/// Provenance record written before a run computes anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub manifest_version: u32,
    pub command: String,
    pub preset: Preset,
    pub seed: u64,
    pub code_version: String,
    pub git_revision: Option<String>,
    pub created_unix: u64,
    pub out_dir: PathBuf,
    pub config: ExperimentConfig,
}

impl ExperimentManifest {
    pub fn new(config: ExperimentConfig, seed: u64, command: &str, out_dir: &Path) -> Self {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            manifest_version: MANIFEST_VERSION,
            command: command.to_string(),
            preset: config.preset,
            seed,
            code_version: format!("rolldrop {}", env!("CARGO_PKG_VERSION")),
            git_revision: git_revision(),
            created_unix,
            out_dir: out_dir.to_path_buf(),
            config,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let m: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        if m.manifest_version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: m.manifest_version,
                expected: MANIFEST_VERSION,
            });
        }
        m.config.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_desk() {
        assert_eq!(parse_config("{}").unwrap(), ExperimentConfig::desk());
    }

    #[test]
    fn clip_range_override_accepted() {
        let c = parse_config(r#"{"ppo": {"clip_range": 0.2}}"#).unwrap();
        assert_eq!(c.ppo.clip_range, 0.2);
        assert_eq!(c, ExperimentConfig::desk());
    }

    #[test]
    fn unknown_key_names_path() {
        let err = parse_config(r#"{"ppo": {"cliprange": 0.2}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ppo"), "{msg}");
        assert!(msg.contains("cliprange"), "{msg}");
    }

    #[test]
    fn type_mismatch_names_path() {
        let err = parse_config(r#"{"env": {"kp": "stiff"}}"#).unwrap_err();
        assert!(err.to_string().contains("env.kp"), "{err}");
    }

    #[test]
    fn constraint_violation_names_path() {
        let err = parse_config(r#"{"ppo": {"rolldrop_p": 1.0}}"#).unwrap_err();
        assert!(err.to_string().contains("rolldrop_p"), "{err}");
    }

    #[test]
    fn paper_preset_defaults() {
        let c = parse_config(r#"{"preset": "paper"}"#).unwrap();
        assert_eq!(c.policy.hidden, vec![512, 256, 256]);
        assert_eq!(c.ppo.batch_size(), 25600);
    }

    #[test]
    fn round_trip_fixed_point() {
        let c = parse_config(r#"{"ppo": {"rolldrop_p": 0.0001}, "env": {"kp": 20.0}}"#).unwrap();
        let again = parse_config(&c.to_json()).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.to_json(), c.to_json());
    }

    #[test]
    fn erfi_slot_is_rejected_when_enabled() {
        assert!(parse_config(r#"{"erfi": {"enabled": true}}"#).is_err());
    }
}
