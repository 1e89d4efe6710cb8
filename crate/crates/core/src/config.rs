//! Run configuration: one JSON document with a block per subsystem,
//! dotted command-line overrides, and a content hash recorded with every
//! artifact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{DynamicsConfig, EnvConfig};
use crate::eval::EvalConfig;
use crate::nets::NetConfig;
use crate::rewards::RewardBreakdown;
use crate::tasks::TaskConfig;
use crate::trainer::{PpoConfig, TrainSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{origin}: invalid value at `{path}`: {message}")]
    Parse { origin: String, path: String, message: String },
    #[error("override `{key}`: {message}")]
    Override { key: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("run directory {0} already exists and is not empty (use --force to reuse it)")]
    RunDirExists(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Multiplier applied to raw rewards during training.
    pub scale: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { scale: 1.0 / RewardBreakdown::MAX }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub addr: String,
    /// Simulated seconds per wall-clock second.
    pub time_scale: f64,
    pub telemetry_hz: f64,
    /// Outbound frames buffered per client before the oldest are dropped.
    pub client_queue: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { addr: "127.0.0.1:8765".into(), time_scale: 1.0, telemetry_hz: 30.0, client_queue: 64 }
    }
}

pub const MAX_TIME_SCALE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dynamics: DynamicsConfig,
    pub tasks: TaskConfig,
    pub reward: RewardConfig,
    pub network: NetConfig,
    pub ppo: PpoConfig,
    pub eval: EvalConfig,
    pub service: ServiceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dynamics: DynamicsConfig::default(),
            tasks: TaskConfig::default(),
            reward: RewardConfig::default(),
            network: NetConfig::default(),
            ppo: PpoConfig::default(),
            eval: EvalConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| ConfigError::Invalid(m);
        self.dynamics.params.validate().map_err(|e| inv(format!("dynamics.params: {e}")))?;
        self.network.validate().map_err(|e| inv(format!("network: {e}")))?;
        self.ppo.validate().map_err(|e| inv(format!("ppo: {e}")))?;
        if !(self.reward.scale > 0.0 && self.reward.scale.is_finite()) {
            return Err(inv("reward.scale must be positive".into()));
        }
        if self.tasks.train_tasks.is_empty() {
            return Err(inv("tasks.train_tasks must list at least one task".into()));
        }
        if self.tasks.horizon == 0 || self.eval.horizon == 0 {
            return Err(inv("episode horizons must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.level) {
            return Err(inv("eval.level must lie in [0, 1]".into()));
        }
        let ts = self.service.time_scale;
        if !(ts > 0.0 && ts <= MAX_TIME_SCALE) {
            return Err(inv(format!("service.time_scale must lie in (0, {MAX_TIME_SCALE}]")));
        }
        if !(self.service.telemetry_hz > 0.0) || self.service.client_queue == 0 {
            return Err(inv("service.telemetry_hz and service.client_queue must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable")))
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig { dynamics: self.dynamics.clone(), tasks: self.tasks.clone() }
    }

    pub fn train_spec(&self) -> TrainSpec {
        TrainSpec {
            env: self.env_config(),
            net: self.network.clone(),
            ppo: self.ppo.clone(),
            reward_scale: self.reward.scale,
            seed: self.seed,
            config_hash: self.hash(),
        }
    }
}

/// Parses an override value as JSON, falling back to a bare string.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to `doc`. Only keys that exist in the schema may be
/// set.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override {
        key: spec.to_string(),
        message: "expected key=value".into(),
    })?;
    let key = key.trim();
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let err = |m: &str| ConfigError::Override { key: key.to_string(), message: m.to_string() };
        let here = parts[..=i].join(".");
        cur = match cur {
            Value::Object(map) => map.get_mut(*part).ok_or_else(|| err(&format!("unknown key `{here}`")))?,
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| err(&format!("`{here}` needs a numeric index")))?;
                let n = items.len();
                items.get_mut(idx).ok_or_else(|| err(&format!("index {idx} out of range (length {n})")))?
            }
            _ => return Err(err(&format!("`{}` is not a block", parts[..i].join(".")))),
        };
    }
    *cur = override_value(raw.trim());
    Ok(())
}

fn from_value(doc: Value, origin: &str) -> Result<RunConfig, ConfigError> {
    serde_path_to_error::deserialize(doc).map_err(|e| ConfigError::Parse {
        origin: origin.to_string(),
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub hash: String,
    pub network_hash: String,
}

/// Defaults, then the file (if any), then `overrides` in order.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<LoadedConfig, ConfigError> {
    let (mut base, origin) = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.to_path_buf(), source })?;
            let mut de = serde_json::Deserializer::from_str(&text);
            let cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| ConfigError::Parse {
                origin: p.display().to_string(),
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
            (cfg, p.display().to_string())
        }
        None => (RunConfig::default(), "defaults".to_string()),
    };
    if !overrides.is_empty() {
        let mut doc = serde_json::to_value(&base).expect("serializable");
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        base = from_value(doc, &format!("{origin} with overrides"))?;
    }
    base.validate()?;
    Ok(LoadedConfig { hash: base.hash(), network_hash: base.network.hash(), config: base })
}

/// `git describe` of the working tree, if there is one.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

pub const RUN_SUBDIRS: [&str; 3] = ["metrics", "checkpoints", "logs"];

/// Creates `dir` with its subdirectories and writes the resolved
/// configuration to `config.json`.
pub fn init_run_dir(dir: &Path, cfg: &LoadedConfig, force: bool) -> Result<(), ConfigError> {
    let io = |source| ConfigError::Io { path: dir.to_path_buf(), source };
    if dir.exists() && fs::read_dir(dir).map_err(io)?.next().is_some() && !force {
        return Err(ConfigError::RunDirExists(dir.to_path_buf()));
    }
    for sub in RUN_SUBDIRS {
        fs::create_dir_all(dir.join(sub)).map_err(io)?;
    }
    #[derive(Serialize)]
    struct Resolved<'a> {
        config_hash: &'a str,
        network_hash: &'a str,
        git_describe: String,
        seed: u64,
        config: &'a RunConfig,
    }
    let doc = Resolved {
        config_hash: &cfg.hash,
        network_hash: &cfg.network_hash,
        git_describe: git_describe(),
        seed: cfg.config.seed,
        config: &cfg.config,
    };
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_vec_pretty(&doc).expect("serializable"))
        .map_err(|source| ConfigError::Io { path: path.clone(), source })?;
    Ok(())
}

/// Reloads the configuration a run directory was created with.
pub fn load_run_snapshot(dir: &Path) -> Result<LoadedConfig, ConfigError> {
    let path = dir.join("config.json");
    let text = fs::read_to_string(&path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
    let mut doc: Value = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
        origin: path.display().to_string(),
        path: String::new(),
        message: e.to_string(),
    })?;
    let cfg = doc.get_mut("config").map(Value::take).ok_or_else(|| ConfigError::Parse {
        origin: path.display().to_string(),
        path: "config".into(),
        message: "missing field".into(),
    })?;
    let cfg = from_value(cfg, &path.display().to_string())?;
    cfg.validate()?;
    Ok(LoadedConfig { hash: cfg.hash(), network_hash: cfg.network.hash(), config: cfg })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn defaults_validate_and_hash_stably() {
        let a = load_config(None, &[]).unwrap();
        let b = load_config(None, &[]).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_eq!(a.hash.len(), 64);
        let c = load_config(None, &ov(&["seed=1"])).unwrap();
        assert_ne!(a.hash, c.hash);
        assert_eq!(a.network_hash, c.network_hash);
    }

    #[test]
    fn overrides_apply() {
        let c = load_config(None, &ov(&["ppo.n_envs=32", "network.backbone=mlp", "tasks.train_tasks=[\"hover\"]"])).unwrap();
        assert_eq!(c.config.ppo.n_envs, 32);
        assert_eq!(c.config.network.backbone, crate::nets::BackboneKind::Mlp);
        assert_eq!(c.config.tasks.train_tasks, vec![crate::tasks::TaskId::Hover]);
        let c = load_config(None, &ov(&["dynamics.init.nominal_position.2=3.5"])).unwrap();
        assert_eq!(c.config.dynamics.init.nominal_position[2], 3.5);
    }

    #[test]
    fn errors_name_the_path() {
        let e = load_config(None, &ov(&["ppo.n_env=3"])).unwrap_err().to_string();
        assert!(e.contains("unknown key `ppo.n_env`"), "{e}");
        let e = load_config(None, &ov(&["ppo.n_envs=lots"])).unwrap_err().to_string();
        assert!(e.contains("ppo.n_envs"), "{e}");
        let e = load_config(None, &ov(&["service.time_scale=9"])).unwrap_err().to_string();
        assert!(e.contains("time_scale"), "{e}");

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"ppo": {"clip": 0.1, "bogus": 1}}"#).unwrap();
        let e = load_config(Some(&p), &[]).unwrap_err().to_string();
        assert!(e.contains("ppo"), "{e}");
        assert!(e.contains("bogus"), "{e}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.ppo.total_steps = 1000;
        fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        let l = load_config(Some(&p), &[]).unwrap();
        assert_eq!(l.config, cfg);
        assert_eq!(l.hash, cfg.hash());
    }

    #[test]
    fn run_dir_guard() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        let cfg = load_config(None, &[]).unwrap();
        init_run_dir(&run, &cfg, false).unwrap();
        assert!(matches!(init_run_dir(&run, &cfg, false), Err(ConfigError::RunDirExists(_))));
        init_run_dir(&run, &cfg, true).unwrap();
        let doc: Value = serde_json::from_slice(&fs::read(run.join("config.json")).unwrap()).unwrap();
        assert_eq!(doc["config_hash"], Value::String(cfg.hash.clone()));
        for sub in RUN_SUBDIRS {
            assert!(run.join(sub).is_dir());
        }
        assert_eq!(load_run_snapshot(&run).unwrap(), cfg);
    }
}
