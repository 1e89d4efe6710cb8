//! Checkpoints: a JSON manifest next to a little-endian f64 blob holding the
//! actor parameters followed by the critic parameters.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ActionScale, NetConfig, PolicyParams};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint network hash {found} does not match configuration {expected}")]
    HashMismatch { found: String, expected: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub kind: String,
    pub n_in: usize,
    pub n_out: usize,
    pub n_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub network_hash: String,
    /// Hash of the full run configuration that produced the checkpoint.
    pub config_hash: String,
    pub network: NetConfig,
    pub action_scale: ActionScale,
    pub actor_layers: Vec<LayerShape>,
    pub critic_layers: Vec<LayerShape>,
    pub actor_params: usize,
    pub critic_params: usize,
    pub env_steps: u64,
    pub blob: String,
    pub blob_sha256: String,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

/// Blob path paired with a manifest path (`x.json` → `x.bin`).
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_checkpoint(net: &PolicyParams, path: &Path, config_hash: &str, env_steps: u64) -> Result<Manifest, CheckpointError> {
    let mut blob = Vec::with_capacity(8 * (net.actor_params.len() + net.critic_params.len()));
    for v in net.actor_params.iter().chain(&net.critic_params) {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    let bp = blob_path(path);
    let manifest = Manifest {
        version: FORMAT_VERSION,
        network_hash: net.config.hash(),
        config_hash: config_hash.to_string(),
        network: net.config.clone(),
        action_scale: net.scale,
        actor_layers: net.actor.shapes(),
        critic_layers: net.critic.shapes(),
        actor_params: net.actor_params.len(),
        critic_params: net.critic_params.len(),
        env_steps,
        blob: bp.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(&bp, &blob).map_err(io(&bp))?;
    let json = serde_json::to_vec_pretty(&manifest).expect("serializable");
    fs::write(path, json).map_err(io(path))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CheckpointError> {
    let bytes = fs::read(path).map_err(io(path))?;
    #[derive(Deserialize)]
    struct Version {
        version: u32,
    }
    let v: Version = serde_json::from_slice(&bytes).map_err(|e| CheckpointError::Corrupt(format!("manifest: {e}")))?;
    if v.version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: v.version, expected: FORMAT_VERSION });
    }
    serde_json::from_slice(&bytes).map_err(|e| CheckpointError::Corrupt(format!("manifest: {e}")))
}

/// Loads a checkpoint. With `expected_network_hash`, refuses checkpoints
/// produced by a different network configuration.
pub fn load_checkpoint(path: &Path, expected_network_hash: Option<&str>) -> Result<(PolicyParams, Manifest), CheckpointError> {
    let m = read_manifest(path)?;
    if m.network.hash() != m.network_hash {
        return Err(CheckpointError::Corrupt("network block does not match its recorded hash".into()));
    }
    if let Some(exp) = expected_network_hash {
        if exp != m.network_hash {
            return Err(CheckpointError::HashMismatch { found: m.network_hash.clone(), expected: exp.to_string() });
        }
    }
    let mut net = PolicyParams::skeleton(&m.network, m.action_scale).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    if net.actor_params.len() != m.actor_params
        || net.critic_params.len() != m.critic_params
        || net.actor.shapes() != m.actor_layers
        || net.critic.shapes() != m.critic_layers
    {
        return Err(CheckpointError::Corrupt("layer shapes disagree with the network config".into()));
    }
    let bp = path.parent().unwrap_or(Path::new(".")).join(&m.blob);
    let blob = fs::read(&bp).map_err(io(&bp))?;
    if hex::encode(Sha256::digest(&blob)) != m.blob_sha256 {
        return Err(CheckpointError::Corrupt("parameter blob checksum mismatch".into()));
    }
    let n = m.actor_params + m.critic_params;
    if blob.len() != 8 * n {
        return Err(CheckpointError::Corrupt(format!("blob has {} bytes, expected {}", blob.len(), 8 * n)));
    }
    let vals: Vec<f64> = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    net.actor_params.copy_from_slice(&vals[..m.actor_params]);
    net.critic_params.copy_from_slice(&vals[m.actor_params..]);
    Ok((net, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::MavParams;
    use crate::nets::{BackboneKind, NetConfig};
    use crate::tasks::{Command, Observation, TaskId, OBS_DIM};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(cfg: &NetConfig) -> PolicyParams {
        PolicyParams::new(cfg, ActionScale::from_params(&MavParams::default()), &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn obs() -> Observation {
        let mut o = [0.1; OBS_DIM];
        o[22..].copy_from_slice(&Command::new(TaskId::Flip, 5.0).encode());
        Observation(o)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt/step_1.json");
        for cfg in [NetConfig::default(), NetConfig::ablation(BackboneKind::Mlp, false, false)] {
            let a = net(&cfg);
            save_checkpoint(&a, &path, "abc", 42).unwrap();
            let (b, m) = load_checkpoint(&path, Some(&cfg.hash())).unwrap();
            assert_eq!(m.env_steps, 42);
            assert_eq!(a.actor_params, b.actor_params);
            assert_eq!(a.actor_forward(&obs()).unwrap(), b.actor_forward(&obs()).unwrap());
            assert_eq!(
                a.critic_forward(&obs(), TaskId::Roll).unwrap().to_bits(),
                b.critic_forward(&obs(), TaskId::Roll).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let a = net(&NetConfig::default());
        save_checkpoint(&a, &path, "abc", 0).unwrap();

        let other = NetConfig { hidden_layers: 3, ..NetConfig::default() };
        assert!(matches!(load_checkpoint(&path, Some(&other.hash())), Err(CheckpointError::HashMismatch { .. })));

        let mut blob = fs::read(blob_path(&path)).unwrap();
        blob[10] ^= 0xff;
        fs::write(blob_path(&path), &blob).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(CheckpointError::Corrupt(_))));

        let text = fs::read_to_string(&path).unwrap().replacen("\"version\": 1", "\"version\": 99", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(CheckpointError::VersionMismatch { found: 99, .. })));

        fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(CheckpointError::Corrupt(_))));
        assert!(matches!(load_checkpoint(&dir.path().join("missing.json"), None), Err(CheckpointError::Io { .. })));
    }
}
