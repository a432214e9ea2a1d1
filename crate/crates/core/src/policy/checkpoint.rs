//! Checkpoint files: one JSON manifest line, then raw little-endian `f64`s
//! (parameters, followed by the Adam first and second moments when an
//! optimizer is stored). The manifest's `sha256` covers the binary payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamCfg, OptimizerState, PolicyArch, PolicyParams};
use crate::tasks::VocabCfg;
use crate::{LabError, Result};

pub const CKPT_FORMAT: &str = "grpo-d-lab/ckpt";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerManifest {
    #[serde(flatten)]
    pub cfg: AdamCfg,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub arch: PolicyArch,
    pub optimizer: Option<OptimizerManifest>,
    pub param_count: usize,
    pub sha256: String,
    /// Training steps completed when the checkpoint was written.
    pub step: u64,
    pub vocab: VocabCfg,
    pub vocab_hash: String,
    pub params_version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub optimizer: Option<OptimizerState>,
    pub step: u64,
    pub vocab: VocabCfg,
    pub vocab_hash: String,
}

fn push_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut payload = Vec::new();
    push_f64s(&mut payload, &ckpt.params.values);
    if let Some(opt) = &ckpt.optimizer {
        push_f64s(&mut payload, &opt.m);
        push_f64s(&mut payload, &opt.v);
    }
    let manifest = CheckpointManifest {
        format: CKPT_FORMAT.to_string(),
        version: CKPT_VERSION,
        arch: *ckpt.params.arch(),
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerManifest {
            cfg: o.cfg,
            step: o.step,
        }),
        param_count: ckpt.params.len(),
        sha256: hex::encode(Sha256::digest(&payload)),
        step: ckpt.step,
        vocab: ckpt.vocab,
        vocab_hash: ckpt.vocab_hash.clone(),
        params_version: ckpt.params.version,
    };
    let mut out = serde_json::to_vec(&manifest)?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(bytes: &[u8], path: &Path) -> Result<(CheckpointManifest, usize)> {
    let bad = |reason: String| LabError::MalformedFile {
        path: path.to_path_buf(),
        reason,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing manifest line".into()))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.format != CKPT_FORMAT {
        return Err(bad(format!("unexpected format tag `{}`", manifest.format)));
    }
    if manifest.version != CKPT_VERSION {
        return Err(LabError::Version {
            what: "checkpoint",
            found: manifest.version,
            expected: CKPT_VERSION,
        });
    }
    Ok((manifest, nl + 1))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let (manifest, start) = read_manifest(&bytes, path)?;
    let payload = &bytes[start..];
    let n = manifest.param_count;
    let blocks = if manifest.optimizer.is_some() { 3 } else { 1 };
    if payload.len() != blocks * n * 8 {
        return Err(LabError::MalformedFile {
            path: path.to_path_buf(),
            reason: format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                blocks * n * 8
            ),
        });
    }
    if hex::encode(Sha256::digest(payload)) != manifest.sha256 {
        return Err(LabError::Checksum(path.to_path_buf()));
    }
    let floats: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut params = PolicyParams::from_values(manifest.arch, floats[..n].to_vec())?;
    params.version = manifest.params_version;
    let optimizer = manifest.optimizer.map(|o| OptimizerState {
        cfg: o.cfg,
        m: floats[n..2 * n].to_vec(),
        v: floats[2 * n..].to_vec(),
        step: o.step,
    });
    Ok(Checkpoint {
        params,
        optimizer,
        step: manifest.step,
        vocab: manifest.vocab,
        vocab_hash: manifest.vocab_hash,
    })
}
