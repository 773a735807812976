//! Checkpoints as a directory: `manifest.json` plus one SFT1 file per
//! parameter under `params/`.

use std::fs;
use std::path::Path;

use sact_core::composer::Variant;
use sact_core::decoder::Vocabulary;
use sact_core::harness::{Checkpoint, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::dataset::{read_json, write_json};
use crate::error::{io, IoError, Result};
use crate::sft;

pub const FORMAT: &str = "sact-checkpoint-1";
pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// The summary fields repeat what `config` says so the file can be read
/// without knowing the config schema. They must agree on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub variant: Variant,
    pub appearance_dim: usize,
    pub motion_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_heads: usize,
    pub threshold: f64,
    pub gate_penalty: f64,
    pub epoch: usize,
    pub config: TrainConfig,
    pub vocabulary: Vocabulary,
    pub params: Vec<ParamEntry>,
}

fn param_file(dir: &Path, name: &str) -> Result<std::path::PathBuf> {
    if name.is_empty() || name.contains(['/', '\\', '\0']) || name.starts_with('.') {
        return Err(IoError::Checkpoint { path: dir.into(), reason: format!("bad parameter name {name:?}") });
    }
    Ok(dir.join(PARAMS).join(format!("{name}.sft")))
}

pub fn save(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let pdir = dir.join(PARAMS);
    fs::create_dir_all(&pdir).map_err(io(&pdir))?;
    let mut params = Vec::new();
    for (_, name, value) in ckpt.params.iter() {
        sft::save(&param_file(dir, name)?, value)?;
        params.push(ParamEntry { name: name.into(), shape: value.shape().to_vec() });
    }
    let c = &ckpt.config;
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        variant: c.variant,
        appearance_dim: c.appearance_dim,
        motion_dim: c.motion_dim,
        encoder_layers: c.encoder_layers,
        decoder_layers: c.decoder_layers,
        num_heads: c.num_heads,
        threshold: c.threshold,
        gate_penalty: c.gate_penalty,
        epoch: ckpt.epoch,
        config: c.clone(),
        vocabulary: ckpt.model.vocab.clone(),
        params,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST);
    let m: CheckpointManifest = read_json(&mpath)?;
    let bad = |reason: String| IoError::Checkpoint { path: mpath.clone(), reason };
    if m.format != FORMAT {
        return Err(bad(format!("unknown format {:?}", m.format)));
    }
    let c = &m.config;
    let summary = (m.variant, m.appearance_dim, m.motion_dim, m.encoder_layers, m.decoder_layers, m.num_heads);
    let from_config = (c.variant, c.appearance_dim, c.motion_dim, c.encoder_layers, c.decoder_layers, c.num_heads);
    if summary != from_config || m.threshold.to_bits() != c.threshold.to_bits() || m.gate_penalty.to_bits() != c.gate_penalty.to_bits() {
        return Err(bad("summary fields disagree with config".into()));
    }
    let mut ckpt = Checkpoint::init(&m.config, m.vocabulary.clone())?;
    ckpt.epoch = m.epoch;
    if m.params.len() != ckpt.params.len() {
        return Err(bad(format!("{} parameters listed, model has {}", m.params.len(), ckpt.params.len())));
    }
    for entry in &m.params {
        let id = ckpt
            .params
            .find(&entry.name)
            .ok_or_else(|| bad(format!("model has no parameter {}", entry.name)))?;
        let path = param_file(dir, &entry.name)?;
        let value = sft::load(&path)?;
        let want = ckpt.params.get(id).shape();
        if value.shape() != want || entry.shape != want {
            return Err(IoError::Checkpoint {
                path,
                reason: format!("shape {:?}, model expects {want:?}", value.shape()),
            });
        }
        ckpt.params.set(id, value)?;
    }
    Ok(ckpt)
}
