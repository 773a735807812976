//! On-disk datasets.
//!
//! ```text
//! <dir>/features/<clip_id>.u.sft
//! <dir>/features/<clip_id>.v.sft
//! <dir>/annotations.json   {clip_id: [{start, end, sentence}]}
//! <dir>/manifest.json      {clips: [{clip_id, split}]}
//! <dir>/spec.json          generator settings, synthetic data only
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sact_core::data::{AnnotatedClip, DatasetManifest, Event, FeatureStreamPair, Split, SyntheticDataset};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{io, IoError, Result};
use crate::sft;

pub type Annotations = BTreeMap<String, Vec<Event>>;

pub const FEATURES: &str = "features";
pub const ANNOTATIONS: &str = "annotations.json";
pub const MANIFEST: &str = "manifest.json";
pub const SPEC: &str = "spec.json";

pub fn check_clip_id(id: &str) -> Result<()> {
    let bad = id.is_empty()
        || id == "."
        || id == ".."
        || id.chars().any(|c| c == '/' || c == '\\' || c == '\0');
    if bad {
        return Err(IoError::InvalidClipId(id.into()));
    }
    Ok(())
}

pub fn stream_paths(feature_dir: &Path, clip_id: &str) -> Result<(PathBuf, PathBuf)> {
    check_clip_id(clip_id)?;
    Ok((
        feature_dir.join(format!("{clip_id}.u.sft")),
        feature_dir.join(format!("{clip_id}.v.sft")),
    ))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(io(path))?;
    serde_json::from_slice(&text).map_err(|source| IoError::Json { path: path.into(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_vec_pretty(value).map_err(|source| IoError::Json { path: path.into(), source })?;
    text.push(b'\n');
    fs::write(path, text).map_err(io(path))
}

pub fn save_streams(feature_dir: &Path, clip: &FeatureStreamPair) -> Result<()> {
    let (u, v) = stream_paths(feature_dir, &clip.clip_id)?;
    fs::create_dir_all(feature_dir).map_err(io(feature_dir))?;
    sft::save(&u, &clip.u)?;
    sft::save(&v, &clip.v)
}

pub fn load_streams(feature_dir: &Path, clip_id: &str) -> Result<FeatureStreamPair> {
    let (up, vp) = stream_paths(feature_dir, clip_id)?;
    let u = sft::load(&up)?;
    let v = sft::load(&vp)?;
    if u.rank() != 2 {
        return Err(IoError::MalformedData { path: up, reason: format!("expected a matrix, got shape {:?}", u.shape()) });
    }
    if v.rank() != 2 {
        return Err(IoError::MalformedData { path: vp, reason: format!("expected a matrix, got shape {:?}", v.shape()) });
    }
    if u.rows() != v.rows() {
        return Err(IoError::StreamMismatch { clip_id: clip_id.into(), u: u.rows(), v: v.rows() });
    }
    Ok(FeatureStreamPair::new(clip_id, u, v)?)
}

fn annotated(features: FeatureStreamPair, annotations: &Annotations, path: &Path) -> Result<AnnotatedClip> {
    let events = annotations.get(&features.clip_id).ok_or_else(|| IoError::MalformedData {
        path: path.into(),
        reason: format!("no entry for clip {}", features.clip_id),
    })?;
    Ok(AnnotatedClip::new(features, events.clone())?)
}

/// Reads `<clip_id>.u.sft` / `<clip_id>.v.sft` from `feature_dir` and the
/// clip's events from the annotation file.
pub fn load_clip(feature_dir: &Path, annotation_file: &Path, clip_id: &str) -> Result<AnnotatedClip> {
    let features = load_streams(feature_dir, clip_id)?;
    annotated(features, &read_json(annotation_file)?, annotation_file)
}

/// Writes the clip's streams and merges its events into the annotation
/// file, creating it if needed.
pub fn save_clip(feature_dir: &Path, annotation_file: &Path, clip: &AnnotatedClip) -> Result<()> {
    save_streams(feature_dir, &clip.features)?;
    let mut ann: Annotations = if annotation_file.exists() { read_json(annotation_file)? } else { Annotations::new() };
    ann.insert(clip.clip_id().into(), clip.events.clone());
    write_json(annotation_file, &ann)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// In manifest order.
    pub clips: Vec<AnnotatedClip>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<AnnotatedClip> {
        sact_core::data::select_split(&self.clips, &self.manifest, split)
            .into_iter()
            .cloned()
            .collect()
    }
}

pub fn save_dataset(dir: &Path, manifest: &DatasetManifest, clips: &[AnnotatedClip]) -> Result<()> {
    let features = dir.join(FEATURES);
    fs::create_dir_all(&features).map_err(io(&features))?;
    let mut ann = Annotations::new();
    for c in clips {
        save_streams(&features, &c.features)?;
        ann.insert(c.clip_id().into(), c.events.clone());
    }
    write_json(&dir.join(ANNOTATIONS), &ann)?;
    write_json(&dir.join(MANIFEST), manifest)
}

/// Synthetic data with the standard train/val/test split and its generator
/// settings.
pub fn save_synthetic(dir: &Path, data: &SyntheticDataset) -> Result<DatasetManifest> {
    let ids: Vec<String> = data.clips.iter().map(|c| c.clip_id().to_string()).collect();
    let manifest = DatasetManifest::split(&ids);
    save_dataset(dir, &manifest, &data.clips)?;
    write_json(&dir.join(SPEC), &data.spec)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST))?;
    let ann_path = dir.join(ANNOTATIONS);
    let ann: Annotations = read_json(&ann_path)?;
    let features = dir.join(FEATURES);
    let clips = manifest
        .clips
        .iter()
        .map(|e| annotated(load_streams(&features, &e.clip_id)?, &ann, &ann_path))
        .collect::<Result<_>>()?;
    Ok(Dataset { manifest, clips })
}
