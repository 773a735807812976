//! Two-stream clips with annotated events, and a planted-motif generator.
//!
//! A synthetic clip is zero background plus noise, with one to three
//! non-overlapping segments in which the appearance stream holds a fixed
//! motif vector and the motion stream a fixed linear transform of it. Each
//! motif maps to one caption `a person <verb> the <noun>`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Longest accepted clip.
pub const MAX_FRAMES: usize = 480;

pub const VERBS: [&str; 16] = [
    "opens", "closes", "lifts", "drops", "pushes", "pulls", "cuts", "washes", "paints", "throws",
    "catches", "folds", "fills", "empties", "carries", "kicks",
];
pub const NOUNS: [&str; 16] = [
    "door", "box", "cup", "ball", "knife", "bowl", "chair", "shirt", "bottle", "table", "book",
    "bag", "window", "plate", "rope", "lamp",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStreamPair {
    pub clip_id: String,
    /// Appearance stream, `T × d_u`.
    pub u: Tensor,
    /// Motion stream, `T × d_v`.
    pub v: Tensor,
}

impl FeatureStreamPair {
    pub fn new(clip_id: impl Into<String>, u: Tensor, v: Tensor) -> Result<Self> {
        if u.rank() != 2 || v.rank() != 2 {
            return Err(Error::shape("feature streams", u.shape(), v.shape()));
        }
        if u.rows() != v.rows() {
            return Err(Error::shape("stream length", u.shape(), v.shape()));
        }
        if u.rows() > MAX_FRAMES {
            return Err(Error::Contract(format!(
                "{} frames exceeds the limit of {MAX_FRAMES}",
                u.rows()
            )));
        }
        Ok(FeatureStreamPair {
            clip_id: clip_id.into(),
            u,
            v,
        })
    }

    pub fn frames(&self) -> usize {
        self.u.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub start: f64,
    pub end: f64,
    pub sentence: String,
}

impl Event {
    pub fn segment(&self) -> (f64, f64) {
        (self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedClip {
    pub features: FeatureStreamPair,
    pub events: Vec<Event>,
    /// Planted motif id per event; empty for clips loaded from disk.
    #[serde(default)]
    pub motifs: Vec<usize>,
}

impl AnnotatedClip {
    pub fn new(features: FeatureStreamPair, events: Vec<Event>) -> Result<Self> {
        let t = features.frames() as f64;
        for e in &events {
            if !(0.0 <= e.start && e.start < e.end && e.end <= t) {
                return Err(Error::Contract(format!(
                    "event [{}, {}] outside [0, {t}] in {}",
                    e.start, e.end, features.clip_id
                )));
            }
            if e.sentence.trim().is_empty() {
                return Err(Error::Contract(format!("empty caption in {}", features.clip_id)));
            }
        }
        Ok(AnnotatedClip {
            features,
            events,
            motifs: Vec::new(),
        })
    }

    pub fn clip_id(&self) -> &str {
        &self.features.clip_id
    }

    pub fn segments(&self) -> Vec<(f64, f64)> {
        self.events.iter().map(Event::segment).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub num_clips: usize,
    pub frames: usize,
    pub appearance_dim: usize,
    pub motion_dim: usize,
    pub motifs: usize,
    pub min_events: usize,
    pub max_events: usize,
    pub min_event_len: usize,
    pub max_event_len: usize,
    /// Standard deviation of the additive Gaussian noise on both streams.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            num_clips: 200,
            frames: 48,
            appearance_dim: 32,
            motion_dim: 32,
            motifs: 8,
            min_events: 1,
            max_events: 3,
            min_event_len: 4,
            max_event_len: 12,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_clips == 0 || self.frames == 0 || self.frames > MAX_FRAMES {
            return bad("need at least one clip and 1..=480 frames");
        }
        if self.appearance_dim == 0 || self.motion_dim == 0 {
            return bad("stream widths must be positive");
        }
        if self.motifs == 0 || self.motifs > VERBS.len() {
            return bad("motif library must hold 1..=16 motifs");
        }
        if self.min_events == 0 || self.min_events > self.max_events {
            return bad("event counts must satisfy 1 ≤ min ≤ max");
        }
        if self.max_events > self.motifs {
            return bad("more events per clip than distinct motifs");
        }
        if self.min_event_len == 0 || self.min_event_len > self.max_event_len {
            return bad("event lengths must satisfy 1 ≤ min ≤ max");
        }
        if self.max_events * self.max_event_len > self.frames {
            return Err(Error::Config(format!(
                "{} events of up to {} frames cannot fit without overlap in {} frames",
                self.max_events, self.max_event_len, self.frames
            )));
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative");
        }
        Ok(())
    }
}

/// Caption of motif `m`.
pub fn motif_caption(m: usize) -> String {
    format!(
        "a person {} the {}",
        VERBS[m % VERBS.len()],
        NOUNS[(3 * m + 1) % NOUNS.len()]
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub spec: SyntheticTaskSpec,
    /// `motifs × d_u`.
    pub motifs: Tensor,
    /// `d_u × d_v`: the motion pattern of motif `m` is `motifs[m] · transform`.
    pub transform: Tensor,
    pub clips: Vec<AnnotatedClip>,
}

impl SyntheticDataset {
    pub fn motion_pattern(&self, m: usize) -> Vec<f64> {
        let (du, dv) = (self.spec.appearance_dim, self.spec.motion_dim);
        let p = self.motifs.row(m);
        (0..dv)
            .map(|j| (0..du).map(|i| p[i] * self.transform.data()[i * dv + j]).sum())
            .collect()
    }

    pub fn captions(&self) -> Vec<String> {
        (0..self.spec.motifs).map(motif_caption).collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Deterministic in `spec.seed`. Motif library, event layout and noise use
/// separate generators, so changing the noise level keeps the layout.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let (t, du, dv) = (spec.frames, spec.appearance_dim, spec.motion_dim);
    let mut motif_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    motif_rng.set_stream(1);
    let mut layout_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    layout_rng.set_stream(2);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(3);

    let motifs = Tensor::from_fn(&[spec.motifs, du], |_| gaussian(&mut motif_rng));
    let scale = 1.0 / libm::sqrt(du as f64);
    let transform = Tensor::from_fn(&[du, dv], |_| scale * gaussian(&mut motif_rng));
    let mut data = SyntheticDataset {
        spec: spec.clone(),
        motifs,
        transform,
        clips: Vec::with_capacity(spec.num_clips),
    };
    let patterns: Vec<Vec<f64>> = (0..spec.motifs).map(|m| data.motion_pattern(m)).collect();

    for c in 0..spec.num_clips {
        let k = layout_rng.random_range(spec.min_events..=spec.max_events);
        let lens: Vec<usize> = (0..k)
            .map(|_| layout_rng.random_range(spec.min_event_len..=spec.max_event_len))
            .collect();
        let free = t - lens.iter().sum::<usize>();
        // k cut points in 0..=free give the k+1 gaps around the events
        let mut cuts: Vec<usize> = (0..k).map(|_| layout_rng.random_range(0..=free)).collect();
        cuts.sort_unstable();
        let mut ids: Vec<usize> = (0..spec.motifs).collect();
        ids.shuffle(&mut layout_rng);
        ids.truncate(k);

        let mut u = Tensor::zeros(&[t, du]);
        let mut v = Tensor::zeros(&[t, dv]);
        let mut events = Vec::with_capacity(k);
        let mut cursor = 0;
        let mut prev_cut = 0;
        for (e, (&len, &m)) in lens.iter().zip(&ids).enumerate() {
            cursor += cuts[e] - prev_cut;
            prev_cut = cuts[e];
            for f in cursor..cursor + len {
                u.data_mut()[f * du..(f + 1) * du].copy_from_slice(data.motifs.row(m));
                v.data_mut()[f * dv..(f + 1) * dv].copy_from_slice(&patterns[m]);
            }
            events.push(Event {
                start: cursor as f64,
                end: (cursor + len) as f64,
                sentence: motif_caption(m),
            });
            cursor += len;
        }
        if spec.noise > 0.0 {
            for x in u.data_mut().iter_mut().chain(v.data_mut().iter_mut()) {
                *x += spec.noise * gaussian(&mut noise_rng);
            }
        }
        let features = FeatureStreamPair::new(format!("clip_{c:05}"), u, v)?;
        let mut clip = AnnotatedClip::new(features, events)?;
        clip.motifs = ids;
        data.clips.push(clip);
    }
    Ok(data)
}

/// Recovers `(start, end, motif)` runs by matching each appearance frame to
/// its nearest motif, with the zero vector standing for background.
pub fn recover_motifs(motifs: &Tensor, u: &Tensor) -> Vec<(usize, usize, usize)> {
    let d = motifs.cols();
    let label = |f: usize| -> Option<usize> {
        let x = u.row(f);
        let dist = |p: &[f64]| -> f64 { x.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum() };
        let mut best = (dist(&vec![0.0; d]), None);
        for m in 0..motifs.rows() {
            let dm = dist(motifs.row(m));
            if dm < best.0 {
                best = (dm, Some(m));
            }
        }
        best.1
    };
    let mut runs = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    for f in 0..u.rows() {
        let l = label(f);
        match (current, l) {
            (Some((_, m)), Some(n)) if m == n => {}
            _ => {
                if let Some((s, m)) = current {
                    runs.push((s, f, m));
                }
                current = l.map(|m| (f, m));
            }
        }
    }
    if let Some((s, m)) = current {
        runs.push((s, u.rows(), m));
    }
    runs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub split: Split,
}

/// Clip ids and their split assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub clips: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// First half train, next quarter validation, remainder test.
    pub fn split(ids: &[String]) -> Self {
        let n = ids.len();
        let train = n / 2;
        let val = train + n / 4;
        DatasetManifest {
            clips: ids
                .iter()
                .enumerate()
                .map(|(i, id)| ManifestEntry {
                    clip_id: id.clone(),
                    split: if i < train {
                        Split::Train
                    } else if i < val {
                        Split::Val
                    } else {
                        Split::Test
                    },
                })
                .collect(),
        }
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.clips
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.clip_id.as_str())
            .collect()
    }
}

/// Clips of `split`, in manifest order.
pub fn select_split<'a>(
    clips: &'a [AnnotatedClip],
    manifest: &DatasetManifest,
    split: Split,
) -> Vec<&'a AnnotatedClip> {
    manifest
        .ids(split)
        .into_iter()
        .filter_map(|id| clips.iter().find(|c| c.clip_id() == id))
        .collect()
}
