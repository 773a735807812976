//! Training, evaluation and the full-pipeline gradient check.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::awareness::DEFAULT_THRESHOLD;
use crate::bleu::bleu_1_to_4;
use crate::composer::{ComposerConfig, GatePlacement, JointGate, Variant};
use crate::data::{motif_caption, recover_motifs, AnnotatedClip, Event, FeatureStreamPair};
use crate::decoder::{tokenize, DecoderConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::gradcheck::{check_params, GradCheckReport};
use crate::model::{ClipAnalysis, LossWeights, ModelConfig, SactModel, ScoredSegment};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::proposal::{tiou, AnchorSpec, POSITIVE_IOU};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub learning_rate: f64,
    pub epochs: usize,
    /// λ, weight of the mean-gate penalty.
    pub gate_penalty: f64,
    /// τ, inference gate threshold.
    pub threshold: f64,
    pub seed: u64,
    pub caption_weight: f64,
    pub proposal_weight: f64,
    pub appearance_dim: usize,
    pub motion_dim: usize,
    pub encoder_layers: usize,
    pub num_heads: usize,
    pub gate_placement: GatePlacement,
    pub joint_gate: JointGate,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub max_caption_len: usize,
    pub mask_rate: f64,
    pub anchors: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Separated,
            learning_rate: 2e-4,
            epochs: 30,
            gate_penalty: 0.05,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
            caption_weight: 1.0,
            proposal_weight: 1.0,
            appearance_dim: 32,
            motion_dim: 32,
            encoder_layers: 2,
            num_heads: 4,
            gate_placement: GatePlacement::Final,
            joint_gate: JointGate::Concatenated,
            decoder_layers: 2,
            decoder_heads: 4,
            max_caption_len: 16,
            mask_rate: 0.15,
            anchors: AnchorSpec::default().lengths,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            composer: ComposerConfig {
                variant: self.variant,
                appearance_dim: self.appearance_dim,
                motion_dim: self.motion_dim,
                num_layers: self.encoder_layers,
                num_heads: self.num_heads,
                gate_placement: self.gate_placement,
                joint_gate: self.joint_gate,
                threshold: self.threshold,
            },
            decoder: DecoderConfig {
                model_dim: self.appearance_dim + self.motion_dim,
                num_heads: self.decoder_heads,
                num_layers: self.decoder_layers,
                max_len: self.max_caption_len,
                mask_rate: self.mask_rate,
            },
            anchors: AnchorSpec {
                lengths: self.anchors.clone(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.gate_penalty >= 0.0 && self.caption_weight >= 0.0 && self.proposal_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        self.model_config().validate()
    }

    fn weights(&self) -> LossWeights {
        LossWeights {
            caption: self.caption_weight,
            proposal: self.proposal_weight,
            gate: self.gate_penalty,
        }
    }
}

/// Trained parameters with the structure and configuration that produced
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub model: SactModel,
    pub params: ParamStore,
}

impl Checkpoint {
    /// Fresh, untrained model.
    pub fn init(config: &TrainConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let model = SactModel::init(&mut params, config.model_config(), vocab, &mut rng)?;
        Ok(Checkpoint {
            config: config.clone(),
            epoch: 0,
            model,
            params,
        })
    }

    /// Rejects clips whose stream widths differ from the model's.
    pub fn check_clip(&self, clip: &FeatureStreamPair) -> Result<()> {
        let c = &self.config;
        if clip.u.cols() != c.appearance_dim || clip.v.cols() != c.motion_dim {
            return Err(Error::Config(format!(
                "clip {} has widths ({}, {}), checkpoint expects ({}, {})",
                clip.clip_id,
                clip.u.cols(),
                clip.v.cols(),
                c.appearance_dim,
                c.motion_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub total: f64,
    pub caption: f64,
    pub proposal: f64,
    pub gate: f64,
}

/// Vocabulary over every event caption in `clips`.
pub fn corpus_vocabulary(clips: &[AnnotatedClip]) -> Result<Vocabulary> {
    Vocabulary::from_corpus(clips.iter().flat_map(|c| c.events.iter().map(|e| e.sentence.as_str())))
}

/// Adam over the joint loss, one clip per step, clips reshuffled each
/// epoch. `on_epoch` sees the losses and a snapshot after every epoch.
/// The result is a pure function of `(config, clips)`.
pub fn train(
    config: &TrainConfig,
    clips: &[AnnotatedClip],
    mut on_epoch: impl FnMut(&EpochLosses, &Checkpoint) -> Result<()>,
) -> Result<(Checkpoint, Vec<EpochLosses>)> {
    if clips.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut ckpt = Checkpoint::init(config, corpus_vocabulary(clips)?)?;
    for c in clips {
        ckpt.check_clip(&c.features)?;
    }
    let mut opt = Adam::new(&ckpt.params, config.learning_rate)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(config.seed);
    mask_rng.set_stream(2);
    let weights = config.weights();
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let mut sums = [0.0; 4];
        for (step, &i) in order.iter().enumerate() {
            let mut tape = Tape::new();
            let terms = ckpt
                .model
                .training_loss(&mut tape, &ckpt.params, &clips[i], weights, &mut mask_rng)?;
            let total = tape.scalar_value(terms.total);
            if !total.is_finite() {
                return Err(diverged(&tape, &ckpt.params, epoch, step));
            }
            let grads = tape.backward(terms.total)?;
            opt.update(&mut ckpt.params, &grads);
            for (s, v) in sums.iter_mut().zip([terms.total, terms.caption, terms.proposal, terms.gate]) {
                *s += tape.scalar_value(v);
            }
        }
        let n = clips.len() as f64;
        let losses = EpochLosses {
            epoch,
            total: sums[0] / n,
            caption: sums[1] / n,
            proposal: sums[2] / n,
            gate: sums[3] / n,
        };
        ckpt.epoch = epoch;
        on_epoch(&losses, &ckpt)?;
        curve.push(losses);
    }
    Ok((ckpt, curve))
}

fn diverged(tape: &Tape, params: &ParamStore, epoch: usize, step: usize) -> Error {
    let tensor = match tape.first_non_finite() {
        Some((node, op, Some(p))) => format!("node {node} ({op}) = parameter {}", params.name(p)),
        Some((node, op, None)) => format!("node {node} ({op})"),
        None => "loss".to_string(),
    };
    Error::Diverged { epoch, step, tensor }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    /// Teacher-forced next-token accuracy; 0 when nothing was scored.
    pub token_accuracy: f64,
    /// Fraction of annotated events with a kept proposal at tIoU ≥ 0.5.
    pub recall: f64,
    /// Mean kept-frame fraction m/T over encoder gates, when gated.
    pub sparsity: Option<f64>,
    pub clips: usize,
    pub events: usize,
    pub loss_curve: Vec<EpochLosses>,
}

/// Anything that can propose and caption events in a clip.
pub trait DenseCaptioner {
    fn analyze(&self, clip: &AnnotatedClip) -> Result<ClipAnalysis>;
}

impl DenseCaptioner for Checkpoint {
    fn analyze(&self, clip: &AnnotatedClip) -> Result<ClipAnalysis> {
        self.check_clip(&clip.features)?;
        self.model.analyze(&self.params, clip, self.config.max_caption_len)
    }
}

/// Runs `captioner` over `clips`. Unmatched events score as empty
/// candidates. Has no side effects.
pub fn evaluate(captioner: &impl DenseCaptioner, clips: &[AnnotatedClip]) -> Result<MetricsReport> {
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    let mut matched = 0usize;
    let mut hits = (0usize, 0usize);
    let mut kept = Vec::new();
    for clip in clips {
        let a = captioner.analyze(clip)?;
        if a.captions.len() != clip.events.len() {
            return Err(Error::Contract(format!("analysis of {} lost events", clip.clip_id())));
        }
        for (e, c) in clip.events.iter().zip(&a.captions) {
            refs.push(tokenize(&e.sentence));
            match c {
                Some(s) => {
                    matched += 1;
                    cands.push(tokenize(s));
                }
                None => cands.push(Vec::new()),
            }
        }
        hits = (hits.0 + a.token_hits.0, hits.1 + a.token_hits.1);
        kept.extend(a.kept_fraction);
    }
    let events = refs.len();
    let b = if events == 0 { [0.0; 4] } else { bleu_1_to_4(&cands, &refs)? };
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(MetricsReport {
        bleu_1: b[0],
        bleu_2: b[1],
        bleu_3: b[2],
        bleu_4: b[3],
        token_accuracy: ratio(hits.0, hits.1),
        recall: ratio(matched, events),
        sparsity: (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64),
        clips: clips.len(),
        events,
        loss_curve: Vec::new(),
    })
}

fn perfect_hits(events: &[Event]) -> (usize, usize) {
    let n: usize = events.iter().map(|e| tokenize(&e.sentence).len() + 1).sum();
    (n, n)
}

/// Reads the planted segments and motif ids straight from the annotations.
#[derive(Debug, Clone, Copy, Default)]
pub struct CheatingOracle;

impl DenseCaptioner for CheatingOracle {
    fn analyze(&self, clip: &AnnotatedClip) -> Result<ClipAnalysis> {
        if clip.motifs.len() != clip.events.len() {
            return Err(Error::Contract(format!("{} has no planted motif ids", clip.clip_id())));
        }
        Ok(ClipAnalysis {
            clip_id: clip.clip_id().to_string(),
            proposals: clip
                .events
                .iter()
                .map(|e| ScoredSegment { score: 1.0, start: e.start, end: e.end })
                .collect(),
            captions: clip.motifs.iter().map(|&m| Some(motif_caption(m))).collect(),
            token_hits: perfect_hits(&clip.events),
            kept_fraction: None,
        })
    }
}

/// Recovers segments and motif ids from the appearance features alone by
/// nearest-motif matching.
#[derive(Debug, Clone)]
pub struct NearestMotifOracle {
    pub motifs: Tensor,
}

impl DenseCaptioner for NearestMotifOracle {
    fn analyze(&self, clip: &AnnotatedClip) -> Result<ClipAnalysis> {
        let runs = recover_motifs(&self.motifs, &clip.features.u);
        let segs: Vec<(f64, f64, usize)> =
            runs.iter().map(|&(s, e, m)| (s as f64, e as f64, m)).collect();
        let captions = clip
            .events
            .iter()
            .map(|ev| {
                segs.iter()
                    .map(|&(s, e, m)| (tiou((s, e), ev.segment()), m))
                    .filter(|(iou, _)| *iou >= POSITIVE_IOU)
                    .max_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, m)| motif_caption(m))
            })
            .collect();
        Ok(ClipAnalysis {
            clip_id: clip.clip_id().to_string(),
            proposals: segs
                .iter()
                .map(|&(start, end, _)| ScoredSegment { score: 1.0, start, end })
                .collect(),
            captions,
            token_hits: perfect_hits(&clip.events),
            kept_fraction: None,
        })
    }
}

/// Small configuration for whole-pipeline gradient checks: `T = 6`, model
/// width 8, 2 heads, 2 layers.
pub fn gradcheck_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        appearance_dim: 4,
        motion_dim: 4,
        num_heads: 2,
        decoder_heads: 2,
        encoder_layers: 2,
        decoder_layers: 2,
        gate_placement: GatePlacement::Every,
        anchors: vec![2, 4],
        max_caption_len: 8,
        ..TrainConfig::default()
    }
}

fn gradcheck_clip(seed: u64) -> Result<AnnotatedClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = || -> f64 { rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng) };
    let u = Tensor::from_fn(&[6, 4], |_| gauss());
    let v = Tensor::from_fn(&[6, 4], |_| gauss());
    let events = vec![
        Event { start: 0.0, end: 3.0, sentence: "a person opens the box".into() },
        Event { start: 3.0, end: 6.0, sentence: "a person lifts the cup".into() },
    ];
    AnnotatedClip::new(FeatureStreamPair::new("gradcheck", u, v)?, events)
}

/// Compares autodiff against central differences for every parameter of
/// the full joint loss (proposal, caption with masking, gate penalty).
pub fn gradcheck_pipeline(variant: Variant, seed: u64) -> Result<GradCheckReport> {
    let config = TrainConfig { seed, ..gradcheck_config(variant) };
    let clip = gradcheck_clip(seed)?;
    let ckpt = Checkpoint::init(&config, corpus_vocabulary(core::slice::from_ref(&clip))?)?;
    let weights = config.weights();
    check_params(&ckpt.params, 1e-5, |store, tape| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ckpt.model.training_loss(tape, store, &clip, weights, &mut rng)?.total)
    })
}

/// Gate selection for each encoder gate of a clip: per-frame β and
/// whether the frame is kept.
pub fn gate_report(ckpt: &Checkpoint, clip: &FeatureStreamPair) -> Result<Vec<crate::awareness::FrameBeta>> {
    ckpt.check_clip(clip)?;
    let gates = ckpt.model.encoder_gates(&ckpt.params, clip)?;
    Ok(gates.iter().map(crate::awareness::frame_beta).collect())
}

/// Mean attention entropy per head of the final encoder layer. Exposed as
/// a statistic only; no threshold is asserted on it.
pub fn attention_entropy(ckpt: &Checkpoint, clip: &FeatureStreamPair) -> Result<Vec<f64>> {
    ckpt.check_clip(clip)?;
    ckpt.model.attention_entropy(&ckpt.params, clip)
}

/// Kept proposals with captions.
pub fn describe(ckpt: &Checkpoint, clip: &FeatureStreamPair) -> Result<Vec<(ScoredSegment, String)>> {
    ckpt.check_clip(clip)?;
    ckpt.model.describe(&ckpt.params, clip, ckpt.config.max_caption_len)
}
