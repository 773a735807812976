//! The full captioner: composer encoder, proposal head, fusion block and
//! caption decoder over one parameter store.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::awareness::{frame_beta, gate_l1_penalty, AwarenessGate, GateMode};
use crate::composer::{fuse_with_proposals, Composer, ComposerConfig, EncodedMemory, FusionBlock, Variant};
use crate::data::{AnnotatedClip, FeatureStreamPair};
use crate::decoder::{caption_loss, token_hits, CaptionBatch, Decoder, DecoderConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::proposal::{
    propose, proposal_loss, proposal_mask, select_and_mask, tiou, AnchorSpec, EventProposal,
    ProposalHead, ProposalOutputs, Selection, POSITIVE_IOU,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub composer: ComposerConfig,
    /// `model_dim` must equal the composer width `d_u + d_v`.
    pub decoder: DecoderConfig,
    pub anchors: AnchorSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            composer: ComposerConfig::default(),
            decoder: DecoderConfig::default(),
            anchors: AnchorSpec::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.composer.validate()?;
        self.decoder.validate()?;
        self.anchors.validate()?;
        if self.decoder.model_dim != self.composer.joint_width() {
            return Err(Error::Config(format!(
                "decoder width {} differs from memory width {}",
                self.decoder.model_dim,
                self.composer.joint_width()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SactModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub composer: Composer,
    pub proposal: ProposalHead,
    pub fusion: FusionBlock,
    pub decoder: Decoder,
}

/// Scalar loss terms of one training step, all on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub caption: Var,
    pub proposal: Var,
    pub gate: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub caption: f64,
    pub proposal: f64,
    pub gate: f64,
}

/// Per-clip inference results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipAnalysis {
    pub clip_id: String,
    /// Proposals kept after thresholding and suppression.
    pub proposals: Vec<ScoredSegment>,
    /// One entry per annotated event: the caption of the best kept proposal
    /// with tIoU ≥ 0.5, or `None`.
    pub captions: Vec<Option<String>>,
    /// Teacher-forced `(correct, total)` next-token predictions.
    pub token_hits: (usize, usize),
    /// Mean kept-frame fraction over the encoder gates, if any.
    pub kept_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSegment {
    pub score: f64,
    pub start: f64,
    pub end: f64,
}

impl SactModel {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: ModelConfig,
        vocab: Vocabulary,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let composer = Composer::init(store, config.composer, rng)?;
        let width = composer.width();
        let proposal = ProposalHead::init(store, config.anchors.clone(), width, rng)?;
        let fusion = FusionBlock::init(
            store,
            width,
            config.composer.num_heads,
            config.composer.threshold,
            config.composer.variant != Variant::Baseline,
            rng,
        )?;
        let decoder = Decoder::init(store, config.decoder, vocab.len(), rng)?;
        Ok(SactModel {
            config,
            vocab,
            composer,
            proposal,
            fusion,
            decoder,
        })
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        clip: &FeatureStreamPair,
        mode: GateMode,
    ) -> Result<EncodedMemory> {
        let u = tape.constant(clip.u.clone());
        let v = tape.constant(clip.v.clone());
        self.composer.encode(tape, store, u, v, mode)
    }

    fn fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        r: Var,
        mode: GateMode,
        gates: &mut Vec<AwarenessGate>,
    ) -> Result<Var> {
        let (f, g) = fuse_with_proposals(tape, store, h, r, &self.fusion, mode)?;
        gates.extend(g);
        Ok(f)
    }

    /// Memory for captioning ground-truth `event` during training: the mask
    /// of the predicted proposal at the anchor best aligned with the event.
    fn event_memory(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        outputs: &ProposalOutputs,
        event: (f64, f64),
        mode: GateMode,
        gates: &mut Vec<AwarenessGate>,
    ) -> Result<Var> {
        let r = match outputs.best_anchor(event) {
            Some((a, i, _)) => proposal_mask(tape, outputs, &[(a, i)])?,
            None => tape.constant(Tensor::zeros(&[outputs.frames])),
        };
        self.fuse(tape, store, h, r, mode, gates)
    }

    /// Joint training loss for one clip. Masks are sampled from `rng` at
    /// the decoder's mask rate.
    pub fn training_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        clip: &AnnotatedClip,
        weights: LossWeights,
        rng: &mut R,
    ) -> Result<LossTerms> {
        let rate = self.config.decoder.mask_rate;
        self.loss_with(tape, store, clip, weights, GateMode::Soft, Some((rate, rng)))
            .map(|(terms, _)| terms)
    }

    fn loss_with<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        clip: &AnnotatedClip,
        weights: LossWeights,
        mode: GateMode,
        mut masking: Option<(f64, &mut R)>,
    ) -> Result<(LossTerms, (usize, usize))> {
        let mem = self.encode(tape, store, &clip.features, mode)?;
        let (outputs, _) = propose(tape, store, mem.h, &self.proposal)?;
        let lp = proposal_loss(tape, &outputs, &clip.segments())?;
        let mut gates = mem.gates.clone();
        let mut lc = tape.constant(Tensor::scalar(0.0));
        let mut hits = (0, 0);
        let mut n = 0usize;
        for e in &clip.events {
            let Ok(ids) = self.vocab.encode(&e.sentence) else {
                continue;
            };
            let f = self.event_memory(tape, store, mem.h, &outputs, e.segment(), mode, &mut gates)?;
            let mut batch = CaptionBatch::from_sequences(&[ids])?;
            if let Some((rate, rng)) = masking.as_mut() {
                batch.sample_masks(*rate, *rng);
            }
            let logits = self.decoder.decode_train(tape, store, &batch, f)?;
            let targets = batch.targets();
            let l = caption_loss(tape, logits, &targets)?;
            lc = tape.add(lc, l)?;
            let (h, t) = token_hits(tape, logits, &targets)?;
            hits = (hits.0 + h, hits.1 + t);
            n += 1;
        }
        if n > 1 {
            lc = tape.scale(lc, 1.0 / n as f64);
        }
        let refs: Vec<&AwarenessGate> = gates.iter().collect();
        let lg = gate_l1_penalty(tape, &refs, weights.gate)?;
        let a = tape.scale(lc, weights.caption);
        let b = tape.scale(lp, weights.proposal);
        let total = tape.add(a, b)?;
        let total = tape.add(total, lg)?;
        Ok((
            LossTerms {
                caption: lc,
                proposal: lp,
                gate: lg,
                total,
            },
            hits,
        ))
    }

    /// Inference over one clip with thresholded gates.
    pub fn analyze(&self, store: &ParamStore, clip: &AnnotatedClip, max_caption_len: usize) -> Result<ClipAnalysis> {
        let mut tape = Tape::no_grad();
        let mem = self.encode(&mut tape, store, &clip.features, GateMode::Thresholded)?;
        let kept_fraction = mean_kept_fraction(&mem.gates);
        let (outputs, props) = propose(&mut tape, store, mem.h, &self.proposal)?;
        let (kept, _) = select_and_mask(&mut tape, &outputs, &props, Selection::default())?;
        let t = clip.features.frames();

        let mut captions = Vec::with_capacity(clip.events.len());
        let mut scratch = Vec::new();
        for e in &clip.events {
            let best = kept
                .iter()
                .map(|p| (tiou(p.segment(t), e.segment()), p))
                .filter(|(iou, _)| *iou >= POSITIVE_IOU)
                .fold(None::<(f64, &EventProposal)>, |acc, x| match acc {
                    Some(a) if a.0 >= x.0 => Some(a),
                    _ => Some(x),
                });
            captions.push(match best {
                None => None,
                Some((_, p)) => Some(self.caption_proposal(&mut tape, store, mem.h, &outputs, p, max_caption_len, &mut scratch)?),
            });
        }

        let weights = LossWeights { caption: 1.0, proposal: 1.0, gate: 0.0 };
        let (_, hits) = self.loss_with::<rand_chacha::ChaCha8Rng>(
            &mut tape,
            store,
            clip,
            weights,
            GateMode::Thresholded,
            None,
        )?;

        Ok(ClipAnalysis {
            clip_id: String::from(clip.clip_id()),
            proposals: kept
                .iter()
                .map(|p| {
                    let (start, end) = p.segment(t);
                    ScoredSegment { score: p.score, start, end }
                })
                .collect(),
            captions,
            token_hits: hits,
            kept_fraction,
        })
    }

    /// Kept proposals of a clip, each with its generated caption.
    pub fn describe(
        &self,
        store: &ParamStore,
        clip: &FeatureStreamPair,
        max_caption_len: usize,
    ) -> Result<Vec<(ScoredSegment, String)>> {
        let mut tape = Tape::no_grad();
        let mem = self.encode(&mut tape, store, clip, GateMode::Thresholded)?;
        let (outputs, props) = propose(&mut tape, store, mem.h, &self.proposal)?;
        let (kept, _) = select_and_mask(&mut tape, &outputs, &props, Selection::default())?;
        let mut scratch = Vec::new();
        let t = clip.frames();
        kept.iter()
            .map(|p| {
                let c = self.caption_proposal(&mut tape, store, mem.h, &outputs, p, max_caption_len, &mut scratch)?;
                let (start, end) = p.segment(t);
                Ok((ScoredSegment { score: p.score, start, end }, c))
            })
            .collect()
    }

    /// Per-gate frame selection of the encoder under thresholded gates.
    pub fn encoder_gates(&self, store: &ParamStore, clip: &FeatureStreamPair) -> Result<Vec<AwarenessGate>> {
        let mut tape = Tape::no_grad();
        Ok(self.encode(&mut tape, store, clip, GateMode::Thresholded)?.gates)
    }

    /// Mean self-attention entropy per head of the final encoder layer(s).
    pub fn attention_entropy(&self, store: &ParamStore, clip: &FeatureStreamPair) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad();
        let u = tape.constant(clip.u.clone());
        let v = tape.constant(clip.v.clone());
        self.composer.attention_entropy(&mut tape, store, u, v, GateMode::Thresholded)
    }

    #[allow(clippy::too_many_arguments)]
    fn caption_proposal(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        outputs: &ProposalOutputs,
        p: &EventProposal,
        max_len: usize,
        gates: &mut Vec<AwarenessGate>,
    ) -> Result<String> {
        let r = proposal_mask(tape, outputs, &[(p.anchor, p.position)])?;
        let f = self.fuse(tape, store, h, r, GateMode::Thresholded, gates)?;
        let ids = self.decoder.generate(tape, store, f, max_len)?;
        Ok(self.vocab.decode(&ids))
    }
}

/// Mean over gates of the fraction of frames with β > 0.
pub fn mean_kept_fraction(gates: &[AwarenessGate]) -> Option<f64> {
    if gates.is_empty() {
        return None;
    }
    Some(gates.iter().map(|g| frame_beta(g).kept_fraction()).sum::<f64>() / gates.len() as f64)
}
