//! Anchor-based temporal event proposals over encoded memory.
//!
//! For every anchor length `L` and position `i` a 1-D convolution of width
//! `L` emits three channels: score logit `s`, centre offset `c` and length
//! offset `l`, giving
//!
//! * `O = σ(s)`
//! * `centre = i + L·tanh(c)`
//! * `length = L·exp(2·tanh(l/2))`  (bounded to `[L/e², L·e²]`)

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Edge softness of the proposal mask window, in frames.
pub const WINDOW_EDGE: f64 = 0.1;
pub const POSITIVE_IOU: f64 = 0.5;
pub const NEGATIVE_IOU: f64 = 0.1;
pub const SCORE_THRESHOLD: f64 = 0.5;
pub const NMS_IOU: f64 = 0.7;
pub const TRAIN_TOP_K: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub lengths: Vec<usize>,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        AnchorSpec {
            lengths: vec![2, 4, 8, 16],
        }
    }
}

impl AnchorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty()
            || self.lengths.contains(&0)
            || self.lengths.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "anchor lengths must be positive and strictly ascending, got {:?}",
                self.lengths
            )));
        }
        Ok(())
    }
}

/// Temporal intersection over union of two `[start, end]` segments.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventProposal {
    pub score: f64,
    pub center: f64,
    pub length: f64,
    /// Index into [`AnchorSpec::lengths`].
    pub anchor: usize,
    pub position: usize,
}

impl EventProposal {
    /// `[centre − length/2, centre + length/2]` clipped to `[0, frames]`.
    pub fn segment(&self, frames: usize) -> (f64, f64) {
        let t = frames as f64;
        (
            (self.center - self.length / 2.0).clamp(0.0, t),
            (self.center + self.length / 2.0).clamp(0.0, t),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalHead {
    pub anchors: AnchorSpec,
    /// Per anchor: `(L·D) × 3` kernel.
    pub kernels: Vec<ParamId>,
    /// Per anchor: bias over the three channels.
    pub biases: Vec<ParamId>,
    pub width: usize,
}

impl ProposalHead {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        anchors: AnchorSpec,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        anchors.validate()?;
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for &len in &anchors.lengths {
            let k = store.add_glorot(format!("prop.a{len}.kernel"), len * width, 3, rng);
            kernels.push(k);
            biases.push(store.add(format!("prop.a{len}.bias"), Tensor::zeros(&[3])));
        }
        Ok(ProposalHead {
            anchors,
            kernels,
            biases,
            width,
        })
    }
}

/// Per-anchor head outputs on the tape, each of length `T`.
#[derive(Debug, Clone)]
pub struct AnchorOutputs {
    pub anchor: usize,
    pub length: usize,
    pub score_logit: Var,
    pub score: Var,
    pub center: Var,
    pub log_length: Var,
    pub extent: Var,
}

#[derive(Debug, Clone)]
pub struct ProposalOutputs {
    pub frames: usize,
    pub anchors: Vec<AnchorOutputs>,
}

impl ProposalOutputs {
    fn find(&self, anchor: usize) -> Option<&AnchorOutputs> {
        self.anchors.iter().find(|a| a.anchor == anchor)
    }

    /// Reads every proposal's values off the tape.
    pub fn proposals(&self, tape: &Tape) -> Vec<EventProposal> {
        let mut out = Vec::new();
        for a in &self.anchors {
            let (s, c, l) = (
                tape.value(a.score).data(),
                tape.value(a.center).data(),
                tape.value(a.extent).data(),
            );
            for i in 0..self.frames {
                out.push(EventProposal {
                    score: s[i],
                    center: c[i],
                    length: l[i],
                    anchor: a.anchor,
                    position: i,
                });
            }
        }
        out
    }

    /// The fixed (unregressed) segment of anchor `anchor` at `position`.
    pub fn anchor_segment(&self, anchor: usize, position: usize) -> Option<(f64, f64)> {
        let len = self.find(anchor)?.length as f64;
        let t = self.frames as f64;
        let c = position as f64;
        Some(((c - len / 2.0).clamp(0.0, t), (c + len / 2.0).clamp(0.0, t)))
    }

    /// The anchor whose fixed segment best overlaps `gt`. Ties go to the
    /// smaller anchor, then the earlier position.
    pub fn best_anchor(&self, gt: (f64, f64)) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in &self.anchors {
            for i in 0..self.frames {
                let iou = tiou(self.anchor_segment(a.anchor, i)?, gt);
                if best.is_none_or(|b| iou > b.2) {
                    best = Some((a.anchor, i, iou));
                }
            }
        }
        best
    }
}

/// Runs every anchor whose length fits in `T` over `memory: T × D`.
pub fn propose(
    tape: &mut Tape,
    store: &ParamStore,
    memory: Var,
    head: &ProposalHead,
) -> Result<(ProposalOutputs, Vec<EventProposal>)> {
    let s = tape.shape(memory).to_vec();
    if s.len() != 2 || s[1] != head.width {
        return Err(Error::shape("propose", &s, &[head.width]));
    }
    let frames = s[0];
    let positions = tape.constant(Tensor::from_fn(&[frames], |i| i as f64));
    let mut anchors = Vec::new();
    for (idx, &len) in head.anchors.lengths.iter().enumerate() {
        if len > frames {
            continue;
        }
        let cols = tape.unfold_time(memory, len, len / 2)?;
        let w = tape.param(store, head.kernels[idx]);
        let b = tape.param(store, head.biases[idx]);
        let y = tape.matmul(cols, w)?;
        let y = tape.add(y, b)?;
        let yt = tape.transpose(y)?;
        let channel = |tape: &mut Tape, c: usize| -> Result<Var> {
            let r = tape.slice(yt, 0, c, 1)?;
            tape.reshape(r, &[frames])
        };
        let score_logit = channel(tape, 0)?;
        let center_raw = channel(tape, 1)?;
        let length_raw = channel(tape, 2)?;

        let score = tape.sigmoid(score_logit);
        let c = tape.tanh(center_raw);
        let c = tape.scale(c, len as f64);
        let center = tape.add(positions, c)?;
        let half = tape.scale(length_raw, 0.5);
        let l = tape.tanh(half);
        let l = tape.scale(l, 2.0);
        let log_length = tape.offset(l, libm::log(len as f64));
        let extent = tape.exp(log_length);
        anchors.push(AnchorOutputs {
            anchor: idx,
            length: len,
            score_logit,
            score,
            center,
            log_length,
            extent,
        });
    }
    let outputs = ProposalOutputs { frames, anchors };
    let proposals = outputs.proposals(tape);
    Ok((outputs, proposals))
}

fn nms_order(a: &EventProposal, b: &EventProposal) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.center.total_cmp(&b.center))
        .then(a.anchor.cmp(&b.anchor))
        .then(a.position.cmp(&b.position))
}

/// Greedy non-maximum suppression by descending score. The result does not
/// depend on the order of `proposals`.
pub fn nms(proposals: &[EventProposal], iou: f64, frames: usize) -> Vec<EventProposal> {
    let mut sorted = proposals.to_vec();
    sorted.sort_by(nms_order);
    let mut kept: Vec<EventProposal> = Vec::new();
    for p in sorted {
        let seg = p.segment(frames);
        if kept.iter().all(|k| tiou(k.segment(frames), seg) < iou) {
            kept.push(p);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    /// Inference: drop proposals scored below `score`, then NMS.
    Threshold { score: f64, nms_iou: f64 },
    /// Training: NMS, then the `k` best.
    TopK { k: usize, nms_iou: f64 },
}

impl Default for Selection {
    fn default() -> Self {
        Selection::Threshold {
            score: SCORE_THRESHOLD,
            nms_iou: NMS_IOU,
        }
    }
}

/// Soft mask `R_t = max_p O_p · w_p(t)` over the given `(anchor, position)`
/// proposals, where `w_p` is a logistic-edged window over the proposal's
/// segment evaluated at frame midpoints. Zero when `picks` is empty.
pub fn proposal_mask(
    tape: &mut Tape,
    outputs: &ProposalOutputs,
    picks: &[(usize, usize)],
) -> Result<Var> {
    let frames = outputs.frames;
    let mids = tape.constant(Tensor::from_fn(&[frames], |t| t as f64 + 0.5));
    let mut mask: Option<Var> = None;
    for &(anchor, pos) in picks {
        let a = outputs
            .find(anchor)
            .ok_or_else(|| Error::Contract(format!("anchor {anchor} produced no outputs")))?
            .clone();
        if pos >= frames {
            return Err(Error::Contract(format!("position {pos} beyond {frames} frames")));
        }
        let o = tape.slice(a.score, 0, pos, 1)?;
        let c = tape.slice(a.center, 0, pos, 1)?;
        let l = tape.slice(a.extent, 0, pos, 1)?;
        let half = tape.scale(l, 0.5);
        let start = tape.sub(c, half)?;
        let end = tape.add(c, half)?;
        let rise = tape.sub(mids, start)?;
        let rise = tape.scale(rise, 1.0 / WINDOW_EDGE);
        let rise = tape.sigmoid(rise);
        let fall = tape.sub(end, mids)?;
        let fall = tape.scale(fall, 1.0 / WINDOW_EDGE);
        let fall = tape.sigmoid(fall);
        let w = tape.mul(rise, fall)?;
        let w = tape.mul(w, o)?;
        mask = Some(match mask {
            None => w,
            Some(m) => tape.maximum(m, w)?,
        });
    }
    Ok(match mask {
        Some(m) => m,
        None => tape.constant(Tensor::zeros(&[frames])),
    })
}

/// Selects proposals and builds the differentiable frame mask `R`.
pub fn select_and_mask(
    tape: &mut Tape,
    outputs: &ProposalOutputs,
    proposals: &[EventProposal],
    selection: Selection,
) -> Result<(Vec<EventProposal>, Var)> {
    let frames = outputs.frames;
    let kept = match selection {
        Selection::Threshold { score, nms_iou } => {
            let pool: Vec<_> = proposals.iter().copied().filter(|p| p.score >= score).collect();
            nms(&pool, nms_iou, frames)
        }
        Selection::TopK { k, nms_iou } => {
            let mut v = nms(proposals, nms_iou, frames);
            v.truncate(k);
            v
        }
    };
    let picks: Vec<_> = kept.iter().map(|p| (p.anchor, p.position)).collect();
    let r = proposal_mask(tape, outputs, &picks)?;
    Ok((kept, r))
}

/// Binary cross-entropy on scores (class-balanced between positive and
/// negative anchors) plus smooth-L1 on centre and log-length offsets of
/// positive anchors.
///
/// An anchor is positive when its fixed segment reaches tIoU ≥ 0.5 with some
/// ground-truth segment, or is the best anchor for one; negative below 0.1;
/// otherwise ignored.
pub fn proposal_loss(
    tape: &mut Tape,
    outputs: &ProposalOutputs,
    ground_truth: &[(f64, f64)],
) -> Result<Var> {
    let frames = outputs.frames;
    let t = frames as f64;
    for &(s, e) in ground_truth {
        if !(0.0 <= s && s < e && e <= t) {
            return Err(Error::Contract(format!(
                "ground-truth segment [{s}, {e}] outside [0, {t}]"
            )));
        }
    }
    if outputs.anchors.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }

    // label[a][i]: Some(gt index) for positives, None+neg flag otherwise
    let n_anchor = outputs.anchors.len();
    let mut matched: Vec<Vec<Option<usize>>> = vec![vec![None; frames]; n_anchor];
    let mut negative = vec![vec![false; frames]; n_anchor];
    for (ai, a) in outputs.anchors.iter().enumerate() {
        for i in 0..frames {
            let seg = outputs.anchor_segment(a.anchor, i).expect("anchor exists");
            let mut best = (0.0, None);
            for (g, &gt) in ground_truth.iter().enumerate() {
                let iou = tiou(seg, gt);
                if iou > best.0 {
                    best = (iou, Some(g));
                }
            }
            if best.0 >= POSITIVE_IOU {
                matched[ai][i] = best.1;
            } else if best.0 < NEGATIVE_IOU {
                negative[ai][i] = true;
            }
        }
    }
    for (g, &gt) in ground_truth.iter().enumerate() {
        if let Some((anchor, pos, _)) = outputs.best_anchor(gt) {
            let ai = outputs.anchors.iter().position(|a| a.anchor == anchor).expect("anchor");
            if matched[ai][pos].is_none() {
                matched[ai][pos] = Some(g);
                negative[ai][pos] = false;
            }
        }
    }
    let n_pos: usize = matched.iter().flatten().filter(|m| m.is_some()).count();
    let n_neg: usize = negative.iter().flatten().filter(|&&n| n).count();
    let (w_pos, w_neg) = match (n_pos, n_neg) {
        (0, 0) => (0.0, 0.0),
        (0, n) => (0.0, 1.0 / n as f64),
        (p, 0) => (1.0 / p as f64, 0.0),
        (p, n) => (0.5 / p as f64, 0.5 / n as f64),
    };

    let mut total = tape.constant(Tensor::scalar(0.0));
    for (ai, a) in outputs.anchors.iter().enumerate() {
        let mut labels = vec![0.0; frames];
        let mut weights = vec![0.0; frames];
        let mut pos_mask = vec![0.0; frames];
        let mut gt_center = vec![0.0; frames];
        let mut gt_log_len = vec![0.0; frames];
        for i in 0..frames {
            if let Some(g) = matched[ai][i] {
                labels[i] = 1.0;
                weights[i] = w_pos;
                pos_mask[i] = 1.0;
                let (s, e) = ground_truth[g];
                gt_center[i] = (s + e) / 2.0;
                gt_log_len[i] = libm::log(e - s);
            } else if negative[ai][i] {
                weights[i] = w_neg;
            }
        }
        // Σ w·(softplus(z) − y·z)
        let sp = tape.softplus(a.score_logit);
        let y = tape.constant(Tensor::from_vec(labels));
        let yz = tape.mul(a.score_logit, y)?;
        let bce = tape.sub(sp, yz)?;
        let w = tape.constant(Tensor::from_vec(weights));
        let bce = tape.mul(bce, w)?;
        let bce = tape.sum(bce);
        total = tape.add(total, bce)?;

        if n_pos > 0 && pos_mask.iter().any(|&m| m > 0.0) {
            let inv = 1.0 / n_pos as f64;
            let gc = tape.constant(Tensor::from_vec(gt_center));
            let dc = tape.sub(a.center, gc)?;
            let mc = tape.constant(Tensor::from_vec(
                pos_mask.iter().map(|m| m / a.length as f64).collect(),
            ));
            let dc = tape.mul(dc, mc)?;
            let lc = tape.smooth_l1(dc);
            let lc = tape.sum(lc);

            let gl = tape.constant(Tensor::from_vec(gt_log_len));
            let dl = tape.sub(a.log_length, gl)?;
            let ml = tape.constant(Tensor::from_vec(pos_mask));
            let dl = tape.mul(dl, ml)?;
            let ll = tape.smooth_l1(dl);
            let ll = tape.sum(ll);

            let off = tape.add(lc, ll)?;
            let off = tape.scale(off, inv);
            total = tape.add(total, off)?;
        }
    }
    Ok(total)
}
