//! Encoder pipelines producing the memory `H` consumed by the proposal head
//! and the caption decoder.
//!
//! * `Baseline`: concatenate the two streams and run an ungated stack.
//! * `Joint`: the same stack, with awareness gating on the input
//!   of the configured layers. A dropped frame enters that layer as zeros,
//!   residual path included.
//! * `Separated`: each stream gated and encoded by its own stack; the
//!   memory is `(H₁ ; H₂)` and the final-layer heads are additionally
//!   composed head-wise as `[(h₁₁;h₂₁), …, (h₁ₕ;h₂ₕ)]`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{row_entropy, AttentionConfig, EncoderLayer};
use crate::awareness::{
    apply_phi_joint, apply_phi_single, AwarenessGate, AwarenessParams, GateMode,
    DEFAULT_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Joint,
    Separated,
}

impl core::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "joint" => Ok(Variant::Joint),
            "separated" => Ok(Variant::Separated),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

impl core::fmt::Display for Variant {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Joint => "joint",
            Variant::Separated => "separated",
        })
    }
}

/// Which encoder layers receive awareness gating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatePlacement {
    Final,
    Every,
}

/// How the joint variant gates its concatenated operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointGate {
    /// One selector over the full `d_u + d_v` width.
    Concatenated,
    /// Separate selectors on the appearance and motion column blocks.
    PerStream,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComposerConfig {
    pub variant: Variant,
    pub appearance_dim: usize,
    pub motion_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub gate_placement: GatePlacement,
    pub joint_gate: JointGate,
    pub threshold: f64,
}

impl Default for ComposerConfig {
    fn default() -> Self {
        ComposerConfig {
            variant: Variant::Separated,
            appearance_dim: 512,
            motion_dim: 512,
            num_layers: 2,
            num_heads: 8,
            gate_placement: GatePlacement::Final,
            joint_gate: JointGate::Concatenated,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl ComposerConfig {
    pub fn joint_width(&self) -> usize {
        self.appearance_dim + self.motion_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        match self.variant {
            Variant::Separated => {
                AttentionConfig::new(self.appearance_dim, self.num_heads)?;
                AttentionConfig::new(self.motion_dim, self.num_heads)?;
            }
            _ => {
                if self.appearance_dim == 0 || self.motion_dim == 0 {
                    return Err(Error::Config("stream widths must be positive".into()));
                }
                AttentionConfig::new(self.joint_width(), self.num_heads)?;
            }
        }
        Ok(())
    }

    fn gated(&self, layer: usize) -> bool {
        self.variant != Variant::Baseline
            && match self.gate_placement {
                GatePlacement::Final => layer + 1 == self.num_layers,
                GatePlacement::Every => true,
            }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GateSlot {
    Single(AwarenessParams),
    PerStream(AwarenessParams, AwarenessParams),
}

/// A stack of encoder layers with optional gating per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamStack {
    pub layers: Vec<EncoderLayer>,
    pub gates: Vec<Option<GateSlot>>,
    pub split: usize,
}

impl StreamStack {
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mut x: Var,
        threshold: f64,
        mode: GateMode,
        gates_out: &mut Vec<AwarenessGate>,
    ) -> Result<StackOutput> {
        let mut heads = Vec::new();
        let mut last_input = x;
        let split = self.split;
        for (layer, slot) in self.layers.iter().zip(&self.gates) {
            let mut produced: Vec<AwarenessGate> = Vec::new();
            let gated = match slot {
                None => x,
                Some(GateSlot::Single(p)) => {
                    let (y, g) = apply_phi_single(tape, store, x, p, threshold, mode)?;
                    produced.push(g);
                    y
                }
                Some(GateSlot::PerStream(pu, pv)) => {
                    let width = tape.shape(x)[1];
                    let xu = tape.slice(x, 1, 0, split)?;
                    let xv = tape.slice(x, 1, split, width - split)?;
                    let (y, [gu, gv]) =
                        apply_phi_joint(tape, store, xu, xv, pu, pv, threshold, mode)?;
                    produced.push(gu);
                    produced.push(gv);
                    y
                }
            };
            let (y, h) = layer.forward_with_heads(tape, store, gated, None)?;
            gates_out.extend(produced);
            last_input = gated;
            x = y;
            heads = h;
        }
        Ok(StackOutput { h: x, heads, last_input })
    }

    fn final_entropy(&self, tape: &mut Tape, store: &ParamStore, out: &StackOutput) -> Result<Vec<f64>> {
        let Some(layer) = self.layers.last() else {
            return Ok(Vec::new());
        };
        let maps = layer.attention_maps(tape, store, out.last_input, None)?;
        Ok(maps
            .into_iter()
            .map(|w| {
                let e = row_entropy(tape.value(w));
                e.iter().sum::<f64>() / e.len() as f64
            })
            .collect())
    }
}

struct StackOutput {
    h: Var,
    heads: Vec<Var>,
    /// Gated input of the last layer.
    last_input: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Encoder {
    Joint(StreamStack),
    Separated {
        appearance: StreamStack,
        motion: StreamStack,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composer {
    pub config: ComposerConfig,
    pub encoder: Encoder,
}

#[derive(Debug, Clone)]
pub struct EncodedMemory {
    /// `T × (d_u + d_v)`.
    pub h: Var,
    /// `(H₁, H₂)` for the separated variant.
    pub streams: Option<(Var, Var)>,
    /// Final-layer heads composed head-wise across streams (separated only).
    pub composition: Option<Var>,
    pub gates: Vec<AwarenessGate>,
}

fn build_stack<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &ComposerConfig,
    width: usize,
    per_stream: bool,
    rng: &mut R,
) -> Result<StreamStack> {
    let att = AttentionConfig::new(width, cfg.num_heads)?;
    let mut layers = Vec::new();
    let mut gates = Vec::new();
    for l in 0..cfg.num_layers {
        layers.push(EncoderLayer::init(store, &format!("{prefix}.layer{l}"), att, rng));
        gates.push(if cfg.gated(l) {
            Some(if per_stream {
                GateSlot::PerStream(
                    AwarenessParams::init(store, &format!("{prefix}.gate{l}.u"), cfg.appearance_dim, rng),
                    AwarenessParams::init(store, &format!("{prefix}.gate{l}.v"), cfg.motion_dim, rng),
                )
            } else {
                GateSlot::Single(AwarenessParams::init(
                    store,
                    &format!("{prefix}.gate{l}"),
                    width,
                    rng,
                ))
            })
        } else {
            None
        });
    }
    Ok(StreamStack {
        layers,
        gates,
        split: cfg.appearance_dim,
    })
}

impl Composer {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: ComposerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let encoder = match config.variant {
            Variant::Baseline | Variant::Joint => {
                let per_stream = config.joint_gate == JointGate::PerStream;
                Encoder::Joint(build_stack(
                    store,
                    "enc",
                    &config,
                    config.joint_width(),
                    per_stream,
                    rng,
                )?)
            }
            Variant::Separated => Encoder::Separated {
                appearance: build_stack(store, "enc_u", &config, config.appearance_dim, false, rng)?,
                motion: build_stack(store, "enc_v", &config, config.motion_dim, false, rng)?,
            },
        };
        Ok(Composer { config, encoder })
    }

    pub fn width(&self) -> usize {
        self.config.joint_width()
    }

    fn check_streams(&self, tape: &Tape, u: Var, v: Var) -> Result<()> {
        let (su, sv) = (tape.shape(u), tape.shape(v));
        if su.len() != 2 || sv.len() != 2 || su[0] != sv[0] {
            return Err(Error::shape("stream length", su, sv));
        }
        if su[1] != self.config.appearance_dim || sv[1] != self.config.motion_dim {
            return Err(Error::shape(
                "stream width",
                &[su[1], sv[1]],
                &[self.config.appearance_dim, self.config.motion_dim],
            ));
        }
        Ok(())
    }

    /// Runs whichever pipeline the composer was built for.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        u: Var,
        v: Var,
        mode: GateMode,
    ) -> Result<EncodedMemory> {
        match &self.encoder {
            Encoder::Joint(_) => self.encode_joint(tape, store, u, v, mode),
            Encoder::Separated { .. } => self.encode_separated(tape, store, u, v, mode),
        }
    }

    /// Concatenate streams, then the (optionally gated) joint stack.
    pub fn encode_joint(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        u: Var,
        v: Var,
        mode: GateMode,
    ) -> Result<EncodedMemory> {
        self.check_streams(tape, u, v)?;
        let Encoder::Joint(stack) = &self.encoder else {
            return Err(Error::Contract("encode_joint on a separated composer".into()));
        };
        let x = tape.concat(&[u, v], 1)?;
        let mut gates = Vec::new();
        let out = stack.forward(tape, store, x, self.config.threshold, mode, &mut gates)?;
        Ok(EncodedMemory {
            h: out.h,
            streams: None,
            composition: None,
            gates,
        })
    }

    /// Gate and encode each stream on its own, then concatenate.
    pub fn encode_separated(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        u: Var,
        v: Var,
        mode: GateMode,
    ) -> Result<EncodedMemory> {
        self.check_streams(tape, u, v)?;
        let Encoder::Separated { appearance, motion } = &self.encoder else {
            return Err(Error::Contract("encode_separated on a joint composer".into()));
        };
        let mut gates = Vec::new();
        let th = self.config.threshold;
        let o1 = appearance.forward(tape, store, u, th, mode, &mut gates)?;
        let o2 = motion.forward(tape, store, v, th, mode, &mut gates)?;
        let (h1, h2) = (o1.h, o2.h);
        let composition = interleave_heads(tape, &o1.heads, &o2.heads)?;
        let h = tape.concat(&[h1, h2], 1)?;
        Ok(EncodedMemory {
            h,
            streams: Some((h1, h2)),
            composition: Some(composition),
            gates,
        })
    }

    /// Mean row entropy (nats) of each head's self-attention in the final
    /// layer of every stack, appearance stack first when separated.
    pub fn attention_entropy(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        u: Var,
        v: Var,
        mode: GateMode,
    ) -> Result<Vec<f64>> {
        self.check_streams(tape, u, v)?;
        let th = self.config.threshold;
        let mut gates = Vec::new();
        match &self.encoder {
            Encoder::Joint(stack) => {
                let x = tape.concat(&[u, v], 1)?;
                let out = stack.forward(tape, store, x, th, mode, &mut gates)?;
                stack.final_entropy(tape, store, &out)
            }
            Encoder::Separated { appearance, motion } => {
                let o1 = appearance.forward(tape, store, u, th, mode, &mut gates)?;
                let o2 = motion.forward(tape, store, v, th, mode, &mut gates)?;
                let mut e = appearance.final_entropy(tape, store, &o1)?;
                e.extend(motion.final_entropy(tape, store, &o2)?);
                Ok(e)
            }
        }
    }
}

/// `[(a₁;b₁), (a₂;b₂), …]` concatenated along features.
pub fn interleave_heads(tape: &mut Tape, a: &[Var], b: &[Var]) -> Result<Var> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("interleave_heads", &[a.len()], &[b.len()]));
    }
    let parts: Vec<Var> = a.iter().zip(b).flat_map(|(&x, &y)| [x, y]).collect();
    tape.concat(&parts, 1)
}

/// The post-proposal block: `H ⊙ R` followed by one (gated) encoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionBlock {
    pub layer: EncoderLayer,
    /// Absent for the ungated baseline.
    pub gate: Option<AwarenessParams>,
    pub threshold: f64,
}

impl FusionBlock {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        width: usize,
        num_heads: usize,
        threshold: f64,
        gated: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let att = AttentionConfig::new(width, num_heads)?;
        Ok(FusionBlock {
            layer: EncoderLayer::init(store, "fuse.layer", att, rng),
            gate: gated.then(|| AwarenessParams::init(store, "fuse.gate", width, rng)),
            threshold,
        })
    }
}

/// Masks memory rows by the proposal mask `r` (length `T`, entries in
/// [0, 1]) and passes the result through the fusion block.
pub fn fuse_with_proposals(
    tape: &mut Tape,
    store: &ParamStore,
    memory: Var,
    r: Var,
    block: &FusionBlock,
    mode: GateMode,
) -> Result<(Var, Option<AwarenessGate>)> {
    let (sm, sr) = (tape.shape(memory).to_vec(), tape.shape(r).to_vec());
    if sm.len() != 2 || sr.len() != 1 || sm[0] != sr[0] {
        return Err(Error::shape("fuse_with_proposals", &sm, &sr));
    }
    // NaN passes so a diverging run is reported by the caller, not here
    if tape.value(r).data().iter().any(|&x| !(x.is_nan() || (0.0..=1.0).contains(&x))) {
        return Err(Error::Contract("proposal mask entries must lie in [0, 1]".into()));
    }
    let masked = tape.scale_rows(memory, r)?;
    let (input, gate) = match &block.gate {
        None => (masked, None),
        Some(p) => {
            let (y, g) = apply_phi_single(tape, store, masked, p, block.threshold, mode)?;
            (y, Some(g))
        }
    };
    let out = block.layer.forward(tape, store, input, None)?;
    Ok((out, gate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(variant: Variant) -> ComposerConfig {
        ComposerConfig {
            variant,
            appearance_dim: 8,
            motion_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ..ComposerConfig::default()
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn validation() {
        let mut c = cfg(Variant::Joint);
        c.num_layers = 0;
        assert!(c.validate().is_err());
        let mut c = cfg(Variant::Separated);
        c.num_heads = 3;
        assert!(c.validate().is_err());
        assert!(cfg(Variant::Separated).validate().is_ok());
    }

    #[test]
    fn stream_length_mismatch_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let comp = Composer::init(&mut store, cfg(Variant::Joint), &mut rng).unwrap();
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::zeros(&[4, 8]));
        let v = tape.constant(Tensor::zeros(&[5, 8]));
        assert!(comp.encode(&mut tape, &store, u, v, GateMode::Soft).is_err());
    }

    #[test]
    fn single_frame_and_output_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for variant in [Variant::Baseline, Variant::Joint, Variant::Separated] {
            let mut store = ParamStore::new();
            let comp = Composer::init(&mut store, cfg(variant), &mut rng).unwrap();
            let mut tape = Tape::new();
            let u = tape.constant(rand_tensor(&mut rng, &[1, 8]));
            let v = tape.constant(rand_tensor(&mut rng, &[1, 8]));
            let m = comp.encode(&mut tape, &store, u, v, GateMode::Soft).unwrap();
            assert_eq!(tape.shape(m.h), &[1, 16]);
            assert!(tape.value(m.h).is_finite());
        }
    }

    #[test]
    fn gate_count_follows_placement() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = cfg(Variant::Separated);
        let mut store = ParamStore::new();
        let comp = Composer::init(&mut store, c, &mut rng).unwrap();
        let mut tape = Tape::new();
        let u = tape.constant(rand_tensor(&mut rng, &[3, 8]));
        let v = tape.constant(rand_tensor(&mut rng, &[3, 8]));
        assert_eq!(comp.encode(&mut tape, &store, u, v, GateMode::Soft).unwrap().gates.len(), 2);

        c.gate_placement = GatePlacement::Every;
        c.variant = Variant::Joint;
        let mut store = ParamStore::new();
        let comp = Composer::init(&mut store, c, &mut rng).unwrap();
        let mut tape = Tape::new();
        let u = tape.constant(rand_tensor(&mut rng, &[3, 8]));
        let v = tape.constant(rand_tensor(&mut rng, &[3, 8]));
        assert_eq!(comp.encode(&mut tape, &store, u, v, GateMode::Soft).unwrap().gates.len(), 2);
    }

    #[test]
    fn fuse_rejects_out_of_range_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = FusionBlock::init(&mut store, 8, 2, 0.05, true, &mut rng).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(rand_tensor(&mut rng, &[4, 8]));
        let r = tape.constant(Tensor::from_vec(vec![0.0, 1.5, 0.2, 1.0]));
        assert!(fuse_with_proposals(&mut tape, &store, h, r, &block, GateMode::Soft).is_err());
        let r = tape.constant(Tensor::from_vec(vec![0.0, 1.0, 0.2]));
        assert!(fuse_with_proposals(&mut tape, &store, h, r, &block, GateMode::Soft).is_err());
    }
}
