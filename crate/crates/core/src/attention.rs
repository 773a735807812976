//! Scaled dot-product attention, multi-head composition and the pre-norm
//! encoder layer built on top of them.
//!
//! Projections carry no bias: a zero input always yields a zero attention
//! output. Each head `h` owns column block `h·head_dim .. (h+1)·head_dim` of
//! the composer (query), selector (key) and amplifier (value) matrices.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Additive score for masked keys; `exp` of it underflows to exactly zero.
pub const MASKED_SCORE: f64 = -1e30;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            model_dim,
            num_heads,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionSet {
    pub config: AttentionConfig,
    /// Query projection, `d × d` (heads side by side).
    pub composer: ParamId,
    /// Key projection.
    pub selector: ParamId,
    /// Value projection.
    pub amplifier: ParamId,
    /// Output projection `(h·head_dim) × d`.
    pub output: ParamId,
}

impl ProjectionSet {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let d = config.model_dim;
        ProjectionSet {
            config,
            composer: store.add_glorot(format!("{prefix}.w_p"), d, d, rng),
            selector: store.add_glorot(format!("{prefix}.w_q"), d, d, rng),
            amplifier: store.add_glorot(format!("{prefix}.w_r"), d, d, rng),
            output: store.add_glorot(format!("{prefix}.w_o"), d, d, rng),
        }
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        let d = self.config.model_dim;
        for id in [self.composer, self.selector, self.amplifier, self.output] {
            if store.get(id).shape() != [d, d] {
                return Err(Error::shape(
                    "projection set",
                    store.get(id).shape(),
                    &[d, d],
                ));
            }
        }
        Ok(())
    }
}

/// Validates a `{0,1}` mask and converts it to additive scores.
fn additive_mask(mask: &Tensor, tq: usize, tk: usize) -> Result<Tensor> {
    if mask.shape() != [tq, tk] {
        return Err(Error::shape("attention mask", mask.shape(), &[tq, tk]));
    }
    let mut out = Tensor::zeros(&[tq, tk]);
    for r in 0..tq {
        let mut any = false;
        for c in 0..tk {
            let m = mask.at(r, c);
            if m == 1.0 {
                any = true;
            } else if m == 0.0 {
                out.data_mut()[r * tk + c] = MASKED_SCORE;
            } else {
                return Err(Error::Contract(format!(
                    "mask entries must be 0 or 1, found {m}"
                )));
            }
        }
        if !any {
            return Err(Error::FullyMasked { row: r });
        }
    }
    Ok(out)
}

/// Attention weights `softmax(q·kᵀ/√dₕ + log mask)`.
pub fn attention_weights(
    tape: &mut Tape,
    q: Var,
    k: Var,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let (sq, sk) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::shape("attention q/k", &sq, &sk));
    }
    let scores = tape.matmul_nt(q, k)?;
    let mut scores = tape.scale(scores, 1.0 / libm::sqrt(sq[1] as f64));
    if let Some(m) = mask {
        let add = tape.constant(additive_mask(m, sq[0], sk[0])?);
        scores = tape.add(scores, add)?;
    }
    tape.softmax(scores, 1)
}

/// `softmax(q·kᵀ/√dₕ + log mask) · v`.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor>,
) -> Result<Var> {
    if tape.shape(k)[0] != tape.shape(v)[0] {
        return Err(Error::shape("attention keys/values", tape.shape(k), tape.shape(v)));
    }
    let w = attention_weights(tape, q, k, mask)?;
    tape.matmul(w, v)
}

fn project_heads(
    tape: &mut Tape,
    store: &ParamStore,
    xq: Var,
    xkv: Var,
    proj: &ProjectionSet,
) -> Result<Vec<(Var, Var, Var)>> {
    proj.check(store)?;
    let d = proj.config.model_dim;
    for x in [xq, xkv] {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != d {
            return Err(Error::shape("multi_head input", s, &[d]));
        }
    }
    let wp = tape.param(store, proj.composer);
    let wq = tape.param(store, proj.selector);
    let wr = tape.param(store, proj.amplifier);
    let q = tape.matmul(xq, wp)?;
    let k = tape.matmul(xkv, wq)?;
    let v = tape.matmul(xkv, wr)?;
    if proj.config.num_heads == 1 {
        return Ok(alloc::vec![(q, k, v)]);
    }
    let dh = proj.config.head_dim();
    (0..proj.config.num_heads)
        .map(|h| {
            Ok((
                tape.slice(q, 1, h * dh, dh)?,
                tape.slice(k, 1, h * dh, dh)?,
                tape.slice(v, 1, h * dh, dh)?,
            ))
        })
        .collect()
}

/// Per-head attention outputs (before the output projection), queries taken
/// from `xq` and keys/values from `xkv`.
pub fn head_outputs(
    tape: &mut Tape,
    store: &ParamStore,
    xq: Var,
    xkv: Var,
    proj: &ProjectionSet,
    mask: Option<&Tensor>,
) -> Result<Vec<Var>> {
    project_heads(tape, store, xq, xkv, proj)?
        .into_iter()
        .map(|(q, k, v)| scaled_dot_attention(tape, q, k, v, mask))
        .collect()
}

/// Per-head attention weight matrices, `rows(xq) × rows(xkv)` each.
pub fn head_weights(
    tape: &mut Tape,
    store: &ParamStore,
    xq: Var,
    xkv: Var,
    proj: &ProjectionSet,
    mask: Option<&Tensor>,
) -> Result<Vec<Var>> {
    project_heads(tape, store, xq, xkv, proj)?
        .into_iter()
        .map(|(q, k, _)| attention_weights(tape, q, k, mask))
        .collect()
}

/// Shannon entropy (nats) of each row of an attention weight matrix.
pub fn row_entropy(weights: &Tensor) -> Vec<f64> {
    (0..weights.rows())
        .map(|r| {
            weights
                .row(r)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * libm::log(p))
                .sum()
        })
        .collect()
}

/// `[head_1, …, head_h] · W` with keys/values from `xkv`.
pub fn multi_head_cross(
    tape: &mut Tape,
    store: &ParamStore,
    xq: Var,
    xkv: Var,
    proj: &ProjectionSet,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let heads = head_outputs(tape, store, xq, xkv, proj, mask)?;
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat(&heads, 1)?
    };
    let wo = tape.param(store, proj.output);
    tape.matmul(cat, wo)
}

/// Multi-head self-attention.
pub fn multi_head(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    proj: &ProjectionSet,
    mask: Option<&Tensor>,
) -> Result<Var> {
    multi_head_cross(tape, store, x, x, proj, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        LayerNormParams {
            gain: store.add(format!("{prefix}.gain"), Tensor::ones(&[d])),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LAYER_NORM_EPS);
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul(n, g)?;
        tape.add(y, b)
    }
}

/// Two affine maps with a rectifier between, inner width `4d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedForward {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl FeedForward {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Self {
        FeedForward {
            w_in: store.add_glorot(format!("{prefix}.w_in"), d, 4 * d, rng),
            b_in: store.add(format!("{prefix}.b_in"), Tensor::zeros(&[4 * d])),
            w_out: store.add_glorot(format!("{prefix}.w_out"), 4 * d, d, rng),
            b_out: store.add(format!("{prefix}.b_out"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w1 = tape.param(store, self.w_in);
        let b1 = tape.param(store, self.b_in);
        let w2 = tape.param(store, self.w_out);
        let b2 = tape.param(store, self.b_out);
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, w2)?;
        tape.add(o, b2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub attention: ProjectionSet,
    pub norm_attn: LayerNormParams,
    pub norm_ffn: LayerNormParams,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let d = config.model_dim;
        EncoderLayer {
            attention: ProjectionSet::init(store, &format!("{prefix}.attn"), config, rng),
            norm_attn: LayerNormParams::init(store, &format!("{prefix}.ln1"), d),
            norm_ffn: LayerNormParams::init(store, &format!("{prefix}.ln2"), d),
            ffn: FeedForward::init(store, &format!("{prefix}.ffn"), d, rng),
        }
    }

    /// `y = x + MHA(LN(x))`, then `y + FFN(LN(y))`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        self.forward_with_heads(tape, store, x, mask).map(|(y, _)| y)
    }

    /// Self-attention weights of each head for input `x`.
    pub fn attention_maps(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: Option<&Tensor>,
    ) -> Result<Vec<Var>> {
        let a = self.norm_attn.forward(tape, store, x)?;
        head_weights(tape, store, a, a, &self.attention, mask)
    }

    /// As [`forward`](Self::forward), also returning the per-head attention
    /// outputs before the output projection.
    pub fn forward_with_heads(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: Option<&Tensor>,
    ) -> Result<(Var, Vec<Var>)> {
        let a = self.norm_attn.forward(tape, store, x)?;
        let heads = head_outputs(tape, store, a, a, &self.attention, mask)?;
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        };
        let wo = tape.param(store, self.attention.output);
        let att = tape.matmul(cat, wo)?;
        let y = tape.add(x, att)?;
        let n = self.norm_ffn.forward(tape, store, y)?;
        let f = self.ffn.forward(tape, store, n)?;
        Ok((tape.add(y, f)?, heads))
    }
}

/// Encoder layer as a free function, mirroring [`EncoderLayer::forward`].
pub fn encoder_layer(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    layer: &EncoderLayer,
    mask: Option<&Tensor>,
) -> Result<Var> {
    layer.forward(tape, store, x, mask)
}
