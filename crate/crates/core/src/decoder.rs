//! Masked transformer caption decoder.
//!
//! Inputs are embedded with a table shared with the output projection,
//! summed with sinusoidal positions and passed through pre-norm layers of
//! causal self-attention, cross-attention over the fused memory and a
//! feed-forward block. During training a random subset of word positions is
//! replaced by the `MASK` token on the input side only.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head, multi_head_cross, AttentionConfig, FeedForward, LayerNormParams, ProjectionSet};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<mask>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Lowercased whitespace tokens.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence.split_whitespace().map(|w| w.to_lowercase()).collect()
}

impl Vocabulary {
    /// Reserved tokens followed by the sorted distinct corpus words.
    pub fn from_corpus<'a>(sentences: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut words: Vec<String> = sentences.into_iter().flat_map(tokenize).collect();
        words.sort();
        words.dedup();
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        Vocabulary::from_tokens(tokens)
    }

    /// Checks that the first four entries are the reserved tokens and that
    /// the list has no duplicates.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..4].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Config("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `BOS w₁ … wₙ EOS`. Unknown and reserved words are errors.
    pub fn encode(&self, sentence: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        for w in tokenize(sentence) {
            match self.id(&w) {
                Some(id) if id >= RESERVED.len() => ids.push(id),
                _ => return Err(Error::Contract(format!("word {w:?} not in vocabulary"))),
            }
        }
        ids.push(EOS);
        Ok(ids)
    }

    /// Joins the non-reserved tokens with single spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| i >= RESERVED.len())
            .filter_map(|&i| self.token(i))
            .collect();
        words.join(" ")
    }
}

/// Padded token rows with optional input-side mask positions.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionBatch {
    /// `B × S`, each row `BOS … EOS PAD*`.
    pub tokens: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub mask_positions: Vec<Vec<usize>>,
}

impl CaptionBatch {
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Contract("empty caption batch".into()));
        }
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(seqs.len());
        for s in seqs {
            let ok = s.len() >= 2
                && s[0] == BOS
                && s[s.len() - 1] == EOS
                && s[1..s.len() - 1].iter().all(|&t| t >= RESERVED.len());
            if !ok {
                return Err(Error::Contract(format!("malformed caption row {s:?}")));
            }
            let mut row = s.clone();
            row.resize(width, PAD);
            tokens.push(row);
        }
        Ok(CaptionBatch {
            tokens,
            lengths: seqs.iter().map(Vec::len).collect(),
            mask_positions: vec![Vec::new(); seqs.len()],
        })
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn width(&self) -> usize {
        self.tokens[0].len()
    }

    /// Marks each word position (never BOS, EOS or PAD) with probability
    /// `rate`.
    pub fn sample_masks<R: Rng + ?Sized>(&mut self, rate: f64, rng: &mut R) {
        for (b, &len) in self.lengths.iter().enumerate() {
            self.mask_positions[b] = (1..len - 1).filter(|_| rng.random_bool(rate)).collect();
        }
    }

    /// Tokens fed to the decoder: masked positions replaced by `MASK`.
    pub fn inputs(&self) -> Vec<Vec<usize>> {
        let mut rows = self.tokens.clone();
        for (row, masks) in rows.iter_mut().zip(&self.mask_positions) {
            for &p in masks {
                row[p] = MASK;
            }
        }
        rows
    }

    /// Next-token targets: each row shifted left with `PAD` appended.
    pub fn targets(&self) -> Vec<Vec<usize>> {
        self.tokens
            .iter()
            .map(|r| {
                let mut t = r[1..].to_vec();
                t.push(PAD);
                t
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    /// Rows of the positional table; longer sequences are rejected.
    pub max_len: usize,
    pub mask_rate: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            model_dim: 1024,
            num_heads: 8,
            num_layers: 2,
            max_len: 32,
            mask_rate: 0.15,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        AttentionConfig::new(self.model_dim, self.num_heads)?;
        if self.num_layers == 0 || self.max_len < 2 {
            return Err(Error::Config("decoder needs at least one layer and max_len ≥ 2".into()));
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!("mask rate {} outside [0, 1)", self.mask_rate)));
        }
        Ok(())
    }
}

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(…)`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[len, d], |k| {
        let (p, c) = ((k / d) as f64, k % d);
        let freq = libm::pow(10000.0, -((c - c % 2) as f64) / d as f64);
        if c % 2 == 0 {
            libm::sin(p * freq)
        } else {
            libm::cos(p * freq)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub self_attention: ProjectionSet,
    pub cross_attention: ProjectionSet,
    pub norm_self: LayerNormParams,
    pub norm_cross: LayerNormParams,
    pub norm_ffn: LayerNormParams,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub vocab_size: usize,
    /// `|V| × d`, shared by input embedding and output logits.
    pub embedding: ParamId,
    pub norm_memory: LayerNormParams,
    pub layers: Vec<DecoderLayer>,
    pub norm_out: LayerNormParams,
}

fn causal_mask(s: usize) -> Tensor {
    Tensor::from_fn(&[s, s], |k| if k % s <= k / s { 1.0 } else { 0.0 })
}

impl Decoder {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: DecoderConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if vocab_size <= RESERVED.len() {
            return Err(Error::Config("vocabulary has no words".into()));
        }
        let d = config.model_dim;
        let att = AttentionConfig::new(d, config.num_heads)?;
        let layers = (0..config.num_layers)
            .map(|l| {
                let p = format!("dec.layer{l}");
                DecoderLayer {
                    self_attention: ProjectionSet::init(store, &format!("{p}.self"), att, rng),
                    cross_attention: ProjectionSet::init(store, &format!("{p}.cross"), att, rng),
                    norm_self: LayerNormParams::init(store, &format!("{p}.ln1"), d),
                    norm_cross: LayerNormParams::init(store, &format!("{p}.ln2"), d),
                    norm_ffn: LayerNormParams::init(store, &format!("{p}.ln3"), d),
                    ffn: FeedForward::init(store, &format!("{p}.ffn"), d, rng),
                }
            })
            .collect();
        Ok(Decoder {
            config,
            vocab_size,
            embedding: store.add_glorot("dec.embedding", vocab_size, d, rng),
            norm_memory: LayerNormParams::init(store, "dec.ln_mem", d),
            layers,
            norm_out: LayerNormParams::init(store, "dec.ln_out", d),
        })
    }

    fn check_memory(&self, tape: &Tape, memory: Var) -> Result<()> {
        let s = tape.shape(memory);
        if s.len() != 2 || s[1] != self.config.model_dim {
            return Err(Error::shape("decoder memory", s, &[self.config.model_dim]));
        }
        Ok(())
    }

    /// Normalised memory, computed once per clip and shared by every row.
    pub fn prepare_memory(&self, tape: &mut Tape, store: &ParamStore, memory: Var) -> Result<Var> {
        self.check_memory(tape, memory)?;
        self.norm_memory.forward(tape, store, memory)
    }

    /// Logits `S × |V|` for one input row against prepared memory.
    pub fn forward_row(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[usize],
        memory: Var,
    ) -> Result<Var> {
        let s = ids.len();
        if s == 0 || s > self.config.max_len {
            return Err(Error::Config(format!(
                "sequence length {s} outside positional table of {}",
                self.config.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary")));
        }
        let d = self.config.model_dim;
        let table = tape.param(store, self.embedding);
        let e = tape.gather_rows(table, ids)?;
        let e = tape.scale(e, libm::sqrt(d as f64));
        let pe = tape.constant(sinusoidal_positions(s, d));
        let mut x = tape.add(e, pe)?;
        let causal = causal_mask(s);
        for layer in &self.layers {
            let n = layer.norm_self.forward(tape, store, x)?;
            let a = multi_head(tape, store, n, &layer.self_attention, Some(&causal))?;
            x = tape.add(x, a)?;
            let n = layer.norm_cross.forward(tape, store, x)?;
            let c = multi_head_cross(tape, store, n, memory, &layer.cross_attention, None)?;
            x = tape.add(x, c)?;
            let n = layer.norm_ffn.forward(tape, store, x)?;
            let f = layer.ffn.forward(tape, store, n)?;
            x = tape.add(x, f)?;
        }
        let y = self.norm_out.forward(tape, store, x)?;
        tape.matmul_nt(y, table)
    }

    /// Teacher-forced logits `B × S × |V|` for the batch inputs (with any
    /// sampled masks applied).
    pub fn decode_train(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &CaptionBatch,
        memory: Var,
    ) -> Result<Var> {
        let mem = self.prepare_memory(tape, store, memory)?;
        let rows = batch
            .inputs()
            .iter()
            .map(|ids| self.forward_row(tape, store, ids, mem))
            .collect::<Result<Vec<_>>>()?;
        let flat = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
        tape.reshape(flat, &[batch.rows(), batch.width(), self.vocab_size])
    }

    /// Greedy decoding from `BOS` until `EOS` or `max_len` total tokens.
    /// Returns the generated tokens without `BOS`/`EOS`. Ties go to the
    /// lowest id.
    pub fn generate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: Var,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let max_len = max_len.min(self.config.max_len);
        let mem = self.prepare_memory(tape, store, memory)?;
        let mut seq = vec![BOS];
        while seq.len() < max_len {
            let logits = self.forward_row(tape, store, &seq, mem)?;
            let v = self.vocab_size;
            let last = &tape.value(logits).data()[(seq.len() - 1) * v..seq.len() * v];
            let next = argmax(last);
            if next == EOS {
                break;
            }
            seq.push(next);
        }
        Ok(seq[1..].to_vec())
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_logits(tape: &Tape, logits: Var, targets: &[Vec<usize>]) -> Result<(usize, usize, usize)> {
    let s = tape.shape(logits);
    if s.len() != 3 || s[0] != targets.len() || targets.iter().any(|t| t.len() != s[1]) {
        return Err(Error::shape(
            "caption targets",
            s,
            &[targets.len(), targets.first().map_or(0, Vec::len)],
        ));
    }
    if targets.iter().flatten().any(|&t| t >= s[2]) {
        return Err(Error::Contract("target id outside vocabulary".into()));
    }
    Ok((s[0], s[1], s[2]))
}

/// Mean cross-entropy over non-`PAD` targets. `PAD` targets carry zero
/// weight; a batch with none gives zero.
pub fn caption_loss(tape: &mut Tape, logits: Var, targets: &[Vec<usize>]) -> Result<Var> {
    let (b, s, v) = check_logits(tape, logits, targets)?;
    let count = targets.iter().flatten().filter(|&&t| t != PAD).count();
    let mut weights = Tensor::zeros(&[b, s, v]);
    if count > 0 {
        let w = -1.0 / count as f64;
        for (r, row) in targets.iter().enumerate() {
            for (p, &t) in row.iter().enumerate() {
                if t != PAD {
                    weights.data_mut()[(r * s + p) * v + t] = w;
                }
            }
        }
    }
    let logp = tape.log_softmax(logits);
    let w = tape.constant(weights);
    let picked = tape.mul(logp, w)?;
    Ok(tape.sum(picked))
}

/// `(correct, total)` argmax predictions over non-`PAD` targets.
pub fn token_hits(tape: &Tape, logits: Var, targets: &[Vec<usize>]) -> Result<(usize, usize)> {
    let (_, s, v) = check_logits(tape, logits, targets)?;
    let data = tape.value(logits).data();
    let mut hits = 0;
    let mut total = 0;
    for (r, row) in targets.iter().enumerate() {
        for (p, &t) in row.iter().enumerate() {
            if t == PAD {
                continue;
            }
            total += 1;
            let off = (r * s + p) * v;
            if argmax(&data[off..off + v]) == t {
                hits += 1;
            }
        }
    }
    Ok((hits, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::from_corpus(["a person opens the door", "A person closes the box"]).unwrap()
    }

    fn small(vocab_size: usize, seed: u64) -> (ParamStore, Decoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig {
            model_dim: 8,
            num_heads: 2,
            num_layers: 2,
            max_len: 10,
            mask_rate: 0.15,
        };
        let dec = Decoder::init(&mut store, cfg, vocab_size, &mut rng).unwrap();
        (store, dec)
    }

    #[test]
    fn vocabulary_layout() {
        let v = vocab();
        assert_eq!(v.len(), 4 + 7);
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.id("a"), Some(4));
        let ids = v.encode("A person opens THE door").unwrap();
        assert_eq!(ids[0], BOS);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(v.decode(&ids), "a person opens the door");
        assert!(v.encode("a person flies").is_err());
        assert!(v.encode("<pad>").is_err());
        assert!(Vocabulary::from_tokens(vec!["x".into()]).is_err());
    }

    #[test]
    fn batch_shapes_and_targets() {
        let v = vocab();
        let rows = [v.encode("a person opens the door").unwrap(), v.encode("the box").unwrap()];
        let b = CaptionBatch::from_sequences(&rows).unwrap();
        assert_eq!(b.width(), 7);
        assert_eq!(b.tokens[1][4..], [PAD, PAD, PAD]);
        assert_eq!(b.targets()[1][1..4], [v.id("box").unwrap(), EOS, PAD]);
        assert!(CaptionBatch::from_sequences(&[vec![BOS, 5]]).is_err());
        assert!(CaptionBatch::from_sequences(&[vec![BOS, MASK, EOS]]).is_err());
    }

    #[test]
    fn masks_avoid_special_positions() {
        let v = vocab();
        let rows = [v.encode("a person opens the door").unwrap(), v.encode("box").unwrap()];
        let mut b = CaptionBatch::from_sequences(&rows).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            b.sample_masks(0.5, &mut rng);
            for (r, m) in b.mask_positions.iter().enumerate() {
                assert!(m.iter().all(|&p| p >= 1 && p + 1 < b.lengths[r]));
            }
        }
        b.sample_masks(0.0, &mut rng);
        assert_eq!(b.inputs(), b.tokens);
    }

    #[test]
    fn bos_eos_loss_is_single_term() {
        let mut tape = Tape::new();
        let raw = Tensor::from_fn(&[1, 2, 5], |i| (i as f64 * 0.37).sin());
        let logits = tape.leaf(raw.clone(), true);
        let loss = caption_loss(&mut tape, logits, &[vec![EOS, PAD]]).unwrap();
        let row = &raw.data()[..5];
        let lse = libm::log(row.iter().map(|x| libm::exp(*x)).sum::<f64>());
        assert!((tape.scalar_value(loss) - (lse - row[EOS])).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 3, 10]), true);
        let targets = vec![vec![4, 5, EOS], vec![6, EOS, PAD]];
        let loss = caption_loss(&mut tape, logits, &targets).unwrap();
        assert!((tape.scalar_value(loss) - libm::log(10.0)).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_zero_loss() {
        let mut tape = Tape::new();
        let targets = vec![vec![4, EOS]];
        let raw = Tensor::from_fn(&[1, 2, 6], |k| {
            let (p, c) = (k / 6, k % 6);
            if c == targets[0][p] { 60.0 } else { 0.0 }
        });
        let logits = tape.leaf(raw, true);
        let loss = caption_loss(&mut tape, logits, &targets).unwrap();
        assert!(tape.scalar_value(loss) < 1e-20);
        assert_eq!(token_hits(&tape, logits, &targets).unwrap(), (2, 2));
    }

    #[test]
    fn pad_targets_have_zero_gradient() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_fn(&[1, 3, 6], |i| i as f64 * 0.1), true);
        let loss = caption_loss(&mut tape, logits, &[vec![4, EOS, PAD]]).unwrap();
        let g = tape.backward(loss).unwrap().get(logits).unwrap();
        assert!(g.data()[12..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn too_long_sequence_is_config_error() {
        let (store, dec) = small(11, 0);
        let mut tape = Tape::new();
        let mem = tape.constant(Tensor::zeros(&[4, 8]));
        let ids = vec![BOS; 11];
        assert!(matches!(
            dec.forward_row(&mut tape, &store, &ids, mem),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn future_tokens_do_not_change_past_logits() {
        let (store, dec) = small(11, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::no_grad();
        let mem = tape.constant(Tensor::from_fn(&[5, 8], |_| rng.random_range(-1.0..1.0)));
        let mem = dec.prepare_memory(&mut tape, &store, mem).unwrap();
        let ids = vec![BOS, 4, 5, 6, 7, EOS];
        let base = dec.forward_row(&mut tape, &store, &ids, mem).unwrap();
        let mut alt = ids.clone();
        alt[3] = 9;
        let pert = dec.forward_row(&mut tape, &store, &alt, mem).unwrap();
        assert_eq!(tape.value(base).data()[..3 * 11], tape.value(pert).data()[..3 * 11]);
        assert_ne!(tape.value(base).data()[3 * 11..], tape.value(pert).data()[3 * 11..]);
    }

    #[test]
    fn zero_weight_generation_is_deterministic() {
        let (mut store, dec) = small(11, 3);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let s = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&s)).unwrap();
        }
        let mut tape = Tape::no_grad();
        let mem = tape.constant(Tensor::ones(&[4, 8]));
        let a = dec.generate(&mut tape, &store, mem, 6).unwrap();
        let b = dec.generate(&mut tape, &store, mem, 6).unwrap();
        // every logit is zero, so the lowest id (PAD) wins each step
        assert_eq!(a, vec![PAD; 5]);
        assert_eq!(a, b);
    }

    #[test]
    fn sinusoid_first_rows() {
        let pe = sinusoidal_positions(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(1, 0) - libm::sin(1.0)).abs() < 1e-15);
        assert!((pe.at(1, 2) - libm::sin(0.01)).abs() < 1e-15);
    }
}
