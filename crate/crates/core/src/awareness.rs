//! Awareness selectors: per-frame, per-feature sigmoid gates
//! `ω_t = σ(Z₁ ρ(Z₂ x_t + Z₃ x̄))`, where `x̄` is the temporal mean of the
//! gated stream, and the gating function Φ that multiplies them into the
//! stream.
//!
//! Matrices are stored for row-vector products (`x · W`), so the extraction
//! and context maps are `d × g` and the weighting map is `g × d`.
//!
//! Soft gates never reach zero. Frame dropping happens through the hard
//! threshold τ used at inference: entries below τ are zeroed and a frame
//! whose whole row is zeroed is reported with β = 0.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AwarenessParams {
    /// Weight-age map `Z₁` (`g × d`).
    pub weight: ParamId,
    /// Feature extraction map `Z₂` (`d × g`).
    pub extract: ParamId,
    /// Counterpart map `Z₃` applied to the sequence mean (`d × g`).
    pub context: ParamId,
    pub width: usize,
    pub hidden: usize,
}

impl AwarenessParams {
    /// Gate for a `d`-wide stream with hidden width `d / 2`.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Self {
        let g = (d / 2).max(1);
        AwarenessParams {
            weight: store.add_glorot(format!("{prefix}.z1"), g, d, rng),
            extract: store.add_glorot(format!("{prefix}.z2"), d, g, rng),
            context: store.add_glorot(format!("{prefix}.z3"), d, g, rng),
            width: d,
            hidden: g,
        }
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        let (d, g) = (self.width, self.hidden);
        let expect = [
            (self.weight, [g, d]),
            (self.extract, [d, g]),
            (self.context, [d, g]),
        ];
        for (id, shape) in expect {
            if store.get(id).shape() != shape {
                return Err(Error::shape("awareness params", store.get(id).shape(), &shape));
            }
        }
        Ok(())
    }
}

/// How the computed selector is applied to the stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GateMode {
    /// Soft gates, used end to end during training.
    Soft,
    /// Entries below τ zeroed; used at inference.
    Thresholded,
    /// Ignore the selector and multiply by a constant. Used to reduce the
    /// gated model to its ungated counterpart (`1.0`) and in tests.
    Constant(f64),
}

#[derive(Debug, Clone)]
pub struct AwarenessGate {
    /// Pre-threshold selector on the tape.
    pub omega: Var,
    /// Value of `omega`, `T × d`, strictly inside (0, 1).
    pub values: Tensor,
    /// `values` with entries below `threshold` set to zero.
    pub sparse_beta: Tensor,
    pub threshold: f64,
}

impl AwarenessGate {
    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    fn keep_mask(&self) -> Tensor {
        self.values
            .map(|w| if w >= self.threshold { 1.0 } else { 0.0 })
    }
}

/// Computes `ω` for every frame of `x: T × d`.
pub fn compute_gate(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    params: &AwarenessParams,
    threshold: f64,
) -> Result<AwarenessGate> {
    params.check(store)?;
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || s[1] != params.width {
        return Err(Error::shape("compute_gate", &s, &[params.width]));
    }
    let z1 = tape.param(store, params.weight);
    let z2 = tape.param(store, params.extract);
    let z3 = tape.param(store, params.context);
    let mean = tape.mean_over_axis(x, 0)?;
    let mean = tape.reshape(mean, &[1, params.width])?;
    let local = tape.matmul(x, z2)?;
    let ctx = tape.matmul(mean, z3)?;
    let ctx = tape.reshape(ctx, &[params.hidden])?;
    let h = tape.add(local, ctx)?;
    let h = tape.relu(h);
    let logits = tape.matmul(h, z1)?;
    let omega = tape.sigmoid(logits);
    let values = tape.value(omega).clone();
    let sparse_beta = values.map(|w| if w >= threshold { w } else { 0.0 });
    Ok(AwarenessGate {
        omega,
        values,
        sparse_beta,
        threshold,
    })
}

/// The multiplier Φ applies for `gate` under `mode`.
pub fn gate_multiplier(tape: &mut Tape, gate: &AwarenessGate, mode: GateMode) -> Result<Var> {
    match mode {
        GateMode::Soft => Ok(gate.omega),
        GateMode::Thresholded => {
            let keep = tape.constant(gate.keep_mask());
            tape.mul(gate.omega, keep)
        }
        GateMode::Constant(c) => Ok(tape.constant(Tensor::full(gate.values.shape(), c))),
    }
}

/// `ω ⊙ x` with the stream's own selector.
pub fn apply_phi_single(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    params: &AwarenessParams,
    threshold: f64,
    mode: GateMode,
) -> Result<(Var, AwarenessGate)> {
    let gate = compute_gate(tape, store, x, params, threshold)?;
    let w = gate_multiplier(tape, &gate, mode)?;
    let y = tape.mul(x, w)?;
    Ok((y, gate))
}

/// `(ω_u ⊙ u ; ω_v ⊙ v)`.
#[allow(clippy::too_many_arguments)]
pub fn apply_phi_joint(
    tape: &mut Tape,
    store: &ParamStore,
    u: Var,
    v: Var,
    params_u: &AwarenessParams,
    params_v: &AwarenessParams,
    threshold: f64,
    mode: GateMode,
) -> Result<(Var, [AwarenessGate; 2])> {
    if tape.shape(u)[0] != tape.shape(v)[0] {
        return Err(Error::shape("apply_phi_joint", tape.shape(u), tape.shape(v)));
    }
    let (gu, gate_u) = apply_phi_single(tape, store, u, params_u, threshold, mode)?;
    let (gv, gate_v) = apply_phi_single(tape, store, v, params_v, threshold, mode)?;
    let y = tape.concat(&[gu, gv], 1)?;
    Ok((y, [gate_u, gate_v]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameBeta {
    /// Per-frame mean of the thresholded selector row.
    pub beta: Vec<f64>,
    /// Number of frames with β > 0.
    pub kept: usize,
}

impl FrameBeta {
    pub fn kept_fraction(&self) -> f64 {
        self.kept as f64 / self.beta.len() as f64
    }
}

pub fn frame_beta(gate: &AwarenessGate) -> FrameBeta {
    let t = gate.sparse_beta.rows();
    let beta: Vec<f64> = (0..t)
        .map(|r| {
            let row = gate.sparse_beta.row(r);
            row.iter().sum::<f64>() / row.len() as f64
        })
        .collect();
    let kept = beta.iter().filter(|&&b| b > 0.0).count();
    FrameBeta { beta, kept }
}

/// `λ · mean(ω)` over every pre-threshold entry of `gates`.
pub fn gate_l1_penalty(tape: &mut Tape, gates: &[&AwarenessGate], lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!(
            "gate penalty must be non-negative, got {lambda}"
        )));
    }
    let mut total = tape.constant(Tensor::scalar(0.0));
    let mut count = 0usize;
    for g in gates {
        let s = tape.sum(g.omega);
        total = tape.add(total, s)?;
        count += g.values.len();
    }
    if count == 0 {
        return Ok(total);
    }
    Ok(tape.scale(total, lambda / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, seed: u64) -> (ParamStore, AwarenessParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = AwarenessParams::init(&mut store, "gate", d, &mut rng);
        (store, p, rng)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn zero_params_give_half() {
        let (mut store, p, mut rng) = setup(6, 0);
        for id in [p.weight, p.extract, p.context] {
            let s = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&s)).unwrap();
        }
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, &[4, 6]));
        let g = compute_gate(&mut tape, &store, x, &p, 0.05).unwrap();
        assert!(g.values.data().iter().all(|&w| w == 0.5));
    }

    #[test]
    fn single_frame_is_well_defined() {
        let (store, p, mut rng) = setup(6, 1);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, &[1, 6]));
        let g = compute_gate(&mut tape, &store, x, &p, 0.05).unwrap();
        assert!(g.values.data().iter().all(|&w| w > 0.0 && w < 1.0));
    }

    #[test]
    fn wrong_width_is_shape_error() {
        let (store, p, _) = setup(6, 2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 5]));
        assert!(matches!(
            compute_gate(&mut tape, &store, x, &p, 0.05),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn gate_is_permutation_equivariant() {
        let (store, p, mut rng) = setup(8, 3);
        for _ in 0..10 {
            let xt = rand_tensor(&mut rng, &[7, 8]);
            let mut perm: Vec<usize> = (0..7).collect();
            perm.shuffle(&mut rng);
            let mut px = Tensor::zeros(&[7, 8]);
            for (r, &src) in perm.iter().enumerate() {
                px.data_mut()[r * 8..(r + 1) * 8].copy_from_slice(xt.row(src));
            }
            let mut tape = Tape::no_grad();
            let a = tape.constant(xt);
            let b = tape.constant(px);
            let ga = compute_gate(&mut tape, &store, a, &p, 0.05).unwrap();
            let gb = compute_gate(&mut tape, &store, b, &p, 0.05).unwrap();
            for (r, &src) in perm.iter().enumerate() {
                for c in 0..8 {
                    assert!((gb.values.at(r, c) - ga.values.at(src, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn phi_joint_identity_and_zero_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let pu = AwarenessParams::init(&mut store, "u", 4, &mut rng);
        let pv = AwarenessParams::init(&mut store, "v", 6, &mut rng);
        let ut = rand_tensor(&mut rng, &[3, 4]);
        let vt = rand_tensor(&mut rng, &[3, 6]);

        let mut tape = Tape::new();
        let u = tape.constant(ut.clone());
        let v = tape.constant(vt.clone());
        let (y, _) =
            apply_phi_joint(&mut tape, &store, u, v, &pu, &pv, 0.05, GateMode::Constant(1.0))
                .unwrap();
        let plain = tape.concat(&[u, v], 1).unwrap();
        assert_eq!(tape.value(y), tape.value(plain));

        // zero selector on v only
        let (gu, _) = apply_phi_single(&mut tape, &store, u, &pu, 0.05, GateMode::Soft).unwrap();
        let (gv, _) =
            apply_phi_single(&mut tape, &store, v, &pv, 0.05, GateMode::Constant(0.0)).unwrap();
        let y = tape.concat(&[gu, gv], 1).unwrap();
        let yv = tape.value(y);
        for r in 0..3 {
            assert!(yv.row(r)[4..].iter().all(|&x| x == 0.0));
            assert!(yv.row(r)[..4].iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn phi_joint_rejects_frame_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let pu = AwarenessParams::init(&mut store, "u", 4, &mut rng);
        let pv = AwarenessParams::init(&mut store, "v", 4, &mut rng);
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::zeros(&[3, 4]));
        let v = tape.constant(Tensor::zeros(&[5, 4]));
        assert!(apply_phi_joint(&mut tape, &store, u, v, &pu, &pv, 0.05, GateMode::Soft).is_err());
    }

    #[test]
    fn phi_single_identity_zero_and_joint_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let pu = AwarenessParams::init(&mut store, "u", 4, &mut rng);
        let pv = AwarenessParams::init(&mut store, "v", 4, &mut rng);
        let ut = rand_tensor(&mut rng, &[5, 4]);
        let mut tape = Tape::new();
        let u = tape.constant(ut.clone());
        let (y, _) =
            apply_phi_single(&mut tape, &store, u, &pu, 0.05, GateMode::Constant(1.0)).unwrap();
        assert_eq!(tape.value(y), &ut);

        let z = tape.constant(Tensor::zeros(&[5, 4]));
        let (y0, _) = apply_phi_single(&mut tape, &store, z, &pu, 0.05, GateMode::Soft).unwrap();
        assert!(tape.value(y0).data().iter().all(|&x| x == 0.0));

        let v = tape.constant(rand_tensor(&mut rng, &[5, 4]));
        let (single, _) = apply_phi_single(&mut tape, &store, u, &pu, 0.05, GateMode::Soft).unwrap();
        let (joint, _) =
            apply_phi_joint(&mut tape, &store, u, v, &pu, &pv, 0.05, GateMode::Soft).unwrap();
        let jv = tape.value(joint);
        let sv = tape.value(single);
        for r in 0..5 {
            assert_eq!(&jv.row(r)[..4], sv.row(r));
        }
    }

    #[test]
    fn frame_beta_examples() {
        let mut tape = Tape::new();
        let low = Tensor::full(&[4, 3], 0.01);
        let omega = tape.constant(low.clone());
        let gate = AwarenessGate {
            omega,
            sparse_beta: low.map(|w| if w >= 0.05 { w } else { 0.0 }),
            values: low,
            threshold: 0.05,
        };
        let fb = frame_beta(&gate);
        assert_eq!(fb.kept, 0);
        assert!(fb.beta.iter().all(|&b| b == 0.0));

        let mut vals = Tensor::full(&[4, 3], 0.01);
        for c in 0..3 {
            vals.data_mut()[3 + c] = 0.999;
        }
        let gate = AwarenessGate {
            omega,
            sparse_beta: vals.map(|w| if w >= 0.05 { w } else { 0.0 }),
            values: vals,
            threshold: 0.05,
        };
        let fb = frame_beta(&gate);
        assert_eq!(fb.kept, 1);
        assert!(fb.beta[1] > 0.0);
        assert_eq!(fb.beta.iter().filter(|&&b| b > 0.0).count(), 1);
    }

    #[test]
    fn sparse_beta_membership() {
        let (store, p, mut rng) = setup(8, 7);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, &[9, 8]).map(|v| v * 3.0));
        let g = compute_gate(&mut tape, &store, x, &p, 0.3).unwrap();
        for (&w, &b) in g.values.data().iter().zip(g.sparse_beta.data()) {
            assert!(w > 0.0 && w < 1.0);
            if w >= 0.3 {
                assert_eq!(b, w);
            } else {
                assert_eq!(b, 0.0);
            }
        }
    }

    #[test]
    fn penalty_examples() {
        let mut tape = Tape::new();
        let half = Tensor::full(&[3, 4], 0.5);
        let omega = tape.constant(half.clone());
        let gate = AwarenessGate {
            omega,
            values: half.clone(),
            sparse_beta: half,
            threshold: 0.05,
        };
        let p0 = gate_l1_penalty(&mut tape, &[&gate], 0.0).unwrap();
        assert_eq!(tape.scalar_value(p0), 0.0);
        let p1 = gate_l1_penalty(&mut tape, &[&gate, &gate], 1.0).unwrap();
        assert_eq!(tape.scalar_value(p1), 0.5);
        assert!(matches!(
            gate_l1_penalty(&mut tape, &[&gate], -0.1),
            Err(Error::Config(_))
        ));
    }
}
