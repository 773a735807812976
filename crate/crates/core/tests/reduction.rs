//! With every gate held at 1 the gated encoder is the plain transformer.

mod common;

use common::{rng, uniform};
use rand::Rng;
use sact_core::awareness::GateMode;
use sact_core::composer::{
    fuse_with_proposals, Composer, ComposerConfig, Encoder, FusionBlock, GatePlacement, JointGate,
    StreamStack, Variant,
};
use sact_core::{ParamStore, Tape, Tensor};

const TOL: f64 = 1e-9;

fn joint(d_u: usize, d_v: usize, heads: usize, placement: GatePlacement, jg: JointGate) -> ComposerConfig {
    ComposerConfig {
        variant: Variant::Joint,
        appearance_dim: d_u,
        motion_dim: d_v,
        num_layers: 2,
        num_heads: heads,
        gate_placement: placement,
        joint_gate: jg,
        ..ComposerConfig::default()
    }
}

#[test]
fn joint_with_unit_gates_is_baseline() {
    let mut r = rng(20);
    let cases = [GatePlacement::Final, GatePlacement::Every];
    let gates = [JointGate::Concatenated, JointGate::PerStream];
    for trial in 0..20 {
        let t = r.random_range(1..=8);
        let d_u = [2, 4, 6][trial % 3];
        let d_v = 8 - d_u;
        let cfg = joint(d_u, d_v, 2, cases[trial % 2], gates[(trial / 2) % 2]);
        let mut store = ParamStore::new();
        let comp = Composer::init(&mut store, cfg, &mut r).unwrap();
        let Encoder::Joint(stack) = &comp.encoder else {
            panic!("joint composer");
        };
        let baseline = Composer {
            config: ComposerConfig { variant: Variant::Baseline, ..cfg },
            encoder: Encoder::Joint(StreamStack {
                layers: stack.layers.clone(),
                gates: vec![None; stack.layers.len()],
                split: stack.split,
            }),
        };
        let u = uniform(&mut r, &[t, d_u], 2.0);
        let v = uniform(&mut r, &[t, d_v], 2.0);

        let mut tape = Tape::no_grad();
        let (uv, vv) = (tape.constant(u.clone()), tape.constant(v.clone()));
        let gated = comp.encode(&mut tape, &store, uv, vv, GateMode::Constant(1.0)).unwrap();
        let plain = baseline.encode(&mut tape, &store, uv, vv, GateMode::Soft).unwrap();
        assert!(plain.gates.is_empty());

        // layer-by-layer transformer, no composer involved
        let mut x = tape.concat(&[uv, vv], 1).unwrap();
        for layer in &stack.layers {
            x = layer.forward(&mut tape, &store, x, None).unwrap();
        }
        let a = tape.value(gated.h);
        assert!(a.max_abs_diff(tape.value(plain.h)) < TOL, "trial {trial}");
        assert!(a.max_abs_diff(tape.value(x)) < TOL, "trial {trial}");
    }
}

#[test]
fn fusion_with_unit_gate_is_ungated_block() {
    let mut r = rng(21);
    for trial in 0..20 {
        let t = r.random_range(1..=8);
        let mut store = ParamStore::new();
        let gated = FusionBlock::init(&mut store, 16, 4, 0.05, true, &mut r).unwrap();
        let plain = FusionBlock { gate: None, ..gated.clone() };
        let h = uniform(&mut r, &[t, 16], 1.0);
        let rm = Tensor::from_fn(&[t], |_| r.random_range(0.0..=1.0));
        let mut tape = Tape::no_grad();
        let (hv, rv) = (tape.constant(h), tape.constant(rm));
        let (a, ga) = fuse_with_proposals(&mut tape, &store, hv, rv, &gated, GateMode::Constant(1.0)).unwrap();
        let (b, gb) = fuse_with_proposals(&mut tape, &store, hv, rv, &plain, GateMode::Soft).unwrap();
        assert!(ga.is_some() && gb.is_none());
        assert!(tape.value(a).max_abs_diff(tape.value(b)) < TOL, "trial {trial}");
    }
}
