mod common;

use common::*;
use dca_core::fusion::{
    attention_weights, fuse_forward, fuse_forward_forced, gate_scores, FeatureSequence, FusionMode,
    GateScores, Modality, ModalityGates, ATTENDED,
};
use dca_core::numcore::Matrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn negate(x: &FeatureSequence) -> FeatureSequence {
    FeatureSequence::new(x.modality(), x.features().scale(-1.0)).unwrap()
}

fn shape() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..6, 1usize..6, 1usize..9)
}

proptest! {
    #[test]
    fn attention_columns_and_gate_rows_normalised(seed in any::<u64>(), (d_a, d_v, l) in shape()) {
        let mut r = rng(seed);
        let (xa, xv) = random_pair(&mut r, d_a, d_v, l);
        let params = random_params(&mut r, d_a, d_v, 2.0, 0.1);
        let out = fuse_forward(&xa, &xv, &params, FusionMode::Dca).unwrap();
        for a in [&out.trace.attn_audio, &out.trace.attn_visual] {
            for c in 0..l {
                prop_assert!((a.column(c).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
        let gates = out.gates.unwrap();
        for g in [&gates.audio, &gates.visual] {
            for row in g.scores.to_rows() {
                prop_assert!((row[0] + row[1] - 1.0).abs() <= 1e-12);
            }
        }
        prop_assert!(out.fused.data().iter().all(|&v| v >= 0.0));
        prop_assert_eq!(out.fused.shape(), (d_a + d_v, l));
        prop_assert_eq!(out.trace.z.shape(), (l, l));
    }

    #[test]
    fn clip_permutation_equivariance(seed in any::<u64>(), (d_a, d_v, l) in shape()) {
        let mut r = rng(seed);
        let (xa, xv) = random_pair(&mut r, d_a, d_v, l);
        let params = random_params(&mut r, d_a, d_v, 1.0, 0.1);
        let mut perm: Vec<usize> = (0..l).collect();
        perm.shuffle(&mut r);
        let permute = |x: &FeatureSequence| {
            FeatureSequence::new(x.modality(), x.features().permute_cols(&perm)).unwrap()
        };
        for mode in [FusionMode::Ca, FusionMode::Dca] {
            let base = fuse_forward(&xa, &xv, &params, mode).unwrap().fused.permute_cols(&perm);
            let moved = fuse_forward(&permute(&xa), &permute(&xv), &params, mode).unwrap().fused;
            prop_assert!(base.max_abs_diff(&moved) <= 1e-12);
        }
    }

    /// Negating both feature sequences leaves Z and the attention maps
    /// unchanged and negates the attended features, so with bias-free gates
    /// every clip's attended weight g becomes 1 - g.
    #[test]
    fn sign_flip_mirrors_gates(seed in any::<u64>(), (d_a, d_v, l) in shape()) {
        let mut r = rng(seed);
        let (xa, xv) = random_pair(&mut r, d_a, d_v, l);
        let params = random_params(&mut r, d_a, d_v, 1.0, 0.1);
        let pos = fuse_forward(&xa, &xv, &params, FusionMode::Dca).unwrap();
        let neg = fuse_forward(&negate(&xa), &negate(&xv), &params, FusionMode::Dca).unwrap();
        prop_assert_eq!(&pos.trace.z, &neg.trace.z);
        prop_assert_eq!(&pos.trace.attn_audio, &neg.trace.attn_audio);
        let (gp, gn) = (pos.gates.unwrap(), neg.gates.unwrap());
        for (p, n) in [(&gp.audio, &gn.audio), (&gp.visual, &gn.visual)] {
            for (a, b) in p.attended_weights().iter().zip(n.attended_weights()) {
                prop_assert!((a + b - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forced_saturation_is_relu_of_ca(seed in any::<u64>(), (d_a, d_v, l) in shape()) {
        let mut r = rng(seed);
        let (xa, xv) = random_pair(&mut r, d_a, d_v, l);
        let params = random_params(&mut r, d_a, d_v, 1.0, 0.1);
        let ca = fuse_forward(&xa, &xv, &params, FusionMode::Ca).unwrap().fused;
        let attended = ModalityGates {
            audio: GateScores::constant(l, 0.0, 1.0),
            visual: GateScores::constant(l, 0.0, 1.0),
        };
        let dca = fuse_forward_forced(&xa, &xv, &params, &attended).unwrap().fused;
        prop_assert_eq!(dca, ca.relu());
        let raw = ModalityGates {
            audio: GateScores::constant(l, 1.0, 0.0),
            visual: GateScores::constant(l, 1.0, 0.0),
        };
        let dca = fuse_forward_forced(&xa, &xv, &params, &raw).unwrap().fused;
        let unattended = dca_core::numcore::concat_rows(xa.features(), xv.features()).unwrap().relu();
        prop_assert_eq!(dca, unattended);
    }

    #[test]
    fn lower_temperature_sharpens_without_changing_argmax(seed in any::<u64>(), l in 1usize..10) {
        let mut r = rng(seed);
        let data: Vec<f64> = (0..2 * l)
            .map(|i| if i % 2 == 0 { r.random_range(-2.0..2.0) } else { 0.0 })
            .collect();
        let mut logits = Matrix::new(l, 2, data).unwrap();
        for clip in 0..l {
            let gap = r.random_range(0.05..1.5) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
            logits = logits.with_entry(clip, 1, logits.get(clip, 0) + gap);
        }
        let temps = [1.0, 0.5, 0.1, 0.01];
        let scores: Vec<GateScores> = temps.iter().map(|&t| gate_scores(&logits, t).unwrap()).collect();
        for clip in 0..l {
            let winner = if logits.get(clip, 1) > logits.get(clip, 0) { ATTENDED } else { 1 - ATTENDED };
            let mut prev = 0.0;
            for s in &scores {
                let w = s.scores.get(clip, winner);
                prop_assert!(w > 0.5);
                prop_assert!(w >= prev);
                prev = w;
            }
        }
    }
}

#[test]
fn attention_weight_examples() {
    let z = Matrix::zeros(2, 2);
    let (a, v) = attention_weights(&z).unwrap();
    assert_eq!(a, Matrix::filled(2, 2, 0.5));
    assert_eq!(v, Matrix::filled(2, 2, 0.5));
    let z = Matrix::from_rows(&[[2f64.ln(), 0.0], [0.0, 0.0]]).unwrap();
    let (a, _) = attention_weights(&z).unwrap();
    assert!((a.get(0, 0) - 2.0 / 3.0).abs() <= 1e-15);
    assert!((a.get(1, 0) - 1.0 / 3.0).abs() <= 1e-15);
    assert!(attention_weights(&Matrix::zeros(2, 3)).is_err());
}

#[test]
fn mismatched_inputs_rejected() {
    let mut r = rng(3);
    let params = random_params(&mut r, 3, 2, 1.0, 0.1);
    let xa = FeatureSequence::new(Modality::Audio, random_matrix(&mut r, 3, 4, 1.0)).unwrap();
    let short = FeatureSequence::new(Modality::Visual, random_matrix(&mut r, 2, 3, 1.0)).unwrap();
    let wide = FeatureSequence::new(Modality::Visual, random_matrix(&mut r, 5, 4, 1.0)).unwrap();
    assert!(fuse_forward(&xa, &short, &params, FusionMode::Dca).is_err());
    assert!(fuse_forward(&xa, &wide, &params, FusionMode::Ca).is_err());
    assert!(FeatureSequence::new(Modality::Audio, Matrix::zeros(0, 3)).is_err());
    assert!(FeatureSequence::new(Modality::Audio, Matrix::filled(2, 2, f64::NAN)).is_err());
}
