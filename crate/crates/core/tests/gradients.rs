mod common;

use balancelab::balance::{
    cosine_logits, grad_modulation, objective_backward, symmetric_kl, unimodal_blend_loss,
    MethodSpec,
};
use balancelab::fusion::{
    backward, encoder_backward, forward, forward_gated, partial_logits, FeatureGate, HeadKind,
    ModalityMask,
};
use balancelab::numkit::{finite_diff_check, Matrix, ParamVec};
use balancelab::trainer::{batch_gradients, cross_entropy};
use common::{gradient_error, random_batch, small_model};
use proptest::prelude::*;

const TOL: f64 = 1e-5;

fn check_method(method: MethodSpec, seeds: std::ops::Range<u64>) {
    for s in seeds {
        let m = 2 + (s % 2) as usize;
        let (model, dims) = small_model(s, m, method.head_kind());
        let batch = random_batch(&dims, 6, 3, s);
        let err = gradient_error(&model, &batch, &method);
        assert!(
            err < TOL,
            "{method} seed {s} (m = {m}): relative error {err}"
        );
    }
}

#[test]
fn cross_entropy_gradients() {
    check_method(MethodSpec::Baseline, 0..10);
}

#[test]
fn unimodal_blend_gradients() {
    check_method(MethodSpec::UnimodalBlend { w_uni: 0.7 }, 10..16);
}

#[test]
fn kl_alignment_gradients() {
    check_method(MethodSpec::KlAlign { lambda: 0.5 }, 20..26);
}

#[test]
fn cosine_head_gradients() {
    check_method(MethodSpec::CosineLogits { scale: 4.0 }, 30..36);
}

#[test]
fn blend_guard_projects_only_conflicting_head_blocks() {
    let method = MethodSpec::UnimodalBlend { w_uni: 0.7 };
    let mut fired = 0;
    for s in 0..40 {
        let m = 2 + (s % 2) as usize;
        let (model, dims) = small_model(s, m, HeadKind::Linear);
        let batch = random_batch(&dims, 6, 3, s);
        let (_, fused) = batch_gradients(&model, &batch, &MethodSpec::Baseline).unwrap();
        let (_, exact) = batch_gradients(&model, &batch, &method).unwrap();
        let cache = forward(&model, &batch, &ModalityMask::full(m)).unwrap();
        let obj = unimodal_blend_loss(&model, &cache, &batch.labels, 0.7).unwrap();
        let guarded = objective_backward(&model, &cache, &obj).unwrap();
        for i in 0..m {
            let g_mm = fused.head_blocks[i].as_slice();
            let mut g_uni: Vec<f64> = exact.head_blocks[i]
                .as_slice()
                .iter()
                .zip(g_mm)
                .map(|(e, f)| e - f)
                .collect();
            let dot: f64 = g_uni.iter().zip(g_mm).map(|(a, b)| a * b).sum();
            if dot < 0.0 {
                fired += 1;
                let nn: f64 = g_mm.iter().map(|v| v * v).sum();
                for (u, f) in g_uni.iter_mut().zip(g_mm) {
                    *u -= dot / nn * f;
                }
            }
            for ((g, f), u) in guarded.head_blocks[i]
                .as_slice()
                .iter()
                .zip(g_mm)
                .zip(&g_uni)
            {
                assert!((g - (f + u)).abs() < 1e-12, "seed {s} block {i}");
            }
            assert_eq!(guarded.encoders[i].flatten(), exact.encoders[i].flatten());
        }
        assert_eq!(guarded.head_bias, exact.head_bias);
    }
    assert!(fired > 0, "no conflicting block in the sample");
}

#[test]
fn gated_features_backpropagate_through_the_gate() {
    let (model, dims) = small_model(41, 2, HeadKind::Linear);
    let batch = random_batch(&dims, 5, 3, 41);
    let d = model.encoder(0).output_dim();
    let mut gate = Matrix::filled(5, d, 2.0);
    gate.set(1, 0, 0.0);
    gate.set(3, d - 1, 0.0);
    let gates = FeatureGate(vec![Some(gate), None]);
    let full = ModalityMask::full(2);
    let cache = forward_gated(&model, &batch, &full, &gates).unwrap();
    let (_, g) = cross_entropy(cache.logits(), &batch.labels).unwrap();
    let grads = backward(&model, &cache, &g).unwrap();
    let err = finite_diff_check(
        |p| {
            let c = forward_gated(p, &batch, &full, &gates).unwrap();
            cross_entropy(c.logits(), &batch.labels).unwrap().0
        },
        &model,
        &grads,
        1e-6,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn masked_modality_receives_no_gradient() {
    let (model, dims) = small_model(5, 3, HeadKind::Linear);
    let batch = random_batch(&dims, 4, 3, 5);
    let mask = ModalityMask::without(3, 1);
    let cache = forward(&model, &batch, &mask).unwrap();
    let (_, g) = cross_entropy(cache.logits(), &batch.labels).unwrap();
    let grads = backward(&model, &cache, &g).unwrap();
    assert!(grads.encoders[1].flatten().iter().all(|&v| v == 0.0));
    assert!(grads.head_blocks[1].as_slice().iter().all(|&v| v == 0.0));
    assert!(matches!(
        encoder_backward(&model, &cache, 1, &Matrix::zeros(4, 1)),
        Err(_)
    ));
}

#[test]
fn empty_mask_gives_bias_logits() {
    let (model, dims) = small_model(6, 2, HeadKind::Linear);
    let batch = random_batch(&dims, 3, 3, 6);
    let cache = forward(&model, &batch, &ModalityMask::empty(2)).unwrap();
    for r in 0..3 {
        assert_eq!(cache.logits().row(r), model.head_bias());
    }
}

#[test]
fn partial_logits_sum_to_fused_logits() {
    for s in 0..6 {
        let m = 2 + (s % 2) as usize;
        let (model, dims) = small_model(s, m, HeadKind::Linear);
        let batch = random_batch(&dims, 4, 3, s);
        let cache = forward(&model, &batch, &ModalityMask::full(m)).unwrap();
        let mut sum = Matrix::zeros(4, 3);
        for i in 0..m {
            sum.add_assign(&partial_logits(&model, &cache, i).unwrap())
                .unwrap();
        }
        for (a, b) in sum.as_slice().iter().zip(cache.logits().as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn cosine_head_matches_explicit_cosine_logits() {
    let (model, dims) = small_model(8, 2, HeadKind::Cosine { scale: 3.0 });
    let batch = random_batch(&dims, 4, 3, 8);
    let cache = forward(&model, &batch, &ModalityMask::full(2)).unwrap();
    let explicit = cosine_logits(&model, &cache, 3.0).unwrap();
    for (a, b) in explicit.as_slice().iter().zip(cache.logits().as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn cosine_head_ignores_row_rescaling() {
    let (model, dims) = small_model(9, 2, HeadKind::Cosine { scale: 2.0 });
    let batch = random_batch(&dims, 4, 3, 9);
    let before = forward(&model, &batch, &ModalityMask::full(2)).unwrap();
    let mut scaled = model.clone();
    let w = scaled.head_block_mut(1);
    for c in 0..w.cols() {
        w.set(2, c, 7.5 * w.get(2, c));
    }
    let after = forward(&scaled, &batch, &ModalityMask::full(2)).unwrap();
    for (a, b) in before
        .logits()
        .as_slice()
        .iter()
        .zip(after.logits().as_slice())
    {
        assert!((a - b).abs() < 1e-12);
    }
}

/// `Σ p log(p/q)` written from the definition.
fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

proptest! {
    #[test]
    fn symmetric_kl_is_symmetric_and_non_negative(a in proptest::collection::vec(0.01f64..1.0, 4), b in proptest::collection::vec(0.01f64..1.0, 4)) {
        let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
        let (p, q) = (norm(&a), norm(&b));
        let d = symmetric_kl(&p, &q);
        prop_assert!(d >= -1e-15);
        prop_assert!((d - symmetric_kl(&q, &p)).abs() < 1e-15);
        prop_assert!((d - kl_oracle(&p, &q) - kl_oracle(&q, &p)).abs() < 1e-12);
    }

    #[test]
    fn modulation_coefficients_are_ordered(scores in proptest::collection::vec(0.01f64..0.99, 2..4), alpha in 0.0f64..5.0) {
        let kappa = grad_modulation(&scores, alpha).unwrap();
        let top = scores.iter().cloned().fold(f64::MIN, f64::max);
        let top_idx = scores.iter().position(|&s| s == top).unwrap();
        for (i, k) in kappa.iter().enumerate() {
            prop_assert!(*k > 0.0 && *k <= 1.0);
            prop_assert!(kappa[top_idx] <= *k, "dominant {} vs {}", top_idx, i);
        }
    }
}
