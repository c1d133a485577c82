//! End-to-end network contracts: shape preservation over the required size
//! grid, determinism, variant behavior, the full-model gradient check on a
//! tiny configuration, and checkpoint round trips.

use m3sr_core::gradcheck::{grad_check_params, EPS, TOL_ABS, TOL_REL};
use m3sr_core::network::{
    build_model, build_variant, load_checkpoint, save_checkpoint, ModelConfig, Variant,
};
use m3sr_core::tensor::{FeatureMap, TensorF};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        base_width: 4,
        state_dim: 4,
        groups: 2,
        mamba_expand: 2,
        seed: 9,
        ..ModelConfig::default()
    }
}

#[test]
fn shape_contract_over_size_grid() {
    let model = build_model(&tiny_cfg()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    for (h, w) in [(4, 4), (8, 8), (4, 64), (64, 8)] {
        let rgb = FeatureMap::new(TensorF::uniform(vec![3, h, w], 0.0, 1.0, &mut rng)).unwrap();
        let out = model.forward(&rgb).unwrap();
        assert_eq!(out.tensor().shape(), &[31, h, w], "{h}x{w}");
        assert!(out.tensor().all_finite());
    }
}

#[test]
fn indivisible_extent_rejected_with_padding_hint() {
    let model = build_model(&tiny_cfg()).unwrap();
    let rgb = FeatureMap::zeros(3, 66, 64);
    match model.forward(&rgb) {
        Err(m3sr_core::Error::Shape(msg)) => {
            assert!(msg.contains("pad or crop"), "message: {msg}");
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let model = build_model(&tiny_cfg()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(302);
    let rgb = FeatureMap::new(TensorF::uniform(vec![3, 8, 8], 0.0, 1.0, &mut rng)).unwrap();
    let a = model.forward(&rgb).unwrap();
    let b = model.forward(&rgb).unwrap();
    assert_eq!(a.tensor().data(), b.tensor().data());
}

#[test]
fn full_variant_is_bitwise_identical_to_base_model() {
    let cfg = tiny_cfg();
    let base = build_model(&cfg).unwrap();
    let full = build_variant(&cfg, Variant::Full).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let rgb = FeatureMap::new(TensorF::uniform(vec![3, 8, 8], 0.0, 1.0, &mut rng)).unwrap();
    let a = base.forward(&rgb).unwrap();
    let b = full.forward(&rgb).unwrap();
    assert_eq!(a.tensor().data(), b.tensor().data());
}

#[test]
fn variants_run_and_preserve_shape() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(304);
    let rgb = FeatureMap::new(TensorF::uniform(vec![3, 32, 32], 0.0, 1.0, &mut rng)).unwrap();
    for v in [Variant::V1, Variant::V2, Variant::V3] {
        let model = build_variant(&cfg, v).unwrap();
        let out = model.forward(&rgb).unwrap();
        assert_eq!(out.tensor().shape(), &[31, 32, 32], "{v:?}");
    }
}

#[test]
fn end_to_end_grad_check_tiny_config() {
    // C0 = 4, N = 4, 8x8 input, 64-bit: the loss gradient with respect to
    // the input and every parameter matches central differences.
    let cfg = tiny_cfg();
    let model = build_model(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(305);
    let rgb = TensorF::uniform(vec![3, 8, 8], 0.0, 1.0, &mut rng);
    let report = grad_check_params(&model.params, &rgb, EPS, TOL_REL, TOL_ABS, |ctx, xid| {
        model.forward_tape(ctx, xid)
    })
    .unwrap();
    assert!(
        report.passed,
        "rel {:.3e} abs {:.3e} worst {}",
        report.max_rel_err, report.max_abs_err, report.worst_index
    );
}

#[test]
fn checkpoint_round_trip_and_corruption_detection() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.m3ck");
    let model = build_model(&tiny_cfg()).unwrap();
    save_checkpoint(&model, &path).unwrap();

    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.cfg, model.cfg);
    // values survive up to f32 rounding
    for id in model.params.ids() {
        let a = model.params.get(id);
        let b = loaded.params.get(id);
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= (x.abs() * 1e-6).max(1e-7), "{x} vs {y}");
        }
    }
    // forward passes agree closely after the f32 round trip
    let mut rng = ChaCha8Rng::seed_from_u64(306);
    let rgb = FeatureMap::new(TensorF::uniform(vec![3, 8, 8], 0.0, 1.0, &mut rng)).unwrap();
    let a = model.forward(&rgb).unwrap();
    let b = loaded.forward(&rgb).unwrap();
    assert!(a.tensor().max_abs_diff(b.tensor()) < 1e-3);

    // flipped byte -> checksum error
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xFF;
    let bad = dir.path().join("bad.m3ck");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&bad), Err(m3sr_core::Error::Checkpoint(_))));
}
