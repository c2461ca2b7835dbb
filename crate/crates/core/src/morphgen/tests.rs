use super::*;
use image::Rgb;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn simple_landmarks(w: f64, h: f64) -> LandmarkSet {
    LandmarkSet {
        points: vec![
            Point::new(w * 0.3, h * 0.35),
            Point::new(w * 0.7, h * 0.35),
            Point::new(w * 0.5, h * 0.55),
            Point::new(w * 0.35, h * 0.75),
            Point::new(w * 0.65, h * 0.75),
        ],
        eye_left: Point::new(w * 0.3, h * 0.35),
        eye_right: Point::new(w * 0.7, h * 0.35),
        nose_top: Point::new(w * 0.5, h * 0.45),
    }
}

fn random_image(w: u32, h: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| {
        Rgb([rng.gen_range(0..=255), rng.gen_range(0..=255), rng.gen_range(0..=255)])
    })
}

mod frontality {
    use super::*;

    #[test]
    fn symmetric_distances_pass() {
        let r = frontality_from_distances(100.0, 100.0, 95.0, AsymmetryDenominator::Min).unwrap();
        assert_eq!(r.asymmetry_ratio, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn six_percent_asymmetry_fails() {
        let r = frontality_from_distances(100.0, 106.0, 95.0, AsymmetryDenominator::Min).unwrap();
        assert!((r.asymmetry_ratio - 0.06).abs() < 1e-12);
        assert!(!r.pass);
    }

    #[test]
    fn eye_distance_below_90_fails() {
        let r = frontality_from_distances(100.0, 100.0, 89.0, AsymmetryDenominator::Min).unwrap();
        assert!(!r.pass);
        // Exactly 90 passes: the rule is "at least 90 pixels".
        let r = frontality_from_distances(100.0, 100.0, 90.0, AsymmetryDenominator::Min).unwrap();
        assert!(r.pass);
    }

    #[test]
    fn exact_boundary_ratio_passes() {
        let r = frontality_from_distances(100.0, 105.0, 95.0, AsymmetryDenominator::Min).unwrap();
        assert!((r.asymmetry_ratio - 0.05).abs() < 1e-12);
        assert!(r.pass);
    }

    #[test]
    fn degenerate_distance_rejected() {
        assert!(matches!(
            frontality_from_distances(0.0, 100.0, 95.0, AsymmetryDenominator::Min),
            Err(MorphError::DegenerateLandmarks(_))
        ));
    }

    #[test]
    fn symmetric_in_left_right() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..200 {
            let dl = rng.gen_range(10.0..200.0);
            let dr = rng.gen_range(10.0..200.0);
            let ed = rng.gen_range(50.0..200.0);
            let a = frontality_from_distances(dl, dr, ed, AsymmetryDenominator::Min).unwrap();
            let b = frontality_from_distances(dr, dl, ed, AsymmetryDenominator::Min).unwrap();
            assert_eq!(a.asymmetry_ratio, b.asymmetry_ratio);
            assert_eq!(a.pass, b.pass);
        }
    }

    #[test]
    fn min_denominator_is_stricter_than_max() {
        let min = frontality_from_distances(100.0, 105.2, 95.0, AsymmetryDenominator::Min).unwrap();
        let max = frontality_from_distances(100.0, 105.2, 95.0, AsymmetryDenominator::Max).unwrap();
        assert!(min.asymmetry_ratio > max.asymmetry_ratio);
        assert!(!min.pass);
        assert!(max.pass);
    }

    #[test]
    fn from_landmark_geometry() {
        // Nose equidistant from both eyes, eye distance 120.
        let lms = LandmarkSet {
            points: vec![],
            eye_left: Point::new(40.0, 50.0),
            eye_right: Point::new(160.0, 50.0),
            nose_top: Point::new(100.0, 90.0),
        };
        let r = assess_frontality(&lms).unwrap();
        assert!((r.d_left - r.d_right).abs() < 1e-12);
        assert!((r.eye_distance - 120.0).abs() < 1e-12);
        assert!(r.pass);
    }
}

mod pairing {
    use super::*;
    use std::collections::BTreeSet;

    fn embedding_1d(values: &[(&str, f64)]) -> EmbeddingTable {
        values.iter().map(|(id, v)| (id.to_string(), vec![*v])).collect()
    }

    #[test]
    fn picks_two_nearest() {
        let keys = vec![ImageRef {
            image_id: "k".into(),
            identity: "idk".into(),
        }];
        let pool = vec![
            ImageRef { image_id: "p1".into(), identity: "id1".into() },
            ImageRef { image_id: "p2".into(), identity: "id2".into() },
            ImageRef { image_id: "p3".into(), identity: "id3".into() },
        ];
        let emb = embedding_1d(&[("k", 0.0), ("p1", 0.2), ("p2", 0.5), ("p3", 0.9)]);
        let pairs = select_pairs(&keys, &pool, &emb, 2).unwrap();
        let ids: Vec<&str> = pairs.iter().map(|p| p.accomplice.image_id.as_str()).collect();
        assert_eq!(ids, vec!["p1", "p2"]);
    }

    #[test]
    fn zero_pairs_per_key_empty() {
        let keys = vec![ImageRef { image_id: "k".into(), identity: "idk".into() }];
        let pairs = select_pairs(&keys, &[], &EmbeddingTable::new(), 0).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn hundred_ninety_seven_keys_paired_twice() {
        let keys: Vec<ImageRef> = (0..197)
            .map(|i| ImageRef {
                image_id: format!("key{i:03}"),
                identity: format!("kid{i:03}"),
            })
            .collect();
        let pool: Vec<ImageRef> = (0..500)
            .map(|i| ImageRef {
                image_id: format!("pool{i:03}"),
                identity: format!("pid{i:03}"),
            })
            .collect();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut emb = EmbeddingTable::new();
        for r in keys.iter().chain(pool.iter()) {
            emb.insert(r.image_id.clone(), vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]);
        }
        let pairs = select_pairs(&keys, &pool, &emb, 2).unwrap();
        assert_eq!(pairs.len(), 394);
        // No accomplice image serves two keys; identities distinct per key and
        // never equal to the key's.
        let mut seen = BTreeSet::new();
        for p in &pairs {
            assert!(seen.insert(p.accomplice.image_id.clone()));
            assert_ne!(p.key.identity, p.accomplice.identity);
        }
    }

    #[test]
    fn exhausted_pool_is_an_error() {
        let keys = vec![
            ImageRef { image_id: "k1".into(), identity: "a".into() },
            ImageRef { image_id: "k2".into(), identity: "b".into() },
        ];
        let pool = vec![
            ImageRef { image_id: "p1".into(), identity: "c".into() },
            ImageRef { image_id: "p2".into(), identity: "d".into() },
            ImageRef { image_id: "p3".into(), identity: "e".into() },
        ];
        let emb = embedding_1d(&[("k1", 0.0), ("k2", 0.1), ("p1", 0.2), ("p2", 0.3), ("p3", 0.4)]);
        let err = select_pairs(&keys, &pool, &emb, 2).unwrap_err();
        assert!(matches!(err, MorphError::InsufficientPool { .. }));
    }

    /// Exhaustive oracle: per key (ascending id), enumerate every subset of
    /// eligible pool images with distinct identities and take the minimum
    /// total distance, tie-broken on the sorted (distance, id) sequence.
    pub fn brute_force_pairs(
        keys: &[ImageRef],
        pool: &[ImageRef],
        emb: &EmbeddingTable,
        k: usize,
    ) -> Option<Vec<(String, Vec<String>)>> {
        fn dist(a: &[f64], b: &[f64]) -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        }
        let mut keys: Vec<&ImageRef> = keys.iter().collect();
        keys.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let mut available: Vec<&ImageRef> = pool.iter().collect();
        let mut out = Vec::new();
        for key in keys {
            let cands: Vec<(&ImageRef, f64)> = available
                .iter()
                .filter(|c| c.identity != key.identity)
                .map(|c| (*c, dist(&emb[&key.image_id], &emb[&c.image_id])))
                .collect();
            let n = cands.len();
            let mut best: Option<(f64, Vec<(f64, String)>, Vec<usize>)> = None;
            let mut stack: Vec<Vec<usize>> = vec![vec![]];
            while let Some(subset) = stack.pop() {
                if subset.len() == k {
                    let idents: BTreeSet<&str> =
                        subset.iter().map(|&i| cands[i].0.identity.as_str()).collect();
                    if idents.len() != k {
                        continue;
                    }
                    let total: f64 = subset.iter().map(|&i| cands[i].1).sum();
                    let mut sig: Vec<(f64, String)> = subset
                        .iter()
                        .map(|&i| (cands[i].1, cands[i].0.image_id.clone()))
                        .collect();
                    sig.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    let better = match &best {
                        None => true,
                        Some((bt, bsig, _)) => {
                            total < bt - 1e-12 || ((total - bt).abs() <= 1e-12 && sig < *bsig)
                        }
                    };
                    if better {
                        best = Some((total, sig, subset.clone()));
                    }
                    continue;
                }
                let start = subset.last().map(|&i| i + 1).unwrap_or(0);
                for i in start..n {
                    let mut next = subset.clone();
                    next.push(i);
                    stack.push(next);
                }
            }
            let (_, _, chosen) = best?;
            let chosen_ids: Vec<String> =
                chosen.iter().map(|&i| cands[i].0.image_id.clone()).collect();
            let chosen_set: BTreeSet<&String> = chosen_ids.iter().collect();
            available.retain(|c| !chosen_set.contains(&c.image_id));
            out.push((key.image_id.clone(), chosen_ids));
        }
        Some(out)
    }

    #[test]
    fn greedy_matches_brute_force_on_small_pools() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for trial in 0..60 {
            let n_keys = rng.gen_range(1..=3);
            let n_pool = rng.gen_range(4..=10);
            let k = rng.gen_range(1..=2);
            let keys: Vec<ImageRef> = (0..n_keys)
                .map(|i| ImageRef {
                    image_id: format!("k{i}"),
                    identity: format!("ki{i}"),
                })
                .collect();
            // A few shared identities in the pool to exercise the distinct-identity rule.
            let pool: Vec<ImageRef> = (0..n_pool)
                .map(|i| ImageRef {
                    image_id: format!("p{i}"),
                    identity: format!("pi{}", i % (n_pool.max(2) - 1)),
                })
                .collect();
            let mut emb = EmbeddingTable::new();
            for r in keys.iter().chain(pool.iter()) {
                // Coarse grid values provoke exact distance ties.
                emb.insert(r.image_id.clone(), vec![rng.gen_range(0..4) as f64 * 0.25]);
            }
            let greedy = select_pairs(&keys, &pool, &emb, k);
            let oracle = brute_force_pairs(&keys, &pool, &emb, k);
            match (greedy, oracle) {
                (Ok(pairs), Some(expected)) => {
                    let mut got: std::collections::BTreeMap<String, BTreeSet<String>> =
                        Default::default();
                    for p in pairs {
                        got.entry(p.key.image_id).or_default().insert(p.accomplice.image_id);
                    }
                    for (key, ids) in expected {
                        let ids: BTreeSet<String> = ids.into_iter().collect();
                        assert_eq!(got[&key], ids, "trial {trial}, key {key}");
                    }
                }
                (Err(_), None) => {}
                (g, o) => panic!("trial {trial}: greedy {g:?} vs oracle {o:?} feasibility mismatch"),
            }
        }
    }
}

mod averaging {
    use super::*;

    #[test]
    fn identical_sets_fixed_point() {
        let a = simple_landmarks(100.0, 100.0);
        for alpha in [0.0, 0.25, 0.5, 1.0] {
            let out = average_landmarks(&a, &a, alpha).unwrap();
            assert_eq!(out, a);
        }
    }

    #[test]
    fn alpha_zero_returns_first() {
        let a = simple_landmarks(100.0, 100.0);
        let b = simple_landmarks(80.0, 120.0);
        let out = average_landmarks(&a, &b, 0.0).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn midpoint_arithmetic() {
        let mut a = simple_landmarks(100.0, 100.0);
        let mut b = simple_landmarks(100.0, 100.0);
        a.points[0] = Point::new(0.0, 0.0);
        b.points[0] = Point::new(10.0, 20.0);
        let out = average_landmarks(&a, &b, 0.5).unwrap();
        assert_eq!(out.points[0], Point::new(5.0, 10.0));
    }

    #[test]
    fn mismatched_counts_rejected() {
        let a = simple_landmarks(100.0, 100.0);
        let mut b = simple_landmarks(100.0, 100.0);
        b.points.pop();
        assert!(matches!(
            average_landmarks(&a, &b, 0.5),
            Err(MorphError::PointCountMismatch { .. })
        ));
    }
}

mod triangulation_tests {
    use super::*;

    #[test]
    fn four_corners_give_two_triangles() {
        let corners = vec![
            Point::new(0.0, 0.0),
            Point::new(100.0, 0.0),
            Point::new(0.0, 80.0),
            Point::new(100.0, 80.0),
        ];
        let triangles = delaunay(&corners).unwrap();
        assert_eq!(triangles.len(), 2);
    }

    #[test]
    fn colinear_points_rejected() {
        let line: Vec<Point> = (0..5).map(|i| Point::new(i as f64, 2.0 * i as f64)).collect();
        assert!(matches!(delaunay(&line), Err(MorphError::ColinearPoints)));
    }

    #[test]
    fn area_conservation_random_landmarks() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (w, h) = (rng.gen_range(50..300u32), rng.gen_range(50..300u32));
            let mut lms = simple_landmarks(w as f64, h as f64);
            for _ in 0..rng.gen_range(0..30) {
                lms.points.push(Point::new(
                    rng.gen_range(0.0..w as f64),
                    rng.gen_range(0.0..h as f64),
                ));
            }
            let tri = triangulate(&lms, (w, h)).unwrap();
            let expected = (w * h) as f64;
            assert!(
                (tri.total_area() - expected).abs() / expected < 1e-6,
                "area {} vs {}",
                tri.total_area(),
                expected
            );
            for t in &tri.triangles {
                let area = triangulation::triangle_area(
                    &tri.points[t[0]],
                    &tri.points[t[1]],
                    &tri.points[t[2]],
                );
                assert!(area > 0.0, "degenerate triangle in output");
            }
        }
    }

    #[test]
    fn duplicate_landmark_on_anchor_deduplicated() {
        let mut lms = simple_landmarks(100.0, 100.0);
        lms.points.push(Point::new(0.0, 0.0)); // coincides with a corner anchor
        let tri = triangulate(&lms, (100, 100)).unwrap();
        let expected = 100.0 * 100.0;
        assert!((tri.total_area() - expected).abs() / expected < 1e-6);
    }

    #[test]
    fn no_landmarks_still_tiles_rectangle() {
        let lms = LandmarkSet {
            points: vec![],
            eye_left: Point::new(30.0, 30.0),
            eye_right: Point::new(70.0, 30.0),
            nose_top: Point::new(50.0, 50.0),
        };
        let tri = triangulate(&lms, (100, 100)).unwrap();
        assert!((tri.total_area() - 10_000.0).abs() < 1e-6);
    }
}

mod warp_tests {
    use super::*;

    #[test]
    fn self_morph_within_one_level() {
        let img = random_image(64, 64, 5);
        let lms = simple_landmarks(64.0, 64.0);
        for alpha in [0.0, 0.3, 0.5, 1.0] {
            let out = warp_blend(&img, &img, &lms, &lms, alpha).unwrap();
            let max_dev = img
                .pixels()
                .zip(out.pixels())
                .flat_map(|(a, b)| (0..3).map(move |c| (a.0[c] as i32 - b.0[c] as i32).abs()))
                .max()
                .unwrap();
            assert!(max_dev <= 1, "alpha {alpha}: max deviation {max_dev}");
        }
    }

    #[test]
    fn alpha_zero_aligned_geometry_returns_first_image() {
        let img_a = random_image(48, 48, 6);
        let img_b = random_image(48, 48, 7);
        let lms = simple_landmarks(48.0, 48.0);
        let out = warp_blend(&img_a, &img_b, &lms, &lms, 0.0).unwrap();
        assert_eq!(out, img_a);
    }

    #[test]
    fn uniform_gray_blend_closed_form() {
        let img_a = RgbImage::from_pixel(40, 40, Rgb([100, 100, 100]));
        let img_b = RgbImage::from_pixel(40, 40, Rgb([200, 200, 200]));
        let lms = simple_landmarks(40.0, 40.0);
        let out = warp_blend(&img_a, &img_b, &lms, &lms, 0.5).unwrap();
        assert!(out.pixels().all(|p| p.0 == [150, 150, 150]));
    }

    #[test]
    fn blend_linearity_on_aligned_geometry() {
        let img_a = random_image(32, 32, 8);
        let img_b = random_image(32, 32, 9);
        let lms = simple_landmarks(32.0, 32.0);
        let alpha = 0.25;
        let out = warp_blend(&img_a, &img_b, &lms, &lms, alpha).unwrap();
        for (pa, (pb, po)) in img_a.pixels().zip(img_b.pixels().zip(out.pixels())) {
            for c in 0..3 {
                let expected = (1.0 - alpha) * pa.0[c] as f64 + alpha * pb.0[c] as f64;
                assert!((po.0[c] as f64 - expected).abs() <= 0.5 + 1e-9);
            }
        }
    }

    #[test]
    fn different_geometries_produce_valid_output() {
        let img_a = random_image(64, 64, 10);
        let img_b = random_image(64, 64, 11);
        let lms_a = simple_landmarks(64.0, 64.0);
        let mut lms_b = simple_landmarks(64.0, 64.0);
        for p in &mut lms_b.points {
            p.x = (p.x + 4.0).min(63.0);
            p.y = (p.y - 3.0).max(0.0);
        }
        let out = warp_blend(&img_a, &img_b, &lms_a, &lms_b, 0.5).unwrap();
        assert_eq!(out.dimensions(), (64, 64));
    }

    #[test]
    fn size_mismatch_rejected() {
        let img_a = random_image(32, 32, 1);
        let img_b = random_image(48, 48, 2);
        let lms = simple_landmarks(32.0, 32.0);
        assert!(matches!(
            warp_blend(&img_a, &img_b, &lms, &lms, 0.5),
            Err(MorphError::ImageSizeMismatch { .. })
        ));
    }
}

mod redigitize_tests {
    use super::*;

    #[test]
    fn identity_profile_is_noop() {
        let img = random_image(40, 40, 12);
        let out = simulate_redigitization(&img, &RedigitizationProfile::identity());
        assert_eq!(out, img);
    }

    #[test]
    fn deterministic_given_seed() {
        let img = random_image(40, 40, 13);
        let profile = RedigitizationProfile::default();
        let a = simulate_redigitization(&img, &profile);
        let b = simulate_redigitization(&img, &profile);
        assert_eq!(a, b);
    }

    #[test]
    fn default_profile_adds_variance_to_flat_image() {
        let img = RgbImage::from_pixel(64, 64, Rgb([128, 128, 128]));
        let out = simulate_redigitization(&img, &RedigitizationProfile::default());
        assert_eq!(out.dimensions(), img.dimensions());
        let mean: f64 =
            out.pixels().map(|p| p.0[0] as f64).sum::<f64>() / (64.0 * 64.0);
        let var: f64 = out
            .pixels()
            .map(|p| (p.0[0] as f64 - mean).powi(2))
            .sum::<f64>()
            / (64.0 * 64.0);
        assert!(var > 0.0, "flat image stayed flat");
    }

    #[test]
    fn reseeding_changes_grain() {
        let img = RgbImage::from_pixel(32, 32, Rgb([128, 128, 128]));
        let profile = RedigitizationProfile {
            seed: 1,
            steps: vec![RedigitizationStep::Grain { stddev: 5.0 }],
        };
        let a = simulate_redigitization(&img, &profile);
        let b = simulate_redigitization(&img, &profile.reseeded(2));
        assert_ne!(a, b);
    }

    #[test]
    fn profile_json_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("profile.json");
        let profile = RedigitizationProfile::default();
        profile.save_json(&path).unwrap();
        let back = RedigitizationProfile::load_json(&path).unwrap();
        assert_eq!(profile, back);
    }
}

mod landmark_cache {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn jsonl_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("landmarks.jsonl");
        let mut cache = BTreeMap::new();
        cache.insert("img1".to_string(), simple_landmarks(100.0, 100.0));
        cache.insert("img2".to_string(), simple_landmarks(80.0, 90.0));
        save_landmark_cache(&path, &cache).unwrap();
        let back = load_landmark_cache(&path).unwrap();
        assert_eq!(cache, back);
    }

    #[test]
    fn validation_catches_out_of_bounds_and_eye_order() {
        let mut lms = simple_landmarks(100.0, 100.0);
        lms.points.push(Point::new(150.0, 10.0));
        assert!(matches!(
            lms.validate(100, 100),
            Err(MorphError::LandmarkOutOfBounds { .. })
        ));
        let mut swapped = simple_landmarks(100.0, 100.0);
        std::mem::swap(&mut swapped.eye_left, &mut swapped.eye_right);
        assert!(matches!(swapped.validate(100, 100), Err(MorphError::EyeOrder { .. })));
    }
}
