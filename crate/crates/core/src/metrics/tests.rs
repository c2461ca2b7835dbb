use super::*;
use crate::datakit::{Label, Medium};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn table(attacks: &[f64], bonafides: &[f64]) -> ScoreTable {
    let mut entries = Vec::new();
    for (i, &s) in attacks.iter().enumerate() {
        entries.push(ScoreEntry {
            image_id: format!("a{i}"),
            score: s,
            label: Label::Attack,
            medium: Medium::D,
        });
    }
    for (i, &s) in bonafides.iter().enumerate() {
        entries.push(ScoreEntry {
            image_id: format!("b{i}"),
            score: s,
            label: Label::Bonafide,
            medium: Medium::D,
        });
    }
    ScoreTable::new(entries).unwrap()
}

fn random_table(rng: &mut ChaCha12Rng, max_n: usize) -> ScoreTable {
    let n_attacks = rng.gen_range(1..=max_n);
    let n_bona = rng.gen_range(1..=max_n);
    // Coarse grid scores provoke exact threshold ties.
    let attacks: Vec<f64> = (0..n_attacks).map(|_| rng.gen_range(0..=20) as f64 / 20.0).collect();
    let bonafides: Vec<f64> = (0..n_bona).map(|_| rng.gen_range(0..=20) as f64 / 20.0).collect();
    table(&attacks, &bonafides)
}

mod apcer_bpcer {
    use super::*;

    #[test]
    fn apcer_examples() {
        let t = table(&[1.0, 1.0], &[0.0]);
        assert_eq!(apcer(&t, 0.5).unwrap(), 0.0);
        let t = table(&[0.9, 0.4, 0.1], &[0.0]);
        assert!((apcer(&t, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(apcer(&t, 0.95).unwrap(), 1.0);
    }

    #[test]
    fn bpcer_examples() {
        let t = table(&[1.0], &[0.0, 0.0]);
        assert_eq!(bpcer(&t, 0.5).unwrap(), 0.0);
        let t = table(&[1.0], &[0.2, 0.6]);
        assert_eq!(bpcer(&t, 0.5).unwrap(), 0.5);
        assert_eq!(bpcer(&t, 0.2).unwrap(), 1.0);
    }

    #[test]
    fn missing_class_errors() {
        let t = table(&[], &[0.5]);
        assert!(matches!(apcer(&t, 0.5), Err(MetricError::MissingClass(_))));
        let t = table(&[0.5], &[]);
        assert!(matches!(bpcer(&t, 0.5), Err(MetricError::MissingClass(_))));
    }

    #[test]
    fn monotone_in_tau() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..50 {
            let t = random_table(&mut rng, 30);
            let mut prev_apcer = -1.0;
            let mut prev_bpcer = 2.0;
            for i in 0..=40 {
                let tau = i as f64 / 40.0;
                // score >= tau classifies attack: apcer grows with tau,
                // bpcer shrinks.
                let a = apcer(&t, tau).unwrap();
                let b = bpcer(&t, tau).unwrap();
                assert!(a >= prev_apcer);
                assert!(b <= prev_bpcer);
                prev_apcer = a;
                prev_bpcer = b;
            }
        }
    }

    #[test]
    fn permutation_invariant() {
        let mut entries = table(&[0.9, 0.3, 0.7], &[0.1, 0.5]).entries().to_vec();
        let forward = ScoreTable::new(entries.clone()).unwrap();
        entries.reverse();
        let backward = ScoreTable::new(entries).unwrap();
        for tau in [0.2, 0.5, 0.8] {
            assert_eq!(apcer(&forward, tau).unwrap(), apcer(&backward, tau).unwrap());
            assert_eq!(bpcer(&forward, tau).unwrap(), bpcer(&backward, tau).unwrap());
        }
        assert_eq!(
            bpcer_at_apcer(&forward, 0.1).unwrap().bpcer,
            bpcer_at_apcer(&backward, 0.1).unwrap().bpcer
        );
    }

    #[test]
    fn duplicate_ids_rejected() {
        let entries = vec![
            ScoreEntry {
                image_id: "x".into(),
                score: 0.5,
                label: Label::Attack,
                medium: Medium::D,
            };
            2
        ];
        assert!(matches!(
            ScoreTable::new(entries),
            Err(MetricError::DuplicateImageId(_))
        ));
    }
}

mod operating_points {
    use super::*;

    /// Independent sweep: probe just below, at, and just above every observed
    /// score, count error rates explicitly, keep the feasible point with the
    /// smallest BPCER (largest tau on ties).
    fn oracle_bpcer_at_apcer(t: &ScoreTable, target: f64) -> (f64, f64) {
        let attacks = t.attack_scores();
        let bonafides = t.bonafide_scores();
        let mut candidates = Vec::new();
        for e in t.entries() {
            candidates.push(e.score - 1e-9);
            candidates.push(e.score);
            candidates.push(e.score + 1e-9);
        }
        let min = t.entries().iter().map(|e| e.score).fold(f64::INFINITY, f64::min);
        let max = t.entries().iter().map(|e| e.score).fold(f64::NEG_INFINITY, f64::max);
        candidates.push(min - 1.0);
        candidates.push(max + 1.0);
        let mut best: Option<(f64, f64)> = None; // (bpcer, tau)
        for tau in candidates {
            let a = attacks.iter().filter(|&&s| s < tau).count() as f64 / attacks.len() as f64;
            if a > target {
                continue;
            }
            let b =
                bonafides.iter().filter(|&&s| s >= tau).count() as f64 / bonafides.len() as f64;
            match best {
                None => best = Some((b, tau)),
                Some((bb, bt)) => {
                    if b < bb || (b == bb && tau > bt) {
                        best = Some((b, tau));
                    }
                }
            }
        }
        best.expect("always feasible")
    }

    #[test]
    fn separable_scores_give_zero_bpcer() {
        let t = table(&[0.8, 0.9, 0.95], &[0.1, 0.2, 0.3]);
        for target in [0.001, 0.01, 0.1] {
            let p = bpcer_at_apcer(&t, target).unwrap();
            assert_eq!(p.bpcer, 0.0, "target {target}");
            assert_eq!(p.apcer, 0.0);
        }
    }

    #[test]
    fn two_attacks_two_bonafides_at_ten_percent() {
        // With two attacks, APCER <= 10% forces both attacks at or above tau,
        // so tau can sit at 0.8 where no bona fide is flagged.
        let t = table(&[0.9, 0.8], &[0.1, 0.7]);
        let p = bpcer_at_apcer(&t, 0.1).unwrap();
        assert_eq!(p.apcer, 0.0);
        assert_eq!(p.bpcer, 0.0);
        assert!(p.saturated, "10% of 2 attacks is below one sample");
        let (ob, _) = oracle_bpcer_at_apcer(&t, 0.1);
        assert_eq!(p.bpcer, ob);
    }

    #[test]
    fn matches_sweep_oracle_on_randomized_tables() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for trial in 0..1000 {
            let t = random_table(&mut rng, 50);
            let target = [0.001, 0.01, 0.05, 0.1, 0.25][rng.gen_range(0..5)];
            let p = bpcer_at_apcer(&t, target).unwrap();
            let (ob, _) = oracle_bpcer_at_apcer(&t, target);
            assert_eq!(p.bpcer, ob, "trial {trial} target {target}");
        }
    }

    #[test]
    fn saturation_flag_tracks_attack_count() {
        let t = table(&[0.9; 88].to_vec().as_slice(), &[0.1; 20]);
        // 0.1% of 88 attacks is < 1 sample: saturated.
        assert!(bpcer_at_apcer(&t, 0.001).unwrap().saturated);
        // 10% of 88 attacks is 8.8 samples: reachable below target.
        assert!(!bpcer_at_apcer(&t, 0.1).unwrap().saturated);
    }

    #[test]
    fn bad_target_rejected() {
        let t = table(&[0.9], &[0.1]);
        assert!(matches!(bpcer_at_apcer(&t, 0.0), Err(MetricError::BadTarget(_))));
        assert!(matches!(bpcer_at_apcer(&t, 1.0), Err(MetricError::BadTarget(_))));
    }
}

mod roc_tests {
    use super::*;

    #[test]
    fn separable_curve_passes_through_top_left_and_endpoints() {
        let t = table(&[0.8, 0.9], &[0.1, 0.2]);
        let points = roc(&t, None).unwrap();
        assert!(points
            .iter()
            .any(|p| p.apcer == 0.0 && p.one_minus_bpcer == 1.0));
        assert_eq!(points.first().unwrap().apcer, 0.0);
        let last = points.last().unwrap();
        assert_eq!((last.apcer, last.one_minus_bpcer), (1.0, 1.0));
    }

    #[test]
    fn monotone_nondecreasing() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..100 {
            let t = random_table(&mut rng, 40);
            let points = roc(&t, None).unwrap();
            for pair in points.windows(2) {
                assert!(pair[1].apcer >= pair[0].apcer);
                assert!(pair[1].one_minus_bpcer >= pair[0].one_minus_bpcer - 1e-15);
            }
        }
    }

    #[test]
    fn random_scores_give_near_diagonal_curve() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let attacks: Vec<f64> = (0..5000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let bonafides: Vec<f64> = (0..5000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let t = table(&attacks, &bonafides);
        let points = roc(&t, None).unwrap();
        let mut auc = 0.0;
        for pair in points.windows(2) {
            let dx = pair[1].apcer - pair[0].apcer;
            auc += dx * (pair[0].one_minus_bpcer + pair[1].one_minus_bpcer) / 2.0;
        }
        assert!((auc - 0.5).abs() < 0.05, "auc {auc}");
    }

    #[test]
    fn thinning_keeps_endpoints() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let t = random_table(&mut rng, 50);
        let full = roc(&t, None).unwrap();
        let thin = roc(&t, Some(5)).unwrap();
        assert!(thin.len() <= 5);
        assert_eq!(thin.first().unwrap().apcer, full.first().unwrap().apcer);
        assert_eq!(
            thin.last().unwrap().one_minus_bpcer,
            full.last().unwrap().one_minus_bpcer
        );
    }
}

mod vuln_tests {
    use super::*;

    #[test]
    fn fmr_threshold_uniform_thousand() {
        let scores: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        let t = fmr_threshold(&scores, 0.01).unwrap();
        assert_eq!(t.tau, 990.0);
        assert!(!t.degenerate);
    }

    #[test]
    fn fmr_threshold_degenerate_target() {
        let scores = vec![3.0, 1.0, 2.0];
        let t = fmr_threshold(&scores, 1.0).unwrap();
        assert!(t.degenerate);
        assert!(t.tau < 1.0);
    }

    #[test]
    fn fmr_threshold_empty_rejected() {
        assert!(matches!(
            fmr_threshold(&[], 0.01),
            Err(MetricError::Empty(_))
        ));
    }

    #[test]
    fn fmr_threshold_matches_scan_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for trial in 0..500 {
            let n = rng.gen_range(1..60);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..=30) as f64 / 30.0).collect();
            let target = [0.001, 0.01, 0.1, 0.3][rng.gen_range(0..4)];
            let got = fmr_threshold(&scores, target).unwrap();
            // Oracle: scan sorted scores, explicit strict-> count.
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expected = sorted
                .iter()
                .copied()
                .find(|&tau| {
                    sorted.iter().filter(|&&s| s > tau).count() as f64 / n as f64 <= target
                })
                .unwrap();
            assert_eq!(got.tau, expected, "trial {trial}");
        }
    }

    #[test]
    fn mmpmr_counting() {
        let t = VulnTable::new(vec![
            VulnEntry { morph_id: "m1".into(), sim_id1: 0.9, sim_id2: 0.9 },
            VulnEntry { morph_id: "m2".into(), sim_id1: 0.9, sim_id2: 0.3 },
            VulnEntry { morph_id: "m3".into(), sim_id1: 0.2, sim_id2: 0.8 },
        ])
        .unwrap();
        assert!((mmpmr(&t, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mmpmr(&t, 0.1).unwrap(), 1.0);
        assert!(matches!(
            mmpmr(&VulnTable::default(), 0.5),
            Err(MetricError::Empty(_))
        ));
    }

    #[test]
    fn mmpmr_nonincreasing_in_tau() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let entries: Vec<VulnEntry> = (0..50)
            .map(|i| VulnEntry {
                morph_id: format!("m{i}"),
                sim_id1: rng.gen_range(0.0..1.0),
                sim_id2: rng.gen_range(0.0..1.0),
            })
            .collect();
        let t = VulnTable::new(entries).unwrap();
        let mut prev = 2.0;
        for i in 0..=20 {
            let tau = i as f64 / 20.0;
            let m = mmpmr(&t, tau).unwrap();
            assert!(m <= prev);
            prev = m;
        }
    }

    #[test]
    fn lower_fmr_means_higher_threshold_and_lower_mmpmr() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for _ in 0..100 {
            let nonmated: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..0.6)).collect();
            let entries: Vec<VulnEntry> = (0..40)
                .map(|i| VulnEntry {
                    morph_id: format!("m{i}"),
                    sim_id1: rng.gen_range(0.2..1.0),
                    sim_id2: rng.gen_range(0.2..1.0),
                })
                .collect();
            let t = VulnTable::new(entries).unwrap();
            let tau_strict = fmr_threshold(&nonmated, 0.001).unwrap().tau;
            let tau_loose = fmr_threshold(&nonmated, 0.01).unwrap().tau;
            assert!(tau_loose <= tau_strict);
            assert!(mmpmr(&t, tau_loose).unwrap() >= mmpmr(&t, tau_strict).unwrap());
        }
    }

    #[test]
    fn vuln_csv_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let t = VulnTable::new(vec![VulnEntry {
            morph_id: "m1".into(),
            sim_id1: 0.123456789,
            sim_id2: 0.9,
        }])
        .unwrap();
        let path = tmp.path().join("vuln.csv");
        t.write_csv(&path).unwrap();
        let back = VulnTable::read_csv(&path).unwrap();
        assert_eq!(t.entries, back.entries);
        let nm = vec![0.1, 0.5, 0.25];
        let nm_path = tmp.path().join("nonmated.csv");
        vuln::write_nonmated_csv(&nm, &nm_path).unwrap();
        assert_eq!(vuln::read_nonmated_csv(&nm_path).unwrap(), nm);
    }
}

mod report_tests {
    use super::*;

    fn report_with_bpcer_at_10(model: &str, train: Medium, test: Medium, b: f64) -> EvalReport {
        EvalReport {
            model: model.into(),
            train_medium: train,
            test_medium: test,
            bpcer_at: vec![OperatingPoint {
                target_apcer: 0.1,
                bpcer: b,
                apcer: 0.1,
                tau: 0.5,
                saturated: false,
            }],
            roc_points: vec![],
            counts: ReportCounts { attacks: 88, bonafides: 123 },
        }
    }

    #[test]
    fn published_generalization_deltas() {
        let cases = [
            (0.0645, 0.1219, 5.74), // pixel-wise detector
            (0.008, 0.508, 50.0),   // fine-tuned AlexNet
            (0.0753, 0.178, 10.27), // transferable D-CNN (P2)
        ];
        for (in_b, cross_b, expected) in cases {
            let in_rep = report_with_bpcer_at_10("m", Medium::D, Medium::D, in_b);
            let cross_rep = report_with_bpcer_at_10("m", Medium::D, Medium::PS, cross_b);
            let delta = generalization_report(&in_rep, &cross_rep).unwrap();
            assert_eq!(delta, expected);
        }
    }

    #[test]
    fn identical_reports_give_zero_delta() {
        let r = report_with_bpcer_at_10("m", Medium::D, Medium::D, 0.2);
        assert_eq!(generalization_report(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn missing_operating_point_is_error() {
        let mut r = report_with_bpcer_at_10("m", Medium::D, Medium::D, 0.2);
        r.bpcer_at.clear();
        let other = report_with_bpcer_at_10("m", Medium::D, Medium::PS, 0.3);
        assert!(matches!(
            generalization_report(&r, &other),
            Err(MetricError::MissingOperatingPoint(_))
        ));
    }

    #[test]
    fn from_scores_builds_all_three_points_and_roundtrips() {
        let t = super::table(&[0.9, 0.8, 0.7], &[0.1, 0.2, 0.6]);
        let report = EvalReport::from_scores("pwmad", Medium::D, Medium::PS, &t).unwrap();
        assert_eq!(report.bpcer_at.len(), 3);
        assert_eq!(report.setting_label(), "Train-D Test-PS");
        report.check_roc_monotone().unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("report.json");
        report.save_json(&path).unwrap();
        let back = EvalReport::load_json(&path).unwrap();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&back).unwrap()
        );
        let roc_path = tmp.path().join("roc.csv");
        report.write_roc_csv(&roc_path).unwrap();
        let contents = std::fs::read_to_string(&roc_path).unwrap();
        assert_eq!(contents.lines().count(), report.roc_points.len() + 1);
    }

    #[test]
    fn rendered_table_contains_rows() {
        let r1 = report_with_bpcer_at_10("pwmad", Medium::D, Medium::D, 0.0645);
        let r2 = report_with_bpcer_at_10("pwmad", Medium::D, Medium::PS, 0.1219);
        let text = render_bpcer_table(&[r1.clone(), r2.clone()]);
        assert!(text.contains("pwmad"));
        assert!(text.contains("6.45"));
        assert!(text.contains("12.19"));
        let gen = report::render_generalization_table(&[("pwmad".into(), r1, r2)]).unwrap();
        assert!(gen.contains("5.74"));
    }
}

mod score_csv {
    use super::*;

    #[test]
    fn roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let t = table(&[0.987654321, 0.5], &[0.1]);
        let path = tmp.path().join("scores.csv");
        t.write_csv(&path).unwrap();
        let back = ScoreTable::read_csv(&path).unwrap();
        assert_eq!(t.entries(), back.entries());
    }
}
