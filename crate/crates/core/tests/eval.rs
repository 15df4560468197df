use patholab_core::conditioning::{Attenuation, BoxAnnotation, SizeClass};
use patholab_core::eval::*;
use patholab_core::objectives::PerceptualExtractor;
use patholab_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bx(o: &[usize], e: &[usize]) -> BoxAnnotation {
    BoxAnnotation::new(o.to_vec(), e.to_vec()).unwrap()
}

fn pixel_iou(a: &BoxAnnotation, b: &BoxAnnotation) -> f64 {
    let (mut inter, mut union) = (0, 0);
    for y in 0..40 {
        for x in 0..40 {
            let (ia, ib) = (a.contains(&[y, x]), b.contains(&[y, x]));
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
    }
    inter as f64 / union as f64
}

#[test]
fn iou_examples() {
    let a = bx(&[0, 0], &[2, 2]);
    let b = bx(&[1, 1], &[2, 2]);
    assert_eq!(iou(&a, &b).unwrap(), 1.0 / 7.0);
    assert_eq!(iou(&a, &b).unwrap(), pixel_iou(&a, &b));
    assert_eq!(iou(&a, &a).unwrap(), 1.0);
    assert_eq!(iou(&a, &bx(&[5, 5], &[1, 1])).unwrap(), 0.0);
    let mut z = a.clone();
    z.extent = vec![0, 2];
    assert!(iou(&z, &b).is_err());
    assert!(iou(&a, &bx(&[0, 0, 0], &[1, 1, 1])).is_err());
    assert_eq!(iou(&bx(&[0, 0, 0], &[2, 2, 2]), &bx(&[1, 1, 1], &[2, 2, 2])).unwrap(), 1.0 / 15.0);
}

#[test]
fn matching_hand_example() {
    let unit = UnitDetections {
        id: "s0".into(),
        truth: vec![bx(&[0, 0], &[4, 4]), bx(&[10, 10], &[4, 4]), bx(&[20, 20], &[4, 4])],
        predictions: vec![
            (bx(&[0, 0], &[4, 4]), 0.9),
            (bx(&[10, 11], &[4, 4]), 0.8),
            (bx(&[0, 1], &[4, 4]), 0.7),
            (bx(&[30, 30], &[2, 2]), 0.6),
        ],
    };
    let d = DetectionSet { units: vec![unit] };
    let m = match_and_count(&d, 0.5, 0.0).unwrap();
    assert_eq!((m.sensitivity, m.fps_per_unit), (2.0 / 3.0, 2.0));
    let none = DetectionSet {
        units: vec![UnitDetections {
            predictions: vec![],
            ..d.units[0].clone()
        }],
    };
    let m = match_and_count(&none, 0.5, 0.0).unwrap();
    assert_eq!((m.sensitivity, m.fps_per_unit), (0.0, 0.0));
    let perfect = DetectionSet {
        units: vec![UnitDetections {
            predictions: d.units[0].truth.iter().map(|b| (b.clone(), 1.0)).collect(),
            ..d.units[0].clone()
        }],
    };
    let m = match_and_count(&perfect, 0.5, 0.0).unwrap();
    assert_eq!((m.sensitivity, m.fps_per_unit), (1.0, 0.0));
}

#[test]
fn cpm_examples() {
    let rates = [(1, 1), (2, 2), (4, 3), (8, 4), (16, 5), (32, 6), (64, 7)];
    let c = FrocCurve::from_counts(10, 8, &rates).unwrap();
    assert_eq!(cpm(&c), 0.4);
    let flat = FrocCurve::from_counts(10, 8, &[(1, 3), (64, 3)]).unwrap();
    assert_eq!(cpm(&flat), 0.3);
    // step interpolation: at 1/8 per unit (1 FP over 8 units) only the first point counts
    let c = FrocCurve::from_counts(4, 8, &[(0, 1), (2, 2)]).unwrap();
    assert_eq!(cpm(&c), (1.0 + 6.0 * 2.0) / 28.0);
    assert!(froc(&DetectionSet::default(), 0.5).is_err());
}

fn random_set(rng: &mut ChaCha8Rng, units: usize) -> DetectionSet {
    DetectionSet {
        units: (0..units)
            .map(|u| {
                let truth: Vec<BoxAnnotation> = (0..rng.random_range(0..3))
                    .map(|i| {
                        let mut b = bx(&[rng.random_range(0..30), rng.random_range(0..30)], &[rng.random_range(2..8), rng.random_range(2..8)]);
                        b.size_class = Some(SizeClass::ALL[i % 3]);
                        b.attenuation_class = Some(Attenuation::ALL[(i + u) % 3]);
                        b
                    })
                    .collect();
                let mut predictions: Vec<(BoxAnnotation, f64)> = truth
                    .iter()
                    .filter_map(|t| {
                        rng.random_bool(0.7)
                            .then(|| (bx(&[t.origin[0] + rng.random_range(0..2), t.origin[1]], &t.extent), rng.random_range(0.3..1.0)))
                    })
                    .collect();
                for _ in 0..rng.random_range(0..4) {
                    predictions.push((bx(&[rng.random_range(0..30), rng.random_range(0..30)], &[3, 3]), rng.random_range(0.0..0.8)));
                }
                UnitDetections {
                    id: format!("u{u}"),
                    predictions,
                    truth,
                }
            })
            .collect(),
    }
}

proptest! {
    #[test]
    fn iou_matches_pixel_count(a in (0usize..20, 0usize..20, 1usize..15, 1usize..15), b in (0usize..20, 0usize..20, 1usize..15, 1usize..15)) {
        let a = bx(&[a.0, a.1], &[a.2, a.3]);
        let b = bx(&[b.0, b.1], &[b.2, b.3]);
        let v = iou(&a, &b).unwrap();
        prop_assert!((v - pixel_iou(&a, &b)).abs() < 1e-15);
        prop_assert_eq!(v, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v == 1.0, a == b);
    }

    #[test]
    fn froc_is_monotone_and_cpm_bounded(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = random_set(&mut rng, 6);
        prop_assume!(d.truth_count() > 0);
        let c = froc(&d, 0.25).unwrap();
        for w in c.rates().windows(2) {
            prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
        let v = cpm(&c);
        prop_assert!((0.0..=1.0).contains(&v));
        // the curve agrees with a direct count at each threshold
        for p in &c.points {
            let m = match_and_count(&d, 0.25, p.threshold).unwrap();
            prop_assert_eq!((m.true_positives, m.false_positives), (p.hits, p.false_positives));
        }
        let s = scoreboard(&d, 0.25).unwrap();
        prop_assert_eq!(s.overall, v);
    }

    #[test]
    fn holm_is_monotone_and_conservative(p in proptest::collection::vec(0.0f64..1.0, 1..12)) {
        let adj = holm_adjust(&p);
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
        for w in order.windows(2) {
            prop_assert!(adj[w[1]] >= adj[w[0]]);
        }
        for (a, r) in adj.iter().zip(&p) {
            prop_assert!(a >= r && *a <= 1.0);
        }
    }

    #[test]
    fn vtt_cells_sum_to_100(r in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
        let o = |b: bool| if b { Origin::Real } else { Origin::Synthetic };
        let resp: Vec<Response> = r.iter().map(|&(t, a)| Response {
            truth: ResponseLabels { origin: o(t), tumor: None },
            answer: ResponseLabels { origin: o(a), tumor: None },
        }).collect();
        let rep = vtt_score(&resp).unwrap();
        for row in 0..2 {
            let n = rep.origin.counts[row][0] + rep.origin.counts[row][1];
            if n > 0 {
                prop_assert!((rep.origin.rates[row][0] + rep.origin.rates[row][1] - 100.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn kmeans_inertia_never_increases(seed in 0u64..200, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
        let km = kmeans(&pts, k, seed, 100).unwrap();
        for w in km.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }
}

/// Chi-square(1) upper tail by Simpson's rule after substituting t = u^2,
/// which removes the singularity at zero.
fn chi2_tail_simpson(x: f64) -> f64 {
    let f = |u: f64| 2.0 * (-u * u / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let (a, b, n) = (0.0, x.sqrt(), 20_000);
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - s * h / 3.0
}

#[test]
fn mcnemar_matches_numeric_tail() {
    let r = mcnemar_holm(&[PairedOutcomes { a: 30, b: 10, c: 2, d: 8 }], McnemarMethod::ChiSquare);
    assert!((r[0].statistic - 64.0 / 12.0).abs() < 1e-12);
    let oracle = chi2_tail_simpson(64.0 / 12.0);
    assert!((oracle - 0.0209).abs() < 1e-4);
    assert!((r[0].p_raw - oracle).abs() < 1e-3);
    let degenerate = mcnemar_holm(&[PairedOutcomes { a: 3, b: 0, c: 0, d: 2 }], McnemarMethod::ChiSquare);
    assert!(degenerate[0].degenerate && degenerate[0].p_raw == 1.0);
    let exact = mcnemar_holm(&[PairedOutcomes { a: 0, b: 10, c: 2, d: 0 }], McnemarMethod::ExactBinomial);
    // 2 * (1 + 12 + 66) / 4096
    assert!((exact[0].p_raw - 158.0 / 4096.0).abs() < 1e-12);
}

#[test]
fn holm_example_is_exact() {
    assert_eq!(holm_adjust(&[0.01, 0.04]), vec![0.02, 0.04]);
    assert_eq!(holm_adjust(&[0.04, 0.01]), vec![0.04, 0.02]);
    assert_eq!(holm_adjust(&[0.6, 0.5, 0.01]), vec![1.0, 1.0, 0.03]);
}

fn responses(rr: u64, rs: u64, sr: u64, ss: u64) -> Vec<Response> {
    let lab = |origin| ResponseLabels { origin, tumor: None };
    let mut v = Vec::new();
    for (n, t, a) in [(rr, Origin::Real, Origin::Real), (rs, Origin::Real, Origin::Synthetic), (sr, Origin::Synthetic, Origin::Real), (ss, Origin::Synthetic, Origin::Synthetic)] {
        v.extend((0..n).map(|_| Response { truth: lab(t), answer: lab(a) }));
    }
    v
}

#[test]
fn vtt_table_row_arithmetic() {
    let r = vtt_score(&responses(73, 27, 14, 86)).unwrap();
    assert_eq!(r.accuracy, 79.5);
    assert_eq!((r.real_as_real, r.real_as_synthetic, r.synthetic_as_real, r.synthetic_as_synthetic), (73.0, 27.0, 14.0, 86.0));
    let all_right = vtt_score(&responses(5, 0, 0, 5)).unwrap();
    assert_eq!((all_right.accuracy, all_right.real_as_synthetic, all_right.synthetic_as_real), (100.0, 0.0, 0.0));
    assert_eq!(vtt_score(&responses(5, 0, 5, 0)).unwrap().accuracy, 50.0);
    assert!(vtt_score(&[]).is_err());
    let tumor = Response {
        truth: ResponseLabels { origin: Origin::Real, tumor: Some(true) },
        answer: ResponseLabels { origin: Origin::Synthetic, tumor: Some(false) },
    };
    let rep = vtt_score(&[tumor]).unwrap();
    assert_eq!(rep.tumor.unwrap().counts, [[0, 1], [0, 0]]);
}

fn clustered_points(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let c = (i % 3) as f64;
            (0..10).map(|d| if d % 3 == i % 3 { 0.7 } else { 0.2 } + 0.05 * c + rng.random_range(-0.05..0.05)).collect()
        })
        .collect()
}

#[test]
fn tsne_calibration_and_kl_on_300_points() {
    let pts = clustered_points(300, 1);
    let cfg = EmbeddingConfig::default();
    let out = tsne(&pts, &cfg, 3).unwrap();
    assert_eq!(out.embedding.len(), 300);
    assert!(out.calibration_error < 1e-4);
    assert!(out.kl_final < out.kl_initial, "{} !< {}", out.kl_final, out.kl_initial);
    // recompute the calibration from the conditional rows directly
    let n = pts.len();
    let mut d2 = vec![0.0; n * n];
    let (mn, mx) = pts.iter().flatten().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    for i in 0..n {
        for j in 0..n {
            d2[i * n + j] = pts[i].iter().zip(&pts[j]).map(|(a, b)| ((a - b) / (mx - mn)).powi(2)).sum();
        }
    }
    let (rows, _) = calibrate_rows(&d2, n, 100.0).unwrap();
    for i in 0..n {
        let h = row_entropy_bits(&rows[i * n..(i + 1) * n]);
        assert!((h - 100f64.log2()).abs() < 1e-4, "row {i}: {h}");
    }
    assert!((kl_divergence(&out.joint, &out.embedding) - out.kl_final).abs() < 1e-12);
}

#[test]
fn tsne_contract() {
    let pts = clustered_points(20, 2);
    let cfg = EmbeddingConfig {
        perplexity: 20.0,
        ..Default::default()
    };
    assert!(tsne(&pts, &cfg, 0).is_err());
    let mut dup = clustered_points(30, 3);
    for i in 0..10 {
        dup[i] = dup[0].clone();
    }
    let cfg = EmbeddingConfig {
        perplexity: 5.0,
        iterations: 50,
        ..Default::default()
    };
    let out = tsne(&dup, &cfg, 1).unwrap();
    assert!(out.embedding.iter().all(|p| p[0].is_finite() && p[1].is_finite()));
}

#[test]
fn kmeans_degenerate_and_cluster_discard() {
    let pts = clustered_points(5, 4);
    let km = kmeans(&pts, 5, 1, 10).unwrap();
    assert_eq!(km.inertia(), 0.0);
    assert!(kmeans(&pts, 6, 1, 10).is_err());

    let images: Vec<Tensor<f32>> = (0..12)
        .map(|i| Tensor::from_fn(vec![1, 8, 8], |j| if (i % 2 == 0) == (j % 8 < 4) { 0.9 } else { -0.9 }))
        .collect();
    let enc = PerceptualExtractor::new(1, &[4], 7);
    let part = cluster_discard(&images, &|imgs| encode_images(imgs, &enc), 2, 5).unwrap();
    assert_eq!(part.clusters.iter().map(Vec::len).sum::<usize>(), 12);
    // the two stripe patterns separate
    let first = part.assignments[0];
    for (i, &a) in part.assignments.iter().enumerate() {
        assert_eq!(a == first, i % 2 == 0);
    }
    let kept = apply_discard(&part, &[first]);
    assert!(kept.iter().all(|i| i % 2 == 1) && kept.len() == 6);
    assert!(cluster_discard(&images, &|imgs| encode_images(imgs, &enc), 13, 5).is_err());
}
