use patholab_core::autodiff::Graph;
use patholab_core::conditioning::BoxAnnotation;
use patholab_core::detect::*;
use patholab_core::phantom::{generate_set, ClassMix};
use patholab_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bx(o: &[usize], e: &[usize]) -> BoxAnnotation {
    BoxAnnotation::new(o.to_vec(), e.to_vec()).unwrap()
}

fn one_object_grid() -> YoloGrid {
    let mut g = YoloGrid::empty(4, 2, 1);
    let i = g.slot(1, 2, 0);
    g.responsible[i] = true;
    g.boxes[i] = [0.5, 0.5, 0.25, 0.25, 1.0];
    g.class_probs[6] = 1.0;
    g
}

#[test]
fn yolo_loss_examples() {
    let truth = one_object_grid();
    assert_eq!(yolo_loss(&truth, &truth, 5.0, 0.5).unwrap(), 0.0);

    let mut pred = truth.clone();
    let i = pred.slot(1, 2, 0);
    pred.boxes[i][0] = 0.6;
    assert!((yolo_loss(&pred, &truth, 5.0, 0.5).unwrap() - 0.05).abs() < 1e-12);

    let (s, b, c) = (7, 2, 0.3);
    let empty = YoloGrid::empty(s, b, 1);
    let mut pred = empty.clone();
    for v in &mut pred.boxes {
        v[4] = c;
    }
    let expected = 0.5 * (s * s * b) as f64 * c * c;
    assert!((yolo_loss(&pred, &empty, 5.0, 0.5).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn yolo_loss_rejects_bad_grids() {
    let mut truth = one_object_grid();
    let i = truth.slot(1, 2, 0);
    truth.boxes[i][2] = -0.1;
    assert!(yolo_loss(&one_object_grid(), &truth, 5.0, 0.5).is_err());
    assert!(yolo_loss(&YoloGrid::empty(4, 1, 1), &one_object_grid(), 5.0, 0.5).is_err());
}

#[test]
fn graph_loss_matches_grid_loss() {
    let anchors = AnchorSet::new(vec![(0.2, 0.3), (0.4, 0.25)]).unwrap();
    let spec = DetectorSpec::new(16, 4, anchors.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let raw = Tensor::from_fn(vec![1, spec.head_channels(), 4, 4], |_| rng.random_range(-2.0f32..2.0));
    let objects = vec![(bx(&[2, 3], &[5, 4]), 0), (bx(&[9, 8], &[4, 6]), 0)];
    let (truth, dropped) = encode_boxes(&objects, [16, 16], 4, &anchors, 1).unwrap();
    assert_eq!(dropped, 0);

    let single = Tensor::new(vec![spec.head_channels(), 4, 4], raw.data().to_vec()).unwrap();
    let pred = spec.head_to_grid(&single).unwrap();
    let plain = yolo_loss(&pred, &truth, LAMBDA_COORD, LAMBDA_NOOBJ).unwrap();

    let mut g = Graph::<f32>::new();
    let x = g.constant(raw);
    let node = yolo_loss_node(&mut g, x, &TargetBatch::from_grids(&[truth]).unwrap(), &spec).unwrap();
    let graph = g.value(node).item() as f64;
    assert!((graph - plain).abs() < 1e-4 * plain.max(1.0), "graph {graph} vs plain {plain}");
}

#[test]
fn decode_keeps_confident_cell_and_suppresses_duplicates() {
    let truth = one_object_grid();
    let out = decode_predictions(&truth, [32, 32], 0.5, 0.45);
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].bbox, bx(&[8, 16], &[8, 8]));
    assert!(decode_predictions(&truth, [32, 32], 1.0, 0.45).is_empty());

    let a = ScoredBox {
        bbox: bx(&[0, 0], &[10, 10]),
        score: 0.9,
        class: 0,
    };
    let b = ScoredBox {
        bbox: bx(&[1, 1], &[10, 10]),
        score: 0.7,
        class: 0,
    };
    let kept = nms(vec![b, a.clone()], 0.45);
    assert_eq!(kept, vec![a]);
}

#[test]
fn anchors_of_identical_boxes() {
    let set = compute_anchors(&[(0.2, 0.3); 5], 1, 0).unwrap();
    assert_eq!(set.anchors, vec![(0.2, 0.3)]);
    assert!(compute_anchors(&[(0.2, 0.3); 5], 2, 0).is_err());
    assert!(compute_anchors(&[], 1, 0).is_err());
}

fn nearest_objective(boxes: &[(f64, f64)], anchors: &[(f64, f64)]) -> f64 {
    boxes
        .iter()
        .map(|&b| anchors.iter().map(|&a| 1.0 - shape_iou(b, a)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / boxes.len() as f64
}

#[test]
fn anchors_match_best_partition() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let small: Vec<(f64, f64)> = (0..6).map(|_| (rng.random_range(0.05..0.08), rng.random_range(0.05..0.08))).collect();
    let large: Vec<(f64, f64)> = (0..6).map(|_| (rng.random_range(0.4..0.5), rng.random_range(0.4..0.5))).collect();
    let boxes: Vec<(f64, f64)> = small.iter().chain(&large).copied().collect();

    let mean = |v: &[(f64, f64)]| {
        let n = v.len() as f64;
        (v.iter().map(|b| b.0).sum::<f64>() / n, v.iter().map(|b| b.1).sum::<f64>() / n)
    };
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << boxes.len()) - 1 {
        let (a, b): (Vec<_>, Vec<_>) = boxes.iter().enumerate().partition(|(i, _)| mask >> i & 1 == 1);
        let a: Vec<(f64, f64)> = a.into_iter().map(|x| *x.1).collect();
        let b: Vec<(f64, f64)> = b.into_iter().map(|x| *x.1).collect();
        best = best.min(nearest_objective(&boxes, &[mean(&a), mean(&b)]));
    }

    for seed in 0..5 {
        let set = compute_anchors(&boxes, 2, seed).unwrap();
        assert!((nearest_objective(&boxes, &set.anchors) - best).abs() < 1e-9, "seed {seed}");
        let hull = |v: &[(f64, f64)], a: (f64, f64)| {
            v.iter().any(|b| b.0 <= a.0) && v.iter().any(|b| b.0 >= a.0) && v.iter().any(|b| b.1 <= a.1) && v.iter().any(|b| b.1 >= a.1)
        };
        let mut sorted = set.anchors.clone();
        sorted.sort_by(|x, y| x.0.total_cmp(&y.0));
        assert!(hull(&small, sorted[0]) && hull(&large, sorted[1]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn anchor_objective_never_increases(seed in any::<u64>(), k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let boxes: Vec<(f64, f64)> = (0..30).map(|_| (rng.random_range(0.02..0.6), rng.random_range(0.02..0.6))).collect();
        let set = compute_anchors(&boxes, k, seed).unwrap();
        prop_assert!(set.objective_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn decode_inverts_encode(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (canvas, s) = (32usize, 4usize);
        let cell = canvas / s;
        let mut cells: Vec<usize> = (0..s * s).collect();
        use rand::seq::SliceRandom;
        cells.shuffle(&mut rng);
        let n = rng.random_range(1..4);
        let objects: Vec<(BoxAnnotation, usize)> = cells[..n]
            .iter()
            .map(|&c| {
                let (r, col) = (c / s, c % s);
                let cy = r * cell + rng.random_range(0..cell);
                let cx = col * cell + rng.random_range(0..cell);
                let (h, w) = (rng.random_range(2..7), rng.random_range(2..7));
                let oy = cy.saturating_sub(h / 2).min(canvas - h);
                let ox = cx.saturating_sub(w / 2).min(canvas - w);
                (bx(&[oy, ox], &[h, w]), 0)
            })
            .collect();
        let anchors = AnchorSet::new(vec![(0.1, 0.1), (0.2, 0.15)]).unwrap();
        let (grid, dropped) = encode_boxes(&objects, [canvas, canvas], s, &anchors, 1).unwrap();
        prop_assert_eq!(dropped, 0);
        let decoded = decode_predictions(&grid, [canvas, canvas], 0.5, 1.0);
        prop_assert_eq!(decoded.len(), objects.len());
        for (b, _) in &objects {
            let hit = decoded.iter().any(|d| {
                (0..2).all(|a| d.bbox.origin[a].abs_diff(b.origin[a]) <= cell && d.bbox.extent[a].abs_diff(b.extent[a]) <= cell)
            });
            prop_assert!(hit, "{:?} not recovered from {:?}", b, decoded);
        }
    }

    #[test]
    fn epoch_holds_same_samples_whatever_the_order(seed in any::<u64>(), real in 1usize..40, pool in 1usize..60) {
        let mix = DaMix::gan_one_to_one();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = epoch_plan(real, pool, &mix, &mut rng).unwrap();
        let mut reals: Vec<usize> = plan.iter().filter_map(|s| match s { Source::Real(i) => Some(*i), _ => None }).collect();
        reals.sort_unstable();
        prop_assert_eq!(reals, (0..real).collect::<Vec<_>>());
        let gans = plan.iter().filter(|s| matches!(s, Source::Gan(_))).count();
        prop_assert_eq!(gans, real);

        let mut other = epoch_plan(real, pool, &mix, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
        let mut a = plan.iter().filter(|s| matches!(s, Source::Real(_))).copied().collect::<Vec<_>>();
        a.sort();
        other.retain(|s| matches!(s, Source::Real(_)));
        other.sort();
        prop_assert_eq!(a, other);
    }
}

#[test]
fn one_to_one_mix_balances_each_epoch() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let plan = epoch_plan(32, 100, &DaMix::gan_one_to_one(), &mut rng).unwrap();
    let gans: Vec<usize> = plan.iter().filter_map(|s| if let Source::Gan(j) = s { Some(*j) } else { None }).collect();
    assert_eq!(gans.len(), 32);
    assert_eq!(plan.len(), 64);
    let mut distinct = gans.clone();
    distinct.sort_unstable();
    distinct.dedup();
    assert_eq!(distinct.len(), 32);

    let both = DaMix {
        classic: true,
        gan: true,
        ratio: 1.0,
    };
    let plan = epoch_plan(31, 100, &both, &mut rng).unwrap();
    assert_eq!(plan.iter().filter(|s| matches!(s, Source::Classic(_))).count(), 16);
    assert_eq!(plan.iter().filter(|s| matches!(s, Source::Gan(_))).count(), 15);
    assert!(epoch_plan(4, 0, &DaMix::gan_one_to_one(), &mut rng).is_err());
}

fn phantom_slices(seed: u64, n: usize) -> Vec<DetSample> {
    generate_set(seed, n, 2, &[32, 32], 1..=2, ClassMix::default())
        .unwrap()
        .into_iter()
        .map(|sc| DetSample::from_slice(&sc.image, sc.boxes).unwrap())
        .collect()
}

fn small_spec() -> DetectorSpec {
    DetectorSpec::new(32, 8, AnchorSet::new(vec![(0.15, 0.15), (0.3, 0.3)]).unwrap()).unwrap()
}

#[test]
fn smoke_run_logs_finite_loss_every_step() {
    let train = phantom_slices(21, 32);
    let val = phantom_slices(22, 8);
    let sched = TrainSchedule {
        steps: 200,
        batch: 4,
        eval_every: 50,
        seed: 9,
        ..TrainSchedule::default()
    };
    let spec = small_spec();
    let model = train_supervised(&spec, &train, &val, &[], &DaMix::none(), &sched).unwrap();
    assert_eq!(model.log.len(), 200);
    assert!(model.log.iter().enumerate().all(|(i, r)| r.step == i as u64 + 1 && r.loss.is_finite()));
    assert_eq!(model.log.iter().filter(|r| r.validation.is_some()).count(), 4);
    let first: f64 = model.log[..20].iter().map(|r| r.loss).sum();
    let last: f64 = model.log[180..].iter().map(|r| r.loss).sum();
    assert!(last < first, "loss did not fall: {first} -> {last}");

    let again = train_supervised(&spec, &train, &val, &[], &DaMix::none(), &sched).unwrap();
    assert_eq!(again.log, model.log);
    assert_eq!(again.params.checksum(), model.params.checksum());
}

#[test]
fn zero_steps_returns_initial_model() {
    let spec = small_spec();
    let sched = TrainSchedule {
        steps: 0,
        seed: 4,
        ..TrainSchedule::default()
    };
    let model = train_supervised(&spec, &phantom_slices(1, 4), &[], &[], &DaMix::none(), &sched).unwrap();
    let init = spec.init(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(model.params, init);
    assert!(model.log.is_empty());
}

#[test]
fn classifier_head_order() {
    let spec = ClassifierSpec {
        input: 16,
        blocks: 2,
        ..ClassifierSpec::default()
    };
    let mut params = spec.init(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    // Zero every convolution so the pooled feature is the stem bias.
    let names: Vec<String> = params.trainable().keys().filter(|k| k.contains(".stem.") || k.contains(".b")).cloned().collect();
    for n in names.iter().filter(|n| !n.starts_with("cls.bn") && !n.starts_with("cls.dense")) {
        params.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let beta: Vec<f32> = (0..spec.width).map(|c| 0.1 * c as f32 + 0.2).collect();
    params.insert("cls.stem.b", Tensor::new(vec![spec.width], beta.clone()).unwrap());
    let w = params.get("cls.dense.w").unwrap().clone();
    params.insert("cls.dense.b", Tensor::new(vec![2], vec![0.3, -0.2]).unwrap());
    params.insert("cls.bn.gamma", Tensor::new(vec![2], vec![1.5, 0.5]).unwrap());
    params.insert("cls.bn.beta", Tensor::new(vec![2], vec![0.1, -0.4]).unwrap());
    params.insert_buffer("cls.bn.running_mean", Tensor::new(vec![2], vec![0.2, -0.1]).unwrap());
    params.insert_buffer("cls.bn.running_var", Tensor::new(vec![2], vec![2.0, 0.5]).unwrap());

    let (gamma, bbeta, mean, var, bias) = ([1.5, 0.5], [0.1, -0.4], [0.2, -0.1], [2.0, 0.5], [0.3, -0.2]);
    let expected: Vec<f64> = (0..2)
        .map(|o| {
            let logit: f64 = (0..spec.width).map(|c| w[o * spec.width + c] as f64 * beta[c] as f64).sum::<f64>() + bias[o];
            let normed = (logit - mean[o]) / (var[o] + 1e-5f64).sqrt() * gamma[o] + bbeta[o];
            1.0 / (1.0 + (-normed).exp())
        })
        .collect();

    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![1, 1, 16, 16]));
    let out = spec.forward(&mut g, &params, x).unwrap();
    let out = g.value(out);
    assert_eq!(out.shape(), &[1, 2]);
    for o in 0..2 {
        assert!((out[o] as f64 - expected[o]).abs() < 1e-5, "{o}: {} vs {}", out[o], expected[o]);
    }
}

#[test]
fn classifier_trains_and_keeps_buffers_moving() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let samples: Vec<ClassifierSample> = (0..32)
        .map(|i| {
            let label = i % 2;
            let level = if label == 1 { 0.5 } else { -0.5 };
            ClassifierSample {
                image: Tensor::from_fn(vec![1, 16, 16], |_| level + rng.random_range(-0.2f32..0.2)),
                label,
            }
        })
        .collect();
    let spec = ClassifierSpec {
        input: 16,
        blocks: 2,
        ..ClassifierSpec::default()
    };
    let sched = TrainSchedule {
        steps: 60,
        batch: 8,
        learning_rate: 5e-3,
        eval_every: 20,
        seed: 1,
        ..TrainSchedule::default()
    };
    let model = train_classifier(&spec, &samples, &samples, &sched).unwrap();
    assert!(model.log.iter().all(|r| r.loss.is_finite()));
    assert_ne!(model.params.buffer("cls.bn.running_mean").unwrap().data(), &[0.0, 0.0]);
    assert!(classifier_accuracy(&spec, &model.params, &samples).unwrap() >= 0.9);
}
