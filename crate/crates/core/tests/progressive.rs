use patholab_core::nn::Params;
use patholab_core::progressive::*;
use patholab_core::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn blueprint(target: usize, cond: usize) -> NetworkBlueprint {
    NetworkBlueprint::scaled(build_schedule(4, target, 10, 0.5).unwrap(), 16, 1, cond).unwrap()
}

fn latent(n: usize, d: usize) -> Tensor<f32> {
    Tensor::from_fn(vec![n, d], |i| ((i * 7919) % 113) as f32 / 56.0 - 1.0)
}

fn gen_out(bp: &NetworkBlueprint, p: &Params, z: &Tensor<f32>, cond: Option<&Tensor<f32>>, stage: usize, alpha: f64) -> Tensor<f32> {
    let mut g = Graph::<f32>::new();
    let zn = g.constant(z.clone());
    let c = cond.map(|c| g.constant(c.clone()));
    let y = Generator { blueprint: bp }.forward(&mut g, p, zn, c, stage, alpha).unwrap();
    g.value(y).clone()
}

fn nearest_up(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    Tensor::from_fn(vec![n, c, 2 * h, 2 * w], |i| {
        let x = i % (2 * w);
        let y = (i / (2 * w)) % (2 * h);
        let nc = i / (4 * h * w);
        t[nc * h * w + (y / 2) * w + x / 2]
    })
}

#[test]
fn stage_outputs_have_scheduled_extent() {
    let bp = blueprint(32, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = Params::new();
    bp.init_stage(0, &mut p, &mut rng).unwrap();
    for (k, &r) in bp.schedule.resolutions().iter().enumerate() {
        if k > 0 {
            p = grow(&bp, k, &p, &mut rng).unwrap();
        }
        let y = gen_out(&bp, &p, &latent(2, bp.latent), None, k, 0.5);
        assert_eq!(y.shape(), &[2, 1, r, r]);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let mut g = Graph::<f32>::new();
        let x = g.constant(y);
        let s = Critic { blueprint: &bp }.forward(&mut g, &p, x, None, k, 0.5).unwrap();
        assert_eq!(g.shape(s), &[2]);
    }
}

#[test]
fn fade_continuity_at_alpha_zero_is_bit_exact() {
    let bp = blueprint(16, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = Params::new();
    bp.init_stage(0, &mut p, &mut rng).unwrap();
    let z = latent(3, bp.latent);
    for k in 1..bp.schedule.stages() {
        let before = gen_out(&bp, &p, &z, None, k - 1, 1.0);
        p = grow(&bp, k, &p, &mut rng).unwrap();
        let after = gen_out(&bp, &p, &z, None, k, 0.0);
        let expected = nearest_up(&before);
        let same = after.data().iter().zip(expected.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "stage {k}");
    }
}

#[test]
fn fade_output_is_continuous_in_alpha() {
    let bp = blueprint(8, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = Params::new();
    bp.init_stage(0, &mut p, &mut rng).unwrap();
    p = grow(&bp, 1, &p, &mut rng).unwrap();
    let z = latent(2, bp.latent);
    let mut last = gen_out(&bp, &p, &z, None, 1, 0.0);
    for i in 1..=100 {
        let y = gen_out(&bp, &p, &z, None, 1, i as f64 / 100.0);
        let d = y.data().iter().zip(last.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(d < 0.05, "jump {d} at step {i}");
        last = y;
    }
}

#[test]
fn growth_preserves_parameters_and_adds_blueprint_count() {
    let bp = blueprint(32, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = Params::new();
    bp.init_stage(0, &mut p, &mut rng).unwrap();
    assert_eq!(p.count(), bp.stage_param_count(0));
    for k in 1..bp.schedule.stages() {
        let before = p.checksum();
        let count = p.count();
        let names: Vec<String> = p.trainable().keys().cloned().collect();
        let grown = grow(&bp, k, &p, &mut rng).unwrap();
        let mut carried = Params::new();
        for n in &names {
            carried.insert(n.clone(), grown.get(n).unwrap().clone());
        }
        assert_eq!(carried.checksum(), before);
        // hand count for the conditional desk blueprint, stage k
        let w = &bp.widths;
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let expected = conv(w[k - 1] + 1, w[k], 3) + conv(w[k], w[k], 3) + conv(w[k], 1, 1) + conv(2, w[k], 1)
            + conv(w[k], w[k], 3)
            + conv(w[k], w[k - 1], 3);
        assert_eq!(grown.count() - count, expected);
        p = grown;
    }
    let err = grow(&bp, bp.schedule.stages(), &p, &mut rng).unwrap_err();
    assert!(err.to_string().contains("schedule exhausted"));
}

#[test]
fn growth_rejects_shape_drift() {
    let bp = blueprint(16, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut p = Params::new();
    bp.init_stage(0, &mut p, &mut rng).unwrap();
    p.insert("g.s0.conv.w", Tensor::zeros(vec![1, 1, 3, 3]));
    assert!(grow(&bp, 1, &p, &mut rng).is_err());
}

#[test]
fn condition_downsample_matches_box_average() {
    let sched = build_schedule(4, 32, 1, 0.5).unwrap();
    // box rows 5..13, cols 9..27 on a 32x32 canvas
    let canvas = Tensor::<f64>::from_fn(vec![1, 1, 32, 32], |i| {
        let (y, x) = (i / 32, i % 32);
        if (5..13).contains(&y) && (9..27).contains(&x) {
            1.0
        } else {
            0.0
        }
    });
    let mut g = Graph::<f64>::new();
    let c = g.constant(canvas.clone());
    let feat = g.constant(Tensor::zeros(vec![1, 3, 4, 4]));
    let out = inject_condition_stage(&mut g, &sched, c, 4, feat).unwrap();
    assert_eq!(g.shape(out), &[1, 4, 4, 4]);
    let v = g.value(out);
    for cy in 0..4 {
        for cx in 0..4 {
            let mut inside = 0.0;
            for y in cy * 8..cy * 8 + 8 {
                for x in cx * 8..cx * 8 + 8 {
                    inside += canvas[y * 32 + x];
                }
            }
            assert_eq!(v[3 * 16 + cy * 4 + cx], inside / 64.0);
        }
    }
    let bad = g.constant(Tensor::zeros(vec![1, 3, 4, 4]));
    assert!(inject_condition_stage(&mut g, &sched, c, 2, bad).is_err());
}

#[test]
fn zero_condition_matches_unconditioned_network() {
    let cond_bp = blueprint(16, 1);
    let plain_bp = blueprint(16, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pc = Params::new();
    cond_bp.init_stage(0, &mut pc, &mut rng).unwrap();
    for k in 1..cond_bp.schedule.stages() {
        pc = grow(&cond_bp, k, &pc, &mut rng).unwrap();
    }
    // unconditioned weights: drop the condition-facing input slice
    let mut pp = Params::new();
    for (name, t) in pc.trainable() {
        let cond_facing = name.starts_with("g.") && name.ends_with(".w") && name.contains("conv") && !name.contains("conv1");
        if cond_facing {
            let s = t.shape();
            let (o, i, kk) = (s[0], s[1], s[2] * s[3]);
            let data: Vec<f32> = (0..o).flat_map(|oo| t.data()[oo * i * kk..oo * i * kk + (i - 1) * kk].to_vec()).collect();
            pp.insert(name.clone(), Tensor::new(vec![o, i - 1, s[2], s[3]], data).unwrap());
        } else {
            pp.insert(name.clone(), t.clone());
        }
    }
    let z = latent(2, cond_bp.latent);
    let zero = Tensor::zeros(vec![2, 1, 16, 16]);
    for k in 0..cond_bp.schedule.stages() {
        let a = gen_out(&cond_bp, &pc, &z, Some(&zero), k, 1.0);
        let b = gen_out(&plain_bp, &pp, &z, None, k, 1.0);
        assert_eq!(a, b, "stage {k}");
    }
}

#[test]
fn stage_checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ProgressiveConfig::pggan(8, 2);
    cfg.batch = 2;
    let mut t = ProgressiveTrainer::new(cfg.clone(), 1).unwrap();
    let data: Vec<TrainingSample> = (0..4)
        .map(|i| TrainingSample {
            image: Tensor::from_fn(vec![1, 8, 8], |j| ((i + j) as f32 * 0.1).sin()),
            mask: None,
        })
        .collect();
    t.train::<Vec<u8>>(&data, 3, None).unwrap();
    let path = dir.path().join("stage.glt");
    save_stage_checkpoint(&path, &t.params, &t.sidecar()).unwrap();
    let (p, side) = load_stage_checkpoint(&path).unwrap();
    assert_eq!(p.checksum(), t.params.checksum());
    assert_eq!(side, StageSidecar { stage: 1, alpha: 1.0, step: 3 });
    let resumed = ProgressiveTrainer::resume(cfg, 1, p, &side).unwrap();
    assert_eq!(resumed.step_count(), 3);
}

#[test]
fn training_is_deterministic_under_seed() {
    let mut cfg = ProgressiveConfig::cpggan(8, 3);
    cfg.batch = 2;
    let data: Vec<TrainingSample> = (0..4)
        .map(|i| TrainingSample {
            image: Tensor::from_fn(vec![1, 8, 8], |j| ((i * 3 + j) as f32 * 0.2).cos()),
            mask: Some(Tensor::from_fn(vec![1, 8, 8], |j| if (j / 8 + i) % 4 == 0 { 1.0 } else { 0.0 })),
        })
        .collect();
    let run = || {
        let mut t = ProgressiveTrainer::new(cfg.clone(), 1).unwrap();
        let losses = t.train::<Vec<u8>>(&data, 6, None).unwrap();
        (losses, t.params.checksum())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(ca, cb);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.critic.to_bits(), y.critic.to_bits());
        assert_eq!(x.generator.to_bits(), y.generator.to_bits());
    }
    let flips: Vec<bool> = a.iter().map(|s| s.flipped).collect();
    assert_eq!(flips, [true, false, false, true, false, false]);
}
