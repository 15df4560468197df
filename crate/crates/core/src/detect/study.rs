use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{evaluate_detector, train_supervised, DaMix, DetSample, TrainSchedule};
use super::{compute_anchors, DetectorSpec, DEFAULT_BOXES};
use crate::conditioning::augment_mask;
use crate::error::{invalid, Result};
use crate::eval::{cpm, froc, match_and_count};
use crate::phantom::{generate_set, scene_seed, ClassMix, PhantomScene};
use crate::progressive::{ProgressiveConfig, ProgressiveTrainer, TrainingSample};
use crate::tensor::Tensor;

/// Seeded comparison of a detector trained on real slices alone against
/// one trained with box-conditioned synthetic slices mixed in 1:1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaStudyConfig {
    pub seeds: Vec<u64>,
    pub train_slices: usize,
    pub validation_slices: usize,
    pub test_slices: usize,
    pub size: usize,
    pub grid: usize,
    pub gan_steps_per_stage: u64,
    pub detector: TrainSchedule,
}

impl Default for DaStudyConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            train_slices: 48,
            validation_slices: 16,
            test_slices: 32,
            size: 32,
            grid: 8,
            gan_steps_per_stage: 40,
            detector: TrainSchedule {
                steps: 150,
                batch: 8,
                learning_rate: 2e-3,
                eval_every: 25,
                select_window: (50, u64::MAX),
                ..TrainSchedule::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaStudyRow {
    pub seed: u64,
    pub no_da_sensitivity: f64,
    pub gan_da_sensitivity: f64,
    pub no_da_fps_per_slice: f64,
    pub gan_da_fps_per_slice: f64,
    pub no_da_cpm: f64,
    pub gan_da_cpm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaStudyReport {
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub rows: Vec<DaStudyRow>,
    pub mean_no_da: f64,
    pub mean_gan_da: f64,
    /// `"gan-da higher"`, `"no-da higher"` or `"tie"`, from the mean sensitivities.
    pub direction: String,
}

impl DaStudyReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "DA study: sensitivity at IoU {} and score >= {}",
            self.iou_threshold, self.score_threshold
        );
        let _ = writeln!(s, "seed  no-DA   GAN-DA  no-DA FP/slice  GAN-DA FP/slice  no-DA CPM  GAN-DA CPM");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<5} {:.4}  {:.4}  {:.4}          {:.4}           {:.4}     {:.4}",
                r.seed,
                r.no_da_sensitivity,
                r.gan_da_sensitivity,
                r.no_da_fps_per_slice,
                r.gan_da_fps_per_slice,
                r.no_da_cpm,
                r.gan_da_cpm
            );
        }
        let _ = writeln!(s, "mean  {:.4}  {:.4}", self.mean_no_da, self.mean_gan_da);
        let _ = writeln!(s, "direction: {}", self.direction);
        s
    }
}

fn det_samples(scenes: &[PhantomScene]) -> Result<Vec<DetSample>> {
    scenes.iter().map(|sc| DetSample::from_slice(&sc.image, sc.boxes.clone())).collect()
}

/// Synthesize one slice per training slice from its mask-augmented boxes.
fn synthesize(cfg: &DaStudyConfig, train: &[PhantomScene], seed: u64) -> Result<Vec<DetSample>> {
    let canvas = [cfg.size, cfg.size];
    let data = train
        .iter()
        .map(|sc| {
            Ok(TrainingSample {
                image: sc.image.reshape(vec![1, cfg.size, cfg.size])?,
                mask: Some(sc.mask()?.as_channel()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut gcfg = ProgressiveConfig::cpggan(cfg.size, cfg.gan_steps_per_stage);
    gcfg.seed = seed;
    let mut gan = ProgressiveTrainer::new(gcfg, 1)?;
    let total = gan.blueprint.schedule.total_steps();
    gan.train::<std::io::Sink>(&data, total, None)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut out = Vec::with_capacity(train.len());
    for sc in train {
        let (boxes, mask, _) = augment_mask(&sc.boxes, canvas, &mut rng)?;
        let z = gan.sample_latent(1);
        let img = gan.generate(&z, Some(&Tensor::stack(&[mask.as_channel()])?))?;
        let image = Tensor::new(vec![1, cfg.size, cfg.size], img.data().to_vec())?;
        out.push(DetSample { image, boxes });
    }
    Ok(out)
}

/// Run the study. Every random choice derives from the configured seeds,
/// so reruns give identical reports.
pub fn da_study(cfg: &DaStudyConfig) -> Result<DaStudyReport> {
    if cfg.seeds.is_empty() || cfg.train_slices == 0 || cfg.test_slices == 0 {
        return Err(invalid("DA study needs at least one seed, training slice and test slice"));
    }
    let extent = [cfg.size, cfg.size];
    let mut rows = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let n = cfg.train_slices + cfg.validation_slices + cfg.test_slices;
        let scenes = generate_set(scene_seed(seed, 0), n, 2, &extent, 1..=2, ClassMix::default())?;
        let (train, rest) = scenes.split_at(cfg.train_slices);
        let (val, test) = rest.split_at(cfg.validation_slices);

        let shapes: Vec<(f64, f64)> = train
            .iter()
            .flat_map(|sc| sc.boxes.iter())
            .map(|b| (b.extent[1] as f64 / cfg.size as f64, b.extent[0] as f64 / cfg.size as f64))
            .collect();
        let anchors = compute_anchors(&shapes, DEFAULT_BOXES, seed)?;
        let spec = DetectorSpec::new(cfg.size, cfg.grid, anchors)?;

        let real = det_samples(train)?;
        let validation = det_samples(val)?;
        let test = det_samples(test)?;
        let synthetic = synthesize(cfg, train, seed)?;

        let sched = TrainSchedule {
            seed,
            ..cfg.detector.clone()
        };
        let measure = |mix: DaMix| -> Result<(f64, f64, f64)> {
            let model = train_supervised(&spec, &real, &validation, &synthetic, &mix, &sched)?;
            let d = evaluate_detector(&spec, &model.params, &test, super::DEFAULT_DETECTION_THRESHOLD, sched.nms_iou)?;
            let m = match_and_count(&d, sched.iou_threshold, sched.select_score_threshold)?;
            let c = cpm(&froc(&d, sched.iou_threshold)?);
            Ok((m.sensitivity, m.fps_per_unit, c))
        };
        let a = measure(DaMix::none())?;
        let b = measure(DaMix::gan_one_to_one())?;
        rows.push(DaStudyRow {
            seed,
            no_da_sensitivity: a.0,
            gan_da_sensitivity: b.0,
            no_da_fps_per_slice: a.1,
            gan_da_fps_per_slice: b.1,
            no_da_cpm: a.2,
            gan_da_cpm: b.2,
        });
    }
    let k = rows.len() as f64;
    let mean_no_da = rows.iter().map(|r| r.no_da_sensitivity).sum::<f64>() / k;
    let mean_gan_da = rows.iter().map(|r| r.gan_da_sensitivity).sum::<f64>() / k;
    let direction = if mean_gan_da > mean_no_da {
        "gan-da higher"
    } else if mean_no_da > mean_gan_da {
        "no-da higher"
    } else {
        "tie"
    };
    Ok(DaStudyReport {
        iou_threshold: cfg.detector.iou_threshold,
        score_threshold: cfg.detector.select_score_threshold,
        rows,
        mean_no_da,
        mean_gan_da,
        direction: direction.to_string(),
    })
}
