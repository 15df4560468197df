use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{yolo_loss_node, ClassifierSpec, DetectorSpec, TargetBatch};
use super::{decode_predictions, encode_boxes, ScoredBox};
use crate::autodiff::Graph;
use crate::conditioning::BoxAnnotation;
use crate::error::{invalid, Result};
use crate::eval::{match_and_count, DetectionSet, MatchCounts, UnitDetections};
use crate::nn::Params;
use crate::optim::{Algorithm, OptimizerState};
use crate::phantom::{augment_boxes, classic_augment, ClassicAugmentSpec};
use crate::tensor::Tensor;

/// One detection sample: a `(1, H, W)` image and its boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct DetSample {
    pub image: Tensor<f32>,
    pub boxes: Vec<BoxAnnotation>,
}

/// Which augmented samples join the real ones, and how many: each epoch
/// holds every real sample once plus `round(ratio * real)` augmented ones,
/// split evenly between the enabled sources.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaMix {
    pub classic: bool,
    pub gan: bool,
    pub ratio: f64,
}

impl DaMix {
    pub fn none() -> Self {
        Self {
            classic: false,
            gan: false,
            ratio: 0.0,
        }
    }

    pub fn gan_one_to_one() -> Self {
        Self {
            classic: false,
            gan: true,
            ratio: 1.0,
        }
    }
}

/// Where an epoch entry comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Real(usize),
    /// A classic augmentation of a real sample.
    Classic(usize),
    Gan(usize),
}

/// One epoch's sample list, shuffled.
pub fn epoch_plan(real: usize, gan_pool: usize, mix: &DaMix, rng: &mut impl Rng) -> Result<Vec<Source>> {
    if !(mix.ratio >= 0.0 && mix.ratio.is_finite()) {
        return Err(invalid(format!("augmentation ratio must be non-negative, got {}", mix.ratio)));
    }
    let mut plan: Vec<Source> = (0..real).map(Source::Real).collect();
    let extra = if mix.classic || mix.gan { (mix.ratio * real as f64).round() as usize } else { 0 };
    let (n_classic, n_gan) = match (mix.classic, mix.gan) {
        (true, true) => (extra - extra / 2, extra / 2),
        (true, false) => (extra, 0),
        (false, true) => (0, extra),
        (false, false) => (0, 0),
    };
    if n_gan > 0 && gan_pool == 0 {
        return Err(invalid("GAN augmentation requested with an empty synthetic pool"));
    }
    let draw = |n: usize, pool: usize, rng: &mut dyn rand::RngCore| -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let mut perm: Vec<usize> = (0..pool).collect();
            perm.shuffle(rng);
            out.extend(perm.into_iter().take(n - out.len()));
        }
        out
    };
    plan.extend(draw(n_classic, real, rng).into_iter().map(Source::Classic));
    plan.extend(draw(n_gan, gan_pool, rng).into_iter().map(Source::Gan));
    plan.shuffle(rng);
    Ok(plan)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub steps: u64,
    pub batch: usize,
    pub learning_rate: f64,
    pub eval_every: u64,
    /// Steps `[start, end]` within which the best validation model is kept.
    pub select_window: (u64, u64),
    pub iou_threshold: f64,
    /// Score cut-off used for the validation sensitivity.
    pub select_score_threshold: f64,
    pub nms_iou: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 8,
            learning_rate: 1e-3,
            eval_every: 50,
            select_window: (0, u64::MAX),
            iou_threshold: 0.25,
            select_score_threshold: 0.5,
            nms_iou: 0.45,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: Params,
    pub log: Vec<MetricRecord>,
    /// Step of the selected model (0 for the initial one).
    pub best_step: u64,
    pub best_metric: f64,
}

impl DetSample {
    /// Wrap a 2-D `(H, W)` slice as a single-channel sample.
    pub fn from_slice(image: &Tensor<f32>, boxes: Vec<BoxAnnotation>) -> Result<Self> {
        if image.shape().len() != 2 {
            return Err(invalid(format!("expected an (H, W) slice, got {:?}", image.shape())));
        }
        Ok(Self {
            image: image.reshape([1, image.shape()[0], image.shape()[1]].to_vec())?,
            boxes,
        })
    }
}

fn check_samples(spec: &DetectorSpec, samples: &[DetSample]) -> Result<()> {
    let want = [spec.in_ch, spec.input, spec.input];
    match samples.iter().find(|s| s.image.shape() != want) {
        Some(s) => Err(invalid(format!("detector samples must be {want:?}, got {:?}", s.image.shape()))),
        None => Ok(()),
    }
}

fn batch_images(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    Tensor::stack(&images.iter().map(|t| (*t).clone()).collect::<Vec<_>>())
}

/// Detections per image, in input order.
pub fn predict(spec: &DetectorSpec, params: &Params, images: &[Tensor<f32>], threshold: f64, nms_iou: f64) -> Result<Vec<Vec<ScoredBox>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(batch_images(&chunk.iter().collect::<Vec<_>>())?);
        let raw = spec.forward(&mut g, params, x)?;
        let raw = g.value(raw);
        let per = spec.head_channels() * spec.s * spec.s;
        for i in 0..chunk.len() {
            let one = Tensor::new(vec![spec.head_channels(), spec.s, spec.s], raw.data()[i * per..(i + 1) * per].to_vec())?;
            let grid = spec.head_to_grid(&one)?;
            out.push(decode_predictions(&grid, [spec.input, spec.input], threshold, nms_iou));
        }
    }
    Ok(out)
}

/// Detection set over samples, one unit per sample.
pub fn evaluate_detector(
    spec: &DetectorSpec,
    params: &Params,
    samples: &[DetSample],
    threshold: f64,
    nms_iou: f64,
) -> Result<DetectionSet> {
    check_samples(spec, samples)?;
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let preds = predict(spec, params, &images, threshold, nms_iou)?;
    Ok(DetectionSet {
        units: samples
            .iter()
            .zip(preds)
            .enumerate()
            .map(|(i, (s, p))| UnitDetections {
                id: format!("slice-{i}"),
                predictions: p.into_iter().map(|b| (b.bbox, b.score)).collect(),
                truth: s.boxes.clone(),
            })
            .collect(),
    })
}

fn validation_counts(spec: &DetectorSpec, params: &Params, val: &[DetSample], sched: &TrainSchedule) -> Result<MatchCounts> {
    let d = evaluate_detector(spec, params, val, sched.select_score_threshold, sched.nms_iou)?;
    match_and_count(&d, sched.iou_threshold, sched.select_score_threshold)
}

/// Train the detector on real samples mixed with augmented ones. The model
/// kept is the one with the best validation sensitivity among evaluations
/// inside the selection window.
pub fn train_supervised(
    spec: &DetectorSpec,
    train: &[DetSample],
    validation: &[DetSample],
    synthetic: &[DetSample],
    mix: &DaMix,
    sched: &TrainSchedule,
) -> Result<TrainedModel> {
    if train.is_empty() {
        return Err(invalid("detector training set is empty"));
    }
    if sched.batch == 0 {
        return Err(invalid("batch size must be positive"));
    }
    check_samples(spec, train)?;
    check_samples(spec, validation)?;
    check_samples(spec, synthetic)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut params = spec.init(&mut rng)?;
    let mut opt = OptimizerState::new(Algorithm::adam(0.9, 0.999), sched.learning_rate)?;
    let mut best = (params.clone(), 0u64, f64::NEG_INFINITY);
    let mut log = Vec::with_capacity(sched.steps as usize);
    let mut plan: Vec<Source> = Vec::new();
    let mut cursor = 0;
    for step in 1..=sched.steps {
        let mut batch = Vec::with_capacity(sched.batch);
        while batch.len() < sched.batch {
            if cursor == plan.len() {
                plan = epoch_plan(train.len(), synthetic.len(), mix, &mut rng)?;
                cursor = 0;
            }
            let sample = match plan[cursor] {
                Source::Real(i) => train[i].clone(),
                Source::Gan(j) => synthetic[j].clone(),
                Source::Classic(i) => {
                    let aug = ClassicAugmentSpec::sample(&mut rng, -1.0);
                    let s = &train[i];
                    DetSample {
                        image: classic_augment(&s.image, &aug)?,
                        boxes: augment_boxes(&s.boxes, &aug, [spec.input, spec.input]),
                    }
                }
            };
            cursor += 1;
            batch.push(sample);
        }
        let grids = batch
            .iter()
            .map(|s| {
                let objects: Vec<(BoxAnnotation, usize)> = s.boxes.iter().map(|b| (b.clone(), 0)).collect();
                encode_boxes(&objects, [spec.input, spec.input], spec.s, &spec.anchors, spec.classes).map(|g| g.0)
            })
            .collect::<Result<Vec<_>>>()?;
        let targets = TargetBatch::from_grids(&grids)?;
        let mut g = Graph::<f32>::training(rng.random());
        let x = g.constant(batch_images(&batch.iter().map(|s| &s.image).collect::<Vec<_>>())?);
        let raw = spec.forward(&mut g, &params, x)?;
        let loss = yolo_loss_node(&mut g, raw, &targets, spec)?;
        let value = g.value(loss).item() as f64;
        let grads = g.backward(loss)?;
        opt.step(&mut params, grads.params())?;

        let mut rec = MetricRecord {
            step,
            loss: value,
            validation: None,
        };
        let in_window = step >= sched.select_window.0 && step <= sched.select_window.1;
        if in_window && !validation.is_empty() && sched.eval_every > 0 && (step % sched.eval_every == 0 || step == sched.steps) {
            let m = validation_counts(spec, &params, validation, sched)?;
            rec.validation = Some(m.sensitivity);
            if m.sensitivity > best.2 {
                best = (params.clone(), step, m.sensitivity);
            }
        }
        log.push(rec);
    }
    let (params, best_step, best_metric) = if best.2.is_finite() { best } else { (params, sched.steps, f64::NAN) };
    Ok(TrainedModel {
        params,
        log,
        best_step,
        best_metric,
    })
}

/// One classification sample: a `(C, H, W)` image and its label in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierSample {
    pub image: Tensor<f32>,
    pub label: usize,
}

/// Fraction of samples whose larger output matches the label.
pub fn classifier_accuracy(spec: &ClassifierSpec, params: &Params, samples: &[ClassifierSample]) -> Result<f64> {
    let mut correct = 0;
    for chunk in samples.chunks(16) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(batch_images(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?);
        let p = spec.forward(&mut g, params, x)?;
        let p = g.value(p);
        for (i, s) in chunk.iter().enumerate() {
            let pred = usize::from(p[i * 2 + 1] > p[i * 2]);
            correct += usize::from(pred == s.label);
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Train the classifier with binary cross-entropy on the two sigmoid
/// outputs; the kept model has the best validation accuracy.
pub fn train_classifier(
    spec: &ClassifierSpec,
    train: &[ClassifierSample],
    validation: &[ClassifierSample],
    sched: &TrainSchedule,
) -> Result<TrainedModel> {
    if train.is_empty() || train.iter().any(|s| s.label > 1) {
        return Err(invalid("classifier training needs samples labelled 0 or 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut params = spec.init(&mut rng)?;
    let mut opt = OptimizerState::new(Algorithm::adam(0.9, 0.999), sched.learning_rate)?;
    let mut best = (params.clone(), 0u64, f64::NEG_INFINITY);
    let mut log = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 1..=sched.steps {
        let mut idx = Vec::with_capacity(sched.batch);
        while idx.len() < sched.batch {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let n = idx.len();
        let mut g = Graph::<f32>::training(rng.random());
        let x = g.constant(batch_images(&idx.iter().map(|&i| &train[i].image).collect::<Vec<_>>())?);
        let target = Tensor::from_fn(vec![n, 2], |j| if train[idx[j / 2]].label == j % 2 { 1.0 } else { 0.0 });
        let p = spec.forward(&mut g, &params, x)?;
        let eps = 1e-6;
        let p = g.scale(p, 1.0 - 2.0 * eps)?;
        let p = g.offset(p, eps)?;
        let lp = g.log(p)?;
        let q = g.neg(p)?;
        let q = g.offset(q, 1.0)?;
        let lq = g.log(q)?;
        let t = g.constant(target.clone());
        let u = g.constant(target.map(|v| 1.0 - v));
        let a = g.mul(t, lp)?;
        let b = g.mul(u, lq)?;
        let ll = g.add(a, b)?;
        let ll = g.mean(ll)?;
        let loss = g.neg(ll)?;
        let value = g.value(loss).item() as f64;
        let grads = g.backward(loss)?;
        let updates = g.take_buffer_updates();
        opt.step(&mut params, grads.params())?;
        params.apply_buffer_updates(updates);
        let mut rec = MetricRecord {
            step,
            loss: value,
            validation: None,
        };
        let in_window = step >= sched.select_window.0 && step <= sched.select_window.1;
        if in_window && !validation.is_empty() && sched.eval_every > 0 && (step % sched.eval_every == 0 || step == sched.steps) {
            let acc = classifier_accuracy(spec, &params, validation)?;
            rec.validation = Some(acc);
            if acc > best.2 {
                best = (params.clone(), step, acc);
            }
        }
        log.push(rec);
    }
    let (params, best_step, best_metric) = if best.2.is_finite() { best } else { (params, sched.steps, f64::NAN) };
    Ok(TrainedModel {
        params,
        log,
        best_step,
        best_metric,
    })
}
