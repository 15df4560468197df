//! Supervised consumers of augmented data: a single-scale YOLO-style
//! detector and a small residual classifier.

mod model;
mod study;
mod train;

pub use model::{yolo_loss_node, ClassifierSpec, DetectorSpec, TargetBatch};
pub use study::{da_study, DaStudyConfig, DaStudyReport, DaStudyRow};
pub use train::{
    classifier_accuracy, epoch_plan, evaluate_detector, predict, train_classifier, train_supervised, ClassifierSample, DaMix, DetSample,
    MetricRecord, Source, TrainSchedule, TrainedModel,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::BoxAnnotation;
use crate::error::{invalid, Result};
use crate::eval::iou;

pub const LAMBDA_COORD: f64 = 5.0;
pub const LAMBDA_NOOBJ: f64 = 0.5;
pub const DEFAULT_GRID: usize = 8;
pub const DEFAULT_BOXES: usize = 2;
/// Default score cut-off when exporting detections.
pub const DEFAULT_DETECTION_THRESHOLD: f64 = 0.001;

/// Per-cell YOLO quantities. Box entries are `[x, y, w, h, C]`: centroid
/// offsets inside the cell (column, row), extents as fractions of the image
/// (width, height), and objectness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YoloGrid {
    pub s: usize,
    pub b: usize,
    pub classes: usize,
    /// `S * S * B` entries, index `(row * S + col) * B + k`.
    pub boxes: Vec<[f64; 5]>,
    /// `S * S * classes` entries.
    pub class_probs: Vec<f64>,
    /// Responsibility indicator, one per box slot.
    pub responsible: Vec<bool>,
}

impl YoloGrid {
    pub fn empty(s: usize, b: usize, classes: usize) -> Self {
        Self {
            s,
            b,
            classes,
            boxes: vec![[0.0; 5]; s * s * b],
            class_probs: vec![0.0; s * s * classes],
            responsible: vec![false; s * s * b],
        }
    }

    pub fn slot(&self, row: usize, col: usize, k: usize) -> usize {
        (row * self.s + col) * self.b + k
    }

    fn same_layout(&self, other: &Self) -> bool {
        self.s == other.s && self.b == other.b && self.classes == other.classes
    }
}

/// Sum-squared YOLO loss: centroid, square-root extent, objectness for
/// responsible slots, `λ_noobj`-weighted objectness elsewhere, and class
/// probabilities of cells holding an object.
pub fn yolo_loss(pred: &YoloGrid, truth: &YoloGrid, lambda_coord: f64, lambda_noobj: f64) -> Result<f64> {
    if !pred.same_layout(truth) {
        return Err(invalid(format!(
            "grid layouts differ: pred (S {}, B {}, classes {}) vs truth (S {}, B {}, classes {})",
            pred.s, pred.b, pred.classes, truth.s, truth.b, truth.classes
        )));
    }
    if truth.boxes.iter().any(|t| t[2] < 0.0 || t[3] < 0.0) {
        return Err(invalid("truth grid holds a negative width or height"));
    }
    if pred.boxes.iter().any(|t| t[2] < 0.0 || t[3] < 0.0) {
        return Err(invalid("predicted grid holds a negative width or height"));
    }
    let mut loss = 0.0;
    for cell in 0..truth.s * truth.s {
        let mut has_obj = false;
        for k in 0..truth.b {
            let i = cell * truth.b + k;
            let (p, t) = (&pred.boxes[i], &truth.boxes[i]);
            if truth.responsible[i] {
                has_obj = true;
                loss += lambda_coord * ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2));
                loss += lambda_coord * ((p[2].sqrt() - t[2].sqrt()).powi(2) + (p[3].sqrt() - t[3].sqrt()).powi(2));
                loss += (p[4] - t[4]).powi(2);
            } else {
                loss += lambda_noobj * (p[4] - t[4]).powi(2);
            }
        }
        if has_obj {
            for c in 0..truth.classes {
                let j = cell * truth.classes + c;
                loss += (pred.class_probs[j] - truth.class_probs[j]).powi(2);
            }
        }
    }
    Ok(loss)
}

/// Anchor `(w, h)` pairs as fractions of the image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub anchors: Vec<(f64, f64)>,
    /// Mean `1 - IoU` after seeding and after every accepted iteration.
    pub objective_history: Vec<f64>,
}

impl AnchorSet {
    pub fn new(anchors: Vec<(f64, f64)>) -> Result<Self> {
        if anchors.is_empty() || anchors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return Err(invalid(format!("anchors must be non-empty and positive, got {anchors:?}")));
        }
        Ok(Self {
            anchors,
            objective_history: Vec::new(),
        })
    }
}

/// IoU of two extents aligned at a common corner.
pub fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

fn anchor_objective(boxes: &[(f64, f64)], anchors: &[(f64, f64)]) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let assign = boxes
        .iter()
        .map(|&b| {
            let (j, d) = anchors
                .iter()
                .enumerate()
                .map(|(j, &a)| (j, 1.0 - shape_iou(b, a)))
                .fold((0, f64::INFINITY), |best, x| if x.1 < best.1 { x } else { best });
            total += d;
            j
        })
        .collect();
    (assign, total / boxes.len() as f64)
}

/// k-means over box extents with distance `1 - IoU`, k-means++ seeding.
/// Centroids move to the mean extent of their members; an update that
/// would raise the objective is rejected and iteration stops.
pub fn compute_anchors(boxes: &[(f64, f64)], k: usize, seed: u64) -> Result<AnchorSet> {
    if boxes.is_empty() {
        return Err(invalid("cannot compute anchors from an empty box list"));
    }
    if boxes.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
        return Err(invalid("box extents must be positive"));
    }
    let mut distinct: Vec<(u64, u64)> = boxes.iter().map(|b| (b.0.to_bits(), b.1.to_bits())).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if k == 0 || k > distinct.len() {
        return Err(invalid(format!("K = {k} exceeds the {} distinct box shapes", distinct.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anchors = vec![boxes[rng.random_range(0..boxes.len())]];
    while anchors.len() < k {
        let d: Vec<f64> = boxes
            .iter()
            .map(|&b| anchors.iter().map(|&a| 1.0 - shape_iou(b, a)).fold(f64::INFINITY, f64::min).powi(2))
            .collect();
        let total: f64 = d.iter().sum();
        let mut r = rng.random_range(0.0..total);
        let mut pick = boxes.len() - 1;
        for (i, &w) in d.iter().enumerate() {
            if r < w {
                pick = i;
                break;
            }
            r -= w;
        }
        anchors.push(boxes[pick]);
    }
    let (mut assign, mut objective) = anchor_objective(boxes, &anchors);
    let mut history = vec![objective];
    for _ in 0..100 {
        let mut next = anchors.clone();
        for (j, a) in next.iter_mut().enumerate() {
            let members: Vec<&(f64, f64)> = boxes.iter().zip(&assign).filter(|(_, &c)| c == j).map(|(b, _)| b).collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                *a = (members.iter().map(|b| b.0).sum::<f64>() / n, members.iter().map(|b| b.1).sum::<f64>() / n);
            }
        }
        let (next_assign, next_objective) = anchor_objective(boxes, &next);
        if next_objective > objective {
            break;
        }
        let settled = next_assign == assign;
        anchors = next;
        assign = next_assign;
        objective = next_objective;
        history.push(objective);
        if settled {
            break;
        }
    }
    Ok(AnchorSet {
        anchors,
        objective_history: history,
    })
}

/// Encode `(box, class)` objects on a `(H, W)` canvas. Each object goes to
/// the cell holding its centre and, within it, to the free slot whose anchor
/// overlaps its shape best. Returns the grid and the number of objects that
/// found no free slot.
pub fn encode_boxes(
    objects: &[(BoxAnnotation, usize)],
    canvas: [usize; 2],
    s: usize,
    anchors: &AnchorSet,
    classes: usize,
) -> Result<(YoloGrid, usize)> {
    let b = anchors.anchors.len();
    let mut grid = YoloGrid::empty(s, b, classes);
    let mut dropped = 0;
    let (h, w) = (canvas[0] as f64, canvas[1] as f64);
    for (bx, class) in objects {
        if bx.dims() != 2 {
            return Err(invalid("the detector encodes 2-D boxes"));
        }
        if *class >= classes {
            return Err(invalid(format!("class {class} outside 0..{classes}")));
        }
        let cy = (bx.origin[0] as f64 + bx.extent[0] as f64 / 2.0) / h * s as f64;
        let cx = (bx.origin[1] as f64 + bx.extent[1] as f64 / 2.0) / w * s as f64;
        let (row, col) = ((cy.floor() as usize).min(s - 1), (cx.floor() as usize).min(s - 1));
        let shape = (bx.extent[1] as f64 / w, bx.extent[0] as f64 / h);
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&i, &j| shape_iou(shape, anchors.anchors[j]).total_cmp(&shape_iou(shape, anchors.anchors[i])));
        match order.into_iter().find(|&k| !grid.responsible[grid.slot(row, col, k)]) {
            Some(k) => {
                let i = grid.slot(row, col, k);
                grid.responsible[i] = true;
                grid.boxes[i] = [cx - col as f64, cy - row as f64, shape.0, shape.1, 1.0];
                grid.class_probs[(row * s + col) * classes + class] = 1.0;
            }
            None => dropped += 1,
        }
    }
    Ok((grid, dropped))
}

/// A detection in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BoxAnnotation,
    pub score: f64,
    pub class: usize,
}

/// Greedy non-maximum suppression: keep boxes in descending score order
/// unless they overlap a kept box by more than `nms_iou`.
pub fn nms(mut boxes: Vec<ScoredBox>, nms_iou: f64) -> Vec<ScoredBox> {
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<ScoredBox> = Vec::new();
    for c in boxes {
        let clear = kept.iter().all(|k| iou(&k.bbox, &c.bbox).map(|o| o <= nms_iou).unwrap_or(true));
        if clear {
            kept.push(c);
        }
    }
    kept
}

/// Boxes whose score (objectness times best class probability) exceeds
/// `threshold`, clipped to the canvas, after NMS.
pub fn decode_predictions(grid: &YoloGrid, canvas: [usize; 2], threshold: f64, nms_iou: f64) -> Vec<ScoredBox> {
    let (h, w) = (canvas[0] as f64, canvas[1] as f64);
    let s = grid.s as f64;
    let mut out = Vec::new();
    for row in 0..grid.s {
        for col in 0..grid.s {
            let cell = row * grid.s + col;
            let (class, p) = (0..grid.classes)
                .map(|c| (c, grid.class_probs[cell * grid.classes + c]))
                .fold((0, if grid.classes == 0 { 1.0 } else { f64::NEG_INFINITY }), |a, x| if x.1 > a.1 { x } else { a });
            for k in 0..grid.b {
                let v = grid.boxes[grid.slot(row, col, k)];
                let score = v[4] * p;
                if !(score > threshold) {
                    continue;
                }
                let cy = (row as f64 + v[1]) / s * h;
                let cx = (col as f64 + v[0]) / s * w;
                let (bh, bw) = (v[3] * h, v[2] * w);
                let clip = |lo: f64, hi: f64, n: f64| {
                    let lo = lo.round().clamp(0.0, n - 1.0);
                    let hi = hi.round().clamp(lo + 1.0, n);
                    (lo as usize, (hi - lo) as usize)
                };
                let (y0, eh) = clip(cy - bh / 2.0, cy + bh / 2.0, h);
                let (x0, ew) = clip(cx - bw / 2.0, cx + bw / 2.0, w);
                if let Ok(bbox) = BoxAnnotation::new(vec![y0, x0], vec![eh, ew]) {
                    out.push(ScoredBox {
                        bbox,
                        score: score.min(1.0),
                        class,
                    });
                }
            }
        }
    }
    nms(out, nms_iou)
}
