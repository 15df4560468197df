//! Evaluation: box overlap, detection matching, FROC/CPM, paired tests,
//! Visual Turing Test scoring, t-SNE and feature clustering.

mod cluster;
mod stats;
mod tsne;
mod vtt;

pub use cluster::{DESK_CLUSTERS, apply_discard, cluster_discard, encode_images, kmeans, ClusterPartition, KMeans};
pub use stats::{chi2_sf_1, holm_adjust, mcnemar_holm, McnemarMethod, McnemarResult, PairedOutcomes};
pub use tsne::{calibrate_rows, kl_divergence, row_entropy_bits, tsne, EmbeddingConfig, TsneResult};
pub use vtt::{vtt_score, Origin, QuestionCells, Response, ResponseLabels, SessionReport};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::conditioning::{AnnotationRecord, BoxAnnotation};
use crate::error::{invalid, Result};

/// Intersection over union of two boxes of the same dimensionality.
pub fn iou(a: &BoxAnnotation, b: &BoxAnnotation) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(invalid(format!("cannot compare a {}-D box with a {}-D box", a.dims(), b.dims())));
    }
    if a.extent.contains(&0) || b.extent.contains(&0) {
        return Err(invalid(format!("zero-volume box: {:?} / {:?}", a.extent, b.extent)));
    }
    let mut inter = 1usize;
    for k in 0..a.dims() {
        let lo = a.origin[k].max(b.origin[k]);
        let hi = (a.origin[k] + a.extent[k]).min(b.origin[k] + b.extent[k]);
        inter *= hi.saturating_sub(lo);
    }
    let union = a.volume() + b.volume() - inter;
    Ok(inter as f64 / union as f64)
}

/// One line of a prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BoxAnnotation,
    pub score: f64,
}

/// Predictions and ground truth of one slice (2-D) or scan (3-D).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnitDetections {
    pub id: String,
    pub predictions: Vec<(BoxAnnotation, f64)>,
    pub truth: Vec<BoxAnnotation>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub units: Vec<UnitDetections>,
}

impl DetectionSet {
    /// Group prediction and annotation records by image id. Every id seen in
    /// either list becomes a unit.
    pub fn from_records(preds: &[Prediction], truth: &[AnnotationRecord]) -> Result<Self> {
        let mut units: BTreeMap<String, UnitDetections> = BTreeMap::new();
        let unit = |units: &mut BTreeMap<String, UnitDetections>, id: &str| {
            units.entry(id.to_string()).or_insert_with(|| UnitDetections {
                id: id.to_string(),
                ..Default::default()
            });
        };
        for r in truth {
            unit(&mut units, &r.scan_id);
            units.get_mut(&r.scan_id).unwrap().truth.push(r.to_box()?);
        }
        for p in preds {
            check_score(p.score)?;
            unit(&mut units, &p.image_id);
            units.get_mut(&p.image_id).unwrap().predictions.push((p.bbox.clone(), p.score));
        }
        Ok(Self {
            units: units.into_values().collect(),
        })
    }

    pub fn truth_count(&self) -> usize {
        self.units.iter().map(|u| u.truth.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for u in &self.units {
            for (b, s) in &u.predictions {
                check_score(*s)?;
                if b.extent.contains(&0) {
                    return Err(invalid(format!("zero-volume prediction in unit {}", u.id)));
                }
            }
        }
        Ok(())
    }
}

fn check_score(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(invalid(format!("scores must lie in [0, 1], got {s}")));
    }
    Ok(())
}

/// Greedy matching inside one unit: predictions in descending score order
/// (ties by input order) each take the unmatched ground truth with the
/// highest IoU at or above the threshold. Returns, per prediction in that
/// order, its score and the matched truth index.
fn greedy_match(u: &UnitDetections, iou_threshold: f64) -> Result<Vec<(f64, Option<usize>)>> {
    let mut order: Vec<usize> = (0..u.predictions.len()).collect();
    order.sort_by(|&a, &b| u.predictions[b].1.total_cmp(&u.predictions[a].1));
    let mut taken = vec![false; u.truth.len()];
    let mut out = Vec::with_capacity(order.len());
    for i in order {
        let (pb, score) = &u.predictions[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in u.truth.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let o = iou(pb, t)?;
            if o >= iou_threshold && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        out.push((*score, best.map(|b| b.0)));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub truth: usize,
    pub units: usize,
    pub sensitivity: f64,
    pub fps_per_unit: f64,
}

/// Sensitivity and false positives per unit for predictions scoring at or
/// above `score_threshold`. With no ground truth at all, sensitivity is 0.
pub fn match_and_count(dset: &DetectionSet, iou_threshold: f64, score_threshold: f64) -> Result<MatchCounts> {
    let (mut tp, mut fp) = (0, 0);
    for u in &dset.units {
        let kept = UnitDetections {
            id: u.id.clone(),
            predictions: u.predictions.iter().filter(|p| p.1 >= score_threshold).cloned().collect(),
            truth: u.truth.clone(),
        };
        for (_, m) in greedy_match(&kept, iou_threshold)? {
            if m.is_some() {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let truth = dset.truth_count();
    let units = dset.units.len();
    Ok(MatchCounts {
        true_positives: tp,
        false_positives: fp,
        truth,
        units,
        sensitivity: if truth == 0 { 0.0 } else { tp as f64 / truth as f64 },
        fps_per_unit: if units == 0 { 0.0 } else { fp as f64 / units as f64 },
    })
}

/// One operating point, kept as counts so that averages stay exact.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub hits: usize,
    pub false_positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    pub truth: usize,
    pub units: usize,
    /// Points by descending threshold, so both rates are non-decreasing.
    pub points: Vec<FrocPoint>,
}

impl FrocCurve {
    pub fn sensitivity(&self, p: &FrocPoint) -> f64 {
        p.hits as f64 / self.truth as f64
    }

    pub fn fp_rate(&self, p: &FrocPoint) -> f64 {
        p.false_positives as f64 / self.units as f64
    }

    /// `(fp_rate, sensitivity)` pairs.
    pub fn rates(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (self.fp_rate(p), self.sensitivity(p))).collect()
    }

    /// Build a curve from hit counts at given false-positive counts.
    pub fn from_counts(truth: usize, units: usize, counts: &[(usize, usize)]) -> Result<Self> {
        if truth == 0 || units == 0 {
            return Err(invalid("a FROC curve needs ground truth and at least one unit"));
        }
        let points = counts
            .iter()
            .enumerate()
            .map(|(i, &(false_positives, hits))| FrocPoint {
                threshold: 1.0 - i as f64 / counts.len().max(1) as f64,
                hits,
                false_positives,
            })
            .collect::<Vec<_>>();
        let monotone = points.windows(2).all(|w| w[1].hits >= w[0].hits && w[1].false_positives >= w[0].false_positives);
        if !monotone || points.iter().any(|p| p.hits > truth) {
            return Err(invalid("FROC counts must be non-decreasing and hits bounded by the truth count"));
        }
        Ok(Self { truth, units, points })
    }
}

/// FP rates (per unit) at which CPM samples the curve.
pub const CPM_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// Sweep the score threshold over every distinct score. `counts` selects
/// which ground-truth boxes contribute to sensitivity; predictions matched
/// to any ground truth are never false positives.
fn froc_filtered(dset: &DetectionSet, iou_threshold: f64, counts: impl Fn(&BoxAnnotation) -> bool) -> Result<FrocCurve> {
    dset.validate()?;
    let truth: usize = dset.units.iter().flat_map(|u| &u.truth).filter(|b| counts(b)).count();
    if dset.units.is_empty() || truth == 0 {
        return Err(invalid("FROC needs a non-empty detection set with ground truth"));
    }
    // greedy matching is score-ordered, so each threshold sees a prefix
    let mut events: Vec<(f64, bool, bool)> = Vec::new();
    for u in &dset.units {
        for (score, m) in greedy_match(u, iou_threshold)? {
            events.push((score, m.is_some(), m.is_some_and(|j| counts(&u.truth[j]))));
        }
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut hits, mut fps) = (0, 0);
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            let (_, matched, counted) = events[i];
            if counted {
                hits += 1;
            }
            if !matched {
                fps += 1;
            }
            i += 1;
        }
        points.push(FrocPoint {
            threshold: t,
            hits,
            false_positives: fps,
        });
    }
    Ok(FrocCurve {
        truth,
        units: dset.units.len(),
        points,
    })
}

pub fn froc(dset: &DetectionSet, iou_threshold: f64) -> Result<FrocCurve> {
    froc_filtered(dset, iou_threshold, |_| true)
}

/// Mean sensitivity at the seven CPM rates, taking at each rate the
/// operating point with the largest FP rate not above it (0 if none).
pub fn cpm(curve: &FrocCurve) -> f64 {
    let mut total = 0usize;
    for r in CPM_RATES {
        let limit = r * curve.units as f64;
        total += curve
            .points
            .iter()
            .filter(|p| p.false_positives as f64 <= limit)
            .map(|p| p.hits)
            .max()
            .unwrap_or(0);
    }
    total as f64 / (CPM_RATES.len() * curve.truth) as f64
}

/// CPM overall and per size and attenuation class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scoreboard {
    pub overall: f64,
    pub by_size: BTreeMap<String, f64>,
    pub by_attenuation: BTreeMap<String, f64>,
    pub sensitivity_at_rates: Vec<(f64, f64)>,
}

pub fn scoreboard(dset: &DetectionSet, iou_threshold: f64) -> Result<Scoreboard> {
    let curve = froc(dset, iou_threshold)?;
    let mut by_size = BTreeMap::new();
    for s in crate::conditioning::SizeClass::ALL {
        if let Ok(c) = froc_filtered(dset, iou_threshold, |b| b.size_class == Some(s)) {
            by_size.insert(s.to_string(), cpm(&c));
        }
    }
    let mut by_attenuation = BTreeMap::new();
    for a in crate::conditioning::Attenuation::ALL {
        if let Ok(c) = froc_filtered(dset, iou_threshold, |b| b.attenuation_class == Some(a)) {
            by_attenuation.insert(a.to_string(), cpm(&c));
        }
    }
    let sensitivity_at_rates = CPM_RATES
        .iter()
        .map(|&r| {
            let limit = r * curve.units as f64;
            let hits = curve.points.iter().filter(|p| p.false_positives as f64 <= limit).map(|p| p.hits).max().unwrap_or(0);
            (r, hits as f64 / curve.truth as f64)
        })
        .collect();
    Ok(Scoreboard {
        overall: cpm(&curve),
        by_size,
        by_attenuation,
        sensitivity_at_rates,
    })
}
