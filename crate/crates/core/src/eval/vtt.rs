use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Real,
    Synthetic,
}

/// Labels of one image: real/synthetic, and optionally tumor/non-tumor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseLabels {
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tumor: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Response {
    pub truth: ResponseLabels,
    pub answer: ResponseLabels,
}

/// Confusion cells of one binary question. Rates are percentages of each
/// true class; `counts[truth][answer]` with index 0 for the first label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionCells {
    pub labels: [String; 2],
    pub counts: [[u64; 2]; 2],
    pub accuracy: f64,
    pub rates: [[f64; 2]; 2],
}

impl QuestionCells {
    fn from_pairs(labels: [&str; 2], pairs: impl Iterator<Item = (usize, usize)>) -> Self {
        let mut counts = [[0u64; 2]; 2];
        for (t, a) in pairs {
            counts[t][a] += 1;
        }
        let total: u64 = counts.iter().flatten().sum();
        let pct = |n: u64, d: u64| if d == 0 { 0.0 } else { 100.0 * n as f64 / d as f64 };
        let row = |t: usize| counts[t][0] + counts[t][1];
        let rates = [
            [pct(counts[0][0], row(0)), pct(counts[0][1], row(0))],
            [pct(counts[1][0], row(1)), pct(counts[1][1], row(1))],
        ];
        Self {
            labels: labels.map(String::from),
            counts,
            accuracy: pct(counts[0][0] + counts[1][1], total),
            rates,
        }
    }
}

/// Table-style result of a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub responses: usize,
    pub complete: bool,
    pub accuracy: f64,
    pub real_as_real: f64,
    pub real_as_synthetic: f64,
    pub synthetic_as_real: f64,
    pub synthetic_as_synthetic: f64,
    pub origin: QuestionCells,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tumor: Option<QuestionCells>,
}

pub fn vtt_score(responses: &[Response]) -> Result<SessionReport> {
    if responses.is_empty() {
        return Err(invalid("cannot score an empty response set"));
    }
    let idx = |o: Origin| if o == Origin::Real { 0 } else { 1 };
    let origin = QuestionCells::from_pairs(["real", "synthetic"], responses.iter().map(|r| (idx(r.truth.origin), idx(r.answer.origin))));
    let tumor_pairs: Vec<(usize, usize)> = responses
        .iter()
        .filter_map(|r| Some((usize::from(!r.truth.tumor?), usize::from(!r.answer.tumor?))))
        .collect();
    let tumor = (!tumor_pairs.is_empty()).then(|| QuestionCells::from_pairs(["tumor", "non-tumor"], tumor_pairs.into_iter()));
    Ok(SessionReport {
        responses: responses.len(),
        complete: true,
        accuracy: origin.accuracy,
        real_as_real: origin.rates[0][0],
        real_as_synthetic: origin.rates[0][1],
        synthetic_as_real: origin.rates[1][0],
        synthetic_as_synthetic: origin.rates[1][1],
        origin,
        tumor,
    })
}
