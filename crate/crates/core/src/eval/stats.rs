use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{invalid, Result};

/// Paired outcomes of two classifiers on the same cases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedOutcomes {
    /// Both correct.
    pub a: u64,
    /// Only the first correct.
    pub b: u64,
    /// Only the second correct.
    pub c: u64,
    /// Both wrong.
    pub d: u64,
}

impl PairedOutcomes {
    /// Tally paired per-case correctness.
    pub fn from_correctness(first: &[bool], second: &[bool]) -> Result<Self> {
        if first.len() != second.len() {
            return Err(invalid(format!("paired outcomes need equal lengths, got {} and {}", first.len(), second.len())));
        }
        let mut p = Self::default();
        for (&x, &y) in first.iter().zip(second) {
            match (x, y) {
                (true, true) => p.a += 1,
                (true, false) => p.b += 1,
                (false, true) => p.c += 1,
                (false, false) => p.d += 1,
            }
        }
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum McnemarMethod {
    /// `(b - c)^2 / (b + c)` against chi-square with one degree of freedom,
    /// without continuity correction.
    #[default]
    ChiSquare,
    /// Two-sided exact binomial test on the discordant pairs.
    ExactBinomial,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McnemarResult {
    pub statistic: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
    /// No discordant pairs; the p-value is 1 by convention.
    pub degenerate: bool,
}

/// Upper tail of chi-square with one degree of freedom.
pub fn chi2_sf_1(x: f64) -> f64 {
    ChiSquared::new(1.0).expect("one degree of freedom").sf(x)
}

fn exact_binomial(b: u64, c: u64) -> f64 {
    let n = b + c;
    let k = b.min(c);
    // log-space binomial coefficients keep large n finite
    let mut log_c = 0.0f64;
    let mut tail = 0.0f64;
    for i in 0..=k {
        if i > 0 {
            log_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (log_c - n as f64 * std::f64::consts::LN_2).exp();
    }
    (2.0 * tail).min(1.0)
}

/// Holm step-down adjustment: sort ascending, scale the `i`-th smallest by
/// `m - i`, enforce monotonicity, cap at 1.
pub fn holm_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        running = running.max(((m - rank) as f64 * p[i]).min(1.0));
        out[i] = running;
    }
    out
}

/// McNemar's test on each comparison, Holm-adjusted across the family.
pub fn mcnemar_holm(pairs: &[PairedOutcomes], method: McnemarMethod) -> Vec<McnemarResult> {
    let raw: Vec<(f64, f64, bool)> = pairs
        .iter()
        .map(|p| {
            let n = p.b + p.c;
            if n == 0 {
                return (0.0, 1.0, true);
            }
            let stat = (p.b as f64 - p.c as f64).powi(2) / n as f64;
            let pv = match method {
                McnemarMethod::ChiSquare => chi2_sf_1(stat),
                McnemarMethod::ExactBinomial => exact_binomial(p.b, p.c),
            };
            (stat, pv, false)
        })
        .collect();
    let adjusted = holm_adjust(&raw.iter().map(|r| r.1).collect::<Vec<_>>());
    raw.iter()
        .zip(adjusted)
        .map(|(&(statistic, p_raw, degenerate), p_adjusted)| McnemarResult {
            statistic,
            p_raw,
            p_adjusted,
            degenerate,
        })
        .collect()
}
