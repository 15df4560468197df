use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            perplexity: 100.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    pub embedding: Vec<[f64; 2]>,
    /// Symmetrised joint probabilities, row-major `n x n`.
    pub joint: Vec<f64>,
    pub kl_initial: f64,
    pub kl_final: f64,
    /// Largest `|H_i - log2(perplexity)|` over rows, in bits.
    pub calibration_error: f64,
}

const ENTROPY_TOL: f64 = 1e-7;
const MAX_BISECTIONS: usize = 200;

/// Shannon entropy of a distribution, in bits.
pub fn row_entropy_bits(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.log2()).sum::<f64>()
}

/// Conditional distributions `p(j | i)` whose entropies match
/// `log2(perplexity)`, by bisection on each row's precision. `dist2` is the
/// `n x n` squared-distance matrix. Returns the rows and the worst error.
pub fn calibrate_rows(dist2: &[f64], n: usize, perplexity: f64) -> Result<(Vec<f64>, f64)> {
    if dist2.len() != n * n {
        return Err(invalid(format!("distance matrix has {} entries for {n} points", dist2.len())));
    }
    if n < 2 || !(perplexity > 0.0 && perplexity < n as f64) {
        return Err(invalid(format!("perplexity {perplexity} must be positive and below the point count {n}")));
    }
    let target = perplexity.log2();
    let mut p = vec![0.0; n * n];
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let row = &dist2[i * n..(i + 1) * n];
        let dmin = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::INFINITY, f64::min);
        let dmean = (0..n).filter(|&j| j != i).map(|j| row[j] - dmin).sum::<f64>() / (n - 1) as f64;
        let eval = |beta: f64, out: &mut [f64]| -> f64 {
            let mut sum = 0.0;
            for j in 0..n {
                out[j] = if j == i { 0.0 } else { (-beta * (row[j] - dmin)).exp() };
                sum += out[j];
            }
            for v in out.iter_mut() {
                *v /= sum;
            }
            row_entropy_bits(out)
        };
        let out = &mut p[i * n..(i + 1) * n];
        let mut beta = if dmean > 0.0 { 1.0 / dmean } else { 1.0 };
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut h = eval(beta, out);
        for _ in 0..MAX_BISECTIONS {
            if (h - target).abs() < ENTROPY_TOL {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
            h = eval(beta, out);
        }
        worst = worst.max((h - target).abs());
    }
    Ok((p, worst))
}

fn student_q(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
            let v = 1.0 / (1.0 + d);
            num[i * n + j] = v;
            num[j * n + i] = v;
            z += 2.0 * v;
        }
    }
    (num, z)
}

/// `KL(P || Q)` for an embedding.
pub fn kl_divergence(joint: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let (num, z) = student_q(y);
    let mut kl = 0.0;
    for i in 0..n * n {
        if joint[i] > 0.0 {
            let q = (num[i] / z).max(1e-300);
            kl += joint[i] * (joint[i] / q).ln();
        }
    }
    kl
}

/// Exact t-SNE to two dimensions. Inputs are first min-max scaled to
/// `[0, 1]` over all values.
pub fn tsne(points: &[Vec<f64>], cfg: &EmbeddingConfig, seed: u64) -> Result<TsneResult> {
    let n = points.len();
    if n < 2 || !(cfg.perplexity < n as f64) {
        return Err(invalid(format!("t-SNE needs perplexity {} below the point count {n}", cfg.perplexity)));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(invalid("t-SNE points must share a dimensionality"));
    }
    let (mn, mx) = points
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let scale = if mx > mn { 1.0 / (mx - mn) } else { 0.0 };
    let x: Vec<Vec<f64>> = points.iter().map(|p| p.iter().map(|v| (v - mn) * scale).collect()).collect();

    let mut dist2 = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b).powi(2)).sum();
            dist2[i * n + j] = d;
            dist2[j * n + i] = d;
        }
    }
    let (cond, calibration_error) = calibrate_rows(&dist2, n, cfg.perplexity)?;
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
        joint[i * n + i] = 0.0;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 1e-2).expect("valid sd");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let kl_initial = kl_divergence(&joint, &y);

    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    for it in 0..cfg.iterations {
        let exaggeration = if it < cfg.exaggeration_iterations { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iterations { cfg.initial_momentum } else { cfg.final_momentum };
        let (num, z) = student_q(&y);
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = (exaggeration * joint[i * n + j] - num[i * n + j] / z) * num[i * n + j];
                g[0] += 4.0 * w * (y[i][0] - y[j][0]);
                g[1] += 4.0 * w * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                gains[i][k] = if (g[k] > 0.0) != (update[i][k] > 0.0) { gains[i][k] + 0.2 } else { (gains[i][k] * 0.8).max(0.01) };
                update[i][k] = momentum * update[i][k] - cfg.learning_rate * gains[i][k] * g[k];
            }
        }
        for i in 0..n {
            y[i][0] += update[i][0];
            y[i][1] += update[i][1];
        }
        let mean = y.iter().fold([0.0, 0.0], |m, p| [m[0] + p[0] / n as f64, m[1] + p[1] / n as f64]);
        for p in &mut y {
            p[0] -= mean[0];
            p[1] -= mean[1];
        }
    }
    let kl_final = kl_divergence(&joint, &y);
    Ok(TsneResult {
        embedding: y,
        joint,
        kl_initial,
        kl_final,
        calibration_error,
    })
}
