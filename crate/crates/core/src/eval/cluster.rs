use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{invalid, Result};
use crate::objectives::PerceptualExtractor;
use crate::tensor::Tensor;

/// Cluster count used at desk scale; the published workflow used 200.
pub const DESK_CLUSTERS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Inertia after seeding and after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

impl KMeans {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("history is never empty")
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let assignments = points
        .iter()
        .map(|p| {
            let (best, d) = centroids
                .iter()
                .enumerate()
                .map(|(j, c)| (j, dist2(p, c)))
                .fold((0, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b });
            inertia += d;
            best
        })
        .collect();
    (assignments, inertia)
}

/// k-means++ seeding followed by Lloyd iterations until assignments settle
/// or `max_iter` is reached. Empty clusters keep their previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(invalid(format!("k = {k} must be between 1 and the point count {}", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(invalid("k-means points must share a dimensionality"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = d.len() - 1;
            for (i, &w) in d.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            // every point coincides with a centroid already
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (di, p) in d.iter_mut().zip(points) {
            *di = di.min(dist2(p, centroids.last().unwrap()));
        }
    }
    let (mut assignments, inertia) = assign(points, &centroids);
    let mut inertia_history = vec![inertia];
    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let (next, inertia) = assign(points, &centroids);
        inertia_history.push(inertia);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok(KMeans {
        centroids,
        assignments,
        inertia_history,
    })
}

/// Flattened encoder features of `(C, H, W)` images.
pub fn encode_images(images: &[Tensor<f32>], encoder: &PerceptualExtractor) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|img| {
            let mut shape = vec![1];
            shape.extend_from_slice(img.shape());
            let mut g = Graph::<f64>::new();
            let x = g.constant(img.reshape(shape)?.cast());
            let f = encoder.features(&mut g, x)?;
            Ok(g.value(f).data().to_vec())
        })
        .collect()
}

/// Partition of an image set into feature clusters. Which clusters to drop
/// is decided by the caller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterPartition {
    pub assignments: Vec<usize>,
    pub clusters: Vec<Vec<usize>>,
    pub inertia_history: Vec<f64>,
}

pub fn cluster_discard(
    images: &[Tensor<f32>],
    encoder: &dyn Fn(&[Tensor<f32>]) -> Result<Vec<Vec<f64>>>,
    k: usize,
    seed: u64,
) -> Result<ClusterPartition> {
    if k > images.len() {
        return Err(invalid(format!("cannot form {k} clusters from {} images", images.len())));
    }
    let features = encoder(images)?;
    let km = kmeans(&features, k, seed, 300)?;
    let mut clusters = vec![Vec::new(); k];
    for (i, &a) in km.assignments.iter().enumerate() {
        clusters[a].push(i);
    }
    Ok(ClusterPartition {
        assignments: km.assignments,
        clusters,
        inertia_history: km.inertia_history,
    })
}

/// Indices kept after dropping the given clusters.
pub fn apply_discard(partition: &ClusterPartition, discard: &[usize]) -> Vec<usize> {
    (0..partition.assignments.len())
        .filter(|&i| !discard.contains(&partition.assignments[i]))
        .collect()
}
