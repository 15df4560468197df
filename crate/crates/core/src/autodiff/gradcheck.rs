//! Central finite-difference verification of analytic gradients (64-bit).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::composite::BatchNormSpec;

use super::{Graph, NodeId};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Perturbation used for central differences.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

/// Relative error with a small floor on the denominator so that two
/// vanishing gradients are not compared by their rounding noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-7);
    (analytic - numeric).abs() / denom
}

/// Compare the gradient of the scalar built by `build` against central
/// differences for every element of every named input.
///
/// `training` selects the graph mode; graphs that draw random numbers
/// (active dropout) are rejected because their finite differences are
/// meaningless.
pub fn grad_check<F>(
    build: F,
    inputs: &[(&str, Tensor<f64>)],
    tolerance: f64,
    training: bool,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &BTreeMap<String, NodeId>) -> Result<NodeId>,
{
    let new_graph = || if training { Graph::<f64>::training(0) } else { Graph::<f64>::new() };
    let eval = |values: &[(&str, Tensor<f64>)]| -> Result<f64> {
        let mut g = new_graph();
        let named = values
            .iter()
            .map(|(n, t)| (n.to_string(), g.constant(t.clone())))
            .collect();
        let loss = build(&mut g, &named)?;
        Ok(g.value(loss).item())
    };

    let mut g = new_graph();
    let named: BTreeMap<String, NodeId> = inputs
        .iter()
        .map(|(n, t)| (n.to_string(), g.variable(t.clone())))
        .collect();
    let loss = build(&mut g, &named)?;
    if g.is_stochastic() {
        return Err(contract(
            "gradient check requires a deterministic graph: dropout is active; build the graph in inference mode or with rate 0",
        ));
    }
    let grads = g.backward(loss)?;

    let mut entries = Vec::new();
    let mut work: Vec<(&str, Tensor<f64>)> = inputs.iter().map(|(n, t)| (*n, t.clone())).collect();
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads
            .get(named[*name])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for i in 0..t.len() {
            let orig = t[i];
            work[k].1[i] = orig + FD_STEP;
            let up = eval(&work)?;
            work[k].1[i] = orig - FD_STEP;
            let down = eval(&work)?;
            work[k].1[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            max_rel = max_rel.max(relative_error(analytic[i], numeric));
            max_abs = max_abs.max((analytic[i] - numeric).abs());
        }
        entries.push(GradCheckEntry {
            name: name.to_string(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    let passed = entries.iter().all(|e| e.max_rel_error < tolerance);
    Ok(GradCheckReport {
        entries,
        tolerance,
        passed,
    })
}

/// One entry of [`layer_suite`].
#[derive(Clone, Debug, Serialize)]
pub struct LayerCheck {
    pub kind: &'static str,
    pub input_shape: Vec<usize>,
    pub report: GradCheckReport,
}

type Build = Box<dyn Fn(&mut Graph<f64>, &BTreeMap<String, NodeId>) -> Result<NodeId>>;

/// Values in `±[0.1, 1]`, away from the kinks of relu/abs.
fn away_from_zero(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// `sum(y * w)` with fixed, non-uniform weights so every output matters.
fn weighted_sum(g: &mut Graph<f64>, y: NodeId) -> Result<NodeId> {
    let w = Tensor::from_fn(g.shape(y).to_vec(), |i| (i as f64 * 0.37 + 0.1).sin());
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Finite-difference check of every op kind on seeded random shapes
/// (spatial extents at most 8).
pub fn layer_suite(seed: u64, tolerance: f64) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let n = r.random_range(2..=3);
    let c = r.random_range(1..=3);
    let o = r.random_range(1..=3);
    let hw = [r.random_range(3..=8), r.random_range(3..=8)];
    let d3 = [r.random_range(2..=5), r.random_range(2..=5), r.random_range(2..=5)];
    let img = vec![n, c, hw[0], hw[1]];
    let even = vec![n, c, 2 * r.random_range(1..=4), 2 * r.random_range(1..=4)];
    let feat = r.random_range(2..=8);

    let unary = |f: fn(&mut Graph<f64>, NodeId) -> Result<NodeId>| -> Build {
        Box::new(move |g, v| {
            let y = f(g, v["x"])?;
            weighted_sum(g, y)
        })
    };
    let mut cases: Vec<(&'static str, bool, Vec<(&'static str, Tensor<f64>)>, Build)> = Vec::new();
    cases.push((
        "conv2d",
        false,
        vec![("x", away_from_zero(img.clone(), r)), ("w", away_from_zero(vec![o, c, 3, 3], r))],
        Box::new(|g, v| {
            let y = g.conv(v["x"], v["w"], 1, 1)?;
            weighted_sum(g, y)
        }),
    ));
    cases.push((
        "conv2d-stride2",
        false,
        vec![("x", away_from_zero(even.clone(), r)), ("w", away_from_zero(vec![o, c, 3, 3], r))],
        Box::new(|g, v| {
            let y = g.conv(v["x"], v["w"], 2, 1)?;
            weighted_sum(g, y)
        }),
    ));
    cases.push((
        "conv3d",
        false,
        vec![
            ("x", away_from_zero(vec![1, c, d3[0], d3[1], d3[2]], r)),
            ("w", away_from_zero(vec![o, c, 3, 3, 3], r)),
        ],
        Box::new(|g, v| {
            let y = g.conv(v["x"], v["w"], 1, 1)?;
            weighted_sum(g, y)
        }),
    ));
    cases.push((
        "transposed-conv",
        false,
        vec![("x", away_from_zero(img.clone(), r)), ("w", away_from_zero(vec![c, o, 4, 4], r))],
        Box::new(|g, v| {
            let y = g.conv_transpose(v["x"], v["w"], 2, 1)?;
            weighted_sum(g, y)
        }),
    ));
    cases.push((
        "nearest-upsample",
        false,
        vec![("x", away_from_zero(img.clone(), r))],
        Box::new(|g, v| {
            let y = g.upsample(v["x"], 2)?;
            weighted_sum(g, y)
        }),
    ));
    cases.push((
        "average-downsample",
        false,
        vec![("x", away_from_zero(even.clone(), r))],
        Box::new(|g, v| {
            let y = g.avg_downsample(v["x"], 2)?;
            weighted_sum(g, y)
        }),
    ));
    cases.push((
        "dense",
        false,
        vec![
            ("x", away_from_zero(vec![n, feat], r)),
            ("w", away_from_zero(vec![o, feat], r)),
            ("b", away_from_zero(vec![o], r)),
        ],
        Box::new(|g, v| {
            let y = g.dense(v["x"], v["w"], Some(v["b"]))?;
            weighted_sum(g, y)
        }),
    ));
    for training in [true, false] {
        let running = (
            Tensor::from_fn(vec![c], |i| 0.1 * i as f32),
            Tensor::from_fn(vec![c], |i| 1.0 + 0.5 * i as f32),
        );
        cases.push((
            if training { "batch-norm-train" } else { "batch-norm-eval" },
            training,
            vec![
                ("x", away_from_zero(img.clone(), r)),
                ("gamma", away_from_zero(vec![c], r)),
                ("beta", away_from_zero(vec![c], r)),
            ],
            Box::new(move |g, v| {
                let y = g.batch_norm(v["x"], v["gamma"], v["beta"], (&running.0, &running.1), &BatchNormSpec::new("bn"))?;
                weighted_sum(g, y)
            }),
        ));
    }
    cases.push((
        "pixelwise-feature-norm",
        false,
        vec![("x", away_from_zero(img.clone(), r))],
        Box::new(|g, v| {
            let y = g.pixel_norm(v["x"], 1e-8)?;
            weighted_sum(g, y)
        }),
    ));
    cases.push((
        "minibatch-stddev",
        false,
        vec![("x", away_from_zero(img.clone(), r))],
        Box::new(|g, v| {
            let y = g.minibatch_stddev(v["x"])?;
            weighted_sum(g, y)
        }),
    ));
    cases.push(("relu", false, vec![("x", away_from_zero(img.clone(), r))], unary(|g, x| g.relu(x))));
    cases.push(("leaky-relu", false, vec![("x", away_from_zero(img.clone(), r))], unary(|g, x| g.leaky_relu(x, 0.2))));
    cases.push(("elu", false, vec![("x", away_from_zero(img.clone(), r))], unary(|g, x| g.elu(x))));
    cases.push(("tanh", false, vec![("x", away_from_zero(img.clone(), r))], unary(|g, x| g.tanh(x))));
    cases.push(("sigmoid", false, vec![("x", away_from_zero(img.clone(), r))], unary(|g, x| g.sigmoid(x))));
    cases.push(("dropout-eval", false, vec![("x", away_from_zero(img.clone(), r))], unary(|g, x| g.dropout(x, 0.5))));
    cases.push(("l1", false, vec![("x", away_from_zero(img.clone(), r))], Box::new(|g, v| g.l1(v["x"]))));
    cases.push((
        "l2-norm",
        false,
        vec![("x", away_from_zero(img.clone(), r))],
        Box::new(|g, v| {
            let y = g.l2_norm_per_sample(v["x"], 1e-12)?;
            weighted_sum(g, y)
        }),
    ));
    cases.push(("mean", false, vec![("x", away_from_zero(img.clone(), r))], Box::new(|g, v| {
        let y = g.square(v["x"])?;
        g.mean(y)
    })));
    cases.push(("sum", false, vec![("x", away_from_zero(img.clone(), r))], Box::new(|g, v| {
        let y = g.square(v["x"])?;
        g.sum(y)
    })));
    for (kind, f) in [
        ("add", Graph::<f64>::add as fn(&mut Graph<f64>, NodeId, NodeId) -> Result<NodeId>),
        ("mul", Graph::<f64>::mul),
    ] {
        cases.push((
            kind,
            false,
            vec![("a", away_from_zero(img.clone(), r)), ("b", away_from_zero(img.clone(), r))],
            Box::new(move |g, v| {
                let y = f(g, v["a"], v["b"])?;
                weighted_sum(g, y)
            }),
        ));
    }
    cases.push((
        "concat",
        false,
        vec![("a", away_from_zero(img.clone(), r)), ("b", away_from_zero(vec![n, o, hw[0], hw[1]], r))],
        Box::new(|g, v| {
            let y = g.concat(&[v["a"], v["b"]], 1)?;
            weighted_sum(g, y)
        }),
    ));
    cases.push((
        "conv-net-3-layer",
        false,
        vec![
            ("x", away_from_zero(vec![n, 1, 8, 8], r)),
            ("w1", away_from_zero(vec![4, 1, 3, 3], r).map(|v| v * 0.5)),
            ("w2", away_from_zero(vec![4, 4, 3, 3], r).map(|v| v * 0.3)),
            ("w3", away_from_zero(vec![2, 4, 3, 3], r).map(|v| v * 0.3)),
        ],
        Box::new(|g, v| {
            let h = g.conv(v["x"], v["w1"], 1, 1)?;
            let h = g.tanh(h)?;
            let h = g.conv(h, v["w2"], 2, 1)?;
            let h = g.tanh(h)?;
            let h = g.conv(h, v["w3"], 1, 1)?;
            weighted_sum(g, h)
        }),
    ));

    cases
        .into_iter()
        .map(|(kind, training, inputs, build)| {
            let input_shape = inputs[0].1.shape().to_vec();
            let named: Vec<(&str, Tensor<f64>)> = inputs;
            let report = grad_check(build, &named, tolerance, training)?;
            Ok(LayerCheck { kind, input_shape, report })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_matches_exactly() {
        let w = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            |g, v| {
                let p = g.mul(v["w"], v["x"])?;
                g.sum(p)
            },
            &[("w", w), ("x", x)],
            1e-4,
            false,
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error() < 1e-9, "{}", report.max_rel_error());
    }

    #[test]
    fn tanh_chain_depth_five() {
        let x = Tensor::from_fn(vec![2, 4], |i| (i as f64 * 0.71).sin());
        let report = grad_check(
            |g, v| {
                let mut h = v["x"];
                for _ in 0..5 {
                    let s = g.scale(h, 1.7)?;
                    h = g.tanh(s)?;
                }
                g.sum(h)
            },
            &[("x", x)],
            1e-4,
            false,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn active_dropout_is_rejected() {
        let x = Tensor::from_fn(vec![4], |i| i as f64);
        let err = grad_check(
            |g, v| {
                let d = g.dropout(v["x"], 0.5)?;
                g.sum(d)
            },
            &[("x", x)],
            1e-4,
            true,
        )
        .unwrap_err();
        assert!(err.to_string().contains("deterministic"));
    }
}
