//! Python bindings: phantoms, masks, objectives, metrics, statistics,
//! t-SNE and the progressive trainer.
//!
//! Boxes cross the boundary as `((y, x), (h, w))` pairs and images as
//! nested lists of rows. Structured results come back as plain dicts.

use std::collections::BTreeMap;

use patholab_core::conditioning::{build_bbox_mask, BoxAnnotation};
use patholab_core::eval::{self, McnemarMethod, Origin, PairedOutcomes, Response, ResponseLabels};
use patholab_core::objectives::{self, McganWeights, MunitWeights};
use patholab_core::phantom::{generate_set, ClassMix};
use patholab_core::progressive::{ProgressiveConfig, ProgressiveTrainer, TrainingSample};
use patholab_core::Tensor;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

pub type PyBox = [[usize; 2]; 2];

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

pub fn to_box(b: PyBox) -> Result<BoxAnnotation, patholab_core::Error> {
    let [[y, x], [h, w]] = b;
    BoxAnnotation::new(vec![y, x], vec![h, w])
}

pub fn from_box(b: &BoxAnnotation) -> PyBox {
    [[b.origin[0], b.origin[1]], [b.extent[0], b.extent[1]]]
}

/// Rows of an `(H, W)` tensor.
pub fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    let w = *t.shape().last().unwrap_or(&1);
    t.data().chunks(w.max(1)).map(<[f32]>::to_vec).collect()
}

/// `(H, W)` tensor from rows of equal length.
pub fn image(rows: &[Vec<f32>]) -> Result<Tensor<f32>, patholab_core::Error> {
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(patholab_core::Error::InvalidArgument("image rows differ in length".into()));
    }
    Tensor::new(vec![rows.len(), w], rows.concat())
}

fn origin(label: &str) -> PyResult<Origin> {
    match label {
        "real" => Ok(Origin::Real),
        "synthetic" => Ok(Origin::Synthetic),
        other => Err(err(format!("origin must be 'real' or 'synthetic', got {other:?}"))),
    }
}

/// Phantom 2-D slices as dicts with `id`, `image` and `boxes`.
#[pyfunction]
#[pyo3(signature = (seed, count, size=32, min_lesions=1, max_lesions=2))]
fn generate_phantoms(py: Python<'_>, seed: u64, count: usize, size: usize, min_lesions: usize, max_lesions: usize) -> PyResult<Vec<Bound<'_, PyAny>>> {
    if min_lesions > max_lesions {
        return Err(err("min_lesions exceeds max_lesions"));
    }
    let scenes = generate_set(seed, count, 2, &[size, size], min_lesions..=max_lesions, ClassMix::default()).map_err(err)?;
    scenes
        .iter()
        .map(|s| {
            #[derive(Serialize)]
            struct Out {
                id: String,
                image: Vec<Vec<f32>>,
                boxes: Vec<PyBox>,
            }
            to_py(
                py,
                &Out {
                    id: s.id(),
                    image: rows(&s.image),
                    boxes: s.boxes.iter().map(from_box).collect(),
                },
            )
        })
        .collect()
}

/// Binary canvas with ones inside any box.
#[pyfunction]
fn bbox_mask(boxes: Vec<PyBox>, height: usize, width: usize) -> PyResult<Vec<Vec<f32>>> {
    let boxes = boxes.into_iter().map(to_box).collect::<Result<Vec<_>, _>>().map_err(err)?;
    let mask = build_bbox_mask(&boxes, [height, width]).map_err(err)?;
    Ok(rows(&mask.as_channel().reshape(vec![height, width]).map_err(err)?))
}

#[pyfunction]
fn iou(a: PyBox, b: PyBox) -> PyResult<f64> {
    eval::iou(&to_box(a).map_err(err)?, &to_box(b).map_err(err)?).map_err(err)
}

/// CPM of a FROC curve given as `(false_positives, hits)` counts.
#[pyfunction]
fn cpm_from_counts(truth: usize, units: usize, counts: Vec<(usize, usize)>) -> PyResult<f64> {
    Ok(eval::cpm(&eval::FrocCurve::from_counts(truth, units, &counts).map_err(err)?))
}

/// McNemar tests on `(a, b, c, d)` tables with Holm-adjusted p-values.
#[pyfunction]
#[pyo3(signature = (tables, exact=false))]
fn mcnemar_holm(py: Python<'_>, tables: Vec<(u64, u64, u64, u64)>, exact: bool) -> PyResult<Bound<'_, PyAny>> {
    let tables: Vec<PairedOutcomes> = tables.into_iter().map(|(a, b, c, d)| PairedOutcomes { a, b, c, d }).collect();
    let method = if exact { McnemarMethod::ExactBinomial } else { McnemarMethod::ChiSquare };
    to_py(py, &eval::mcnemar_holm(&tables, method))
}

#[pyfunction]
fn holm_adjust(p: Vec<f64>) -> Vec<f64> {
    eval::holm_adjust(&p)
}

/// Score `(truth, answer)` origin pairs, each `"real"` or `"synthetic"`.
#[pyfunction]
fn vtt_score<'py>(py: Python<'py>, pairs: Vec<(String, String)>) -> PyResult<Bound<'py, PyAny>> {
    let responses = pairs
        .iter()
        .map(|(t, a)| {
            Ok(Response {
                truth: ResponseLabels { origin: origin(t)?, tumor: None },
                answer: ResponseLabels { origin: origin(a)?, tumor: None },
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    to_py(py, &eval::vtt_score(&responses).map_err(err)?)
}

#[pyfunction]
fn minimax_value(d_real: Vec<f64>, d_fake: Vec<f64>) -> PyResult<f64> {
    let r = Tensor::new(vec![d_real.len()], d_real).map_err(err)?;
    let f = Tensor::new(vec![d_fake.len()], d_fake).map_err(err)?;
    Ok(objectives::minimax_value(&r, &f).value)
}

/// Weighted MUNIT total from named component losses.
#[pyfunction]
fn munit_total(terms: BTreeMap<String, f64>) -> PyResult<f64> {
    objectives::munit_total_loss(&terms, &MunitWeights::default()).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (context, nodule, l1, enable_l1=true))]
fn mcgan_objective(context: f64, nodule: f64, l1: f64, enable_l1: bool) -> PyResult<f64> {
    let w = McganWeights {
        enable_l1,
        ..McganWeights::default()
    };
    objectives::mcgan_objective(context, nodule, l1, &w).map_err(err)
}

/// Two-dimensional t-SNE embedding plus its diagnostics.
#[pyfunction]
#[pyo3(signature = (points, perplexity=30.0, iterations=1000, seed=0))]
fn tsne(py: Python<'_>, points: Vec<Vec<f64>>, perplexity: f64, iterations: usize, seed: u64) -> PyResult<Bound<'_, PyAny>> {
    let cfg = eval::EmbeddingConfig {
        perplexity,
        iterations,
        exaggeration_iterations: eval::EmbeddingConfig::default().exaggeration_iterations.min(iterations / 4),
        ..eval::EmbeddingConfig::default()
    };
    let r = eval::tsne(&points, &cfg, seed).map_err(err)?;
    #[derive(Serialize)]
    struct Out {
        embedding: Vec<[f64; 2]>,
        kl_initial: f64,
        kl_final: f64,
        calibration_error: f64,
    }
    to_py(
        py,
        &Out {
            embedding: r.embedding,
            kl_initial: r.kl_initial,
            kl_final: r.kl_final,
            calibration_error: r.calibration_error,
        },
    )
}

/// Progressive WGAN-GP trainer over square single-channel images.
#[pyclass(unsendable)]
pub struct Trainer {
    inner: ProgressiveTrainer,
    data: Vec<TrainingSample>,
    size: usize,
}

#[pymethods]
impl Trainer {
    /// `boxes`, one list per image, switches on box conditioning.
    #[new]
    #[pyo3(signature = (images, steps_per_stage, boxes=None, seed=0, batch=None))]
    fn new(images: Vec<Vec<Vec<f32>>>, steps_per_stage: u64, boxes: Option<Vec<Vec<PyBox>>>, seed: u64, batch: Option<usize>) -> PyResult<Self> {
        let size = images.first().map_or(0, Vec::len);
        if images.is_empty() || !size.is_power_of_two() || size < 4 {
            return Err(err("need at least one square image with a power-of-two side >= 4"));
        }
        if boxes.as_ref().is_some_and(|b| b.len() != images.len()) {
            return Err(err("boxes must hold one list per image"));
        }
        let mut cfg = if boxes.is_some() {
            ProgressiveConfig::cpggan(size, steps_per_stage)
        } else {
            ProgressiveConfig::pggan(size, steps_per_stage)
        };
        cfg.seed = seed;
        if let Some(b) = batch {
            cfg.batch = b;
        }
        let data = images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let t = image(img)?;
                if t.shape() != [size, size] {
                    return Err(patholab_core::Error::InvalidArgument(format!("image {i} is not {size}x{size}")));
                }
                let mask = match &boxes {
                    Some(b) => {
                        let bs = b[i].iter().map(|&x| to_box(x)).collect::<Result<Vec<_>, _>>()?;
                        Some(build_bbox_mask(&bs, [size, size])?.as_channel())
                    }
                    None => None,
                };
                Ok(TrainingSample {
                    image: t.reshape(vec![1, size, size])?,
                    mask,
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        let inner = ProgressiveTrainer::new(cfg, 1).map_err(err)?;
        Ok(Self { inner, data, size })
    }

    #[getter]
    fn total_steps(&self) -> u64 {
        self.inner.blueprint.schedule.total_steps()
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step_count()
    }

    /// Run `steps` updates (default: the rest of the schedule) and return
    /// their losses.
    #[pyo3(signature = (steps=None))]
    fn train<'py>(&mut self, py: Python<'py>, steps: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
        let steps = steps.unwrap_or_else(|| self.total_steps().saturating_sub(self.step()));
        let losses = self.inner.train::<std::io::Sink>(&self.data, steps, None).map_err(err)?;
        to_py(py, &losses)
    }

    /// `n` images; conditional trainers take one box list per image.
    #[pyo3(signature = (n, boxes=None))]
    fn generate(&mut self, n: usize, boxes: Option<Vec<Vec<PyBox>>>) -> PyResult<Vec<Vec<Vec<f32>>>> {
        let s = self.size;
        let masks = match (&boxes, self.inner.cfg.conditional) {
            (Some(b), true) if b.len() == n => {
                let m = b
                    .iter()
                    .map(|bs| {
                        let bs = bs.iter().map(|&x| to_box(x)).collect::<Result<Vec<_>, _>>()?;
                        Ok(build_bbox_mask(&bs, [s, s])?.as_channel())
                    })
                    .collect::<Result<Vec<_>, patholab_core::Error>>()
                    .map_err(err)?;
                Some(Tensor::stack(&m).map_err(err)?)
            }
            (None, false) => None,
            _ => return Err(err("conditional trainers need one box list per image; unconditional ones take none")),
        };
        let z = self.inner.sample_latent(n);
        let out = self.inner.generate(&z, masks.as_ref()).map_err(err)?;
        Ok(out.data().chunks(s * s).map(|img| img.chunks(s).map(<[f32]>::to_vec).collect()).collect())
    }
}

#[pymodule]
pub fn patholab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_phantoms, m)?)?;
    m.add_function(wrap_pyfunction!(bbox_mask, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(cpm_from_counts, m)?)?;
    m.add_function(wrap_pyfunction!(mcnemar_holm, m)?)?;
    m.add_function(wrap_pyfunction!(holm_adjust, m)?)?;
    m.add_function(wrap_pyfunction!(vtt_score, m)?)?;
    m.add_function(wrap_pyfunction!(minimax_value, m)?)?;
    m.add_function(wrap_pyfunction!(munit_total, m)?)?;
    m.add_function(wrap_pyfunction!(mcgan_objective, m)?)?;
    m.add_function(wrap_pyfunction!(tsne, m)?)?;
    m.add_class::<Trainer>()?;
    Ok(())
}
