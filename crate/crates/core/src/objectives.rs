//! Adversarial objectives.
//!
//! Each loss comes in two forms: a plain function over discriminator outputs
//! for reporting and closed-form checks, and a graph builder used by the
//! trainers. Both compute the same quantity.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{config, contract, invalid, Result};
use crate::nn::{Conv, Params, LRELU_SLOPE};
use crate::tensor::{Element, Tensor};

/// Probability clamp used inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MinimaxValue {
    pub value: f64,
    /// Number of probabilities that had to be clamped away from 0 or 1.
    pub clamped: usize,
}

fn clamp_prob(p: f64, clamped: &mut usize) -> f64 {
    let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if c != p {
        *clamped += 1;
    }
    c
}

/// `mean(log D(y)) + mean(log(1 - D(G(z))))`.
pub fn minimax_value<T: Element>(d_real: &Tensor<T>, d_fake: &Tensor<T>) -> MinimaxValue {
    let mut clamped = 0;
    let lr: f64 = d_real
        .data()
        .iter()
        .map(|v| clamp_prob(v.as_f64(), &mut clamped).ln())
        .sum::<f64>()
        / d_real.len() as f64;
    let lf: f64 = d_fake
        .data()
        .iter()
        .map(|v| (1.0 - clamp_prob(v.as_f64(), &mut clamped)).ln())
        .sum::<f64>()
        / d_fake.len() as f64;
    MinimaxValue {
        value: lr + lf,
        clamped,
    }
}

/// Squeeze probabilities into `[eps, 1 - eps]` with an affine map, which
/// unlike a hard clamp keeps a usable gradient at the boundary.
fn squeeze<T: Element>(g: &mut Graph<T>, p: NodeId) -> Result<NodeId> {
    let s = g.scale(p, 1.0 - 2.0 * PROB_EPS)?;
    g.offset(s, PROB_EPS)
}

/// Discriminator loss `-V(D, G)` on probabilities; minimising it maximises V.
pub fn minimax_discriminator_node<T: Element>(g: &mut Graph<T>, d_real: NodeId, d_fake: NodeId) -> Result<NodeId> {
    let r = squeeze(g, d_real)?;
    let r = g.log(r)?;
    let r = g.mean(r)?;
    let f = squeeze(g, d_fake)?;
    let f = g.neg(f)?;
    let f = g.offset(f, 1.0)?;
    let f = g.log(f)?;
    let f = g.mean(f)?;
    let v = g.add(r, f)?;
    g.neg(v)
}

/// Non-saturating generator loss `-mean(log D(G(z)))`.
pub fn minimax_generator_node<T: Element>(g: &mut Graph<T>, d_fake: NodeId) -> Result<NodeId> {
    let f = squeeze(g, d_fake)?;
    let f = g.log(f)?;
    let f = g.mean(f)?;
    g.neg(f)
}

/// Critic loss `mean(D(fake)) - mean(D(real))`.
pub fn wasserstein_critic_loss<T: Element>(d_real: &Tensor<T>, d_fake: &Tensor<T>) -> f64 {
    d_fake.mean().as_f64() - d_real.mean().as_f64()
}

pub fn wasserstein_critic_node<T: Element>(g: &mut Graph<T>, d_real: NodeId, d_fake: NodeId) -> Result<NodeId> {
    let f = g.mean(d_fake)?;
    let r = g.mean(d_real)?;
    g.sub(f, r)
}

/// Generator side of the Wasserstein objective, `-mean(D(fake))`.
pub fn wasserstein_generator_node<T: Element>(g: &mut Graph<T>, d_fake: NodeId) -> Result<NodeId> {
    let f = g.mean(d_fake)?;
    g.neg(f)
}

/// Clamp every trainable value whose name starts with `prefix` into `[-c, c]`.
pub fn clip_weights(params: &mut Params, prefix: &str, c: f64) -> Result<()> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(config(format!("clip value must be positive, got {c}")));
    }
    let c = c as f32;
    for (name, t) in params.trainable_mut() {
        if name.starts_with(prefix) {
            for v in t.data_mut() {
                *v = v.clamp(-c, c);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradPenaltyConfig {
    pub lambda_gp: f64,
    pub critic_iters: usize,
}

impl Default for GradPenaltyConfig {
    fn default() -> Self {
        Self {
            lambda_gp: 10.0,
            critic_iters: 1,
        }
    }
}

impl GradPenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gp >= 0.0 && self.lambda_gp.is_finite()) {
            return Err(config(format!("lambda_gp must be >= 0, got {}", self.lambda_gp)));
        }
        if self.critic_iters == 0 {
            return Err(config("critic_iters must be at least 1"));
        }
        Ok(())
    }
}

/// Real batch, synthetic batch, and the per-sample convex mixes used by the
/// gradient penalty.
#[derive(Clone, Debug)]
pub struct AdversarialBatch<T: Element = f32> {
    pub real: Tensor<T>,
    pub synthetic: Tensor<T>,
    pub noise: Option<Tensor<T>>,
    pub interpolates: Option<Tensor<T>>,
}

impl<T: Element> AdversarialBatch<T> {
    pub fn new(real: Tensor<T>, synthetic: Tensor<T>) -> Result<Self> {
        if real.shape() != synthetic.shape() {
            return Err(invalid(format!(
                "real {:?} and synthetic {:?} batches differ in shape",
                real.shape(),
                synthetic.shape()
            )));
        }
        Ok(Self {
            real,
            synthetic,
            noise: None,
            interpolates: None,
        })
    }

    /// Fill `interpolates` with `eps * real + (1 - eps) * synthetic`, one
    /// `eps ~ U[0, 1]` per sample.
    pub fn with_interpolates(mut self, rng: &mut impl Rng) -> Self {
        let eps: Vec<f64> = (0..self.real.shape()[0]).map(|_| rng.random::<f64>()).collect();
        self.interpolates = Some(interpolate(&self.real, &self.synthetic, &eps));
        self
    }
}

/// Per-sample convex mix `eps[n] * a + (1 - eps[n]) * b`.
pub fn interpolate<T: Element>(a: &Tensor<T>, b: &Tensor<T>, eps: &[f64]) -> Tensor<T> {
    let per = a.len() / a.shape()[0];
    Tensor::from_fn(a.shape().to_vec(), |i| {
        let e = eps[i / per];
        T::of(e * a[i].as_f64() + (1.0 - e) * b[i].as_f64())
    })
}

#[derive(Clone, Copy, Debug)]
pub struct WganGpNodes {
    pub total: NodeId,
    pub critic_gap: NodeId,
    pub penalty: NodeId,
}

/// Critic objective with gradient penalty:
/// `E[D(fake)] - E[D(real)] + lambda * E[(|grad_x D(x_hat)| - 1)^2]`.
///
/// `interpolates` must be a leaf that requires a gradient. The penalty
/// gradient is built on the graph, so the returned total is itself
/// differentiable with respect to the critic's parameters.
pub fn wgan_gp_node<T, F>(
    g: &mut Graph<T>,
    real: NodeId,
    fake: NodeId,
    interpolates: NodeId,
    mut critic: F,
    cfg: &GradPenaltyConfig,
) -> Result<WganGpNodes>
where
    T: Element,
    F: FnMut(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    cfg.validate()?;
    if !g.requires_grad(interpolates) {
        return Err(contract("interpolates must be a gradient-carrying leaf"));
    }
    let d_real = critic(g, real)?;
    let d_fake = critic(g, fake)?;
    let critic_gap = wasserstein_critic_node(g, d_real, d_fake)?;
    let d_hat = critic(g, interpolates)?;
    let s = g.sum(d_hat)?;
    let grad = g.grad(s, &[interpolates])?[0];
    let norm = g.l2_norm_per_sample(grad, 1e-12)?;
    let dev = g.offset(norm, -1.0)?;
    let sq = g.square(dev)?;
    let pen = g.mean(sq)?;
    let penalty = g.scale(pen, cfg.lambda_gp)?;
    let total = g.add(critic_gap, penalty)?;
    Ok(WganGpNodes {
        total,
        critic_gap,
        penalty,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WganGpValue {
    pub total: f64,
    pub critic_gap: f64,
    pub penalty: f64,
}

/// Evaluate the gradient-penalty objective for a batch in 64-bit precision.
pub fn wgan_gp_loss<F>(batch: &AdversarialBatch<f64>, critic: F, cfg: &GradPenaltyConfig) -> Result<WganGpValue>
where
    F: FnMut(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    let interp = batch
        .interpolates
        .as_ref()
        .ok_or_else(|| contract("adversarial batch has no interpolates"))?;
    let mut g = Graph::<f64>::new();
    let real = g.constant(batch.real.clone());
    let fake = g.constant(batch.synthetic.clone());
    let hat = g.variable(interp.clone());
    let n = wgan_gp_node(&mut g, real, fake, hat, critic, cfg)?;
    Ok(WganGpValue {
        total: g.value(n.total).item().as_f64(),
        critic_gap: g.value(n.critic_gap).item().as_f64(),
        penalty: g.value(n.penalty).item().as_f64(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Discriminator,
    Generator,
}

/// Least-squares objective. Discriminator: `0.5 E[(D(real) - 1)^2] + 0.5 E[D(fake)^2]`;
/// generator: `0.5 E[(D(fake) - 1)^2]`.
pub fn lsgan_loss<T: Element>(d_real: &Tensor<T>, d_fake: &Tensor<T>, role: Role) -> f64 {
    let msq = |t: &Tensor<T>, target: f64| {
        t.data().iter().map(|v| (v.as_f64() - target).powi(2)).sum::<f64>() / t.len() as f64
    };
    match role {
        Role::Discriminator => 0.5 * msq(d_real, 1.0) + 0.5 * msq(d_fake, 0.0),
        Role::Generator => 0.5 * msq(d_fake, 1.0),
    }
}

fn half_msq<T: Element>(g: &mut Graph<T>, x: NodeId, target: f64) -> Result<NodeId> {
    let d = g.offset(x, -target)?;
    let s = g.square(d)?;
    let m = g.mean(s)?;
    g.scale(m, 0.5)
}

pub fn lsgan_discriminator_node<T: Element>(g: &mut Graph<T>, d_real: NodeId, d_fake: NodeId) -> Result<NodeId> {
    let r = half_msq(g, d_real, 1.0)?;
    let f = half_msq(g, d_fake, 0.0)?;
    g.add(r, f)
}

pub fn lsgan_generator_node<T: Element>(g: &mut Graph<T>, d_fake: NodeId) -> Result<NodeId> {
    half_msq(g, d_fake, 1.0)
}

pub const SIMGAN_LAMBDA_REG: f64 = 5e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SimganValue {
    pub realism: f64,
    pub regularization: f64,
    pub total: f64,
}

/// Refiner objective: realism `-mean(log D(refined))`, where `d_fake` is the
/// discriminator's probability that the refined image is real, plus
/// `lambda_reg * |refined - input|_1`.
pub fn simgan_refiner_loss<T: Element>(
    refined: &Tensor<T>,
    input: &Tensor<T>,
    d_fake: &Tensor<T>,
    lambda_reg: f64,
) -> Result<SimganValue> {
    if !(lambda_reg >= 0.0) {
        return Err(config(format!("lambda_reg must be >= 0, got {lambda_reg}")));
    }
    if refined.shape() != input.shape() {
        return Err(invalid(format!(
            "refined {:?} and input {:?} differ in shape",
            refined.shape(),
            input.shape()
        )));
    }
    let mut clamped = 0;
    let realism = -d_fake
        .data()
        .iter()
        .map(|v| clamp_prob(v.as_f64(), &mut clamped).ln())
        .sum::<f64>()
        / d_fake.len() as f64;
    let l1: f64 = refined
        .data()
        .iter()
        .zip(input.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .sum();
    let regularization = lambda_reg * l1;
    Ok(SimganValue {
        realism,
        regularization,
        total: realism + regularization,
    })
}

/// Graph form; pass `adversarial = false` during the regularisation-only warm-up.
pub fn simgan_refiner_node<T: Element>(
    g: &mut Graph<T>,
    refined: NodeId,
    input: NodeId,
    d_fake: Option<NodeId>,
    lambda_reg: f64,
) -> Result<NodeId> {
    if !(lambda_reg >= 0.0) {
        return Err(config(format!("lambda_reg must be >= 0, got {lambda_reg}")));
    }
    let diff = g.sub(refined, input)?;
    let l1 = g.l1(diff)?;
    let reg = g.scale(l1, lambda_reg)?;
    match d_fake {
        Some(d) => {
            let r = minimax_generator_node(g, d)?;
            g.add(r, reg)
        }
        None => Ok(reg),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimganPhase {
    /// Regularisation-only refiner update.
    Warmup,
    Refiner,
    Discriminator,
}

/// Warm-up with the regulariser alone, then `refiner_per_disc` refiner
/// updates for every discriminator update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimganSchedule {
    pub warmup_steps: u64,
    pub refiner_per_disc: u64,
}

impl Default for SimganSchedule {
    fn default() -> Self {
        Self {
            warmup_steps: 500,
            refiner_per_disc: 5,
        }
    }
}

impl SimganSchedule {
    pub fn phase(&self, step: u64) -> SimganPhase {
        if step < self.warmup_steps {
            return SimganPhase::Warmup;
        }
        let k = (step - self.warmup_steps) % (self.refiner_per_disc + 1);
        if k < self.refiner_per_disc {
            SimganPhase::Refiner
        } else {
            SimganPhase::Discriminator
        }
    }
}

/// The six weighted terms of the unsupervised image-to-image objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MunitWeights {
    pub adversarial: f64,
    pub image_recon: f64,
    pub kl_recon: f64,
    pub cycle: f64,
    pub kl_cycle: f64,
    pub perceptual: f64,
}

impl Default for MunitWeights {
    fn default() -> Self {
        Self {
            adversarial: 1.0,
            image_recon: 10.0,
            kl_recon: 0.01,
            cycle: 10.0,
            kl_cycle: 0.01,
            perceptual: 1.0,
        }
    }
}

impl MunitWeights {
    pub const TERMS: [&'static str; 6] = ["adversarial", "image_recon", "kl_recon", "cycle", "kl_cycle", "perceptual"];

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.adversarial,
            self.image_recon,
            self.kl_recon,
            self.cycle,
            self.kl_cycle,
            self.perceptual,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in Self::TERMS.iter().zip(self.as_array()) {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(config(format!("weight `{name}` must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

fn lookup<'a, V>(terms: &'a BTreeMap<String, V>, name: &str) -> Result<&'a V> {
    terms
        .get(name)
        .ok_or_else(|| contract(format!("missing loss component `{name}`")))
}

/// Weighted sum of the six components, accumulated left to right in
/// [`MunitWeights::TERMS`] order.
pub fn munit_total_loss(terms: &BTreeMap<String, f64>, weights: &MunitWeights) -> Result<f64> {
    weights.validate()?;
    let mut total = 0.0;
    for (name, w) in MunitWeights::TERMS.iter().zip(weights.as_array()) {
        total += w * lookup(terms, name)?;
    }
    Ok(total)
}

pub fn munit_total_node<T: Element>(
    g: &mut Graph<T>,
    terms: &BTreeMap<String, NodeId>,
    weights: &MunitWeights,
) -> Result<NodeId> {
    weights.validate()?;
    let mut total: Option<NodeId> = None;
    for (name, w) in MunitWeights::TERMS.iter().zip(weights.as_array()) {
        let t = g.scale(*lookup(terms, name)?, w)?;
        total = Some(match total {
            Some(acc) => g.add(acc, t)?,
            None => t,
        });
    }
    Ok(total.expect("six terms"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McganWeights {
    pub l1_weight: f64,
    pub enable_l1: bool,
}

impl Default for McganWeights {
    fn default() -> Self {
        Self {
            l1_weight: 100.0,
            enable_l1: true,
        }
    }
}

/// Generator target for the dual-discriminator 3-D model: least-squares
/// context term plus gradient-penalty nodule term, plus the weighted
/// reconstruction term when enabled.
pub fn mcgan_objective(context: f64, nodule: f64, l1: f64, weights: &McganWeights) -> Result<f64> {
    if !(weights.l1_weight >= 0.0) {
        return Err(config(format!("l1_weight must be >= 0, got {}", weights.l1_weight)));
    }
    let base = context + nodule;
    Ok(if weights.enable_l1 {
        base + weights.l1_weight * l1
    } else {
        base
    })
}

pub fn mcgan_node<T: Element>(
    g: &mut Graph<T>,
    context: NodeId,
    nodule: NodeId,
    l1: NodeId,
    weights: &McganWeights,
) -> Result<NodeId> {
    let base = g.add(context, nodule)?;
    if weights.enable_l1 {
        let t = g.scale(l1, weights.l1_weight)?;
        g.add(base, t)
    } else {
        Ok(base)
    }
}

/// Fires on every `period`-th call, starting with the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelFlipSchedule {
    pub period: u64,
    pub counter: u64,
}

impl LabelFlipSchedule {
    pub fn new(period: u64) -> Result<Self> {
        if period == 0 {
            return Err(config("label flip period must be positive"));
        }
        Ok(Self { period, counter: 0 })
    }

    pub fn gate(&mut self) -> bool {
        let flip = self.counter % self.period == 0;
        self.counter += 1;
        flip
    }
}

impl Default for LabelFlipSchedule {
    fn default() -> Self {
        Self { period: 3, counter: 0 }
    }
}

/// Fixed, randomly initialised convolutional feature extractor used for the
/// perceptual term. Its weights enter the graph as constants, so it never
/// receives gradients.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    layers: Vec<Conv>,
    params: Params,
}

impl PerceptualExtractor {
    pub fn new(in_ch: usize, widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut layers = Vec::new();
        let mut c = in_ch;
        for (i, &w) in widths.iter().enumerate() {
            let conv = Conv {
                stride: 2,
                ..Conv::same(format!("perceptual.{i}"), 2, c, w, 3)
            };
            conv.init(&mut params, &mut rng);
            layers.push(conv);
            c = w;
        }
        Self { layers, params }
    }

    pub fn features<T: Element>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for conv in &self.layers {
            let w = g.constant(self.params.get(&format!("{}.w", conv.name))?.cast());
            let b = g.constant(self.params.get(&format!("{}.b", conv.name))?.cast());
            let y = g.conv(h, w, conv.stride, conv.pad)?;
            let y = g.add_channel_bias(y, b)?;
            h = g.leaky_relu(y, LRELU_SLOPE)?;
        }
        Ok(h)
    }

    /// Mean squared feature distance between two image batches.
    pub fn distance<T: Element>(&self, g: &mut Graph<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
        let fa = self.features(g, a)?;
        let fb = self.features(g, b)?;
        let d = g.sub(fa, fb)?;
        let s = g.square(d)?;
        g.mean(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss_name: String,
    pub value: f64,
}

/// JSON-lines loss log.
pub struct LossLog<W: Write> {
    out: W,
}

impl LossLog<std::io::BufWriter<std::fs::File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: std::io::BufWriter::new(std::fs::File::create(path)?),
        })
    }
}

impl<W: Write> LossLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, step: u64, loss_name: &str, value: f64) -> Result<()> {
        let rec = LossRecord {
            step,
            loss_name: loss_name.to_string(),
            value,
        };
        serde_json::to_writer(&mut self.out, &rec)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
