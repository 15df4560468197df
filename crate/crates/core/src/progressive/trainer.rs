use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{build_schedule, grow, Critic, FadeState, Generator, NetworkBlueprint};
use crate::autodiff::{Graph, NodeId};
use crate::checkpoint;
use crate::error::{config, invalid, Result};
use crate::nn::Params;
use crate::objectives::{
    interpolate, wasserstein_generator_node, wgan_gp_node, GradPenaltyConfig, LabelFlipSchedule, LossLog,
};
use crate::optim::{Algorithm, OptimizerState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgressiveConfig {
    pub base: usize,
    pub target: usize,
    pub steps_per_stage: u64,
    pub fade_fraction: f64,
    pub width_divisor: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gp: GradPenaltyConfig,
    pub conditional: bool,
    /// Swap real and synthetic inputs of the critic on every `period`-th update.
    pub label_flip_period: Option<u64>,
    pub seed: u64,
}

impl ProgressiveConfig {
    /// Unconditional defaults: Adam(0, 0.99), lr 1e-3, λ = 10, one critic
    /// iteration, batch 16.
    pub fn pggan(target: usize, steps_per_stage: u64) -> Self {
        Self {
            base: 4,
            target,
            steps_per_stage,
            fade_fraction: 0.5,
            width_divisor: 16,
            batch: 16,
            learning_rate: 1e-3,
            beta1: 0.0,
            beta2: 0.99,
            gp: GradPenaltyConfig::default(),
            conditional: false,
            label_flip_period: None,
            seed: 0,
        }
    }

    /// Box-conditioned defaults: lr 2e-4, batch 4, label flip every third update.
    pub fn cpggan(target: usize, steps_per_stage: u64) -> Self {
        Self {
            learning_rate: 2e-4,
            batch: 4,
            conditional: true,
            label_flip_period: Some(3),
            ..Self::pggan(target, steps_per_stage)
        }
    }

    pub fn blueprint(&self, image_channels: usize) -> Result<NetworkBlueprint> {
        let schedule = build_schedule(self.base, self.target, self.steps_per_stage, self.fade_fraction)?;
        NetworkBlueprint::scaled(schedule, self.width_divisor, image_channels, usize::from(self.conditional))
    }
}

/// One training image `(C, T, T)` in `[-1, 1]`, with its box canvas
/// `(1, T, T)` in `{0, 1}` for conditional training.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub image: Tensor<f32>,
    pub mask: Option<Tensor<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLosses {
    pub step: u64,
    pub stage: usize,
    pub alpha: f64,
    pub critic: f64,
    pub penalty: f64,
    pub generator: f64,
    pub flipped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSidecar {
    pub stage: usize,
    pub alpha: f64,
    pub step: u64,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write parameters in the checkpoint format plus a JSON sidecar next to it.
pub fn save_stage_checkpoint(path: &Path, params: &Params, sidecar: &StageSidecar) -> Result<()> {
    checkpoint::save(params, path)?;
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(sidecar)?)?;
    Ok(())
}

pub fn load_stage_checkpoint(path: &Path) -> Result<(Params, StageSidecar)> {
    let params = checkpoint::load(path)?;
    let sidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    Ok((params, sidecar))
}

/// Map a `{0, 1}` canvas into the image range `[-1, 1]`.
pub(crate) fn mask_to_signal(m: &Tensor<f32>) -> Tensor<f32> {
    m.map(|v| v * 2.0 - 1.0)
}

fn downsample(t: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    if factor == 1 {
        return Ok(t.clone());
    }
    let mut g = Graph::<f32>::new();
    let x = g.constant(t.clone());
    let y = g.avg_downsample(x, factor)?;
    Ok(g.value(y).clone())
}

fn upsample(t: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t.clone());
    let y = g.upsample(x, factor)?;
    Ok(g.value(y).clone())
}

/// Progressive WGAN-GP training loop, optionally conditioned on box canvases.
pub struct ProgressiveTrainer {
    pub cfg: ProgressiveConfig,
    pub blueprint: NetworkBlueprint,
    pub params: Params,
    opt_g: OptimizerState,
    opt_d: OptimizerState,
    rng: ChaCha8Rng,
    step: u64,
    grown_to: usize,
    flip: Option<LabelFlipSchedule>,
}

impl ProgressiveTrainer {
    pub fn new(cfg: ProgressiveConfig, image_channels: usize) -> Result<Self> {
        cfg.gp.validate()?;
        if cfg.batch == 0 {
            return Err(config("batch must be positive"));
        }
        let blueprint = cfg.blueprint(image_channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = Params::new();
        blueprint.init_stage(0, &mut params, &mut rng)?;
        let alg = Algorithm::adam(cfg.beta1, cfg.beta2);
        let flip = cfg.label_flip_period.map(LabelFlipSchedule::new).transpose()?;
        Ok(Self {
            opt_g: OptimizerState::new(alg, cfg.learning_rate)?,
            opt_d: OptimizerState::new(alg, cfg.learning_rate)?,
            cfg,
            blueprint,
            params,
            rng,
            step: 0,
            grown_to: 0,
            flip,
        })
    }

    /// Resume from a stage checkpoint. Optimiser moments restart from zero.
    pub fn resume(cfg: ProgressiveConfig, image_channels: usize, params: Params, sidecar: &StageSidecar) -> Result<Self> {
        let mut t = Self::new(cfg, image_channels)?;
        t.blueprint.check_params(sidecar.stage, &params)?;
        t.params = params;
        t.grown_to = sidecar.stage;
        t.step = sidecar.step;
        t.rng = ChaCha8Rng::seed_from_u64(t.cfg.seed ^ sidecar.step.wrapping_mul(0x9e3779b97f4a7c15));
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn fade_state(&self) -> FadeState {
        self.blueprint.schedule.fade_state(self.step)
    }

    pub fn sidecar(&self) -> StageSidecar {
        let f = self.fade_state();
        StageSidecar {
            stage: self.grown_to,
            alpha: f.alpha,
            step: self.step,
        }
    }

    pub fn sample_latent(&mut self, n: usize) -> Tensor<f32> {
        let rng = &mut self.rng;
        Tensor::from_fn(vec![n, self.blueprint.latent], |_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
    }

    fn ensure_grown(&mut self, stage: usize) -> Result<()> {
        while self.grown_to < stage {
            self.params = grow(&self.blueprint, self.grown_to + 1, &self.params, &mut self.rng)?;
            self.grown_to += 1;
        }
        Ok(())
    }

    /// Generate at an explicit stage and α. `masks` holds `{0, 1}` canvases
    /// `(N, 1, T, T)` when conditional.
    pub fn generate_at(&self, z: &Tensor<f32>, masks: Option<&Tensor<f32>>, stage: usize, alpha: f64) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let zn = g.constant(z.clone());
        let c = masks.map(|m| g.constant(mask_to_signal(m)));
        let gen = Generator {
            blueprint: &self.blueprint,
        };
        let out = gen.forward(&mut g, &self.params, zn, c, stage, alpha)?;
        Ok(g.value(out).clone())
    }

    /// Generate with the current stage and α.
    pub fn generate(&self, z: &Tensor<f32>, masks: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
        let f = self.fade_state();
        self.generate_at(z, masks, f.stage_index.min(self.grown_to), f.alpha)
    }

    fn real_batch(&mut self, data: &[TrainingSample], stage: usize, alpha: f64) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
        let n = self.cfg.batch;
        let idx: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..data.len())).collect();
        let images: Vec<Tensor<f32>> = idx.iter().map(|&i| data[i].image.clone()).collect();
        let full = Tensor::stack(&images)?;
        let target = self.blueprint.schedule.target();
        let res = self.blueprint.schedule.resolutions()[stage];
        let mut real = downsample(&full, target / res)?;
        if stage > 0 && alpha < 1.0 {
            let coarse = upsample(&downsample(&real, 2)?, 2)?;
            real = super::fade_blend(&coarse, &real, alpha)?;
        }
        let masks = if self.cfg.conditional {
            let m: Result<Vec<Tensor<f32>>> = idx
                .iter()
                .map(|&i| {
                    data[i]
                        .mask
                        .clone()
                        .ok_or_else(|| invalid(format!("conditional training sample {i} has no mask")))
                })
                .collect();
            Some(Tensor::stack(&m?)?)
        } else {
            None
        };
        Ok((real, masks))
    }

    /// One critic update (repeated `critic_iters` times) followed by one
    /// generator update.
    pub fn step(&mut self, data: &[TrainingSample]) -> Result<StepLosses> {
        if data.is_empty() {
            return Err(invalid("training set is empty"));
        }
        let FadeState { stage_index: stage, alpha } = self.fade_state();
        self.ensure_grown(stage)?;
        let bp = self.blueprint.clone();
        let critic = Critic { blueprint: &bp };
        let gen = Generator { blueprint: &bp };
        let n = self.cfg.batch;

        let mut critic_loss = 0.0;
        let mut penalty = 0.0;
        let mut flipped = false;
        for _ in 0..self.cfg.gp.critic_iters {
            let (real, masks) = self.real_batch(data, stage, alpha)?;
            let z = self.sample_latent(n);
            let fake = self.generate_at(&z, masks.as_ref(), stage, alpha)?;
            let eps: Vec<f64> = (0..n).map(|_| self.rng.random::<f64>()).collect();
            let hat = interpolate(&real, &fake, &eps);
            flipped = self.flip.as_mut().is_some_and(LabelFlipSchedule::gate);

            let mut g = Graph::<f32>::training(self.rng.random());
            g.freeze_prefix("g.");
            let (r, f) = (g.constant(real), g.constant(fake));
            let (r, f) = if flipped { (f, r) } else { (r, f) };
            let h = g.variable(hat);
            let c = masks.map(|m| g.constant(mask_to_signal(&m)));
            let params = &self.params;
            let nodes = wgan_gp_node(
                &mut g,
                r,
                f,
                h,
                |g: &mut Graph<f32>, x: NodeId| critic.forward(g, params, x, c, stage, alpha),
                &self.cfg.gp,
            )?;
            critic_loss = g.value(nodes.total).item() as f64;
            penalty = g.value(nodes.penalty).item() as f64;
            let grads = g.backward(nodes.total)?;
            self.opt_d.step(&mut self.params, grads.params())?;
        }

        let (_, masks) = if self.cfg.conditional {
            self.real_batch(data, stage, alpha)?
        } else {
            (Tensor::zeros(vec![1]), None)
        };
        let z = self.sample_latent(n);
        let mut g = Graph::<f32>::training(self.rng.random());
        g.freeze_prefix("d.");
        let zn = g.constant(z);
        let c = masks.map(|m| g.constant(mask_to_signal(&m)));
        let fake = gen.forward(&mut g, &self.params, zn, c, stage, alpha)?;
        let score = critic.forward(&mut g, &self.params, fake, c, stage, alpha)?;
        let loss = wasserstein_generator_node(&mut g, score)?;
        let generator = g.value(loss).item() as f64;
        let grads = g.backward(loss)?;
        self.opt_g.step(&mut self.params, grads.params())?;

        let out = StepLosses {
            step: self.step,
            stage,
            alpha,
            critic: critic_loss,
            penalty,
            generator,
            flipped,
        };
        self.step += 1;
        Ok(out)
    }

    /// Run `steps` updates, logging critic, penalty and generator losses.
    pub fn train<W: std::io::Write>(
        &mut self,
        data: &[TrainingSample],
        steps: u64,
        mut log: Option<&mut LossLog<W>>,
    ) -> Result<Vec<StepLosses>> {
        let mut out = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let s = self.step(data)?;
            if let Some(log) = log.as_deref_mut() {
                log.record(s.step, "critic", s.critic)?;
                log.record(s.step, "gradient_penalty", s.penalty)?;
                log.record(s.step, "generator", s.generator)?;
            }
            out.push(s);
        }
        Ok(out)
    }
}
