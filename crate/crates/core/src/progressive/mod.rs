//! Progressive growing: stage schedule, fade-in, layer blueprint, and the
//! generator/critic pair with optional per-stage condition injection.

mod trainer;

pub use trainer::{
    load_stage_checkpoint, save_stage_checkpoint, ProgressiveConfig, ProgressiveTrainer, StageSidecar, StepLosses,
    TrainingSample,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{config, contract, invalid, Result};
use crate::nn::{Conv, Dense, Params, LRELU_SLOPE, PIXEL_NORM_EPS};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    resolutions: Vec<usize>,
    pub steps_per_stage: u64,
    pub fade_fraction: f64,
}

/// Stage index and fade coefficient at a given training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FadeState {
    pub stage_index: usize,
    pub alpha: f64,
}

pub fn build_schedule(base: usize, target: usize, steps_per_stage: u64, fade_fraction: f64) -> Result<StageSchedule> {
    for (what, v) in [("base", base), ("target", target)] {
        if !v.is_power_of_two() {
            return Err(config(format!(
                "{what} resolution {v} is not a power of two; zero-pad the data to the next power of two"
            )));
        }
    }
    if base > target {
        return Err(config(format!("base resolution {base} exceeds target {target}")));
    }
    if steps_per_stage == 0 {
        return Err(config("steps_per_stage must be positive"));
    }
    if !(0.0..=1.0).contains(&fade_fraction) {
        return Err(config(format!("fade_fraction must lie in [0, 1], got {fade_fraction}")));
    }
    let mut resolutions = vec![base];
    while *resolutions.last().unwrap() < target {
        resolutions.push(resolutions.last().unwrap() * 2);
    }
    Ok(StageSchedule {
        resolutions,
        steps_per_stage,
        fade_fraction,
    })
}

impl StageSchedule {
    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    pub fn stages(&self) -> usize {
        self.resolutions.len()
    }

    pub fn target(&self) -> usize {
        *self.resolutions.last().unwrap()
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_stage * self.stages() as u64
    }

    pub fn stage_of(&self, resolution: usize) -> Result<usize> {
        self.resolutions
            .iter()
            .position(|&r| r == resolution)
            .ok_or_else(|| invalid(format!("resolution {resolution} is not in the schedule {:?}", self.resolutions)))
    }

    /// The first stage never fades; later stages ramp α linearly from 0 to 1
    /// over the first `fade_fraction` of their steps. Steps past the end stay
    /// on the final stage at α = 1.
    pub fn fade_state(&self, step: u64) -> FadeState {
        let stage_index = ((step / self.steps_per_stage) as usize).min(self.stages() - 1);
        if stage_index == 0 {
            return FadeState { stage_index, alpha: 1.0 };
        }
        let local = step.saturating_sub(stage_index as u64 * self.steps_per_stage);
        let window = self.fade_fraction * self.steps_per_stage as f64;
        let alpha = if window <= 0.0 {
            1.0
        } else {
            (local as f64 / window).min(1.0)
        };
        FadeState { stage_index, alpha }
    }
}

/// `(1 - alpha) * prev + alpha * new` on tensors.
pub fn fade_blend<T: Element>(prev: &Tensor<T>, new: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    if prev.shape() != new.shape() {
        return Err(invalid(format!(
            "fade paths differ in shape: {:?} vs {:?}",
            prev.shape(),
            new.shape()
        )));
    }
    check_alpha(alpha)?;
    let (a, b) = (T::of(1.0 - alpha), T::of(alpha));
    Ok(Tensor::from_fn(prev.shape().to_vec(), |i| a * prev[i] + b * new[i]))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

pub fn fade_node<T: Element>(g: &mut Graph<T>, prev: NodeId, new: NodeId, alpha: f64) -> Result<NodeId> {
    check_alpha(alpha)?;
    let p = g.scale(prev, 1.0 - alpha)?;
    let n = g.scale(new, alpha)?;
    g.add(p, n)
}

/// Area-average the full-resolution condition canvas down to
/// `stage_resolution` and append it as the last channel of `feature_map`.
pub fn inject_condition_stage<T: Element>(
    g: &mut Graph<T>,
    schedule: &StageSchedule,
    cond_canvas: NodeId,
    stage_resolution: usize,
    feature_map: NodeId,
) -> Result<NodeId> {
    schedule.stage_of(stage_resolution)?;
    let full = g.shape(cond_canvas)[2];
    if full % stage_resolution != 0 {
        return Err(invalid(format!(
            "canvas extent {full} is not a multiple of stage resolution {stage_resolution}"
        )));
    }
    let c = g.avg_downsample(cond_canvas, full / stage_resolution)?;
    g.concat(&[feature_map, c], 1)
}

/// Layer plan for the progressively grown generator and critic. Channel
/// widths follow `min(512, 4096 / resolution)` divided by `width_divisor`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkBlueprint {
    pub schedule: StageSchedule,
    pub latent: usize,
    pub image_channels: usize,
    pub cond_channels: usize,
    pub widths: Vec<usize>,
}

impl NetworkBlueprint {
    pub fn scaled(schedule: StageSchedule, width_divisor: usize, image_channels: usize, cond_channels: usize) -> Result<Self> {
        if width_divisor == 0 || 512 % width_divisor != 0 {
            return Err(config(format!("width divisor {width_divisor} must divide 512")));
        }
        let widths = schedule
            .resolutions()
            .iter()
            .map(|&r| ((4096 / r).min(512) / width_divisor).max(1))
            .collect();
        Ok(Self {
            schedule,
            latent: 512 / width_divisor,
            image_channels,
            cond_channels,
            widths,
        })
    }

    fn check_stage(&self, k: usize) -> Result<()> {
        if k >= self.schedule.stages() {
            return Err(contract(format!(
                "schedule exhausted: stage {k} requested, schedule has {} stages",
                self.schedule.stages()
            )));
        }
        Ok(())
    }

    fn conv(&self, name: String, i: usize, o: usize, k: usize) -> Conv {
        Conv::same(name, 2, i, o, k)
    }

    fn gen_dense(&self) -> Dense {
        Dense::new("g.s0.dense", self.latent, self.widths[0] * 16)
    }

    fn gen_convs(&self, k: usize) -> Vec<Conv> {
        let w = &self.widths;
        let c = self.cond_channels;
        if k == 0 {
            vec![self.conv("g.s0.conv".into(), w[0] + c, w[0], 3)]
        } else {
            vec![
                self.conv(format!("g.s{k}.conv0"), w[k - 1] + c, w[k], 3),
                self.conv(format!("g.s{k}.conv1"), w[k], w[k], 3),
            ]
        }
    }

    fn to_rgb(&self, k: usize) -> Conv {
        self.conv(format!("g.s{k}.torgb"), self.widths[k], self.image_channels, 1)
    }

    fn from_rgb(&self, k: usize) -> Conv {
        self.conv(
            format!("d.s{k}.fromrgb"),
            self.image_channels + self.cond_channels,
            self.widths[k],
            1,
        )
    }

    fn disc_convs(&self, k: usize) -> Vec<Conv> {
        let w = &self.widths;
        if k == 0 {
            vec![
                self.conv("d.s0.conv".into(), w[0] + 1, w[0], 3),
                Conv {
                    pad: 0,
                    ..self.conv("d.s0.conv4".into(), w[0], w[0], 4)
                },
            ]
        } else {
            vec![
                self.conv(format!("d.s{k}.conv0"), w[k], w[k], 3),
                self.conv(format!("d.s{k}.conv1"), w[k], w[k - 1], 3),
            ]
        }
    }

    fn disc_dense(&self) -> Dense {
        Dense::new("d.s0.dense", self.widths[0], 1)
    }

    /// Trainable scalars introduced by stage `k` (generator and critic).
    pub fn stage_param_count(&self, k: usize) -> usize {
        let mut n: usize = self.gen_convs(k).iter().map(Conv::param_count).sum();
        n += self.to_rgb(k).param_count() + self.from_rgb(k).param_count();
        n += self.disc_convs(k).iter().map(Conv::param_count).sum::<usize>();
        if k == 0 {
            n += self.gen_dense().param_count() + self.disc_dense().param_count();
        }
        n
    }

    fn stage_shapes(&self, k: usize) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut convs = self.gen_convs(k);
        convs.push(self.to_rgb(k));
        convs.push(self.from_rgb(k));
        convs.extend(self.disc_convs(k));
        for c in convs {
            out.push((format!("{}.w", c.name), c.weight_shape()));
            out.push((format!("{}.b", c.name), vec![c.out_ch]));
        }
        if k == 0 {
            for d in [self.gen_dense(), self.disc_dense()] {
                out.push((format!("{}.w", d.name), vec![d.outputs, d.inputs]));
                out.push((format!("{}.b", d.name), vec![d.outputs]));
            }
        }
        out
    }

    /// Fresh initialisation of stage `k`'s layers.
    pub fn init_stage(&self, k: usize, params: &mut Params, rng: &mut impl Rng) -> Result<()> {
        self.check_stage(k)?;
        if k == 0 {
            self.gen_dense().init(params, rng);
            self.disc_dense().init(params, rng);
        }
        for c in self.gen_convs(k) {
            c.init(params, rng);
        }
        self.to_rgb(k).init(params, rng);
        self.from_rgb(k).init(params, rng);
        for c in self.disc_convs(k) {
            c.init(params, rng);
        }
        Ok(())
    }

    /// Verify that `params` holds stages `0..=k` with the planned shapes.
    pub fn check_params(&self, k: usize, params: &Params) -> Result<()> {
        for s in 0..=k {
            for (name, shape) in self.stage_shapes(s) {
                let t = params
                    .get(&name)
                    .map_err(|_| contract(format!("carried parameters lack `{name}` of stage {s}")))?;
                if t.shape() != shape.as_slice() {
                    return Err(contract(format!(
                        "carried parameter `{name}` has shape {:?}, blueprint expects {shape:?}",
                        t.shape()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Grow from stage `stage_index - 1` to `stage_index`: check the carried
/// parameters and append freshly initialised layers for the new stage.
/// Existing tensors are never touched.
pub fn grow(blueprint: &NetworkBlueprint, stage_index: usize, carried: &Params, rng: &mut impl Rng) -> Result<Params> {
    blueprint.check_stage(stage_index)?;
    if stage_index == 0 {
        return Err(contract("stage 0 is created by initialisation, not growth"));
    }
    blueprint.check_params(stage_index - 1, carried)?;
    let mut fresh = Params::new();
    blueprint.init_stage(stage_index, &mut fresh, rng)?;
    let mut out = carried.clone();
    out.merge(fresh);
    Ok(out)
}

fn lrelu_pn<T: Element>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let a = g.leaky_relu(x, LRELU_SLOPE)?;
    g.pixel_norm(a, PIXEL_NORM_EPS)
}

/// Progressively grown generator.
pub struct Generator<'a> {
    pub blueprint: &'a NetworkBlueprint,
}

impl Generator<'_> {
    /// `z` is `(N, latent)`; `cond` is the full-resolution canvas `(N, 1, T, T)`
    /// when the blueprint is conditional. Output is `(N, C, r, r)` in `[-1, 1]`
    /// with `r` the stage resolution.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &Params,
        z: NodeId,
        cond: Option<NodeId>,
        stage: usize,
        alpha: f64,
    ) -> Result<NodeId> {
        let bp = self.blueprint;
        bp.check_stage(stage)?;
        check_alpha(alpha)?;
        if cond.is_some() != (bp.cond_channels > 0) {
            return Err(contract("condition canvas must be supplied exactly when the blueprint is conditional"));
        }
        let n = g.shape(z)[0];
        let res = bp.schedule.resolutions();
        let inject = |g: &mut Graph<T>, h: NodeId, r: usize| match cond {
            Some(c) => inject_condition_stage(g, &bp.schedule, c, r, h),
            None => Ok(h),
        };

        let zn = g.pixel_norm(z, PIXEL_NORM_EPS)?;
        let h = bp.gen_dense().forward(g, params, zn)?;
        let h = g.reshape(h, &[n, bp.widths[0], 4, 4])?;
        let mut h = lrelu_pn(g, h)?;
        h = inject(g, h, res[0])?;
        for c in bp.gen_convs(0) {
            let y = c.forward(g, params, h)?;
            h = lrelu_pn(g, y)?;
        }
        let mut prev = h;
        for (k, &r) in res.iter().enumerate().take(stage + 1).skip(1) {
            prev = h;
            h = g.upsample(h, 2)?;
            h = inject(g, h, r)?;
            for c in bp.gen_convs(k) {
                let y = c.forward(g, params, h)?;
                h = lrelu_pn(g, y)?;
            }
        }
        let mut out = bp.to_rgb(stage).forward(g, params, h)?;
        if stage > 0 && alpha < 1.0 {
            let old = bp.to_rgb(stage - 1).forward(g, params, prev)?;
            let old = g.upsample(old, 2)?;
            out = fade_node(g, old, out, alpha)?;
        }
        g.tanh(out)
    }
}

/// Progressively grown critic, mirroring [`Generator`].
pub struct Critic<'a> {
    pub blueprint: &'a NetworkBlueprint,
}

impl Critic<'_> {
    /// `x` is `(N, C, r, r)` at the stage resolution; returns scores `(N)`.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &Params,
        x: NodeId,
        cond: Option<NodeId>,
        stage: usize,
        alpha: f64,
    ) -> Result<NodeId> {
        let bp = self.blueprint;
        bp.check_stage(stage)?;
        check_alpha(alpha)?;
        if cond.is_some() != (bp.cond_channels > 0) {
            return Err(contract("condition canvas must be supplied exactly when the blueprint is conditional"));
        }
        let res = bp.schedule.resolutions()[stage];
        if g.shape(x)[2] != res {
            return Err(invalid(format!(
                "critic at stage {stage} expects {res}x{res} input, got {:?}",
                g.shape(x)
            )));
        }
        let xin = match cond {
            Some(c) => inject_condition_stage(g, &bp.schedule, c, res, x)?,
            None => x,
        };
        let y = bp.from_rgb(stage).forward(g, params, xin)?;
        let mut h = g.leaky_relu(y, LRELU_SLOPE)?;
        for k in (1..=stage).rev() {
            for c in bp.disc_convs(k) {
                let y = c.forward(g, params, h)?;
                h = g.leaky_relu(y, LRELU_SLOPE)?;
            }
            h = g.avg_downsample(h, 2)?;
            if k == stage && alpha < 1.0 {
                let small = g.avg_downsample(xin, 2)?;
                let y = bp.from_rgb(stage - 1).forward(g, params, small)?;
                let old = g.leaky_relu(y, LRELU_SLOPE)?;
                h = fade_node(g, old, h, alpha)?;
            }
        }
        let n = g.shape(x)[0];
        h = g.minibatch_stddev(h)?;
        for c in bp.disc_convs(0) {
            let y = c.forward(g, params, h)?;
            h = g.leaky_relu(y, LRELU_SLOPE)?;
        }
        let h = g.reshape(h, &[n, bp.widths[0]])?;
        let s = bp.disc_dense().forward(g, params, h)?;
        g.reshape(s, &[n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(build_schedule(4, 256, 10, 0.5).unwrap().resolutions(), &[4, 8, 16, 32, 64, 128, 256]);
        assert_eq!(build_schedule(4, 4, 10, 0.5).unwrap().stages(), 1);
        assert_eq!(build_schedule(4, 64, 10, 0.5).unwrap().stages(), 5);
        assert!(build_schedule(4, 240, 10, 0.5).unwrap_err().to_string().contains("power of two"));
    }

    #[test]
    fn fade_blend_examples() {
        let prev = Tensor::<f32>::zeros(vec![2]);
        let new = Tensor::<f32>::full(vec![2], 4.0);
        assert_eq!(fade_blend(&prev, &new, 0.25).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(fade_blend(&prev, &new, 1.0).unwrap(), new);
        assert_eq!(fade_blend(&prev, &new, 0.0).unwrap(), prev);
        assert!(fade_blend(&prev, &Tensor::zeros(vec![3]), 0.5).is_err());
    }

    #[test]
    fn alpha_ramps_over_first_half() {
        let s = build_schedule(4, 16, 100, 0.5).unwrap();
        assert_eq!(s.fade_state(50).alpha, 1.0);
        assert_eq!(s.fade_state(100), FadeState { stage_index: 1, alpha: 0.0 });
        assert_eq!(s.fade_state(125).alpha, 0.5);
        assert_eq!(s.fade_state(160).alpha, 1.0);
        assert_eq!(s.fade_state(10_000).stage_index, 2);
    }

    #[test]
    fn desk_widths() {
        let s = build_schedule(4, 64, 1, 0.5).unwrap();
        let bp = NetworkBlueprint::scaled(s, 16, 1, 0).unwrap();
        assert_eq!(bp.widths, vec![32, 32, 16, 8, 4]);
        assert_eq!(bp.latent, 32);
        let paper = NetworkBlueprint::scaled(build_schedule(4, 256, 1, 0.5).unwrap(), 1, 1, 0).unwrap();
        assert_eq!(paper.widths, vec![512, 512, 256, 128, 64, 32, 16]);
    }
}
