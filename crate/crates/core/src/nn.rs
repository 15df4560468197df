//! Parameter storage and the small layer vocabulary shared by every network.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BatchNormSpec, Graph, NodeId};
use crate::error::{contract, Result};
use crate::tensor::{Element, Tensor};

/// Named trainable tensors plus non-trainable buffers (running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    trainable: BTreeMap<String, Tensor<f32>>,
    buffers: BTreeMap<String, Tensor<f32>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.trainable.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.trainable
            .get(name)
            .ok_or_else(|| contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.trainable.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<f32>> {
        self.buffers
            .get(name)
            .ok_or_else(|| contract(format!("missing buffer `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.trainable.contains_key(name)
    }

    pub fn trainable(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.trainable
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.trainable.iter_mut()
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.buffers
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.trainable.values().map(Tensor::len).sum()
    }

    pub fn apply_buffer_updates(&mut self, updates: BTreeMap<String, Tensor<f32>>) {
        for (k, v) in updates {
            self.buffers.insert(k, v);
        }
    }

    /// FNV-1a over names, shapes and value bits of every tensor; equal iff bit-identical.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in self.trainable.iter().chain(self.buffers.iter()) {
            eat(name.as_bytes());
            for d in t.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Checksum restricted to names starting with `prefix`.
    pub fn checksum_prefixed(&self, prefix: &str) -> u64 {
        let mut sub = Params::new();
        for (k, v) in &self.trainable {
            if k.starts_with(prefix) {
                sub.insert(k.clone(), v.clone());
            }
        }
        sub.checksum()
    }

    /// Copy every tensor of `other` into `self`, replacing same-named entries.
    pub fn merge(&mut self, other: Params) {
        self.trainable.extend(other.trainable);
        self.buffers.extend(other.buffers);
    }
}

/// He-normal initialisation: N(0, 2 / fan_in).
pub fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng) as f32)
}

/// 2-D or 3-D convolution with a per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub spatial: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Same-padded stride-1 convolution.
    pub fn same(name: impl Into<String>, spatial: usize, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            spatial,
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_ch, self.in_ch];
        s.extend(std::iter::repeat_n(self.kernel, self.spatial));
        s
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.out_ch
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        let fan_in = self.in_ch * self.kernel.pow(self.spatial as u32);
        params.insert(format!("{}.w", self.name), he_normal(self.weight_shape(), fan_in, rng));
        params.insert(format!("{}.b", self.name), Tensor::zeros(vec![self.out_ch]));
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, params: &Params, x: NodeId) -> Result<NodeId> {
        let w = g.param(&format!("{}.w", self.name), params.get(&format!("{}.w", self.name))?);
        let b = g.param(&format!("{}.b", self.name), params.get(&format!("{}.b", self.name))?);
        let y = g.conv(x, w, self.stride, self.pad)?;
        g.add_channel_bias(y, b)
    }
}

/// Fully connected layer, weights `(out, in)`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Self {
            name: name.into(),
            inputs,
            outputs,
        }
    }

    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        params.insert(format!("{}.w", self.name), he_normal(vec![self.outputs, self.inputs], self.inputs, rng));
        params.insert(format!("{}.b", self.name), Tensor::zeros(vec![self.outputs]));
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, params: &Params, x: NodeId) -> Result<NodeId> {
        let w = g.param(&format!("{}.w", self.name), params.get(&format!("{}.w", self.name))?);
        let b = g.param(&format!("{}.b", self.name), params.get(&format!("{}.b", self.name))?);
        g.dense(x, w, Some(b))
    }
}

/// Batch normalisation with learnable scale/shift and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub spec: BatchNormSpec,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            spec: BatchNormSpec::new(name),
            channels,
        }
    }

    pub fn init(&self, params: &mut Params) {
        let n = &self.spec.name;
        params.insert(format!("{n}.gamma"), Tensor::ones(vec![self.channels]));
        params.insert(format!("{n}.beta"), Tensor::zeros(vec![self.channels]));
        params.insert_buffer(format!("{n}.running_mean"), Tensor::zeros(vec![self.channels]));
        params.insert_buffer(format!("{n}.running_var"), Tensor::ones(vec![self.channels]));
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, params: &Params, x: NodeId) -> Result<NodeId> {
        let n = &self.spec.name;
        let gamma = g.param(&format!("{n}.gamma"), params.get(&format!("{n}.gamma"))?);
        let beta = g.param(&format!("{n}.beta"), params.get(&format!("{n}.beta"))?);
        let rm = params.buffer(&format!("{n}.running_mean"))?;
        let rv = params.buffer(&format!("{n}.running_var"))?;
        g.batch_norm(x, gamma, beta, (rm, rv), &self.spec)
    }
}

pub const LRELU_SLOPE: f64 = 0.2;
pub const PIXEL_NORM_EPS: f64 = 1e-8;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checksum_detects_single_bit_change() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut p = Params::new();
        Conv::same("c", 2, 2, 3, 3).init(&mut p, &mut rng);
        let before = p.checksum();
        let w = p.get_mut("c.w").unwrap();
        w[0] = f32::from_bits(w[0].to_bits() ^ 1);
        assert_ne!(before, p.checksum());
    }

    #[test]
    fn conv_param_count_matches_init() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut p = Params::new();
        let c = Conv::same("c", 3, 2, 4, 3);
        c.init(&mut p, &mut rng);
        assert_eq!(p.count(), c.param_count());
        assert_eq!(c.param_count(), 4 * 2 * 27 + 4);
    }
}
