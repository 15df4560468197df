//! Layer-level ops composed from graph primitives, so every one of them is
//! twice differentiable for free.

use super::{Graph, NodeId};
use crate::error::{invalid, Result};
use crate::tensor::{Element, Tensor};

/// Batch-normalisation hyper-parameters plus the buffer names its running statistics live under.
#[derive(Clone, Debug)]
pub struct BatchNormSpec {
    pub name: String,
    pub eps: f64,
    /// Fraction of the previous running statistic retained on each update.
    pub momentum: f64,
}

impl BatchNormSpec {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            eps: 1e-5,
            momentum: 0.9,
        }
    }
}

/// Shape `[1, C, 1, ...]` used to broadcast per-channel quantities.
fn channel_shape(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    s[1] = shape[1];
    s
}

impl<T: Element> Graph<T> {
    /// `x · wᵀ + b` with `w` of shape `(out, in)` and `b` of shape `(out)`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul_t(x, w, false, true)?;
        match b {
            Some(b) => {
                let out = self.shape(w)[0];
                let b = self.reshape(b, &[1, out])?;
                self.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// Adds a per-channel bias of shape `(C)` to an `(N, C, ...)` tensor.
    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let s = channel_shape(self.shape(x));
        let b = self.reshape(b, &s)?;
        self.add(x, b)
    }

    /// Batch normalisation over every axis except the channel axis (axis 1).
    ///
    /// Training mode normalises with batch statistics and records updated
    /// running statistics; inference mode uses the running statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: (&Tensor<f32>, &Tensor<f32>),
        spec: &BatchNormSpec,
    ) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(invalid(format!("batch-norm needs (N, C, ...), got {shape:?}")));
        }
        let cs = channel_shape(&shape);
        let (mean, var) = if self.is_training() {
            let mean = self.mean_to(x, &cs)?;
            let xc = self.sub(x, mean)?;
            let sq = self.square(xc)?;
            let var = self.mean_to(sq, &cs)?;
            let m = spec.momentum as f32;
            let bm = self.value(mean).cast::<f32>();
            let bv = self.value(var).cast::<f32>();
            let rm = Tensor::from_fn(vec![shape[1]], |c| m * running.0[c] + (1.0 - m) * bm[c]);
            let rv = Tensor::from_fn(vec![shape[1]], |c| m * running.1[c] + (1.0 - m) * bv[c]);
            self.record_buffer_update(format!("{}.running_mean", spec.name), rm);
            self.record_buffer_update(format!("{}.running_var", spec.name), rv);
            (mean, var)
        } else {
            let rm = running.0.reshape(cs.clone())?;
            let rv = running.1.reshape(cs.clone())?;
            (self.buffer(&rm), self.buffer(&rv))
        };
        let xc = self.sub(x, mean)?;
        let v = self.offset(var, spec.eps)?;
        let sd = self.sqrt(v)?;
        let xhat = self.div(xc, sd)?;
        let g = self.reshape(gamma, &cs)?;
        let b = self.reshape(beta, &cs)?;
        let y = self.mul(xhat, g)?;
        self.add(y, b)
    }

    /// Per-pixel feature normalisation: each pixel's channel vector is scaled
    /// to unit root-mean-square, `x / sqrt(mean_c(x²) + eps)`.
    pub fn pixel_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let mut s = shape.clone();
        s[1] = 1;
        let sq = self.square(x)?;
        let ms = self.mean_to(sq, &s)?;
        let ms = self.offset(ms, eps)?;
        let rms = self.sqrt(ms)?;
        self.div(x, rms)
    }

    /// Appends one channel holding the mean (over features and positions) of
    /// the per-feature standard deviation across the batch.
    pub fn minibatch_stddev(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let mut per = shape.clone();
        per[0] = 1;
        let mean = self.mean_to(x, &per)?;
        let xc = self.sub(x, mean)?;
        let sq = self.square(xc)?;
        let var = self.mean_to(sq, &per)?;
        let var = self.offset(var, 1e-8)?;
        let sd = self.sqrt(var)?;
        let avg = self.mean(sd)?;
        let mut feat = shape.clone();
        feat[1] = 1;
        let ones = vec![1; shape.len()];
        let avg = self.reshape(avg, &ones)?;
        let plane = self.broadcast_to(avg, &feat)?;
        self.concat(&[x, plane], 1)
    }

    /// Mean absolute value.
    pub fn l1(&mut self, x: NodeId) -> Result<NodeId> {
        let a = self.abs(x)?;
        self.mean(a)
    }

    /// Euclidean norm of each sample (all axes but the first), shape `(N)`.
    pub fn l2_norm_per_sample(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let n = self.shape(x)[0];
        let mut s = vec![1; self.shape(x).len()];
        s[0] = n;
        let sq = self.square(x)?;
        let ss = self.sum_to(sq, &s)?;
        let ss = self.offset(ss, eps)?;
        let r = self.sqrt(ss)?;
        self.reshape(r, &[n])
    }
}
