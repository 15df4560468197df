use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AnchorSet, YoloGrid, LAMBDA_COORD, LAMBDA_NOOBJ};
use crate::autodiff::{Graph, NodeId};
use crate::error::{invalid, Result};
use crate::nn::{BatchNorm, Conv, Dense, Params, LRELU_SLOPE};
use crate::tensor::Tensor;

/// Single-scale detector: stride-2 downsampling levels, each followed by a
/// residual 3x3 convolution, and a 1x1 head with `B * 5 + classes` outputs
/// per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub in_ch: usize,
    pub input: usize,
    pub s: usize,
    pub classes: usize,
    pub anchors: AnchorSet,
    pub widths: Vec<usize>,
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
}

impl DetectorSpec {
    pub fn new(input: usize, s: usize, anchors: AnchorSet) -> Result<Self> {
        if s == 0 || input % s != 0 || !(input / s).is_power_of_two() || input == s {
            return Err(invalid(format!("input {input} must be a power-of-two multiple (> 1) of the grid side {s}")));
        }
        let levels = (input / s).trailing_zeros() as usize;
        Ok(Self {
            in_ch: 1,
            input,
            s,
            classes: 1,
            anchors,
            widths: (0..levels).map(|i| 8 << i.min(2)).collect(),
            lambda_coord: LAMBDA_COORD,
            lambda_noobj: LAMBDA_NOOBJ,
        })
    }

    pub fn boxes(&self) -> usize {
        self.anchors.anchors.len()
    }

    pub fn head_channels(&self) -> usize {
        self.boxes() * 5 + self.classes
    }

    fn layers(&self) -> (Vec<(Conv, Conv)>, Conv) {
        let mut c = self.in_ch;
        let mut levels = Vec::new();
        for (i, &w) in self.widths.iter().enumerate() {
            let down = Conv {
                stride: 2,
                ..Conv::same(format!("det.l{i}.down"), 2, c, w, 3)
            };
            levels.push((down, Conv::same(format!("det.l{i}.res"), 2, w, w, 3)));
            c = w;
        }
        (levels, Conv::same("det.head", 2, c, self.head_channels(), 1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input >> self.widths.len() != self.s || self.input % self.s != 0 {
            return Err(invalid(format!(
                "{} downsampling levels map input {} to {}, not the grid side {}",
                self.widths.len(),
                self.input,
                self.input >> self.widths.len(),
                self.s
            )));
        }
        AnchorSet::new(self.anchors.anchors.clone())?;
        Ok(())
    }

    pub fn init(&self, rng: &mut impl Rng) -> Result<Params> {
        self.validate()?;
        let mut params = Params::new();
        let (levels, head) = self.layers();
        for (d, r) in &levels {
            d.init(&mut params, rng);
            r.init(&mut params, rng);
        }
        head.init(&mut params, rng);
        // start with low objectness so the no-object term does not dominate
        let b = params.get_mut("det.head.b").expect("head bias exists");
        for k in 0..self.boxes() {
            b[k * 5 + 4] = -4.0;
        }
        Ok(params)
    }

    /// Raw head output `(N, B * 5 + classes, S, S)`.
    pub fn forward(&self, g: &mut Graph<f32>, params: &Params, x: NodeId) -> Result<NodeId> {
        let (levels, head) = self.layers();
        let mut h = x;
        for (d, r) in &levels {
            let y = d.forward(g, params, h)?;
            h = g.leaky_relu(y, LRELU_SLOPE)?;
            let y = r.forward(g, params, h)?;
            let y = g.leaky_relu(y, LRELU_SLOPE)?;
            h = g.add(h, y)?;
        }
        head.forward(g, params, h)
    }

    /// Decode one sample's raw head output into grid quantities.
    pub fn head_to_grid(&self, raw: &Tensor<f32>) -> Result<YoloGrid> {
        let (b, s, classes) = (self.boxes(), self.s, self.classes);
        if raw.shape() != [self.head_channels(), s, s] {
            return Err(invalid(format!("head output {:?} does not match ({}, {s}, {s})", raw.shape(), self.head_channels())));
        }
        let at = |c: usize, r: usize, col: usize| raw[(c * s + r) * s + col] as f64;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut grid = YoloGrid::empty(s, b, classes);
        for r in 0..s {
            for col in 0..s {
                for k in 0..b {
                    let (aw, ah) = self.anchors.anchors[k];
                    let i = grid.slot(r, col, k);
                    grid.boxes[i] = [
                        sig(at(k * 5, r, col)),
                        sig(at(k * 5 + 1, r, col)),
                        aw * at(k * 5 + 2, r, col).exp(),
                        ah * at(k * 5 + 3, r, col).exp(),
                        sig(at(k * 5 + 4, r, col)),
                    ];
                }
                for c in 0..classes {
                    grid.class_probs[(r * s + col) * classes + c] = sig(at(b * 5 + c, r, col));
                }
            }
        }
        Ok(grid)
    }
}

/// Truth grids laid out as graph constants.
#[derive(Clone, Debug)]
pub struct TargetBatch {
    pub x: Tensor<f32>,
    pub y: Tensor<f32>,
    pub sqrt_w: Tensor<f32>,
    pub sqrt_h: Tensor<f32>,
    /// `(N, B, S, S)` responsibility indicator; also the objectness target.
    pub obj: Tensor<f32>,
    pub classes: Tensor<f32>,
    /// `(N, 1, S, S)`: cell holds an object.
    pub cell_obj: Tensor<f32>,
}

impl TargetBatch {
    pub fn from_grids(grids: &[YoloGrid]) -> Result<Self> {
        let first = grids.first().ok_or_else(|| invalid("empty target batch"))?;
        let (n, s, b, nc) = (grids.len(), first.s, first.b, first.classes);
        let mut x = vec![0.0; n * b * s * s];
        let (mut y, mut sw, mut sh, mut obj) = (x.clone(), x.clone(), x.clone(), x.clone());
        let mut cls = vec![0.0; n * nc * s * s];
        let mut cell = vec![0.0; n * s * s];
        for (i, g) in grids.iter().enumerate() {
            if (g.s, g.b, g.classes) != (s, b, nc) {
                return Err(invalid("target grids in a batch must share a layout"));
            }
            for r in 0..s {
                for c in 0..s {
                    for k in 0..b {
                        let slot = g.slot(r, c, k);
                        let at = ((i * b + k) * s + r) * s + c;
                        if g.responsible[slot] {
                            let v = g.boxes[slot];
                            x[at] = v[0] as f32;
                            y[at] = v[1] as f32;
                            sw[at] = v[2].sqrt() as f32;
                            sh[at] = v[3].sqrt() as f32;
                            obj[at] = 1.0;
                            cell[(i * s + r) * s + c] = 1.0;
                        }
                    }
                    for k in 0..nc {
                        cls[((i * nc + k) * s + r) * s + c] = g.class_probs[(r * s + c) * nc + k] as f32;
                    }
                }
            }
        }
        let t = |d: Vec<f32>, ch: usize| Tensor::new(vec![n, ch, s, s], d);
        Ok(Self {
            x: t(x, b)?,
            y: t(y, b)?,
            sqrt_w: t(sw, b)?,
            sqrt_h: t(sh, b)?,
            obj: t(obj, b)?,
            classes: t(cls, nc)?,
            cell_obj: t(cell, 1)?,
        })
    }
}

/// Graph form of the YOLO loss on a raw head output, averaged over the batch.
pub fn yolo_loss_node(g: &mut Graph<f32>, raw: NodeId, targets: &TargetBatch, spec: &DetectorSpec) -> Result<NodeId> {
    let shape = g.shape(raw).to_vec();
    let (n, s, b, nc) = (shape[0], spec.s, spec.boxes(), spec.classes);
    if shape != [n, spec.head_channels(), s, s] {
        return Err(invalid(format!("head output {shape:?} does not match the detector layout")));
    }
    let boxes = g.slice(raw, 1, 0, b * 5)?;
    let boxes = g.reshape(boxes, &[n, b, 5, s, s])?;
    let mut comp = Vec::with_capacity(5);
    for i in 0..5 {
        let c = g.slice(boxes, 2, i, 1)?;
        comp.push(g.reshape(c, &[n, b, s, s])?);
    }
    let sq_err = |g: &mut Graph<f32>, p: NodeId, t: &Tensor<f32>| -> Result<NodeId> {
        let t = g.constant(t.clone());
        let d = g.sub(p, t)?;
        g.square(d)
    };
    let obj = g.constant(targets.obj.clone());

    let px = g.sigmoid(comp[0])?;
    let py = g.sigmoid(comp[1])?;
    let ex = sq_err(g, px, &targets.x)?;
    let ey = sq_err(g, py, &targets.y)?;
    let coord = g.add(ex, ey)?;

    let sqrt_anchor = |k: usize| spec.anchors.anchors[k];
    let aw = Tensor::from_fn(vec![1, b, 1, 1], |k| sqrt_anchor(k).0.sqrt() as f32);
    let ah = Tensor::from_fn(vec![1, b, 1, 1], |k| sqrt_anchor(k).1.sqrt() as f32);
    let half_w = g.scale(comp[2], 0.5)?;
    let half_h = g.scale(comp[3], 0.5)?;
    let ew = g.exp(half_w)?;
    let eh = g.exp(half_h)?;
    let aw = g.constant(aw);
    let ah = g.constant(ah);
    let sw = g.mul(ew, aw)?;
    let sh = g.mul(eh, ah)?;
    let ew = sq_err(g, sw, &targets.sqrt_w)?;
    let eh = sq_err(g, sh, &targets.sqrt_h)?;
    let size = g.add(ew, eh)?;

    let geom = g.add(coord, size)?;
    let geom = g.mul(geom, obj)?;
    let geom = g.sum(geom)?;
    let geom = g.scale(geom, spec.lambda_coord)?;

    // objectness target equals the responsibility indicator
    let pc = g.sigmoid(comp[4])?;
    let ec = sq_err(g, pc, &targets.obj)?;
    let weight = targets.obj.map(|o| o + (1.0 - o) * spec.lambda_noobj as f32);
    let weight = g.constant(weight);
    let conf = g.mul(ec, weight)?;
    let conf = g.sum(conf)?;

    let cls = g.slice(raw, 1, b * 5, nc)?;
    let pcls = g.sigmoid(cls)?;
    let ecls = sq_err(g, pcls, &targets.classes)?;
    let cell = g.constant(targets.cell_obj.clone());
    let ecls = g.mul(ecls, cell)?;
    let ecls = g.sum(ecls)?;

    let total = g.add(geom, conf)?;
    let total = g.add(total, ecls)?;
    g.scale(total, 1.0 / n as f64)
}

/// Residual classifier: a stem convolution, residual blocks (average
/// downsampling before every block after the first), then global average
/// pool, flatten, dropout, dense(2), batch-norm and sigmoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub in_ch: usize,
    pub input: usize,
    pub width: usize,
    pub blocks: usize,
    pub dropout: f64,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            in_ch: 1,
            input: 64,
            width: 8,
            blocks: 4,
            dropout: 0.5,
        }
    }
}

impl ClassifierSpec {
    fn stem(&self) -> Conv {
        Conv::same("cls.stem", 2, self.in_ch, self.width, 3)
    }

    fn block(&self, i: usize) -> (Conv, Conv) {
        (
            Conv::same(format!("cls.b{i}.conv0"), 2, self.width, self.width, 3),
            Conv::same(format!("cls.b{i}.conv1"), 2, self.width, self.width, 3),
        )
    }

    fn dense(&self) -> Dense {
        Dense::new("cls.dense", self.width, 2)
    }

    fn bn(&self) -> BatchNorm {
        BatchNorm::new("cls.bn", 2)
    }

    pub fn init(&self, rng: &mut impl Rng) -> Result<Params> {
        if self.input >> (self.blocks.saturating_sub(1)) == 0 || self.blocks == 0 {
            return Err(invalid(format!("{} blocks do not fit input {}", self.blocks, self.input)));
        }
        let mut p = Params::new();
        self.stem().init(&mut p, rng);
        for i in 0..self.blocks {
            let (a, b) = self.block(i);
            a.init(&mut p, rng);
            b.init(&mut p, rng);
        }
        self.dense().init(&mut p, rng);
        self.bn().init(&mut p);
        Ok(p)
    }

    /// Class probabilities `(N, 2)`.
    pub fn forward(&self, g: &mut Graph<f32>, params: &Params, x: NodeId) -> Result<NodeId> {
        let h = self.stem().forward(g, params, x)?;
        let mut h = g.relu(h)?;
        for i in 0..self.blocks {
            if i > 0 {
                h = g.avg_downsample(h, 2)?;
            }
            let (c0, c1) = self.block(i);
            let y = c0.forward(g, params, h)?;
            let y = g.relu(y)?;
            let y = c1.forward(g, params, y)?;
            let y = g.add(h, y)?;
            h = g.relu(y)?;
        }
        let n = g.shape(h)[0];
        let pooled = g.mean_to(h, &[n, self.width, 1, 1])?;
        let flat = g.reshape(pooled, &[n, self.width])?;
        let dropped = g.dropout(flat, self.dropout)?;
        let logits = self.dense().forward(g, params, dropped)?;
        let normed = self.bn().forward(g, params, logits)?;
        g.sigmoid(normed)
    }
}
