//! Lesion conditioning inputs: 2-D box canvases, 3-D noise boxes, tiled
//! size/attenuation channels, and the boundary blend and map-back steps
//! applied after 3-D synthesis.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attenuation {
    Solid,
    PartSolid,
    Ggn,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    /// Diameter thresholds: small up to 10 mm, medium up to 20 mm, large above.
    pub fn from_diameter_mm(d: f64) -> Self {
        if d <= 10.0 {
            SizeClass::Small
        } else if d <= 20.0 {
            SizeClass::Medium
        } else {
            SizeClass::Large
        }
    }

    /// Class of a box from its longest extent at the given voxel pitch.
    pub fn from_extent(extent: &[usize], pitch_mm: f64) -> Self {
        let longest = extent.iter().copied().max().unwrap_or(0);
        Self::from_diameter_mm(longest as f64 * pitch_mm)
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl Attenuation {
    pub const ALL: [Attenuation; 3] = [Attenuation::Solid, Attenuation::PartSolid, Attenuation::Ggn];

    fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for SizeClass {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(SizeClass::Small),
            "medium" => Ok(SizeClass::Medium),
            "large" => Ok(SizeClass::Large),
            other => Err(invalid(format!("unknown size class `{other}` (small, medium, large)"))),
        }
    }
}

impl FromStr for Attenuation {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "solid" => Ok(Attenuation::Solid),
            "part-solid" => Ok(Attenuation::PartSolid),
            "ggn" => Ok(Attenuation::Ggn),
            other => Err(invalid(format!("unknown attenuation class `{other}` (solid, part-solid, ggn)"))),
        }
    }
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(["small", "medium", "large"][self.index()])
    }
}

impl fmt::Display for Attenuation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(["solid", "part-solid", "ggn"][self.index()])
    }
}

/// Axis-aligned box. Coordinates follow array axis order: `(row, col)` in
/// 2-D and `(slice, row, col)` in 3-D.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub origin: Vec<usize>,
    pub extent: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_class: Option<SizeClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attenuation_class: Option<Attenuation>,
}

impl BoxAnnotation {
    pub fn new(origin: Vec<usize>, extent: Vec<usize>) -> Result<Self> {
        if origin.len() != extent.len() || !(2..=3).contains(&origin.len()) {
            return Err(invalid(format!("box must be 2-D or 3-D, got origin {origin:?} extent {extent:?}")));
        }
        if extent.contains(&0) {
            return Err(invalid(format!("box extents must be >= 1, got {extent:?}")));
        }
        Ok(Self {
            origin,
            extent,
            size_class: None,
            attenuation_class: None,
        })
    }

    pub fn dims(&self) -> usize {
        self.origin.len()
    }

    pub fn end(&self) -> Vec<usize> {
        self.origin.iter().zip(&self.extent).map(|(o, e)| o + e).collect()
    }

    pub fn volume(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn contains(&self, p: &[usize]) -> bool {
        p.iter()
            .zip(self.origin.iter().zip(&self.extent))
            .all(|(&x, (&o, &e))| x >= o && x < o + e)
    }

    pub fn check_inside(&self, canvas: &[usize]) -> Result<()> {
        if canvas.len() != self.dims() || self.end().iter().zip(canvas).any(|(e, c)| e > c) || self.extent.contains(&0) {
            return Err(invalid(format!(
                "box origin {:?} extent {:?} does not fit canvas {canvas:?}",
                self.origin, self.extent
            )));
        }
        Ok(())
    }
}

/// One annotation-file record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub scan_id: String,
    pub origin: Vec<usize>,
    pub extent: Vec<usize>,
    pub size_class: Option<SizeClass>,
    pub attenuation_class: Option<Attenuation>,
}

impl AnnotationRecord {
    pub fn new(scan_id: impl Into<String>, b: &BoxAnnotation) -> Self {
        Self {
            scan_id: scan_id.into(),
            origin: b.origin.clone(),
            extent: b.extent.clone(),
            size_class: b.size_class,
            attenuation_class: b.attenuation_class,
        }
    }

    pub fn to_box(&self) -> Result<BoxAnnotation> {
        let mut b = BoxAnnotation::new(self.origin.clone(), self.extent.clone())?;
        b.size_class = self.size_class;
        b.attenuation_class = self.attenuation_class;
        Ok(b)
    }
}

/// Binary box canvas `(H, W)`: 1 inside any box, 0 elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionMask2D {
    pub canvas: Tensor<f32>,
}

impl ConditionMask2D {
    pub fn nonzero(&self) -> usize {
        self.canvas.data().iter().filter(|&&v| v != 0.0).count()
    }

    /// Canvas as `(1, H, W)`, the layout the networks consume.
    pub fn as_channel(&self) -> Tensor<f32> {
        let s = self.canvas.shape();
        self.canvas.reshape(vec![1, s[0], s[1]]).expect("same size")
    }

    /// P5 PGM with background 0 and box interior 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let s = self.canvas.shape();
        let mut out = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
        out.extend(self.canvas.data().iter().map(|&v| if v != 0.0 { 255u8 } else { 0 }));
        out
    }
}

pub fn build_bbox_mask(boxes: &[BoxAnnotation], canvas: [usize; 2]) -> Result<ConditionMask2D> {
    let mut m = Tensor::<f32>::zeros(canvas.to_vec());
    for b in boxes {
        b.check_inside(&canvas)?;
        for y in b.origin[0]..b.origin[0] + b.extent[0] {
            for x in b.origin[1]..b.origin[1] + b.extent[1] {
                m[y * canvas[1] + x] = 1.0;
            }
        }
    }
    Ok(ConditionMask2D { canvas: m })
}

/// Bounding boxes of the 4-connected nonzero components, in raster order of
/// their first pixel.
pub fn recover_boxes(mask: &ConditionMask2D) -> Vec<BoxAnnotation> {
    let s = mask.canvas.shape();
    let (h, w) = (s[0], s[1]);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.canvas[start] == 0.0 {
            continue;
        }
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            y0 = y0.min(y);
            x0 = x0.min(x);
            y1 = y1.max(y);
            x1 = x1.max(x);
            let mut push = |q: usize| {
                if !seen[q] && mask.canvas[q] != 0.0 {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
        out.push(BoxAnnotation::new(vec![y0, x0], vec![y1 - y0 + 1, x1 - x0 + 1]).expect("non-empty"));
    }
    out
}

/// Geometric mask augmentation: flips, shift and zoom about the canvas
/// centre, each bounded by 10 % of the canvas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskAugment {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Shift as a fraction of the canvas, `(rows, cols)`.
    pub shift: [f64; 2],
    /// Scale factor minus one.
    pub zoom: f64,
}

pub const MASK_AUGMENT_LIMIT: f64 = 0.1;

impl MaskAugment {
    pub fn identity() -> Self {
        Self {
            flip_h: false,
            flip_v: false,
            shift: [0.0; 2],
            zoom: 0.0,
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        let l = MASK_AUGMENT_LIMIT;
        Self {
            flip_h: rng.random(),
            flip_v: rng.random(),
            shift: [rng.random_range(-l..=l), rng.random_range(-l..=l)],
            zoom: rng.random_range(-l..=l),
        }
    }

    /// Transform one 2-D box. Returns `None` when the result lies entirely
    /// off the canvas; partially visible boxes are clipped.
    pub fn apply(&self, b: &BoxAnnotation, canvas: [usize; 2]) -> Option<BoxAnnotation> {
        let mut out = b.clone();
        let mut lo = [0usize; 2];
        let mut hi = [0usize; 2];
        for a in 0..2 {
            let n = canvas[a] as f64;
            let flip = if a == 0 { self.flip_v } else { self.flip_h };
            let (mut s, mut e) = (b.origin[a] as f64, (b.origin[a] + b.extent[a]) as f64);
            if flip {
                (s, e) = (n - e, n - s);
            }
            let c = n / 2.0;
            let z = 1.0 + self.zoom;
            let d = self.shift[a] * n;
            let s2 = c + (s - c) * z + d;
            let e2 = c + (e - c) * z + d;
            let (s2, e2) = (s2.round(), e2.round().max(s2.round() + 1.0));
            if e2 <= 0.0 || s2 >= n {
                return None;
            }
            lo[a] = s2.max(0.0) as usize;
            hi[a] = (e2.min(n) as usize).max(lo[a] + 1);
        }
        out.origin = lo.to_vec();
        out.extent = vec![hi[0] - lo[0], hi[1] - lo[1]];
        Some(out)
    }
}

/// Draw augmentations until every box stays at least partly on the canvas
/// (at most 10 tries) and return the transformed boxes and their mask.
pub fn augment_mask(
    boxes: &[BoxAnnotation],
    canvas: [usize; 2],
    rng: &mut impl Rng,
) -> Result<(Vec<BoxAnnotation>, ConditionMask2D, MaskAugment)> {
    for _ in 0..10 {
        let aug = MaskAugment::sample(rng);
        let moved: Option<Vec<BoxAnnotation>> = boxes.iter().map(|b| aug.apply(b, canvas)).collect();
        if let Some(moved) = moved {
            let mask = build_bbox_mask(&moved, canvas)?;
            return Ok((moved, mask, aug));
        }
    }
    Err(invalid(format!(
        "mask augmentation pushed a box off the {canvas:?} canvas in 10 consecutive draws"
    )))
}

/// A 3-D scalar volume `(D, H, W)` with optional voxel spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Tensor<f32>,
    pub spacing: Option<[f64; 3]>,
}

impl Volume {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        if data.ndim() != 3 {
            return Err(invalid(format!("volume must be 3-D, got {:?}", data.shape())));
        }
        Ok(Self { data, spacing: None })
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = Some(spacing);
        self
    }

    pub fn extent(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        let [_, h, w] = self.extent();
        self.data[(z * h + y) * w + x]
    }

    pub fn crop(&self, b: &BoxAnnotation) -> Result<Volume> {
        b.check_inside(&self.extent())?;
        let [_, h, w] = self.extent();
        let (o, e) = (&b.origin, &b.extent);
        let data = Tensor::from_fn(e.clone(), |i| {
            let x = i % e[2];
            let y = (i / e[2]) % e[1];
            let z = i / (e[1] * e[2]);
            self.data[((o[0] + z) * h + o[1] + y) * w + o[2] + x]
        });
        Ok(Volume {
            data,
            spacing: self.spacing,
        })
    }
}

/// A VOI whose box interior was replaced with uniform noise.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBoxVOI {
    pub volume: Volume,
    pub noise_box: BoxAnnotation,
    pub original_box_content: Vec<f32>,
}

pub const NOISE_HALF_WIDTH: f32 = 0.5;

pub fn carve_noise_box(voi: &Volume, b: &BoxAnnotation, rng: &mut impl Rng) -> Result<NoiseBoxVOI> {
    b.check_inside(&voi.extent())?;
    let [_, h, w] = voi.extent();
    let mut volume = voi.clone();
    let mut original = Vec::with_capacity(b.volume());
    for z in b.origin[0]..b.origin[0] + b.extent[0] {
        for y in b.origin[1]..b.origin[1] + b.extent[1] {
            for x in b.origin[2]..b.origin[2] + b.extent[2] {
                let i = (z * h + y) * w + x;
                original.push(volume.data[i]);
                volume.data[i] = rng.random_range(-NOISE_HALF_WIDTH..=NOISE_HALF_WIDTH);
            }
        }
    }
    Ok(NoiseBoxVOI {
        volume,
        noise_box: b.clone(),
        original_box_content: original,
    })
}

/// Six constant channels `(small, medium, large, solid, part-solid, ggn)`
/// of shape `(6, D, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionChannels {
    pub channels: Tensor<f32>,
}

pub fn tile_conditions(size: SizeClass, attenuation: Attenuation, extent: [usize; 3]) -> ConditionChannels {
    let per: usize = extent.iter().product();
    let hot = [size.index(), 3 + attenuation.index()];
    let channels = Tensor::from_fn(vec![6, extent[0], extent[1], extent[2]], |i| {
        if hot.contains(&(i / per)) {
            1.0
        } else {
            0.0
        }
    });
    ConditionChannels { channels }
}

/// Parse class labels and tile them.
pub fn tile_conditions_from_labels(size: &str, attenuation: &str, extent: [usize; 3]) -> Result<ConditionChannels> {
    Ok(tile_conditions(size.parse()?, attenuation.parse()?, extent))
}

impl ConditionChannels {
    /// Generator input `(7, D, H, W)`: the VOI followed by the six channels.
    pub fn generator_input(&self, voi: &Volume) -> Result<Tensor<f32>> {
        let e = voi.extent();
        if self.channels.shape()[1..] != e {
            return Err(invalid(format!(
                "condition channels {:?} do not match VOI {:?}",
                self.channels.shape(),
                e
            )));
        }
        let mut data = voi.data.data().to_vec();
        data.extend_from_slice(self.channels.data());
        Tensor::new(vec![7, e[0], e[1], e[2]], data)
    }
}

pub const BLEND_SHELL: usize = 3;
pub const BLEND_ITERATIONS: usize = 5;

/// True when `p` lies within `BLEND_SHELL` voxels of a face of `b`, on
/// either side: inside the box grown by 3 but not inside the box shrunk by 3.
fn in_shell(b: &BoxAnnotation, p: [usize; 3]) -> bool {
    let r = BLEND_SHELL as isize;
    let mut inside_grown = true;
    let mut inside_shrunk = true;
    for a in 0..3 {
        let (o, e, v) = (b.origin[a] as isize, b.extent[a] as isize, p[a] as isize);
        inside_grown &= v >= o - r && v < o + e + r;
        inside_shrunk &= v >= o + r && v < o + e - r;
    }
    inside_grown && !inside_shrunk
}

/// Smooth the seam around a pasted box: five Jacobi sweeps replacing every
/// shell voxel with the mean of itself and its six face neighbours, with
/// neighbours clamped at the volume edge. Voxels outside the shell are left
/// untouched.
pub fn blend_box_boundary(vol: &Volume, b: &BoxAnnotation) -> Result<Volume> {
    b.check_inside(&vol.extent())?;
    let [d, h, w] = vol.extent();
    let r = BLEND_SHELL;
    let lo: Vec<usize> = (0..3).map(|a| b.origin[a].saturating_sub(r)).collect();
    let hi: Vec<usize> = (0..3).map(|a| (b.origin[a] + b.extent[a] + r).min([d, h, w][a])).collect();
    let mut shell = Vec::new();
    for z in lo[0]..hi[0] {
        for y in lo[1]..hi[1] {
            for x in lo[2]..hi[2] {
                if in_shell(b, [z, y, x]) {
                    shell.push([z, y, x]);
                }
            }
        }
    }
    let mut cur = vol.clone();
    for _ in 0..BLEND_ITERATIONS {
        let prev = cur.data.clone();
        let at = |z: usize, y: usize, x: usize| prev[(z * h + y) * w + x];
        for &[z, y, x] in &shell {
            let s = at(z, y, x)
                + at(z.saturating_sub(1), y, x)
                + at((z + 1).min(d - 1), y, x)
                + at(z, y.saturating_sub(1), x)
                + at(z, (y + 1).min(h - 1), x)
                + at(z, y, x.saturating_sub(1))
                + at(z, y, (x + 1).min(w - 1));
            cur.data[(z * h + y) * w + x] = s / 7.0;
        }
    }
    Ok(cur)
}

/// Trilinear resample to `shape` with voxel-centre alignment: output voxel
/// `i` samples source coordinate `(i + 0.5) * n_src / n_dst - 0.5`, clamped
/// to the source grid.
pub fn resample_trilinear(src: &Tensor<f32>, shape: [usize; 3]) -> Result<Tensor<f32>> {
    if src.ndim() != 3 || shape.contains(&0) {
        return Err(invalid(format!("cannot resample {:?} to {shape:?}", src.shape())));
    }
    let s = [src.shape()[0], src.shape()[1], src.shape()[2]];
    let coords: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| {
            (0..shape[a])
                .map(|i| {
                    let u = ((i as f64 + 0.5) * s[a] as f64 / shape[a] as f64 - 0.5).clamp(0.0, (s[a] - 1) as f64);
                    let i0 = u.floor() as usize;
                    let i1 = (i0 + 1).min(s[a] - 1);
                    (i0, i1, u - i0 as f64)
                })
                .collect()
        })
        .collect();
    let at = |z: usize, y: usize, x: usize| src[(z * s[1] + y) * s[2] + x] as f64;
    Ok(Tensor::from_fn(shape.to_vec(), |i| {
        let x = i % shape[2];
        let y = (i / shape[2]) % shape[1];
        let z = i / (shape[1] * shape[2]);
        let (z0, z1, fz) = coords[0][z];
        let (y0, y1, fy) = coords[1][y];
        let (x0, x1, fx) = coords[2][x];
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
        let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
        let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
        let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
        lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz) as f32
    }))
}

/// Write a processed VOI back into the scan at `voi_origin` (scan voxel
/// coordinates). When both carry a spacing and they differ, the VOI is
/// resampled to the scan's spacing first.
pub fn map_back(scan: &Volume, voi_origin: [usize; 3], processed: &Volume) -> Result<Volume> {
    let patch = match (scan.spacing, processed.spacing) {
        (Some(ss), Some(vs)) if ss != vs => {
            let e = processed.extent();
            let shape = [0, 1, 2].map(|a| ((e[a] as f64 * vs[a] / ss[a]).round() as usize).max(1));
            resample_trilinear(&processed.data, shape)?
        }
        (Some(_), Some(_)) | (None, None) => processed.data.clone(),
        _ => {
            return Err(invalid(
                "spacing mismatch: scan and VOI must both carry a spacing (or neither) to map back",
            ))
        }
    };
    let pe = [patch.shape()[0], patch.shape()[1], patch.shape()[2]];
    let region = BoxAnnotation::new(voi_origin.to_vec(), pe.to_vec())?;
    region.check_inside(&scan.extent())?;
    let [_, h, w] = scan.extent();
    let mut out = scan.clone();
    for z in 0..pe[0] {
        for y in 0..pe[1] {
            let dst = ((voi_origin[0] + z) * h + voi_origin[1] + y) * w + voi_origin[2];
            let src = (z * pe[1] + y) * pe[2];
            out.data.data_mut()[dst..dst + pe[2]].copy_from_slice(&patch.data()[src..src + pe[2]]);
        }
    }
    Ok(out)
}
