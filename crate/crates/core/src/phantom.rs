//! Procedural phantoms: seeded 2-D "brain-like" slices and 3-D "lung-like"
//! volumes with planted lesions, the classic affine augmentations, and
//! scene-level splits.

use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::conditioning::{build_bbox_mask, AnnotationRecord, Attenuation, BoxAnnotation, ConditionMask2D, SizeClass};
use crate::error::{contract, invalid, Result};
use crate::io;
use crate::tensor::Tensor;

/// Nominal voxel pitch used to turn lesion diameters into size classes.
pub const PHANTOM_PITCH_MM: f64 = 2.0;
pub const ROUGH_BOX_MAX_JITTER: f64 = 0.2;
pub const NOISE_SD: f64 = 0.02;
pub const MIN_EXTENT: usize = 8;

const PLACEMENT_ATTEMPTS: usize = 2000;

/// Relative frequency of each attenuation class, in `Attenuation::ALL` order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMix(pub [f64; 3]);

impl Default for ClassMix {
    fn default() -> Self {
        Self([1.0, 1.0, 1.0])
    }
}

impl ClassMix {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|w| !w.is_finite() || *w < 0.0) || self.0.iter().sum::<f64>() <= 0.0 {
            return Err(invalid(format!("class mix needs non-negative weights with a positive sum, got {:?}", self.0)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub center: Vec<f64>,
    pub radii: Vec<f64>,
    pub intensity_offset: f32,
    pub attenuation_class: Attenuation,
}

impl Lesion {
    /// Normalised ellipsoidal distance of a voxel centre; the support is `< 1`.
    pub fn distance(&self, p: &[usize]) -> f64 {
        p.iter()
            .zip(self.center.iter().zip(&self.radii))
            .map(|(&x, (&c, &r))| ((x as f64 - c) / r).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn profile(&self, d: f64) -> f32 {
        if d >= 1.0 {
            return 0.0;
        }
        let w = match self.attenuation_class {
            Attenuation::Solid => 1.0,
            Attenuation::PartSolid if d < 0.5 => 1.0,
            Attenuation::PartSolid => 0.5,
            Attenuation::Ggn => 0.45,
        };
        self.intensity_offset * w
    }

    pub fn diameter_mm(&self) -> f64 {
        2.0 * self.radii.iter().copied().fold(0.0, f64::max) * PHANTOM_PITCH_MM
    }

    /// Tight integer bounding box of the support.
    pub fn support_box(&self, extent: &[usize]) -> Option<BoxAnnotation> {
        let dims = extent.len();
        let mut lo = vec![usize::MAX; dims];
        let mut hi = vec![0usize; dims];
        let range: Vec<(usize, usize)> = (0..dims)
            .map(|a| {
                let s = (self.center[a] - self.radii[a]).floor().max(0.0) as usize;
                let e = ((self.center[a] + self.radii[a]).ceil() as usize + 1).min(extent[a]);
                (s, e)
            })
            .collect();
        let mut found = false;
        for_each_point(&range, |p| {
            if self.distance(p) < 1.0 {
                found = true;
                for a in 0..dims {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a] + 1);
                }
            }
        });
        found.then(|| BoxAnnotation::new(lo.clone(), hi.iter().zip(&lo).map(|(h, l)| h - l).collect()).ok())?
    }
}

fn for_each_point(range: &[(usize, usize)], mut f: impl FnMut(&[usize])) {
    if range.iter().any(|(s, e)| s >= e) {
        return;
    }
    let mut p: Vec<usize> = range.iter().map(|r| r.0).collect();
    loop {
        f(&p);
        let mut a = range.len();
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            p[a] += 1;
            if p[a] < range[a].1 {
                break;
            }
            p[a] = range[a].0;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomScene {
    pub seed: u64,
    pub dims: usize,
    pub extent: Vec<usize>,
    /// Image of shape `extent`, intensities in `[-1, 1]`.
    pub image: Tensor<f32>,
    pub lesions: Vec<Lesion>,
    /// Rough annotations, one per lesion, in lesion order.
    pub boxes: Vec<BoxAnnotation>,
}

impl PhantomScene {
    pub fn id(&self) -> String {
        format!("phantom-{}d-{:016x}", self.dims, self.seed)
    }

    /// Rough-box canvas of a 2-D scene.
    pub fn mask(&self) -> Result<ConditionMask2D> {
        if self.dims != 2 {
            return Err(invalid("box canvases are built for 2-D scenes only"));
        }
        build_bbox_mask(&self.boxes, [self.extent[0], self.extent[1]])
    }

    /// Axial slices of a 3-D scene, each `(1, H, W)`, with the boxes that
    /// intersect it.
    pub fn slices(&self) -> Result<Vec<(Tensor<f32>, Vec<BoxAnnotation>)>> {
        if self.dims != 3 {
            return Err(invalid("only 3-D scenes have slices"));
        }
        let (d, h, w) = (self.extent[0], self.extent[1], self.extent[2]);
        (0..d)
            .map(|z| {
                let img = Tensor::new(vec![1, h, w], self.image.data()[z * h * w..(z + 1) * h * w].to_vec())?;
                let boxes = self
                    .boxes
                    .iter()
                    .filter(|b| z >= b.origin[0] && z < b.origin[0] + b.extent[0])
                    .map(|b| {
                        let mut s = BoxAnnotation::new(b.origin[1..].to_vec(), b.extent[1..].to_vec())?;
                        s.size_class = b.size_class;
                        s.attenuation_class = b.attenuation_class;
                        Ok(s)
                    })
                    .collect::<Result<_>>()?;
                Ok((img, boxes))
            })
            .collect()
    }
}

/// Seed of the `i`-th scene of a set.
pub fn scene_seed(base: u64, i: usize) -> u64 {
    base ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Render a scene. The background draws from its own random stream, so the
/// same seed with `lesion_count = 0` reproduces the lesion-free image.
pub fn generate_phantom(seed: u64, dims: usize, extent: &[usize], lesion_count: usize, class_mix: ClassMix) -> Result<PhantomScene> {
    if !(2..=3).contains(&dims) || extent.len() != dims {
        return Err(invalid(format!("phantoms are 2-D or 3-D with one extent per axis, got dims {dims} extent {extent:?}")));
    }
    if extent.iter().any(|&e| e < MIN_EXTENT) {
        return Err(invalid(format!("extent {extent:?} is below the minimum of {MIN_EXTENT} per axis")));
    }
    class_mix.validate()?;

    let mut bg = ChaCha8Rng::seed_from_u64(seed);
    bg.set_stream(0);
    let mut lr = ChaCha8Rng::seed_from_u64(seed);
    lr.set_stream(1);

    let organ_c: Vec<f64> = extent.iter().map(|&e| e as f64 / 2.0 - 0.5).collect();
    let organ_a: Vec<f64> = extent.iter().map(|&e| e as f64 * bg.random_range(0.36..0.44)).collect();
    let phase = bg.random_range(0.0..std::f64::consts::TAU);
    let (tissue, outside, offset) = if dims == 2 { (-0.1, -0.9, 0.8) } else { (-0.7, 0.1, 1.2) };

    // lesions: ellipsoids kept inside the organ and apart from each other
    let min_ext = *extent.iter().min().unwrap() as f64;
    let mix = WeightedIndex::new(class_mix.0).map_err(|e| invalid(e.to_string()))?;
    let mut lesions: Vec<Lesion> = Vec::with_capacity(lesion_count);
    let mut attempts = 0;
    while lesions.len() < lesion_count {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS * lesion_count.max(1) {
            return Err(invalid(format!("extent {extent:?} is too small to place {lesion_count} lesions")));
        }
        let r0 = lr.random_range(1.5..1.5 + min_ext / 10.0);
        let radii: Vec<f64> = (0..dims).map(|_| r0 * lr.random_range(0.8..1.2)).collect();
        let center: Vec<f64> = organ_c.iter().zip(&organ_a).map(|(c, a)| c + lr.random_range(-a..*a)).collect();
        let centre_norm = center
            .iter()
            .zip(organ_c.iter().zip(&organ_a))
            .map(|(p, (c, a))| ((p - c) / a).powi(2))
            .sum::<f64>()
            .sqrt();
        let reach = radii.iter().zip(&organ_a).map(|(r, a)| r / a).fold(0.0, f64::max);
        if centre_norm + reach > 0.95 {
            continue;
        }
        let rmax = radii.iter().copied().fold(0.0, f64::max);
        let clear = lesions.iter().all(|l| {
            let d = l.center.iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            d > rmax + l.radii.iter().copied().fold(0.0, f64::max) + 2.0
        });
        if !clear {
            continue;
        }
        let attenuation_class = Attenuation::ALL[mix.sample(&mut lr)];
        lesions.push(Lesion {
            center,
            radii,
            intensity_offset: offset,
            attenuation_class,
        });
    }

    let mut boxes = Vec::with_capacity(lesions.len());
    for l in &lesions {
        let tight = l.support_box(extent).ok_or_else(|| contract("lesion support is empty"))?;
        let mut origin = Vec::with_capacity(dims);
        let mut ext = Vec::with_capacity(dims);
        for a in 0..dims {
            let grow_lo = (lr.random_range(0.0..=ROUGH_BOX_MAX_JITTER) * tight.extent[a] as f64).ceil() as usize;
            let grow_hi = (lr.random_range(0.0..=ROUGH_BOX_MAX_JITTER) * tight.extent[a] as f64).ceil() as usize;
            let s = tight.origin[a].saturating_sub(grow_lo);
            let e = (tight.origin[a] + tight.extent[a] + grow_hi).min(extent[a]);
            origin.push(s);
            ext.push(e - s);
        }
        let mut b = BoxAnnotation::new(origin, ext)?;
        b.size_class = Some(SizeClass::from_diameter_mm(l.diameter_mm()));
        b.attenuation_class = Some(l.attenuation_class);
        boxes.push(b);
    }

    let noise = Normal::new(0.0, NOISE_SD).expect("valid sd");
    let n: usize = extent.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut p = vec![0usize; dims];
    for i in 0..n {
        let mut rem = i;
        for a in (0..dims).rev() {
            p[a] = rem % extent[a];
            rem /= extent[a];
        }
        let rho = p
            .iter()
            .zip(organ_c.iter().zip(&organ_a))
            .map(|(&x, (c, a))| ((x as f64 - c) / a).powi(2))
            .sum::<f64>()
            .sqrt();
        let base = if rho < 1.0 { tissue + 0.08 * (12.0 * rho + phase).sin() } else { outside };
        let mut v = (base + noise.sample(&mut bg)) as f32;
        for l in &lesions {
            v += l.profile(l.distance(&p));
        }
        data.push(v.clamp(-1.0, 1.0));
    }

    Ok(PhantomScene {
        seed,
        dims,
        extent: extent.to_vec(),
        image: Tensor::new(extent.to_vec(), data)?,
        lesions,
        boxes,
    })
}

/// `count` scenes with per-scene seeds derived from `seed`; lesion counts
/// are drawn uniformly from `lesions`.
pub fn generate_set(
    seed: u64,
    count: usize,
    dims: usize,
    extent: &[usize],
    lesions: std::ops::RangeInclusive<usize>,
    class_mix: ClassMix,
) -> Result<Vec<PhantomScene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let k = rng.random_range(lesions.clone());
            generate_phantom(scene_seed(seed, i), dims, extent, k, class_mix)
        })
        .collect()
}

/// Bounds of the classic augmentation family.
pub const MAX_ROTATION_DEG: f64 = 10.0;
pub const MAX_SHIFT: f64 = 0.08;
pub const MAX_SHEAR: f64 = 0.08;
pub const MAX_ZOOM: f64 = 0.08;

/// One concrete classic augmentation. Shift, shear and zoom are fractions
/// of the image extent; rotation is about the image centre.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicAugmentSpec {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rotation_deg: f64,
    /// `(rows, cols)`.
    pub shift: [f64; 2],
    pub shear: f64,
    pub zoom: f64,
    pub fill: f32,
}

impl ClassicAugmentSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation_deg.abs() <= MAX_ROTATION_DEG
            && self.shift.iter().all(|s| s.abs() <= MAX_SHIFT)
            && self.shear.abs() <= MAX_SHEAR
            && self.zoom.abs() <= MAX_ZOOM;
        if !ok {
            return Err(invalid(format!(
                "augmentation {self:?} exceeds rotation {MAX_ROTATION_DEG} deg / shift {MAX_SHIFT} / shear {MAX_SHEAR} / zoom {MAX_ZOOM}"
            )));
        }
        Ok(())
    }

    pub fn sample(rng: &mut impl Rng, fill: f32) -> Self {
        Self {
            flip_h: rng.random(),
            flip_v: rng.random(),
            rotation_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            shift: [rng.random_range(-MAX_SHIFT..=MAX_SHIFT), rng.random_range(-MAX_SHIFT..=MAX_SHIFT)],
            shear: rng.random_range(-MAX_SHEAR..=MAX_SHEAR),
            zoom: rng.random_range(-MAX_ZOOM..=MAX_ZOOM),
            fill,
        }
    }

    /// Forward map on `(row, col)` coordinates relative to the centre.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let fy = if self.flip_v { -1.0 } else { 1.0 };
        let fx = if self.flip_h { -1.0 } else { 1.0 };
        let z = 1.0 + self.zoom;
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        // rotate · shear · zoom · flip; shear adds `shear * row` to the column
        let a = [[fy * z, 0.0], [self.shear * fy * z, fx * z]];
        [
            [c * a[0][0] + s * a[1][0], c * a[0][1] + s * a[1][1]],
            [-s * a[0][0] + c * a[1][0], -s * a[0][1] + c * a[1][1]],
        ]
    }

    fn forward(&self, p: [f64; 2], hw: [usize; 2]) -> [f64; 2] {
        let m = self.matrix();
        let c = [hw[0] as f64 / 2.0, hw[1] as f64 / 2.0];
        let d = [p[0] - c[0], p[1] - c[1]];
        [
            m[0][0] * d[0] + m[0][1] * d[1] + c[0] + self.shift[0] * hw[0] as f64,
            m[1][0] * d[0] + m[1][1] * d[1] + c[1] + self.shift[1] * hw[1] as f64,
        ]
    }

    fn inverse(&self, p: [f64; 2], hw: [usize; 2]) -> [f64; 2] {
        let m = self.matrix();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let c = [hw[0] as f64 / 2.0, hw[1] as f64 / 2.0];
        let d = [p[0] - c[0] - self.shift[0] * hw[0] as f64, p[1] - c[1] - self.shift[1] * hw[1] as f64];
        [
            (m[1][1] * d[0] - m[0][1] * d[1]) / det + c[0],
            (-m[1][0] * d[0] + m[0][0] * d[1]) / det + c[1],
        ]
    }
}

/// Apply an augmentation to a `(H, W)` or `(C, H, W)` image with bilinear
/// sampling and constant fill outside the source.
pub fn classic_augment(image: &Tensor<f32>, spec: &ClassicAugmentSpec) -> Result<Tensor<f32>> {
    let (c, h, w) = match *image.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        ref s => return Err(invalid(format!("classic augmentation expects (H, W) or (C, H, W), got {s:?}"))),
    };
    let src = image.data();
    let mut out = vec![spec.fill; src.len()];
    for y in 0..h {
        for x in 0..w {
            // pixel centres sit at half-integers
            let s = spec.inverse([y as f64 + 0.5, x as f64 + 0.5], [h, w]);
            let (sy, sx) = (s[0] - 0.5, s[1] - 0.5);
            if sy < -1e-9 || sx < -1e-9 || sy > (h - 1) as f64 + 1e-9 || sx > (w - 1) as f64 + 1e-9 {
                continue;
            }
            let (sy, sx) = (sy.clamp(0.0, (h - 1) as f64), sx.clamp(0.0, (w - 1) as f64));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ty, tx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx];
                let top = if tx == 0.0 { at(y0, x0) } else { at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx };
                let bot = if tx == 0.0 { at(y1, x0) } else { at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx };
                out[(ch * h + y) * w + x] = if ty == 0.0 { top } else { top * (1.0 - ty) + bot * ty };
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Transform boxes consistently with [`classic_augment`]: the bounding box
/// of the mapped corners, clipped to the canvas. Boxes pushed entirely off
/// the canvas are dropped.
pub fn augment_boxes(boxes: &[BoxAnnotation], spec: &ClassicAugmentSpec, hw: [usize; 2]) -> Vec<BoxAnnotation> {
    boxes
        .iter()
        .filter_map(|b| {
            let (y0, x0) = (b.origin[0] as f64, b.origin[1] as f64);
            let (y1, x1) = (y0 + b.extent[0] as f64, x0 + b.extent[1] as f64);
            let pts = [[y0, x0], [y0, x1], [y1, x0], [y1, x1]].map(|p| spec.forward(p, hw));
            let mut lo = [0usize; 2];
            let mut ext = [0usize; 2];
            for a in 0..2 {
                let mn = pts.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min).round().max(0.0);
                let mx = pts.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max).round().min(hw[a] as f64);
                if mx <= mn {
                    return None;
                }
                lo[a] = mn as usize;
                ext[a] = (mx - mn) as usize;
            }
            let mut out = b.clone();
            out.origin = lo.to_vec();
            out.extent = ext.to_vec();
            Some(out)
        })
        .collect()
}

/// Draw a random augmentation within the bounds and apply it.
pub fn random_classic_augment(
    image: &Tensor<f32>,
    boxes: &[BoxAnnotation],
    fill: f32,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Vec<BoxAnnotation>, ClassicAugmentSpec)> {
    let spec = ClassicAugmentSpec::sample(rng, fill);
    let s = image.shape();
    let hw = [s[s.len() - 2], s[s.len() - 1]];
    Ok((classic_augment(image, &spec)?, augment_boxes(boxes, &spec, hw), spec))
}

/// Scene-level partition, as indices into the input list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffle and split `n` scenes. Train and validation sizes round half up;
/// the remainder goes to test.
pub fn make_splits(n: usize, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split ratios must be non-negative and sum to 1, got {ratios:?}")));
    }
    let round = |x: f64| (x + 0.5 + 1e-9).floor() as usize;
    let train = round(n as f64 * ratios[0]);
    let val = round(n as f64 * ratios[1]);
    if train + val > n {
        return Err(invalid(format!("ratios {ratios:?} leave no room for a test split of {n} scenes")));
    }
    let test = n - train - val;
    if train == 0 || val == 0 || test == 0 {
        return Err(invalid(format!("ratios {ratios:?} give an empty split of {n} scenes ({train}, {val}, {test})")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Splits {
        train: idx[..train].to_vec(),
        validation: idx[train..train + val].to_vec(),
        test: idx[train + val..].to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub seed: u64,
    pub count: usize,
    pub dims: usize,
    pub extent: Vec<usize>,
    pub class_mix: ClassMix,
    pub lesion_total: usize,
    pub files: Vec<String>,
}

pub const BUNDLE_ANNOTATIONS: &str = "annotations.jsonl";
pub const BUNDLE_MANIFEST: &str = "manifest.json";

/// Write scenes as `<id>.pgm` / `<id>.pvol`, one annotation file and a manifest.
pub fn write_bundle(dir: &Path, seed: u64, class_mix: ClassMix, scenes: &[PhantomScene]) -> Result<BundleManifest> {
    std::fs::create_dir_all(dir)?;
    let first = scenes.first().ok_or_else(|| invalid("cannot write an empty scene bundle"))?;
    let mut files = Vec::with_capacity(scenes.len() + 1);
    let mut records = Vec::new();
    for s in scenes {
        let name = if s.dims == 2 { format!("{}.pgm", s.id()) } else { format!("{}.pvol", s.id()) };
        let path = dir.join(&name);
        if s.dims == 2 {
            io::write_pgm(&path, &s.image)?;
        } else {
            io::save_pvol(&path, &s.image)?;
        }
        files.push(name);
        records.extend(s.boxes.iter().map(|b| AnnotationRecord::new(s.id(), b)));
    }
    io::write_jsonl(&dir.join(BUNDLE_ANNOTATIONS), &records)?;
    files.push(BUNDLE_ANNOTATIONS.to_string());
    let manifest = BundleManifest {
        seed,
        count: scenes.len(),
        dims: first.dims,
        extent: first.extent.clone(),
        class_mix,
        lesion_total: scenes.iter().map(|s| s.lesions.len()).sum(),
        files,
    };
    std::fs::write(dir.join(BUNDLE_MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// One scene read back from a bundle.
#[derive(Clone, Debug)]
pub struct BundleScene {
    pub id: String,
    pub path: PathBuf,
    pub image: Tensor<f32>,
    pub boxes: Vec<BoxAnnotation>,
}

pub fn read_bundle(dir: &Path) -> Result<(BundleManifest, Vec<BundleScene>)> {
    let manifest: BundleManifest = serde_json::from_slice(&std::fs::read(dir.join(BUNDLE_MANIFEST))?)?;
    let records: Vec<AnnotationRecord> = io::read_jsonl(&dir.join(BUNDLE_ANNOTATIONS))?;
    let mut scenes = Vec::new();
    for f in manifest.files.iter().filter(|f| f.as_str() != BUNDLE_ANNOTATIONS) {
        let path = dir.join(f);
        let id = f.rsplit_once('.').map(|(s, _)| s.to_string()).unwrap_or_else(|| f.clone());
        let image = if f.ends_with(".pgm") {
            let t = io::read_pgm(&path)?;
            let s = t.shape().to_vec();
            t.reshape(vec![s[1], s[2]])?
        } else {
            io::load_pvol(&path)?
        };
        let boxes = records.iter().filter(|r| r.scan_id == id).map(|r| r.to_box()).collect::<Result<_>>()?;
        scenes.push(BundleScene { id, path, image, boxes });
    }
    Ok((manifest, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_follow_remainder_rule() {
        let s = make_splits(10, [0.7, 0.15, 0.15], 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (7, 2, 1));
        assert!(make_splits(2, [0.7, 0.15, 0.15], 1).is_err());
        assert!(make_splits(10, [0.7, 0.2, 0.2], 1).is_err());
    }

    #[test]
    fn zero_spec_is_identity() {
        let img = Tensor::from_fn(vec![5, 7], |i| i as f32 * 0.1 - 1.0);
        assert_eq!(classic_augment(&img, &ClassicAugmentSpec::default()).unwrap(), img);
    }

    #[test]
    fn tiny_extent_is_rejected() {
        assert!(generate_phantom(1, 2, &[4, 4], 1, ClassMix::default()).is_err());
        assert!(generate_phantom(1, 2, &[8, 8], 40, ClassMix::default()).is_err());
    }
}
