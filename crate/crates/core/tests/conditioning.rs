use patholab_core::conditioning::*;
use patholab_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent formulation of the blend: a voxel belongs to the shell when
/// its centre is within 2.5 voxels (L-infinity) of the box surface, the
/// surface lying half a voxel outside the outermost box voxels.
fn blend_oracle(vol: &[f64], ext: [usize; 3], b: &BoxAnnotation) -> Vec<f64> {
    let [d, h, w] = ext;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let dist_to_surface = |p: [usize; 3]| -> f64 {
        let lo: Vec<f64> = (0..3).map(|a| b.origin[a] as f64 - 0.5).collect();
        let hi: Vec<f64> = (0..3).map(|a| (b.origin[a] + b.extent[a]) as f64 - 0.5).collect();
        let c: Vec<f64> = p.iter().map(|&v| v as f64).collect();
        let inside = (0..3).all(|a| c[a] > lo[a] && c[a] < hi[a]);
        if inside {
            (0..3).map(|a| (c[a] - lo[a]).min(hi[a] - c[a])).fold(f64::INFINITY, f64::min)
        } else {
            (0..3).map(|a| (lo[a] - c[a]).max(c[a] - hi[a]).max(0.0)).fold(0.0, f64::max)
        }
    };
    let mut cur = vol.to_vec();
    for _ in 0..5 {
        let prev = cur.clone();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if dist_to_surface([z, y, x]) > 2.5 {
                        continue;
                    }
                    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
                    let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                    let mut s = prev[idx(z, y, x)];
                    for (dz, dy, dx) in [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)] {
                        s += prev[idx(clamp(zi + dz, d), clamp(yi + dy, h), clamp(xi + dx, w))];
                    }
                    cur[idx(z, y, x)] = s / 7.0;
                }
            }
        }
    }
    cur
}

fn step_volume(ext: [usize; 3], b: &BoxAnnotation) -> Volume {
    let [_, h, w] = ext;
    Volume::new(Tensor::from_fn(ext.to_vec(), |i| {
        let p = [i / (h * w), (i / w) % h, i % w];
        if b.contains(&p) {
            1.0
        } else {
            -0.25
        }
    }))
    .unwrap()
}

#[test]
fn blend_matches_brute_force_on_8_cubed() {
    let ext = [8, 8, 8];
    let b = BoxAnnotation::new(vec![2, 2, 2], vec![4, 4, 4]).unwrap();
    let vol = step_volume(ext, &b);
    let got = blend_box_boundary(&vol, &b).unwrap();
    let src: Vec<f64> = vol.data.data().iter().map(|&v| v as f64).collect();
    let want = blend_oracle(&src, ext, &b);
    for (i, (g, w)) in got.data.data().iter().zip(&want).enumerate() {
        assert!((*g as f64 - w).abs() < 1e-5, "voxel {i}: {g} vs {w}");
    }
}

#[test]
fn blend_keeps_constant_volume() {
    let vol = Volume::new(Tensor::full(vec![8, 8, 8], 0.3)).unwrap();
    let b = BoxAnnotation::new(vec![1, 2, 3], vec![3, 4, 2]).unwrap();
    let out = blend_box_boundary(&vol, &b).unwrap();
    for v in out.data.data() {
        assert!((v - 0.3).abs() < 1e-6);
    }
}

#[test]
fn blend_leaves_far_voxels_bit_identical() {
    let ext = [16, 16, 16];
    let b = BoxAnnotation::new(vec![6, 6, 6], vec![4, 4, 4]).unwrap();
    let vol = Volume::new(Tensor::from_fn(ext.to_vec(), |i| ((i * 37) % 101) as f32 / 50.0 - 1.0)).unwrap();
    let out = blend_box_boundary(&vol, &b).unwrap();
    for z in 0..16 {
        for y in 0..16 {
            for x in 0..16 {
                let far = [z, y, x].iter().zip(&b.origin).any(|(&p, &o)| p + 3 < o || p >= o + 4 + 3);
                if far {
                    assert_eq!(out.at(z, y, x).to_bits(), vol.at(z, y, x).to_bits());
                }
            }
        }
    }
}

#[test]
fn noise_box_statistics_over_1e5_samples() {
    let ext = [48, 48, 48];
    let voi = Volume::new(Tensor::zeros(ext.to_vec())).unwrap();
    let b = BoxAnnotation::new(vec![0, 0, 0], vec![47, 47, 47]).unwrap();
    let n = carve_noise_box(&voi, &b, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let inside: Vec<f32> = (0..47usize.pow(3))
        .map(|i| n.volume.at(i / 2209, (i / 47) % 47, i % 47))
        .collect();
    assert!(inside.len() >= 100_000);
    let mean = inside.iter().map(|&v| v as f64).sum::<f64>() / inside.len() as f64;
    let min = inside.iter().copied().fold(f32::INFINITY, f32::min);
    let max = inside.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert!(min >= -0.5 && max <= 0.5);
    let var = inside.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / inside.len() as f64;
    assert!((var - 1.0 / 12.0).abs() < 0.002, "variance {var}");
}

#[test]
fn sixteen_cubed_noise_box() {
    let voi = Volume::new(Tensor::full(vec![32, 32, 32], 0.9)).unwrap();
    let b = BoxAnnotation::new(vec![8, 8, 8], vec![16, 16, 16]).unwrap();
    let n = carve_noise_box(&voi, &b, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let crop = n.volume.crop(&b).unwrap();
    assert!(crop.data.mean().abs() < 0.02);
    assert!(BoxAnnotation::new(vec![0, 0, 0], vec![0, 1, 1]).is_err());
    let too_big = BoxAnnotation::new(vec![20, 0, 0], vec![16, 1, 1]).unwrap();
    assert!(carve_noise_box(&voi, &too_big, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
}

#[test]
fn tiled_input_has_seven_channels() {
    let voi = Volume::new(Tensor::zeros(vec![4, 4, 4])).unwrap();
    let c = tile_conditions(SizeClass::Small, Attenuation::Solid, [4, 4, 4]);
    assert_eq!(c.generator_input(&voi).unwrap().shape(), &[7, 4, 4, 4]);
}

#[test]
fn augmentation_bounds_over_10k_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let canvas = [64, 64];
    let b = BoxAnnotation::new(vec![24, 28], vec![10, 8]).unwrap();
    for _ in 0..10_000 {
        let (moved, mask, aug) = augment_mask(std::slice::from_ref(&b), canvas, &mut rng).unwrap();
        assert!(aug.shift.iter().all(|s| s.abs() <= 0.1));
        assert!(aug.zoom.abs() <= 0.1);
        assert_eq!(moved.len(), 1);
        assert_eq!(recover_boxes(&mask).len(), 1);
        for a in 0..2 {
            let n = canvas[a] as f64;
            let c0 = b.origin[a] as f64 + b.extent[a] as f64 / 2.0;
            let c1 = moved[0].origin[a] as f64 + moved[0].extent[a] as f64 / 2.0;
            // centre displacement, with flips undone, bounded by shift + zoom + rounding
            let flipped = if a == 0 { aug.flip_v } else { aug.flip_h };
            let c0 = if flipped { n - c0 } else { c0 };
            let bound = 0.1 * n + 0.1 * (c0 - n / 2.0).abs() + 1.0;
            assert!((c1 - c0).abs() <= bound);
            let ratio = moved[0].extent[a] as f64 / b.extent[a] as f64;
            assert!(ratio >= 0.9 - 1.0 / b.extent[a] as f64 && ratio <= 1.1 + 1.0 / b.extent[a] as f64);
        }
    }
}

#[test]
fn map_back_identity_spacing_pastes() {
    let scan = Volume::new(Tensor::from_fn(vec![10, 10, 10], |i| i as f32)).unwrap();
    let voi = Volume::new(Tensor::full(vec![3, 3, 3], -7.0)).unwrap();
    let out = map_back(&scan, [2, 3, 4], &voi).unwrap();
    let region = BoxAnnotation::new(vec![2, 3, 4], vec![3, 3, 3]).unwrap();
    for z in 0..10 {
        for y in 0..10 {
            for x in 0..10 {
                if region.contains(&[z, y, x]) {
                    assert_eq!(out.at(z, y, x), -7.0);
                } else {
                    assert_eq!(out.at(z, y, x).to_bits(), scan.at(z, y, x).to_bits());
                }
            }
        }
    }
    let half = voi.clone().with_spacing([1.0; 3]);
    assert!(map_back(&scan, [0, 0, 0], &half).unwrap_err().to_string().contains("spacing"));
}

#[test]
fn map_back_constant_under_resample() {
    let scan = Volume::new(Tensor::zeros(vec![16, 16, 16])).unwrap().with_spacing([1.0; 3]);
    let voi = Volume::new(Tensor::full(vec![4, 4, 4], 0.625)).unwrap().with_spacing([2.0; 3]);
    let out = map_back(&scan, [4, 4, 4], &voi).unwrap();
    for z in 4..12 {
        for y in 4..12 {
            for x in 4..12 {
                assert!((out.at(z, y, x) - 0.625).abs() < 1e-6);
            }
        }
    }
    assert_eq!(out.at(3, 4, 4), 0.0);
}

#[test]
fn map_back_ramp_matches_trilinear_closed_form() {
    let (a, b, c) = (0.5f64, -0.25f64, 0.125f64);
    let src = Tensor::from_fn(vec![4, 4, 4], |i| {
        let (z, y, x) = ((i / 16) as f64, ((i / 4) % 4) as f64, (i % 4) as f64);
        (a * z + b * y + c * x) as f32
    });
    let voi = Volume::new(src).unwrap().with_spacing([2.0; 3]);
    let scan = Volume::new(Tensor::zeros(vec![8, 8, 8])).unwrap().with_spacing([1.0; 3]);
    let out = map_back(&scan, [0, 0, 0], &voi).unwrap();
    let u = |i: usize| (i as f64 / 2.0 - 0.25).clamp(0.0, 3.0);
    for z in 0..8 {
        for y in 0..8 {
            for x in 0..8 {
                let expected = a * u(z) + b * u(y) + c * u(x);
                assert!((out.at(z, y, x) as f64 - expected).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn annotation_record_roundtrip() {
    let mut b = BoxAnnotation::new(vec![1, 2, 3], vec![4, 5, 6]).unwrap();
    b.size_class = Some(SizeClass::Medium);
    b.attenuation_class = Some(Attenuation::PartSolid);
    let rec = AnnotationRecord::new("scan-7", &b);
    let json = serde_json::to_string(&rec).unwrap();
    assert!(json.contains("\"part-solid\""));
    let back: AnnotationRecord = serde_json::from_str(&json).unwrap();
    assert_eq!(back.to_box().unwrap(), b);
}

#[test]
fn mask_pgm_uses_0_and_255() {
    let m = build_bbox_mask(&[BoxAnnotation::new(vec![0, 0], vec![1, 1]).unwrap()], [2, 2]).unwrap();
    let pgm = m.to_pgm();
    assert_eq!(&pgm[pgm.len() - 4..], &[255, 0, 0, 0]);
}

fn boxes_strategy() -> impl Strategy<Value = Vec<(usize, usize, usize, usize)>> {
    proptest::collection::vec((0usize..28, 0usize..28, 1usize..5, 1usize..5), 0..5)
}

proptest! {
    #[test]
    fn union_area_matches_pixel_scan(bs in boxes_strategy()) {
        let boxes: Vec<BoxAnnotation> = bs.iter().map(|&(y, x, h, w)| BoxAnnotation::new(vec![y, x], vec![h, w]).unwrap()).collect();
        let m = build_bbox_mask(&boxes, [32, 32]).unwrap();
        let mut count = 0;
        for y in 0..32 {
            for x in 0..32 {
                if boxes.iter().any(|b| b.contains(&[y, x])) {
                    count += 1;
                }
            }
        }
        prop_assert_eq!(m.nonzero(), count);
    }

    #[test]
    fn disjoint_boxes_are_recovered(bs in boxes_strategy()) {
        let boxes: Vec<BoxAnnotation> = bs.iter().map(|&(y, x, h, w)| BoxAnnotation::new(vec![y, x], vec![h, w]).unwrap()).collect();
        // keep boxes separated by at least one background pixel
        let separated = boxes.iter().enumerate().all(|(i, a)| boxes.iter().skip(i + 1).all(|b| {
            (0..2).any(|k| a.origin[k] + a.extent[k] < b.origin[k] || b.origin[k] + b.extent[k] < a.origin[k])
        }));
        prop_assume!(separated);
        let m = build_bbox_mask(&boxes, [32, 32]).unwrap();
        let mut got = recover_boxes(&m);
        let mut want = boxes.clone();
        got.sort_by(|a, b| a.origin.cmp(&b.origin));
        want.sort_by(|a, b| a.origin.cmp(&b.origin));
        prop_assert_eq!(got, want);
    }

    #[test]
    fn tiles_are_one_hot(s in 0usize..3, a in 0usize..3) {
        let c = tile_conditions(SizeClass::ALL[s], Attenuation::ALL[a], [2, 2, 2]);
        let d = c.channels.data();
        prop_assert!(d.iter().all(|&v| v == 0.0 || v == 1.0));
        let full = |k: usize| d[k * 8..(k + 1) * 8].iter().all(|&v| v == 1.0);
        prop_assert_eq!((0..3).filter(|&k| full(k)).count(), 1);
        prop_assert_eq!((3..6).filter(|&k| full(k)).count(), 1);
    }

    #[test]
    fn carve_and_blend_stay_local(oz in 0usize..8, oy in 0usize..8, ox in 0usize..8, e in 1usize..6, seed in 0u64..100) {
        let ext = [14usize, 14, 14];
        let b = BoxAnnotation::new(vec![oz, oy, ox], vec![e, e, e]).unwrap();
        let vol = Volume::new(Tensor::from_fn(ext.to_vec(), |i| ((i * 13) % 29) as f32 / 29.0)).unwrap();
        let carved = carve_noise_box(&vol, &b, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let blended = blend_box_boundary(&carved.volume, &b).unwrap();
        for z in 0..14 {
            for y in 0..14 {
                for x in 0..14 {
                    let far = [z, y, x].iter().zip(&b.origin).any(|(&p, &o)| p + 3 < o || p >= o + e + 3);
                    if far {
                        prop_assert_eq!(blended.at(z, y, x).to_bits(), vol.at(z, y, x).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn augmentation_preserves_box_count(bs in boxes_strategy(), seed in 0u64..1000) {
        let boxes: Vec<BoxAnnotation> = bs.iter().map(|&(y, x, h, w)| BoxAnnotation::new(vec![y, x], vec![h, w]).unwrap()).collect();
        if let Ok((moved, _, _)) = augment_mask(&boxes, [32, 32], &mut ChaCha8Rng::seed_from_u64(seed)) {
            prop_assert_eq!(moved.len(), boxes.len());
        }
    }
}
