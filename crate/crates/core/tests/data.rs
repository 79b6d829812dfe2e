use std::collections::HashSet;

use diffseg_core::data::{
    augment, crop, resize, split_label_scarcity, synth_geometry, synth_shapes, AugmentConfig, GeometricTransform,
    LabelMap, SegmentationSample, Shape, SynthConfig,
};
use diffseg_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy(n: usize) -> Vec<SegmentationSample> {
    (0..n)
        .map(|i| {
            let image = Tensor::full(&[1, 4, 4], i as f32);
            let label = LabelMap::filled(4, 4, (i % 2) as u8);
            SegmentationSample::new(format!("s{i}"), image, Some(label)).unwrap()
        })
        .collect()
}

fn grid(h: usize, w: usize, along_x: bool) -> Tensor<f32> {
    Tensor::from_fn(&[1, h, w], |i| if along_x { (i % w) as f32 } else { (i / w) as f32 })
}

#[test]
fn flip_frequency_is_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = AugmentConfig::default();
    let n = 10_000;
    let (mut h, mut v) = (0, 0);
    for _ in 0..n {
        let t = GeometricTransform::sample(&cfg, &mut rng);
        h += usize::from(t.hflip);
        v += usize::from(t.vflip);
        assert!(t.angle_deg.abs() <= 15.0);
    }
    for k in [h, v] {
        let p = k as f64 / n as f64;
        assert!((0.48..=0.52).contains(&p), "flip rate {p}");
    }
}

#[test]
fn foreground_fraction_stays_in_band() {
    let cfg = SynthConfig::default();
    for i in 0..1000 {
        let label = synth_geometry(5, i, 64, &cfg).rasterize();
        let fg = label.data().iter().filter(|&&v| v == 1).count() as f64 / (64.0 * 64.0);
        assert!(fg > 0.02 && fg < 0.6, "image {i}: foreground {fg}");
    }
}

#[test]
fn synthetic_labels_match_geometry_oracle() {
    let cfg = SynthConfig::default();
    let samples = synth_shapes(20, 48, 9).unwrap();
    for (i, s) in samples.iter().enumerate() {
        let g = synth_geometry(9, i, 48, &cfg);
        let label = s.label.as_ref().unwrap();
        for y in 0..48 {
            for x in 0..48 {
                let inside = g.shapes.iter().any(|sh| sh.covers(x, y));
                assert_eq!(label.get(y, x), u8::from(inside));
            }
        }
        assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn shape_cover_hand_cases() {
    let e = Shape::Ellipse { cx: 5.0, cy: 5.0, rx: 2.0, ry: 1.0, angle: 0.0 };
    assert!(e.covers(4, 4));
    assert!(e.covers(6, 4));
    assert!(!e.covers(4, 6));
    let r = Shape::Rectangle { cx: 5.0, cy: 5.0, hx: 1.0, hy: 3.0, angle: core::f64::consts::FRAC_PI_2 };
    // rotated by 90 degrees the long side lies along x
    assert!(r.covers(2, 4));
    assert!(!r.covers(4, 2));
}

#[test]
fn synthesis_is_deterministic_and_seed_dependent() {
    let a = synth_shapes(4, 32, 1).unwrap();
    let b = synth_shapes(4, 32, 1).unwrap();
    let c = synth_shapes(4, 32, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0].image, c[0].image);
    // a prefix of a larger set is the smaller set
    assert_eq!(synth_shapes(2, 32, 1).unwrap()[..], a[..2]);
}

#[test]
fn polarity_knob_leaves_default_data_unchanged() {
    let cfg = SynthConfig { polarity_flip: 0.0, ..Default::default() };
    assert_eq!(diffseg_core::data::synth_shapes_with(3, 32, 4, &cfg).unwrap(), synth_shapes(3, 32, 4).unwrap());
    let bad = SynthConfig { polarity_flip: 1.5, ..Default::default() };
    assert!(diffseg_core::data::synth_shapes_with(3, 32, 4, &bad).is_err());
}

#[test]
fn identity_and_hflip_on_coordinate_grid() {
    let x = grid(5, 7, true);
    assert_eq!(GeometricTransform::identity().apply_image(&x), x);
    let t = GeometricTransform { hflip: true, vflip: false, angle_deg: 0.0 };
    let out = t.apply_image(&x);
    for (i, v) in out.data().iter().enumerate() {
        assert_eq!(*v, (6 - i % 7) as f32);
    }
}

#[test]
fn quarter_turn_of_a_label_is_a_permutation() {
    let label = LabelMap::new(4, 4, (0..16).collect()).unwrap();
    let t = GeometricTransform { hflip: false, vflip: false, angle_deg: 90.0 };
    let out = t.apply_label(&label);
    let mut seen: Vec<u8> = out.data().to_vec();
    seen.sort();
    assert_eq!(seen, (0..16).collect::<Vec<u8>>());
    let back = GeometricTransform { angle_deg: -90.0, ..t }.apply_label(&out);
    assert_eq!(back, label);
}

#[test]
fn resize_and_crop_hand_cases() {
    let label = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
    let s = SegmentationSample::new("a", Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap(), Some(label)).unwrap();
    let up = resize(&s, 4, 4).unwrap();
    assert_eq!(up.label.as_ref().unwrap().data(), &[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
    let down = resize(&up, 2, 2).unwrap();
    assert_eq!(down.label, s.label);
    let c = crop(&up, 1, 1, 2).unwrap();
    assert_eq!(c.label.unwrap().data(), &[0, 1, 2, 3]);
    assert!(crop(&up, 3, 0, 2).is_err());
}

#[test]
fn split_rejects_bad_fractions() {
    let data = toy(10);
    assert!(split_label_scarcity(&data, 0.0, 0).is_err());
    assert!(split_label_scarcity(&data, 1.5, 0).is_err());
    assert!(split_label_scarcity(&[], 0.5, 0).is_err());
    let unlabeled = vec![data[0].without_label()];
    assert!(split_label_scarcity(&unlabeled, 1.0, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_partitions_the_training_set(n in 1usize..60, fraction in 0.001f64..=1.0, seed in any::<u64>()) {
        let data = toy(n);
        let split = split_label_scarcity(&data, fraction, seed).unwrap();
        let k = ((fraction * n as f64).round() as usize).clamp(1, n);
        prop_assert_eq!(split.labeled.len(), k);
        prop_assert_eq!(split.unlabeled.len(), n - k);
        let ids: HashSet<String> = split.labeled.iter().map(|s| s.id.clone())
            .chain(split.unlabeled.iter().map(|v| v.id.clone())).collect();
        prop_assert_eq!(ids.len(), n);
        let again = split_label_scarcity(&data, fraction, seed).unwrap();
        prop_assert_eq!(split.labeled, again.labeled);
    }

    #[test]
    fn augmentation_moves_pixels_along_the_source_map(seed in any::<u64>(), h in 4usize..12, w in 4usize..12) {
        // bilinear interpolation reproduces a linear ramp exactly
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AugmentConfig { hflip_prob: 0.5, vflip_prob: 0.5, max_rotation_deg: 30.0 };
        let t = GeometricTransform::sample(&cfg, &mut rng);
        let xs = t.apply_image(&grid(h, w, true));
        let ys = t.apply_image(&grid(h, w, false));
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = t.source(x, y, h, w);
                let ex = sx.clamp(0.0, (w - 1) as f64);
                let ey = sy.clamp(0.0, (h - 1) as f64);
                prop_assert!((xs.data()[y * w + x] as f64 - ex).abs() < 1e-4);
                prop_assert!((ys.data()[y * w + x] as f64 - ey).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn augmentation_keeps_image_and_label_aligned(seed in any::<u64>()) {
        let s = &synth_shapes(1, 32, seed % 1000).unwrap()[0];
        let mut a = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ChaCha8Rng::seed_from_u64(seed);
        let out = augment(s, &AugmentConfig::default(), &mut a);
        let t = GeometricTransform::sample(&AugmentConfig::default(), &mut b);
        prop_assert_eq!(out.label.as_ref().unwrap(), &t.apply_label(s.label.as_ref().unwrap()));
        prop_assert_eq!(&out.image, &t.apply_image(&s.image));
        // nearest-neighbour relabelling never invents classes
        prop_assert!(out.label.unwrap().data().iter().all(|&v| v <= 1));
    }

    #[test]
    fn resize_only_uses_existing_classes(h in 1usize..20, w in 1usize..20, th in 1usize..30, tw in 1usize..30, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..4)).collect();
        let present: HashSet<u8> = data.iter().copied().collect();
        let s = SegmentationSample::new("r", Tensor::zeros(&[1, h, w]), Some(LabelMap::new(h, w, data).unwrap())).unwrap();
        let r = resize(&s, th, tw).unwrap();
        prop_assert_eq!(r.image.shape(), &[1, th, tw]);
        prop_assert!(r.label.unwrap().data().iter().all(|v| present.contains(v)));
    }
}
