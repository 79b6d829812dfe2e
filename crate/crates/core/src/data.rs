//! Samples, label-scarcity splits, the synthetic shapes benchmark and the
//! geometric augmentation pipeline.
//!
//! Images are `[channels, height, width]` tensors normalized to `[-1, 1]`;
//! label maps hold one class index per pixel.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                found: vec![data.len()],
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn max_class(&self) -> Option<u8> {
        self.data.iter().copied().max()
    }
}

/// One image with an optional annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    pub image: Tensor<f32>,
    pub label: Option<LabelMap>,
}

/// A sample whose annotation is guaranteed present.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub image: Tensor<f32>,
    pub label: LabelMap,
}

/// Image-only view. Training code that must not see annotations takes these.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageView {
    pub id: String,
    pub image: Tensor<f32>,
}

impl SegmentationSample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, label: Option<LabelMap>) -> Result<Self> {
        if image.shape().len() != 3 {
            return Err(Error::Rank {
                expected: 3,
                found: image.shape().len(),
            });
        }
        if let Some(l) = &label {
            if (l.height, l.width) != (image.dim(1), image.dim(2)) {
                return Err(Error::ShapeMismatch {
                    expected: vec![image.dim(1), image.dim(2)],
                    found: vec![l.height, l.width],
                });
            }
        }
        Ok(Self {
            id: id.into(),
            image,
            label,
        })
    }

    pub fn height(&self) -> usize {
        self.image.dim(1)
    }

    pub fn width(&self) -> usize {
        self.image.dim(2)
    }

    pub fn view(&self) -> ImageView {
        ImageView {
            id: self.id.clone(),
            image: self.image.clone(),
        }
    }

    pub fn labeled(&self) -> Result<LabeledSample> {
        let label = self.label.clone().ok_or_else(|| Error::MissingLabel(self.id.clone()))?;
        Ok(LabeledSample {
            id: self.id.clone(),
            image: self.image.clone(),
            label,
        })
    }

    pub fn without_label(&self) -> Self {
        Self {
            label: None,
            ..self.clone()
        }
    }
}

impl LabeledSample {
    pub fn view(&self) -> ImageView {
        ImageView {
            id: self.id.clone(),
            image: self.image.clone(),
        }
    }
}

impl From<LabeledSample> for SegmentationSample {
    fn from(s: LabeledSample) -> Self {
        Self {
            id: s.id,
            image: s.image,
            label: Some(s.label),
        }
    }
}

/// Training set partitioned into a small annotated part and image-only views.
#[derive(Clone, Debug)]
pub struct ScarcitySplit {
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<ImageView>,
    pub fraction: f64,
    pub seed: u64,
}

impl ScarcitySplit {
    /// Every training image, annotated or not, as an image-only view.
    pub fn all_views(&self) -> Vec<ImageView> {
        self.labeled.iter().map(LabeledSample::view).chain(self.unlabeled.iter().cloned()).collect()
    }
}

pub fn labeled_count(n: usize, fraction: f64) -> usize {
    (libm::round(fraction * n as f64) as usize).clamp(1, n)
}

/// Seeded shuffle; the first `max(1, round(fraction * n))` samples keep their labels.
pub fn split_label_scarcity(samples: &[SegmentationSample], fraction: f64, seed: u64) -> Result<ScarcitySplit> {
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("labeled fraction {fraction} outside (0, 1]")));
    }
    let labeled_all: Vec<LabeledSample> = samples.iter().map(SegmentationSample::labeled).collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = labeled_count(samples.len(), fraction);
    let labeled = order[..k].iter().map(|&i| labeled_all[i].clone()).collect();
    let unlabeled = order[k..].iter().map(|&i| labeled_all[i].view()).collect();
    Ok(ScarcitySplit {
        labeled,
        unlabeled,
        fraction,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Synthetic benchmark

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Rectangle { cx: f64, cy: f64, hx: f64, hy: f64, angle: f64 },
}

impl Shape {
    /// Whether the pixel whose center is `(x + 0.5, y + 0.5)` lies inside.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (cx, cy, angle) = match *self {
            Shape::Ellipse { cx, cy, angle, .. } | Shape::Rectangle { cx, cy, angle, .. } => (cx, cy, angle),
        };
        let (s, c) = (libm::sin(angle), libm::cos(angle));
        let (dx, dy) = (px - cx, py - cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        match *self {
            Shape::Ellipse { rx, ry, .. } => (u / rx) * (u / rx) + (v / ry) * (v / ry) <= 1.0,
            Shape::Rectangle { hx, hy, .. } => u.abs() <= hx && v.abs() <= hy,
        }
    }
}

/// Generator knobs. Extents are fractions of the image side.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SynthConfig {
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_extent: f64,
    pub max_extent: f64,
    /// Foreground-minus-background intensity range.
    pub contrast: (f64, f64),
    /// Probability that a shape is darker, rather than brighter, than the background.
    pub polarity_flip: f64,
    pub background_texture: f64,
    pub foreground_texture: f64,
    /// Range of the per-image additive Gaussian noise level.
    pub noise_std: (f64, f64),
    /// Unlabeled low-contrast blobs that make thresholding insufficient.
    pub distractors: usize,
    pub distractor_contrast: f64,
    pub foreground_band: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            min_shapes: 1,
            max_shapes: 3,
            min_extent: 0.1,
            max_extent: 0.22,
            contrast: (0.25, 0.6),
            polarity_flip: 0.0,
            background_texture: 0.12,
            foreground_texture: 0.1,
            noise_std: (0.15, 0.3),
            distractors: 2,
            distractor_contrast: 0.3,
            foreground_band: (0.02, 0.6),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_shapes >= 1
            && self.max_shapes >= self.min_shapes
            && self.min_extent > 0.0
            && self.max_extent >= self.min_extent
            && self.contrast.1 >= self.contrast.0
            && (0.0..=1.0).contains(&self.polarity_flip)
            && self.noise_std.0 >= 0.0
            && self.noise_std.1 >= self.noise_std.0
            && self.foreground_band.0 < self.foreground_band.1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid synthetic generator config {self:?}")))
        }
    }
}

/// Everything needed to redraw one synthetic image.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGeometry {
    pub size: usize,
    pub shapes: Vec<Shape>,
}

impl SceneGeometry {
    pub fn rasterize(&self) -> LabelMap {
        let n = self.size;
        let data = (0..n * n)
            .map(|p| u8::from(self.shapes.iter().any(|s| s.covers(p % n, p / n))))
            .collect();
        LabelMap {
            height: n,
            width: n,
            data,
        }
    }
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn sample_shape<R: Rng + ?Sized>(rng: &mut R, size: usize, cfg: &SynthConfig) -> Shape {
    let n = size as f64;
    let ext = (cfg.min_extent * n, cfg.max_extent * n);
    let a = uniform(rng, ext);
    let b = uniform(rng, ext);
    let margin = 0.15 * n;
    let cx = uniform(rng, (margin, n - margin));
    let cy = uniform(rng, (margin, n - margin));
    let angle = uniform(rng, (0.0, PI));
    if rng.random_bool(0.5) {
        Shape::Ellipse { cx, cy, rx: a, ry: b, angle }
    } else {
        // equal-area-ish rectangles: a square of half-side r covers 4r^2 vs pi r^2
        let k = 0.85;
        Shape::Rectangle {
            cx,
            cy,
            hx: a * k,
            hy: b * k,
            angle,
        }
    }
}

fn sample_geometry<R: Rng + ?Sized>(rng: &mut R, size: usize, cfg: &SynthConfig) -> SceneGeometry {
    let total = (size * size) as f64;
    let mut last = None;
    for _ in 0..64 {
        let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
        let geometry = SceneGeometry {
            size,
            shapes: (0..count).map(|_| sample_shape(rng, size, cfg)).collect(),
        };
        let fg = geometry.rasterize().data.iter().filter(|&&v| v == 1).count() as f64 / total;
        if fg > cfg.foreground_band.0 && fg < cfg.foreground_band.1 {
            return geometry;
        }
        last = Some(geometry);
    }
    last.expect("at least one attempt")
}

/// Geometry of synthetic image `index` of the dataset generated with `seed`.
pub fn synth_geometry(seed: u64, index: usize, size: usize, cfg: &SynthConfig) -> SceneGeometry {
    sample_geometry(&mut scene_rng(seed, index), size, cfg)
}

struct Grating {
    amp: f64,
    kx: f64,
    ky: f64,
    phase: f64,
}

impl Grating {
    fn sample<R: Rng + ?Sized>(rng: &mut R, amp: f64, cycles: (f64, f64), size: usize) -> Self {
        let theta = uniform(rng, (0.0, 2.0 * PI));
        let f = uniform(rng, cycles) * 2.0 * PI / size as f64;
        Self {
            amp: amp * uniform(rng, (0.5, 1.0)),
            kx: f * libm::cos(theta),
            ky: f * libm::sin(theta),
            phase: uniform(rng, (0.0, 2.0 * PI)),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.amp * libm::sin(self.kx * x + self.ky * y + self.phase)
    }
}

fn render_scene<R: Rng + ?Sized>(rng: &mut R, geometry: &SceneGeometry, cfg: &SynthConfig) -> Tensor<f32> {
    let n = geometry.size;
    let background_level = uniform(rng, (-0.55, 0.0));
    let bg: Vec<Grating> = (0..3)
        .map(|_| Grating::sample(rng, cfg.background_texture, (1.0, 5.0), n))
        .collect();
    let fg: Vec<(f64, Grating)> = geometry
        .shapes
        .iter()
        .map(|_| {
            let mut c = uniform(rng, cfg.contrast);
            if cfg.polarity_flip > 0.0 && rng.random_bool(cfg.polarity_flip) {
                c = -c;
            }
            (c, Grating::sample(rng, cfg.foreground_texture, (6.0, 12.0), n))
        })
        .collect();
    let distractors: Vec<(Shape, f64)> = (0..cfg.distractors)
        .map(|_| {
            let mut s = sample_shape(rng, n, cfg);
            let (Shape::Ellipse { rx, ry, .. } | Shape::Rectangle { hx: rx, hy: ry, .. }) = &mut s;
            *rx *= 0.6;
            *ry *= 0.6;
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (s, sign * cfg.distractor_contrast * uniform(rng, (0.5, 1.0)))
        })
        .collect();
    let noise_std = uniform(rng, cfg.noise_std);
    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64, y as f64);
            let mut v = background_level + bg.iter().map(|g| g.at(fx, fy)).sum::<f64>();
            for (s, c) in &distractors {
                if s.covers(x, y) {
                    v += c;
                }
            }
            // the last covering shape determines the foreground appearance
            if let Some(k) = geometry.shapes.iter().rposition(|s| s.covers(x, y)) {
                let (c, g) = &fg[k];
                v = background_level + c + g.at(fx, fy);
            }
            let noise: f64 = rng.sample(StandardNormal);
            v += noise_std * noise;
            data.push(v.clamp(-1.0, 1.0) as f32);
        }
    }
    Tensor::new(&[1, n, n], data).expect("sized buffer")
}

/// `n` grayscale `size x size` images of 1-3 shapes over texture plus noise,
/// with pixel-exact foreground masks.
pub fn synth_shapes(n: usize, size: usize, seed: u64) -> Result<Vec<SegmentationSample>> {
    synth_shapes_with(n, size, seed, &SynthConfig::default())
}

pub fn synth_shapes_with(n: usize, size: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<SegmentationSample>> {
    if n < 1 {
        return Err(Error::Empty("synthetic dataset size"));
    }
    if size < 8 {
        return Err(Error::InvalidConfig(format!("synthetic image size {size} too small")));
    }
    cfg.validate()?;
    Ok((0..n)
        .map(|i| {
            let mut rng = scene_rng(seed, i);
            let geometry = sample_geometry(&mut rng, size, cfg);
            let image = render_scene(&mut rng, &geometry, cfg);
            SegmentationSample {
                id: format!("synth-{seed}-{i:05}"),
                image,
                label: Some(geometry.rasterize()),
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Geometry: augmentation, resizing, cropping

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub max_rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            max_rotation_deg: 15.0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            max_rotation_deg: 0.0,
        }
    }
}

/// Flip-then-rotate transform about the image center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricTransform {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f64,
}

impl GeometricTransform {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            vflip: false,
            angle_deg: 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let hflip = rng.random::<f64>() < cfg.hflip_prob;
        let vflip = rng.random::<f64>() < cfg.vflip_prob;
        let angle_deg = if cfg.max_rotation_deg > 0.0 {
            uniform(rng, (-cfg.max_rotation_deg, cfg.max_rotation_deg))
        } else {
            0.0
        };
        Self { hflip, vflip, angle_deg }
    }

    /// Source pixel coordinates (pixel-center convention) read by output pixel `(x, y)`.
    pub fn source(&self, x: usize, y: usize, h: usize, w: usize) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let a = self.angle_deg.to_radians();
        let (s, c) = (libm::sin(a), libm::cos(a));
        // inverse rotation
        let mut sx = cx + c * dx + s * dy;
        let mut sy = cy - s * dx + c * dy;
        if self.hflip {
            sx = w as f64 - 1.0 - sx;
        }
        if self.vflip {
            sy = h as f64 - 1.0 - sy;
        }
        (sx, sy)
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && !self.vflip && self.angle_deg == 0.0
    }

    pub fn apply_image(&self, image: &Tensor<f32>) -> Tensor<f32> {
        let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
        let mut out = Tensor::zeros(&[c, h, w]);
        let src = image.data();
        let dst = out.data_mut();
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(x, y, h, w);
                for ch in 0..c {
                    dst[(ch * h + y) * w + x] = bilinear(&src[ch * h * w..(ch + 1) * h * w], h, w, sx, sy);
                }
            }
        }
        out
    }

    pub fn apply_label(&self, label: &LabelMap) -> LabelMap {
        let (h, w) = (label.height, label.width);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(x, y, h, w);
                data.push(label.get(nearest_index(sy, h), nearest_index(sx, w)));
            }
        }
        LabelMap { height: h, width: w, data }
    }
}

fn nearest_index(v: f64, n: usize) -> usize {
    libm::round(v).clamp(0.0, (n - 1) as f64) as usize
}

/// Bilinear sample with edge replication.
fn bilinear(plane: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (libm::floor(x) as usize, libm::floor(y) as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let p = |yy: usize, xx: usize| plane[yy * w + xx] as f64;
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Random flips and rotation applied identically to image and label
/// (bilinear for the image, nearest neighbour for the label).
pub fn augment<R: Rng + ?Sized>(sample: &SegmentationSample, cfg: &AugmentConfig, rng: &mut R) -> SegmentationSample {
    let t = GeometricTransform::sample(cfg, rng);
    transform_sample(sample, &t)
}

pub fn transform_sample(sample: &SegmentationSample, t: &GeometricTransform) -> SegmentationSample {
    if t.is_identity() {
        return sample.clone();
    }
    SegmentationSample {
        id: sample.id.clone(),
        image: t.apply_image(&sample.image),
        label: sample.label.as_ref().map(|l| t.apply_label(l)),
    }
}

/// Bilinear image / nearest label resize (half-pixel-center convention).
pub fn resize(sample: &SegmentationSample, height: usize, width: usize) -> Result<SegmentationSample> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidConfig(format!("resize target {height}x{width}")));
    }
    let (c, h, w) = (sample.image.dim(0), sample.height(), sample.width());
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let mut image = Tensor::zeros(&[c, height, width]);
    let src = sample.image.data();
    let dst = image.data_mut();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..height {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..width {
                let fx = (x as f64 + 0.5) * sx - 0.5;
                dst[(ch * height + y) * width + x] = bilinear(plane, h, w, fx, fy);
            }
        }
    }
    let label = sample.label.as_ref().map(|l| {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let yy = (libm::floor((y as f64 + 0.5) * sy) as usize).min(h - 1);
            for x in 0..width {
                let xx = (libm::floor((x as f64 + 0.5) * sx) as usize).min(w - 1);
                data.push(l.get(yy, xx));
            }
        }
        LabelMap { height, width, data }
    });
    Ok(SegmentationSample {
        id: sample.id.clone(),
        image,
        label,
    })
}

/// Axis-aligned window `[y0, y0 + size) x [x0, x0 + size)`.
pub fn crop(sample: &SegmentationSample, y0: usize, x0: usize, size: usize) -> Result<SegmentationSample> {
    let (c, h, w) = (sample.image.dim(0), sample.height(), sample.width());
    if y0 + size > h || x0 + size > w {
        return Err(Error::InvalidConfig(format!("crop {size} at ({y0}, {x0}) exceeds {h}x{w}")));
    }
    let src = sample.image.data();
    let image = Tensor::from_fn(&[c, size, size], |i| {
        let (ch, rem) = (i / (size * size), i % (size * size));
        src[(ch * h + y0 + rem / size) * w + x0 + rem % size]
    });
    let label = sample.label.as_ref().map(|l| LabelMap {
        height: size,
        width: size,
        data: (0..size * size).map(|i| l.get(y0 + i / size, x0 + i % size)).collect(),
    });
    Ok(SegmentationSample {
        id: sample.id.clone(),
        image,
        label,
    })
}

pub fn random_crop<R: Rng + ?Sized>(sample: &SegmentationSample, size: usize, rng: &mut R) -> Result<SegmentationSample> {
    let (h, w) = (sample.height(), sample.width());
    if size > h || size > w {
        return Err(Error::InvalidConfig(format!("crop {size} exceeds {h}x{w}")));
    }
    let y0 = rng.random_range(0..=h - size);
    let x0 = rng.random_range(0..=w - size);
    crop(sample, y0, x0, size)
}

/// Training-time view of a sample: optional augmentation followed by an optional random crop.
#[derive(Clone, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct BatchPolicy {
    pub augment: Option<AugmentConfig>,
    pub crop_size: Option<usize>,
}

impl BatchPolicy {
    pub fn prepare<R: Rng + ?Sized>(&self, sample: &SegmentationSample, rng: &mut R) -> Result<SegmentationSample> {
        let mut s = match &self.augment {
            Some(cfg) => augment(sample, cfg, rng),
            None => sample.clone(),
        };
        if let Some(size) = self.crop_size {
            s = random_crop(&s, size, rng)?;
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Vec<SegmentationSample> {
        (0..n)
            .map(|i| {
                SegmentationSample::new(
                    format!("s{i}"),
                    Tensor::full(&[1, 4, 4], i as f32 / n as f32),
                    Some(LabelMap::filled(4, 4, (i % 2) as u8)),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn split_sizes() {
        assert_eq!(split_label_scarcity(&toy(80), 0.05, 1).unwrap().labeled.len(), 4);
        assert_eq!(split_label_scarcity(&toy(50), 0.01, 1).unwrap().labeled.len(), 1);
        let all = split_label_scarcity(&toy(7), 1.0, 3).unwrap();
        assert_eq!((all.labeled.len(), all.unlabeled.len()), (7, 0));
    }

    #[test]
    fn split_rejects_unlabeled_and_bad_fraction() {
        let mut s = toy(4);
        s[2].label = None;
        assert!(matches!(split_label_scarcity(&s, 0.5, 0), Err(Error::MissingLabel(_))));
        assert!(split_label_scarcity(&toy(4), 0.0, 0).is_err());
        assert!(split_label_scarcity(&toy(4), 1.5, 0).is_err());
    }

    #[test]
    fn synth_rejects_zero() {
        assert!(synth_shapes(0, 32, 0).is_err());
    }

    #[test]
    fn resize_halves() {
        let s = &synth_shapes(1, 32, 0).unwrap()[0];
        let r = resize(s, 16, 16).unwrap();
        assert_eq!(r.image.shape(), &[1, 16, 16]);
        assert_eq!(r.label.unwrap().height(), 16);
    }

    #[test]
    fn crop_window() {
        let s = &synth_shapes(1, 16, 2).unwrap()[0];
        let c = crop(s, 3, 5, 8).unwrap();
        assert_eq!(c.image.data()[9], s.image.data()[4 * 16 + 6]);
        assert_eq!(c.label.as_ref().unwrap().get(7, 7), s.label.as_ref().unwrap().get(10, 12));
        assert!(crop(s, 9, 0, 8).is_err());
    }
}
