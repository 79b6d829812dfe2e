//! Inference-time mask generation (2D and sliding-window 3D) and overlap metrics.
//!
//! Masks are generated with a single mask-pathway pass at `t = T` from pure
//! noise, averaging softmax probabilities over an ensemble of noise draws.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{LabelMap, LabeledSample};
use crate::denoiser::{argmax_channels, DualPathwayDenoiser};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::schedule::{NoiseSchedule, Timestep};
use crate::tensor::{Scalar, Tensor};
use crate::training::stack_images;

/// Ensemble-averaged class probabilities `[b, classes, h, w]` for a `[b, c, h, w]` batch.
pub fn mask_probabilities<T: Scalar, R: Rng + ?Sized>(
    model: &DualPathwayDenoiser<T>,
    images: &Tensor<T>,
    schedule: &NoiseSchedule,
    ensemble: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if ensemble == 0 {
        return Err(Error::InvalidConfig("ensemble size must be positive".into()));
    }
    let (b, _, h, w) = images.dims4()?;
    let classes = model.config().num_classes;
    let t = vec![Timestep(schedule.steps()); b];
    let mut acc = Tensor::<T>::zeros(&[b, classes, h, w]);
    for _ in 0..ensemble {
        let noise = schedule.pure_noise_batch::<T, _>(&[b, classes, h, w], &t, rng)?;
        let mut g = Graph::new();
        let p = model.bind_frozen(&mut g);
        let i = g.constant(images.clone());
        let m = g.constant(noise);
        let logits = model.mask_pathway(&mut g, &p, i, m, &t)?;
        let probs = g.softmax_channels(logits)?;
        acc.axpy(T::one(), g.value(probs));
    }
    Ok(acc.scale(T::one() / T::from_f64(ensemble as f64)))
}

/// Label map of one `[c, h, w]` image.
pub fn generate_mask<T: Scalar, R: Rng + ?Sized>(
    model: &DualPathwayDenoiser<T>,
    image: &Tensor<T>,
    schedule: &NoiseSchedule,
    ensemble: usize,
    rng: &mut R,
) -> Result<LabelMap> {
    if image.shape().len() != 3 {
        return Err(Error::Rank {
            expected: 3,
            found: image.shape().len(),
        });
    }
    let (h, w) = (image.dim(1), image.dim(2));
    let batch = Tensor::stack(core::slice::from_ref(image))?;
    let probs = mask_probabilities(model, &batch, schedule, ensemble, rng)?;
    LabelMap::new(h, w, argmax_channels(probs.data(), model.config().num_classes))
}

/// Label maps of many `[c, h, w]` images, processed `batch_size` at a time.
pub fn generate_masks<T: Scalar, R: Rng + ?Sized>(
    model: &DualPathwayDenoiser<T>,
    images: &[&Tensor<f32>],
    schedule: &NoiseSchedule,
    ensemble: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<LabelMap>> {
    let classes = model.config().num_classes;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let batch = stack_images::<T>(chunk)?;
        let (_, _, h, w) = batch.dims4()?;
        let probs = mask_probabilities(model, &batch, schedule, ensemble, rng)?;
        for b in 0..chunk.len() {
            out.push(LabelMap::new(h, w, argmax_channels(probs.batch_item(b), classes))?);
        }
    }
    Ok(out)
}

fn set_counts(pred: &[u8], target: &[u8], class: u8) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut p = 0;
    let mut t = 0;
    for (&a, &b) in pred.iter().zip(target) {
        let (ia, ib) = (a == class, b == class);
        inter += usize::from(ia && ib);
        p += usize::from(ia);
        t += usize::from(ib);
    }
    (inter, p, t)
}

fn check_shapes(pred: &LabelMap, target: &LabelMap) -> Result<()> {
    if (pred.height(), pred.width()) != (target.height(), target.width()) {
        return Err(Error::ShapeMismatch {
            expected: vec![target.height(), target.width()],
            found: vec![pred.height(), pred.width()],
        });
    }
    Ok(())
}

/// Dice coefficient of one class, in percent. Two empty sets score 100.
pub fn dice(pred: &LabelMap, target: &LabelMap, positive_class: u8) -> Result<f64> {
    check_shapes(pred, target)?;
    Ok(dice_slices(pred.data(), target.data(), positive_class))
}

/// Jaccard index of one class, in percent. Two empty sets score 100.
pub fn jaccard(pred: &LabelMap, target: &LabelMap, positive_class: u8) -> Result<f64> {
    check_shapes(pred, target)?;
    Ok(jaccard_slices(pred.data(), target.data(), positive_class))
}

pub fn dice_slices(pred: &[u8], target: &[u8], class: u8) -> f64 {
    let (i, p, t) = set_counts(pred, target, class);
    if p + t == 0 {
        100.0
    } else {
        100.0 * 2.0 * i as f64 / (p + t) as f64
    }
}

pub fn jaccard_slices(pred: &[u8], target: &[u8], class: u8) -> f64 {
    let (i, p, t) = set_counts(pred, target, class);
    let union = p + t - i;
    if union == 0 {
        100.0
    } else {
        100.0 * i as f64 / union as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalResult {
    /// Mean per-sample dice, percent.
    pub dice: f64,
    /// Mean per-sample jaccard, percent.
    pub jaccard: f64,
    pub per_sample_dice: Vec<f64>,
    pub per_sample_jaccard: Vec<f64>,
}

impl EvalResult {
    pub fn from_pairs(preds: &[LabelMap], targets: &[&LabelMap], positive_class: u8) -> Result<Self> {
        if preds.is_empty() || preds.len() != targets.len() {
            return Err(Error::Empty("evaluation pairs"));
        }
        let per_sample_dice = preds
            .iter()
            .zip(targets)
            .map(|(p, t)| dice(p, t, positive_class))
            .collect::<Result<Vec<_>>>()?;
        let per_sample_jaccard = preds
            .iter()
            .zip(targets)
            .map(|(p, t)| jaccard(p, t, positive_class))
            .collect::<Result<Vec<_>>>()?;
        let n = preds.len() as f64;
        Ok(Self {
            dice: per_sample_dice.iter().sum::<f64>() / n,
            jaccard: per_sample_jaccard.iter().sum::<f64>() / n,
            per_sample_dice,
            per_sample_jaccard,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct EvalConfig {
    pub ensemble: usize,
    pub batch_size: usize,
    pub positive_class: u8,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ensemble: 4,
            batch_size: 8,
            positive_class: 1,
            seed: 0,
        }
    }
}

/// Generates masks for a labeled set and scores them.
pub fn evaluate<T: Scalar>(
    model: &DualPathwayDenoiser<T>,
    samples: &[LabeledSample],
    schedule: &NoiseSchedule,
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let preds = generate_masks(model, &images, schedule, cfg.ensemble, cfg.batch_size, &mut rng)?;
    let targets: Vec<&LabelMap> = samples.iter().map(|s| &s.label).collect();
    EvalResult::from_pairs(&preds, &targets, cfg.positive_class)
}

// ---------------------------------------------------------------------------
// Volumes

/// Patch geometry for volumetric inference, axes `[depth, height, width]`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SlidingWindowSpec {
    pub patch_size: [usize; 3],
    pub overlap_fraction: f64,
}

impl Default for SlidingWindowSpec {
    fn default() -> Self {
        Self {
            patch_size: [80, 96, 96],
            overlap_fraction: 0.5,
        }
    }
}

impl SlidingWindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size.contains(&0) || !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::InvalidConfig(format!("invalid sliding window {self:?}")));
        }
        Ok(())
    }

    pub fn stride(&self, axis: usize) -> usize {
        let p = self.patch_size[axis] as f64;
        (libm::round(p * (1.0 - self.overlap_fraction)) as usize).max(1)
    }
}

/// Window start positions along one axis: multiples of the stride, plus a final
/// window flush with the far edge so every position is covered.
pub fn window_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = dim - patch;
    let mut out: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if *out.last().expect("origin 0") != last {
        out.push(last);
    }
    out
}

/// Per-class probabilities of a `[c, d, h, w]` patch, returned as `[classes, d, h, w]`.
pub trait PatchPredictor<T: Scalar> {
    fn num_classes(&self) -> usize;
    fn predict(&mut self, patch: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Runs a 2D denoiser over every depth slice of a patch.
pub struct SliceWisePredictor<'a, T, R: ?Sized> {
    pub model: &'a DualPathwayDenoiser<T>,
    pub schedule: &'a NoiseSchedule,
    pub ensemble: usize,
    pub rng: &'a mut R,
}

impl<T: Scalar, R: Rng + ?Sized> PatchPredictor<T> for SliceWisePredictor<'_, T, R> {
    fn num_classes(&self) -> usize {
        self.model.config().num_classes
    }

    fn predict(&mut self, patch: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, d, h, w) = patch.dims4()?;
        let hw = h * w;
        // [c, d, h, w] -> [d, c, h, w]
        let src = patch.data();
        let slices = Tensor::from_fn(&[d, c, h, w], |i| {
            let (z, rest) = (i / (c * hw), i % (c * hw));
            let (ch, p) = (rest / hw, rest % hw);
            src[(ch * d + z) * hw + p]
        });
        let probs = mask_probabilities(self.model, &slices, self.schedule, self.ensemble, self.rng)?;
        let k = self.num_classes();
        let pd = probs.data();
        Ok(Tensor::from_fn(&[k, d, h, w], |i| {
            let (cls, rest) = (i / (d * hw), i % (d * hw));
            let (z, p) = (rest / hw, rest % hw);
            pd[(z * k + cls) * hw + p]
        }))
    }
}

/// Stitched output of a sliding-window pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SlidingWindowOutput<T> {
    /// `[depth, height, width]`.
    pub dims: [usize; 3],
    /// Argmax labels, one per voxel.
    pub labels: Vec<u8>,
    /// Overlap-averaged probabilities `[classes, d, h, w]`.
    pub probabilities: Tensor<T>,
    /// Number of windows that contributed to each voxel.
    pub counts: Vec<u32>,
}

/// Tiles a `[c, d, h, w]` volume, averages patch probabilities uniformly over
/// overlaps and takes the per-voxel argmax.
pub fn sliding_window<T: Scalar, P: PatchPredictor<T>>(
    predictor: &mut P,
    volume: &Tensor<T>,
    spec: &SlidingWindowSpec,
) -> Result<SlidingWindowOutput<T>> {
    spec.validate()?;
    let (c, d, h, w) = volume.dims4()?;
    let dims = [d, h, w];
    let [pd, ph, pw] = spec.patch_size;
    if d < pd || h < ph || w < pw {
        return Err(Error::VolumeTooSmall {
            volume: dims,
            patch: spec.patch_size,
        });
    }
    let k = predictor.num_classes();
    let n = d * h * w;
    let mut acc = vec![T::zero(); k * n];
    let mut counts = vec![0u32; n];
    let src = volume.data();
    for &z0 in &window_origins(d, pd, spec.stride(0)) {
        for &y0 in &window_origins(h, ph, spec.stride(1)) {
            for &x0 in &window_origins(w, pw, spec.stride(2)) {
                let patch = Tensor::from_fn(&[c, pd, ph, pw], |i| {
                    let x = i % pw;
                    let y = (i / pw) % ph;
                    let z = (i / (pw * ph)) % pd;
                    let ch = i / (pw * ph * pd);
                    src[((ch * d + z0 + z) * h + y0 + y) * w + x0 + x]
                });
                let probs = predictor.predict(&patch)?;
                if probs.shape() != [k, pd, ph, pw] {
                    return Err(Error::ShapeMismatch {
                        expected: vec![k, pd, ph, pw],
                        found: probs.shape().to_vec(),
                    });
                }
                let pv = probs.data();
                for z in 0..pd {
                    for y in 0..ph {
                        let row = ((z0 + z) * h + y0 + y) * w + x0;
                        for x in 0..pw {
                            counts[row + x] += 1;
                            for cls in 0..k {
                                let a = &mut acc[cls * n + row + x];
                                *a = *a + pv[((cls * pd + z) * ph + y) * pw + x];
                            }
                        }
                    }
                }
            }
        }
    }
    for cls in 0..k {
        for (a, &cnt) in acc[cls * n..(cls + 1) * n].iter_mut().zip(&counts) {
            *a = *a / T::from_f64(cnt as f64);
        }
    }
    let probabilities = Tensor::new(&[k, d, h, w], acc)?;
    let labels = argmax_channels(probabilities.data(), k);
    Ok(SlidingWindowOutput {
        dims,
        labels,
        probabilities,
        counts,
    })
}

/// Sliding-window label volume from a 2D denoiser applied slice by slice.
pub fn sliding_window_predict<T: Scalar, R: Rng + ?Sized>(
    model: &DualPathwayDenoiser<T>,
    volume: &Tensor<T>,
    spec: &SlidingWindowSpec,
    schedule: &NoiseSchedule,
    ensemble: usize,
    rng: &mut R,
) -> Result<Vec<u8>> {
    let mut predictor = SliceWisePredictor {
        model,
        schedule,
        ensemble,
        rng,
    };
    Ok(sliding_window(&mut predictor, volume, spec)?.labels)
}

/// Whole-volume label map without tiling: every slice through the mask pathway.
pub fn generate_volume_mask<T: Scalar, R: Rng + ?Sized>(
    model: &DualPathwayDenoiser<T>,
    volume: &Tensor<T>,
    schedule: &NoiseSchedule,
    ensemble: usize,
    rng: &mut R,
) -> Result<Vec<u8>> {
    let mut predictor = SliceWisePredictor {
        model,
        schedule,
        ensemble,
        rng,
    };
    let probs = predictor.predict(volume)?;
    Ok(argmax_channels(probs.data(), predictor.num_classes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(h: usize, w: usize, v: &[u8]) -> LabelMap {
        LabelMap::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn metric_hand_cases() {
        let p = lm(2, 2, &[1, 1, 1, 1]);
        let t = lm(2, 2, &[1, 0, 1, 0]);
        assert!((dice(&p, &t, 1).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(jaccard(&p, &t, 1).unwrap(), 50.0);
        let e = lm(2, 2, &[0; 4]);
        assert_eq!(dice(&e, &e, 1).unwrap(), 100.0);
        assert_eq!(jaccard(&e, &e, 1).unwrap(), 100.0);
        let a = lm(1, 2, &[1, 0]);
        let b = lm(1, 2, &[0, 1]);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        assert!(dice(&a, &p, 1).is_err());
    }

    #[test]
    fn origins_cover_the_axis() {
        assert_eq!(window_origins(100, 96, 48), vec![0, 4]);
        assert_eq!(window_origins(96, 96, 48), vec![0]);
        assert_eq!(window_origins(10, 4, 2), vec![0, 2, 4, 6]);
        assert_eq!(window_origins(11, 4, 2), vec![0, 2, 4, 6, 7]);
    }

    #[test]
    fn too_small_volume() {
        struct Flat;
        impl PatchPredictor<f32> for Flat {
            fn num_classes(&self) -> usize {
                2
            }
            fn predict(&mut self, _: &Tensor<f32>) -> Result<Tensor<f32>> {
                unreachable!()
            }
        }
        let v = Tensor::<f32>::zeros(&[1, 4, 4, 4]);
        let spec = SlidingWindowSpec {
            patch_size: [2, 8, 2],
            overlap_fraction: 0.5,
        };
        assert!(matches!(sliding_window(&mut Flat, &v, &spec), Err(Error::VolumeTooSmall { .. })));
    }
}
