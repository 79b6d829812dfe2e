//! Label-free teacher pretraining with the mask -> image cycle-consistency loss.
//!
//! The mask pathway segments the image from a pure-noise mask; the image
//! pathway must then regenerate the image from a pure-noise image conditioned
//! only on that (soft) mask. The squared reconstruction error trains both.

use alloc::format;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BatchPolicy, ImageView, SegmentationSample};
use crate::denoiser::{soft_conditioning, DualPathwayDenoiser};
use crate::error::{Diagnostics, Error, Result};
use crate::graph::Graph;
use crate::optim::{step_decay_lr, Adam, AdamConfig};
use crate::schedule::{NoiseSchedule, Timestep};
use crate::tensor::{Scalar, Tensor};
use crate::training::{stack_images, EpochRecord, TrainingHistory, TrainingMonitor};

/// Consecutive non-finite steps tolerated before pretraining aborts.
pub const MAX_NON_FINITE_STREAK: usize = 10;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub batch: BatchPolicy,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            learning_rate: 0.01,
            lr_decay_every: 50,
            lr_decay_factor: 0.1,
            weight_decay: 5e-5,
            seed: 0,
            batch: BatchPolicy {
                augment: Some(Default::default()),
                crop_size: None,
            },
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs >= 1
            && self.batch_size >= 1
            && self.learning_rate > 0.0
            && self.lr_decay_every >= 1
            && self.lr_decay_factor > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid pretraining config {self:?}")))
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_decay_lr(self.learning_rate, epoch, self.lr_decay_every, self.lr_decay_factor)
    }
}

/// Loss and parameter gradients of one cycle-consistency step.
#[derive(Clone, Debug)]
pub struct CycleStep<T> {
    pub loss: f64,
    pub grads: Vec<Tensor<T>>,
    /// Mask-pathway timesteps `t`.
    pub t: Vec<Timestep>,
    /// Image-pathway timesteps `t'`.
    pub t_prime: Vec<Timestep>,
}

/// One forward/backward pass of the cycle-consistency loss on a `[b, c, h, w]` batch.
///
/// `t` and `t'` are drawn independently per sample from `1..=T`.
pub fn cycle_step<T: Scalar, R: Rng + ?Sized>(
    teacher: &DualPathwayDenoiser<T>,
    images: &Tensor<T>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<CycleStep<T>> {
    let (b, _, h, w) = images.dims4()?;
    let classes = teacher.config().num_classes;
    let t = schedule.sample_timesteps(b, rng);
    let t_prime = schedule.sample_timesteps(b, rng);
    let mask_noise = schedule.pure_noise_batch::<T, _>(&[b, classes, h, w], &t, rng)?;
    let image_noise = schedule.pure_noise_batch::<T, _>(images.shape(), &t_prime, rng)?;

    let mut g = Graph::new();
    let p = teacher.bind(&mut g);
    let image = g.constant(images.clone());
    let noisy_mask = g.constant(mask_noise);
    let logits = teacher.mask_pathway(&mut g, &p, image, noisy_mask, &t)?;
    let cond = soft_conditioning(&mut g, logits)?;
    let noisy_image = g.constant(image_noise);
    let eps_hat = teacher.image_pathway(&mut g, &p, noisy_image, cond, &t_prime)?;
    let (c0, c1) = schedule.reconstruction_weights(&t_prime)?;
    let recon = g.per_sample_combine(noisy_image, eps_hat, c0, c1)?;
    let recon = g.clamp(recon, -T::one(), T::one());
    let loss_var = g.mse(recon, images)?;
    let loss = g.value(loss_var).item().to_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite(Diagnostics {
            stage: "cycle",
            loss,
            input_norm: images.sq_norm().to_f64().sqrt(),
            timesteps: t.iter().map(|s| s.0).collect(),
            secondary_timesteps: t_prime.iter().map(|s| s.0).collect(),
        }));
    }
    let grads = g.backward(loss_var);
    Ok(CycleStep {
        loss,
        grads: p.gradients(&g, &grads),
        t,
        t_prime,
    })
}

/// Trains the teacher on image-only views with the cycle-consistency loss.
pub fn pretrain<T: Scalar, M: TrainingMonitor<T>>(
    mut teacher: DualPathwayDenoiser<T>,
    images: &[ImageView],
    schedule: &NoiseSchedule,
    cfg: &PretrainConfig,
    monitor: &mut M,
) -> Result<(DualPathwayDenoiser<T>, TrainingHistory)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Empty("pretraining set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.adam(), teacher.parameters().tensors());
    let mut history = TrainingHistory::default();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut streak = 0usize;
    for epoch in 0..cfg.epochs {
        let start = monitor.now();
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut sum, mut steps, mut skipped) = (0.0, 0usize, 0usize);
        let mut last_failure = None;
        for chunk in order.chunks(cfg.batch_size) {
            let prepared = chunk
                .iter()
                .map(|&i| {
                    let s = SegmentationSample {
                        id: images[i].id.clone(),
                        image: images[i].image.clone(),
                        label: None,
                    };
                    cfg.batch.prepare(&s, &mut rng).map(|s| s.image)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = stack_images::<T>(&prepared.iter().collect::<Vec<_>>())?;
            match cycle_step(&teacher, &batch, schedule, &mut rng) {
                Ok(step) => {
                    streak = 0;
                    opt.step(teacher.parameters_mut().tensors_mut(), &step.grads, lr);
                    sum += step.loss;
                    steps += 1;
                }
                Err(Error::NonFinite(d)) => {
                    streak += 1;
                    skipped += 1;
                    if streak > MAX_NON_FINITE_STREAK {
                        return Err(Error::NonFinite(d));
                    }
                    last_failure = Some(d);
                }
                Err(e) => return Err(e),
            }
        }
        if steps == 0 {
            return Err(Error::NonFinite(last_failure.expect("every step failed")));
        }
        let record = EpochRecord {
            epoch,
            lr,
            lambda: 0.0,
            loss: sum / steps as f64,
            parts: None,
            seconds: monitor.now() - start,
            steps,
            skipped_steps: skipped,
        };
        monitor.epoch_end(&record, &[&teacher], &rng)?;
        history.epochs.push(record);
    }
    Ok((teacher, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::training::NullMonitor;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            image_channels: 1,
            num_classes: 2,
            base_width: 4,
            depth: 2,
            time_embed_dim: 8,
        }
    }

    fn views(n: usize) -> Vec<ImageView> {
        crate::data::synth_shapes(n, 16, 5).unwrap().iter().map(|s| s.view()).collect()
    }

    #[test]
    fn cycle_step_is_deterministic_and_nonnegative() {
        let model = DualPathwayDenoiser::<f32>::init(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let batch = crate::training::image_batch::<f32>(&views(2)).unwrap();
        let s = NoiseSchedule::standard();
        let a = cycle_step(&model, &batch, &s, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = cycle_step(&model, &batch, &s, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(a.loss >= 0.0);
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn cycle_gradient_reaches_mask_head() {
        let model = DualPathwayDenoiser::<f64>::init(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let batch = crate::training::image_batch::<f64>(&views(2)).unwrap();
        let step = cycle_step(&model, &batch, &NoiseSchedule::standard(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let idx = model.parameters().names().iter().position(|n| n == "mask_head.weight").unwrap();
        assert!(step.grads[idx].sq_norm() > 0.0);
    }

    #[test]
    fn one_epoch_history() {
        let model = DualPathwayDenoiser::<f32>::init(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let cfg = PretrainConfig {
            epochs: 1,
            batch_size: 2,
            ..Default::default()
        };
        let (_, h) = pretrain(model, &views(2), &NoiseSchedule::standard(), &cfg, &mut NullMonitor).unwrap();
        assert_eq!(h.len(), 1);
        assert!(h.epochs[0].loss.is_finite());
    }

    #[test]
    fn rejects_empty_and_invalid() {
        let model = DualPathwayDenoiser::<f32>::init(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s = NoiseSchedule::standard();
        assert!(matches!(
            pretrain(model.clone(), &[], &s, &PretrainConfig::default(), &mut NullMonitor),
            Err(Error::Empty(_))
        ));
        let bad = PretrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(pretrain(model, &views(1), &s, &bad, &mut NullMonitor).is_err());
    }
}
