//! Pieces shared by the training loops: histories, the per-epoch observer hook and
//! batch assembly.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::data::{ImageView, LabeledSample};
use crate::denoiser::DualPathwayDenoiser;
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Per-epoch means of the co-training loss parts.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossParts {
    pub sup: f64,
    pub semi: f64,
    pub align_mean: f64,
    pub reconstr_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    /// Mean optimized objective over the epoch's steps.
    pub loss: f64,
    pub parts: Option<LossParts>,
    pub seconds: f64,
    pub steps: usize,
    /// Steps dropped because their loss was non-finite.
    pub skipped_steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Set when co-training ran without unlabeled data.
    pub degraded_to_supervised: bool,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn seconds(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.seconds).collect()
    }
}

/// Observer called by the training loops. The core has no clock or filesystem,
/// so timing, logging and checkpointing live behind this hook.
pub trait TrainingMonitor<T: Scalar> {
    /// Seconds since an arbitrary origin.
    fn now(&mut self) -> f64 {
        0.0
    }

    /// Called after every epoch with the models being trained (teacher first)
    /// and the state of the run's random stream.
    fn epoch_end(&mut self, _record: &EpochRecord, _models: &[&DualPathwayDenoiser<T>], _rng: &ChaCha8Rng) -> Result<()> {
        Ok(())
    }

    fn warn(&mut self, _message: &str) {}
}

/// Monitor that ignores everything.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullMonitor;

impl<T: Scalar> TrainingMonitor<T> for NullMonitor {}

/// `[b, c, h, w]` batch from `[c, h, w]` images.
pub fn stack_images<T: Scalar>(images: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let cast: Vec<Tensor<T>> = images.iter().map(|t| t.cast()).collect();
    Tensor::stack(&cast)
}

/// Images plus flattened `[b * h * w]` class targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> LabeledBatch<T> {
    pub fn from_samples(samples: &[LabeledSample]) -> Result<Self> {
        let images = stack_images(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let labels = samples
            .iter()
            .flat_map(|s| s.label.data().iter().map(|&v| usize::from(v)))
            .collect();
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn image_batch<T: Scalar>(views: &[ImageView]) -> Result<Tensor<T>> {
    stack_images(&views.iter().map(|v| &v.image).collect::<Vec<_>>())
}

/// Shuffled pass over `0..n` that reshuffles whenever it runs out.
#[derive(Clone, Debug)]
pub(crate) struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub(crate) fn take<R: rand::Rng + ?Sized>(&mut self, k: usize, rng: &mut R) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut out = Vec::with_capacity(k);
        while out.len() < k && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
