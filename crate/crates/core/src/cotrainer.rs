//! Teacher-student co-training: cross pseudo-supervision, supervised
//! cross-entropy, multi-round diffusion with alignment and reconstruction
//! losses, and the λ ramp that weights the label-free terms.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BatchPolicy, ImageView, LabeledSample, SegmentationSample};
use crate::denoiser::{argmax_targets, soft_conditioning, BoundParams, DualPathwayDenoiser};
use crate::error::{Diagnostics, Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{step_decay_lr, Adam, AdamConfig};
use crate::schedule::{NoiseSchedule, Timestep};
use crate::tensor::{Scalar, Tensor};
use crate::training::{stack_images, Cycler, EpochRecord, LabeledBatch, LossParts, TrainingHistory, TrainingMonitor};

/// Linear ramp `lambda_max * epoch / max_epochs`.
pub fn lambda_at(current_epoch: usize, max_epochs: usize, lambda_max: f64) -> f64 {
    assert!(max_epochs >= 1 && current_epoch <= max_epochs, "epoch {current_epoch} of {max_epochs}");
    lambda_max * current_epoch as f64 / max_epochs as f64
}

/// Weight of the label-free terms and number of diffusion rounds.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub lambda_max: f64,
    pub lambda: f64,
    pub rounds: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_max: 5.0,
            lambda: 0.0,
            rounds: 5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 || !(self.lambda >= 0.0 && self.lambda <= self.lambda_max) {
            return Err(Error::InvalidConfig(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Loss parts of one (sub-)batch. `sup` is present for labeled batches only.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BatchLossBreakdown {
    pub sup: Option<f64>,
    pub semi: f64,
    pub align: Vec<f64>,
    pub reconstr: Vec<f64>,
    pub total: f64,
}

impl BatchLossBreakdown {
    pub fn align_mean(&self) -> f64 {
        mean(&self.align)
    }

    pub fn reconstr_mean(&self) -> f64 {
        mean(&self.reconstr)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// `[sup] + λ·semi + λ·mean(align) + λ·mean(reconstr)`.
pub fn total_loss(labeled: bool, parts: &BatchLossBreakdown, w: &LossWeights) -> Result<f64> {
    let l = w.lambda;
    let unsup = l * parts.semi + l * parts.align_mean() + l * parts.reconstr_mean();
    if labeled {
        let sup = parts.sup.ok_or(Error::MissingSupervisedLoss)?;
        Ok(sup + unsup)
    } else {
        Ok(unsup)
    }
}

/// Cross pseudo-supervision on the graph: each model is trained towards the
/// other's (detached) argmax.
pub fn cps_term<T: Scalar>(g: &mut Graph<T>, student_logits: Var, teacher_logits: Var) -> Result<Var> {
    let (s, t) = (g.value(student_logits), g.value(teacher_logits));
    s.ensure_same_shape(t)?;
    let teacher_targets = argmax_targets(t);
    let student_targets = argmax_targets(s);
    let a = g.cross_entropy(student_logits, &teacher_targets)?;
    let b = g.cross_entropy(teacher_logits, &student_targets)?;
    g.weighted_sum(&[(a, T::one()), (b, T::one())])
}

/// `CE(teacher, label) + CE(student, label)` on the graph.
pub fn supervised_term<T: Scalar>(g: &mut Graph<T>, teacher_logits: Var, student_logits: Var, labels: &[usize]) -> Result<Var> {
    let a = g.cross_entropy(teacher_logits, labels)?;
    let b = g.cross_entropy(student_logits, labels)?;
    g.weighted_sum(&[(a, T::one()), (b, T::one())])
}

/// Cross pseudo-supervision loss of two logit tensors `[b, classes, h, w]`.
pub fn cps_loss<T: Scalar>(student_logits: &Tensor<T>, teacher_logits: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(student_logits.clone());
    let t = g.constant(teacher_logits.clone());
    let l = cps_term(&mut g, s, t)?;
    Ok(g.value(l).item().to_f64())
}

/// Supervised loss of two logit tensors against `[b * h * w]` class targets.
pub fn supervised_loss<T: Scalar>(teacher_logits: &Tensor<T>, student_logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let t = g.constant(teacher_logits.clone());
    let s = g.constant(student_logits.clone());
    let l = supervised_term(&mut g, t, s, labels)?;
    Ok(g.value(l).item().to_f64())
}

/// Per-round loss nodes of the multi-round diffusion.
#[derive(Clone, Debug)]
pub struct MultiRoundTerms {
    pub align: Vec<Var>,
    pub reconstr: Vec<Var>,
    pub t_prime: Vec<Vec<Timestep>>,
    pub t_second: Vec<Vec<Timestep>>,
}

/// Iterated image regeneration / mask regeneration through the teacher.
///
/// Round `r` noises the clean image afresh, regenerates it with the image
/// pathway conditioned on the previous mask (soft form), then segments the
/// regenerated image from a pure-noise mask. `target` holds the detached
/// `[b * h * w]` class targets.
#[allow(clippy::too_many_arguments)]
pub fn multi_round_terms<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    teacher: &DualPathwayDenoiser<T>,
    params: &BoundParams,
    images: &Tensor<T>,
    base_mask_logits: Var,
    target: &[usize],
    rounds: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<MultiRoundTerms> {
    if rounds < 1 {
        return Err(Error::InvalidConfig("at least one diffusion round is required".into()));
    }
    let (b, _, h, w) = images.dims4()?;
    let classes = teacher.config().num_classes;
    let mut out = MultiRoundTerms {
        align: Vec::with_capacity(rounds),
        reconstr: Vec::with_capacity(rounds),
        t_prime: Vec::with_capacity(rounds),
        t_second: Vec::with_capacity(rounds),
    };
    let mut prev = base_mask_logits;
    for _ in 0..rounds {
        let t1 = schedule.sample_timesteps(b, rng);
        let eps = crate::schedule::standard_normal::<T, _>(images.shape(), rng);
        let noisy = g.constant(schedule.add_noise_batch(images, &eps, &t1)?);
        let cond = soft_conditioning(g, prev)?;
        let eps_hat = teacher.image_pathway(g, params, noisy, cond, &t1)?;
        let (c0, c1) = schedule.reconstruction_weights(&t1)?;
        let regenerated = g.per_sample_combine(noisy, eps_hat, c0, c1)?;
        let regenerated = g.clamp(regenerated, -T::one(), T::one());
        out.reconstr.push(g.mse(regenerated, images)?);

        let t2 = schedule.sample_timesteps(b, rng);
        let mask_noise = g.constant(schedule.pure_noise_batch(&[b, classes, h, w], &t2, rng)?);
        let logits = teacher.mask_pathway(g, params, regenerated, mask_noise, &t2)?;
        out.align.push(g.cross_entropy(logits, target)?);
        prev = logits;
        out.t_prime.push(t1);
        out.t_second.push(t2);
    }
    Ok(out)
}

/// Alignment and reconstruction losses of a multi-round pass, as values.
#[allow(clippy::too_many_arguments)]
pub fn multi_round<T: Scalar, R: Rng + ?Sized>(
    teacher: &DualPathwayDenoiser<T>,
    images: &Tensor<T>,
    base_mask_logits: &Tensor<T>,
    target: &[usize],
    rounds: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let p = teacher.bind_frozen(&mut g);
    let base = g.constant(base_mask_logits.clone());
    let terms = multi_round_terms(&mut g, teacher, &p, images, base, target, rounds, schedule, rng)?;
    let read = |vs: &[Var]| vs.iter().map(|&v| g.value(v).item().to_f64()).collect::<Vec<_>>();
    Ok((read(&terms.align), read(&terms.reconstr)))
}

/// Objective of one co-training step with parameter gradients for both models.
#[derive(Clone, Debug)]
pub struct CotrainObjective<T> {
    pub labeled: Option<BatchLossBreakdown>,
    pub unlabeled: Option<BatchLossBreakdown>,
    /// Sum of the sub-batch totals; this is what is differentiated.
    pub total: f64,
    pub teacher_grads: Vec<Tensor<T>>,
    pub student_grads: Vec<Tensor<T>>,
}

struct SubBatchTerms {
    breakdown_vars: (Option<Var>, Var, Vec<Var>, Vec<Var>),
    total: Var,
    t: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
fn sub_batch<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    teacher: &DualPathwayDenoiser<T>,
    tp: &BoundParams,
    student: &DualPathwayDenoiser<T>,
    sp: &BoundParams,
    images: &Tensor<T>,
    labels: Option<&[usize]>,
    w: &LossWeights,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<SubBatchTerms> {
    let (b, _, h, wd) = images.dims4()?;
    let classes = teacher.config().num_classes;
    let image = g.constant(images.clone());
    let t_teacher = schedule.sample_timesteps(b, rng);
    let t_student = schedule.sample_timesteps(b, rng);
    let teacher_noise = g.constant(schedule.pure_noise_batch(&[b, classes, h, wd], &t_teacher, rng)?);
    let student_noise = g.constant(schedule.pure_noise_batch(&[b, classes, h, wd], &t_student, rng)?);
    let teacher_logits = teacher.mask_pathway(g, tp, image, teacher_noise, &t_teacher)?;
    let student_logits = student.mask_pathway(g, sp, image, student_noise, &t_student)?;

    let semi = cps_term(g, student_logits, teacher_logits)?;
    let sup = labels
        .map(|l| supervised_term(g, teacher_logits, student_logits, l))
        .transpose()?;
    let pseudo;
    let target = match labels {
        Some(l) => l,
        None => {
            pseudo = argmax_targets(g.value(student_logits));
            &pseudo[..]
        }
    };
    let rounds = multi_round_terms(g, teacher, tp, images, teacher_logits, target, w.rounds, schedule, rng)?;

    let l = T::from_f64(w.lambda);
    let per_round = T::from_f64(w.lambda / w.rounds as f64);
    let mut terms = Vec::with_capacity(2 + 2 * w.rounds);
    if let Some(s) = sup {
        terms.push((s, T::one()));
    }
    if w.lambda > 0.0 {
        terms.push((semi, l));
        terms.extend(rounds.align.iter().map(|&v| (v, per_round)));
        terms.extend(rounds.reconstr.iter().map(|&v| (v, per_round)));
    }
    let total = if terms.is_empty() {
        g.constant(Tensor::scalar(T::zero()))
    } else {
        g.weighted_sum(&terms)?
    };
    Ok(SubBatchTerms {
        breakdown_vars: (sup, semi, rounds.align, rounds.reconstr),
        total,
        t: t_teacher.iter().chain(&t_student).map(|s| s.0).collect(),
    })
}

fn read_breakdown<T: Scalar>(g: &Graph<T>, terms: &SubBatchTerms, w: &LossWeights) -> Result<BatchLossBreakdown> {
    let v = |x: Var| g.value(x).item().to_f64();
    let (sup, semi, align, reconstr) = &terms.breakdown_vars;
    let mut parts = BatchLossBreakdown {
        sup: sup.map(v),
        semi: v(*semi),
        align: align.iter().map(|&x| v(x)).collect(),
        reconstr: reconstr.iter().map(|&x| v(x)).collect(),
        total: 0.0,
    };
    parts.total = total_loss(parts.sup.is_some(), &parts, w)?;
    Ok(parts)
}

/// Builds the co-training objective for one labeled and/or one unlabeled
/// batch and differentiates it with respect to both models.
///
/// Each model's mask pathway sees an independent pure-noise mask and
/// timestep. Multi-round terms only involve teacher pathways; pseudo-label
/// targets are detached.
#[allow(clippy::too_many_arguments)]
pub fn cotrain_objective<T: Scalar, R: Rng + ?Sized>(
    teacher: &DualPathwayDenoiser<T>,
    student: &DualPathwayDenoiser<T>,
    labeled: Option<&LabeledBatch<T>>,
    unlabeled: Option<&Tensor<T>>,
    w: &LossWeights,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<CotrainObjective<T>> {
    w.validate()?;
    if labeled.is_none() && unlabeled.is_none() {
        return Err(Error::Empty("co-training batch"));
    }
    let mut g = Graph::new();
    let tp = teacher.bind(&mut g);
    let sp = student.bind(&mut g);
    let lab = labeled
        .map(|b| sub_batch(&mut g, teacher, &tp, student, &sp, &b.images, Some(&b.labels), w, schedule, rng))
        .transpose()?;
    let unl = unlabeled
        .map(|x| sub_batch(&mut g, teacher, &tp, student, &sp, x, None, w, schedule, rng))
        .transpose()?;
    let totals: Vec<(Var, T)> = lab.iter().chain(&unl).map(|s| (s.total, T::one())).collect();
    let objective = g.weighted_sum(&totals)?;
    let total = g.value(objective).item().to_f64();
    if !total.is_finite() {
        let mut norm = 0.0;
        if let Some(b) = labeled {
            norm += b.images.sq_norm().to_f64();
        }
        if let Some(x) = unlabeled {
            norm += x.sq_norm().to_f64();
        }
        return Err(Error::NonFinite(Diagnostics {
            stage: "cotrain",
            loss: total,
            input_norm: norm.sqrt(),
            timesteps: lab.iter().chain(&unl).flat_map(|s| s.t.iter().copied()).collect(),
            secondary_timesteps: Vec::new(),
        }));
    }
    let grads = g.backward(objective);
    Ok(CotrainObjective {
        labeled: lab.as_ref().map(|s| read_breakdown(&g, s, w)).transpose()?,
        unlabeled: unl.as_ref().map(|s| read_breakdown(&g, s, w)).transpose()?,
        total,
        teacher_grads: tp.gradients(&g, &grads),
        student_grads: sp.gradients(&g, &grads),
    })
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct CotrainConfig {
    pub epochs: usize,
    pub labeled_batch_size: usize,
    pub unlabeled_batch_size: usize,
    pub rounds: usize,
    pub lambda_max: f64,
    pub learning_rate: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub batch: BatchPolicy,
}

impl Default for CotrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            labeled_batch_size: 4,
            unlabeled_batch_size: 4,
            rounds: 5,
            lambda_max: 5.0,
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

impl CotrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs >= 1
            && self.labeled_batch_size >= 1
            && self.unlabeled_batch_size >= 1
            && self.rounds >= 1
            && self.lambda_max >= 0.0
            && self.learning_rate > 0.0
            && self.lr_decay_every >= 1
            && self.lr_decay_factor > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid co-training config {self:?}")))
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

    /// λ used during epoch `epoch` (0-based): 0 in the first epoch, `lambda_max` in the last.
    pub fn lambda_for_epoch(&self, epoch: usize) -> f64 {
        lambda_at(epoch, (self.epochs - 1).max(1), self.lambda_max)
    }

    pub fn weights_for_epoch(&self, epoch: usize) -> LossWeights {
        LossWeights {
            lambda_max: self.lambda_max,
            lambda: self.lambda_for_epoch(epoch),
            rounds: self.rounds,
        }
    }
}

/// Step outcome reported by [`CoTrainer::step`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub labeled: Option<BatchLossBreakdown>,
    pub unlabeled: Option<BatchLossBreakdown>,
    pub total: f64,
    /// False when the objective was identically zero and no update was applied.
    pub updated: bool,
}

/// Teacher, student and their optimizers.
#[derive(Clone, Debug)]
pub struct CoTrainer<T> {
    pub teacher: DualPathwayDenoiser<T>,
    pub student: DualPathwayDenoiser<T>,
    teacher_opt: Adam<T>,
    student_opt: Adam<T>,
}

impl<T: Scalar> CoTrainer<T> {
    pub fn new(teacher: DualPathwayDenoiser<T>, student: DualPathwayDenoiser<T>, adam: AdamConfig) -> Self {
        let teacher_opt = Adam::new(adam.clone(), teacher.parameters().tensors());
        let student_opt = Adam::new(adam, student.parameters().tensors());
        Self {
            teacher,
            student,
            teacher_opt,
            student_opt,
        }
    }

    /// One optimizer update of both models. A batch with no labeled part at
    /// λ = 0 has an identically zero objective and leaves both models untouched.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        labeled: Option<&LabeledBatch<T>>,
        unlabeled: Option<&Tensor<T>>,
        w: &LossWeights,
        schedule: &NoiseSchedule,
        lr: f64,
        rng: &mut R,
    ) -> Result<StepReport> {
        let obj = cotrain_objective(&self.teacher, &self.student, labeled, unlabeled, w, schedule, rng)?;
        let updated = labeled.is_some() || w.lambda > 0.0;
        if updated {
            self.teacher_opt
                .step(self.teacher.parameters_mut().tensors_mut(), &obj.teacher_grads, lr);
            self.student_opt
                .step(self.student.parameters_mut().tensors_mut(), &obj.student_grads, lr);
        }
        Ok(StepReport {
            labeled: obj.labeled,
            unlabeled: obj.unlabeled,
            total: obj.total,
            updated,
        })
    }
}

/// Trained pair plus history.
#[derive(Clone, Debug)]
pub struct CotrainOutcome<T> {
    pub teacher: DualPathwayDenoiser<T>,
    pub student: DualPathwayDenoiser<T>,
    pub history: TrainingHistory,
}

fn prepare_labeled<T: Scalar, R: Rng + ?Sized>(
    set: &[LabeledSample],
    idx: &[usize],
    policy: &BatchPolicy,
    rng: &mut R,
) -> Result<LabeledBatch<T>> {
    let prepared = idx
        .iter()
        .map(|&i| {
            let s = policy.prepare(&SegmentationSample::from(set[i].clone()), rng)?;
            s.labeled()
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledBatch::from_samples(&prepared)
}

fn prepare_unlabeled<T: Scalar, R: Rng + ?Sized>(
    set: &[ImageView],
    idx: &[usize],
    policy: &BatchPolicy,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let prepared = idx
        .iter()
        .map(|&i| {
            let s = SegmentationSample {
                id: set[i].id.clone(),
                image: set[i].image.clone(),
                label: None,
            };
            policy.prepare(&s, rng).map(|s| s.image)
        })
        .collect::<Result<Vec<_>>>()?;
    stack_images(&prepared.iter().collect::<Vec<_>>())
}

#[derive(Default)]
struct EpochAccumulator {
    total: f64,
    sup: (f64, usize),
    semi: f64,
    align: f64,
    reconstr: f64,
    parts: usize,
    steps: usize,
}

impl EpochAccumulator {
    fn add(&mut self, r: &StepReport) {
        self.total += r.total;
        self.steps += 1;
        for b in r.labeled.iter().chain(&r.unlabeled) {
            if let Some(s) = b.sup {
                self.sup.0 += s;
                self.sup.1 += 1;
            }
            self.semi += b.semi;
            self.align += b.align_mean();
            self.reconstr += b.reconstr_mean();
            self.parts += 1;
        }
    }

    fn parts(&self) -> LossParts {
        let n = self.parts.max(1) as f64;
        LossParts {
            sup: if self.sup.1 > 0 { self.sup.0 / self.sup.1 as f64 } else { 0.0 },
            semi: self.semi / n,
            align_mean: self.align / n,
            reconstr_mean: self.reconstr / n,
        }
    }
}

/// Co-trains a (pretrained) teacher and a fresh student.
///
/// An epoch is one pass over the unlabeled set; each step pairs an unlabeled
/// batch with a labeled batch drawn from a reshuffling cycle over the labeled
/// set. Without unlabeled data the loop degrades to supervised co-training
/// with epochs defined over the labeled set.
pub fn cotrain<T: Scalar, M: TrainingMonitor<T>>(
    teacher: DualPathwayDenoiser<T>,
    student: DualPathwayDenoiser<T>,
    labeled: &[LabeledSample],
    unlabeled: &[ImageView],
    schedule: &NoiseSchedule,
    cfg: &CotrainConfig,
    monitor: &mut M,
) -> Result<CotrainOutcome<T>> {
    cfg.validate()?;
    if labeled.is_empty() && unlabeled.is_empty() {
        return Err(Error::Empty("co-training set"));
    }
    let degraded = unlabeled.is_empty();
    if degraded {
        monitor.warn("no unlabeled data: co-training degrades to supervised training");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = CoTrainer::new(teacher, student, cfg.adam());
    let mut history = TrainingHistory {
        epochs: Vec::with_capacity(cfg.epochs),
        degraded_to_supervised: degraded,
    };
    let mut labeled_cycle = Cycler::new(labeled.len());
    let mut order: Vec<usize> = (0..unlabeled.len()).collect();
    for epoch in 0..cfg.epochs {
        let start = monitor.now();
        let lr = cfg.lr_at(epoch);
        let w = cfg.weights_for_epoch(epoch);
        let mut acc = EpochAccumulator::default();
        let steps = if degraded {
            labeled.len().div_ceil(cfg.labeled_batch_size)
        } else {
            order.shuffle(&mut rng);
            unlabeled.len().div_ceil(cfg.unlabeled_batch_size)
        };
        for step in 0..steps {
            let lab = if labeled.is_empty() {
                None
            } else {
                let idx = labeled_cycle.take(cfg.labeled_batch_size, &mut rng);
                Some(prepare_labeled::<T, _>(labeled, &idx, &cfg.batch, &mut rng)?)
            };
            let unl = if degraded {
                None
            } else {
                let lo = step * cfg.unlabeled_batch_size;
                let hi = (lo + cfg.unlabeled_batch_size).min(order.len());
                Some(prepare_unlabeled::<T, _>(unlabeled, &order[lo..hi], &cfg.batch, &mut rng)?)
            };
            let report = trainer.step(lab.as_ref(), unl.as_ref(), &w, schedule, lr, &mut rng)?;
            acc.add(&report);
        }
        let record = EpochRecord {
            epoch,
            lr,
            lambda: w.lambda,
            loss: acc.total / acc.steps.max(1) as f64,
            parts: Some(acc.parts()),
            seconds: monitor.now() - start,
            steps: acc.steps,
            skipped_steps: 0,
        };
        monitor.epoch_end(&record, &[&trainer.teacher, &trainer.student], &rng)?;
        history.epochs.push(record);
    }
    Ok(CotrainOutcome {
        teacher: trainer.teacher,
        student: trainer.student,
        history,
    })
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch; defaults to one pass over the labeled set.
    pub steps_per_epoch: Option<usize>,
    pub learning_rate: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub batch: BatchPolicy,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        let c = CotrainConfig::default();
        Self::matching(&c, None)
    }
}

impl SupervisedConfig {
    /// Same optimizer recipe and batch policy as a co-training run.
    pub fn matching(c: &CotrainConfig, steps_per_epoch: Option<usize>) -> Self {
        Self {
            epochs: c.epochs,
            batch_size: c.labeled_batch_size,
            steps_per_epoch,
            learning_rate: c.learning_rate,
            lr_decay_every: c.lr_decay_every,
            lr_decay_factor: c.lr_decay_factor,
            weight_decay: c.weight_decay,
            seed: c.seed,
            batch: c.batch.clone(),
        }
    }
}

/// Loss and gradients of the student-only cross-entropy on one labeled batch.
pub fn supervised_step<T: Scalar, R: Rng + ?Sized>(
    model: &DualPathwayDenoiser<T>,
    batch: &LabeledBatch<T>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let (b, _, h, w) = batch.images.dims4()?;
    let classes = model.config().num_classes;
    let t = schedule.sample_timesteps(b, rng);
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let image = g.constant(batch.images.clone());
    let noise = g.constant(schedule.pure_noise_batch(&[b, classes, h, w], &t, rng)?);
    let logits = model.mask_pathway(&mut g, &p, image, noise, &t)?;
    let loss = g.cross_entropy(logits, &batch.labels)?;
    let value = g.value(loss).item().to_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(Diagnostics {
            stage: "supervised",
            loss: value,
            input_norm: batch.images.sq_norm().to_f64().sqrt(),
            timesteps: t.iter().map(|s| s.0).collect(),
            secondary_timesteps: vec![],
        }));
    }
    let grads = g.backward(loss);
    Ok((value, p.gradients(&g, &grads)))
}

/// Supervised-only training of a single model on the labeled set.
pub fn train_supervised<T: Scalar, M: TrainingMonitor<T>>(
    mut model: DualPathwayDenoiser<T>,
    labeled: &[LabeledSample],
    schedule: &NoiseSchedule,
    cfg: &SupervisedConfig,
    monitor: &mut M,
) -> Result<(DualPathwayDenoiser<T>, TrainingHistory)> {
    if labeled.is_empty() {
        return Err(Error::Empty("labeled set"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::InvalidConfig(format!("invalid supervised config {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        model.parameters().tensors(),
    );
    let mut cycle = Cycler::new(labeled.len());
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| labeled.len().div_ceil(cfg.batch_size))
        .max(1);
    let mut history = TrainingHistory::default();
    for epoch in 0..cfg.epochs {
        let start = monitor.now();
        let lr = step_decay_lr(cfg.learning_rate, epoch, cfg.lr_decay_every, cfg.lr_decay_factor);
        let mut sum = 0.0;
        for _ in 0..steps {
            let idx = cycle.take(cfg.batch_size, &mut rng);
            let batch = prepare_labeled::<T, _>(labeled, &idx, &cfg.batch, &mut rng)?;
            let (loss, grads) = supervised_step(&model, &batch, schedule, &mut rng)?;
            opt.step(model.parameters_mut().tensors_mut(), &grads, lr);
            sum += loss;
        }
        let record = EpochRecord {
            epoch,
            lr,
            lambda: 0.0,
            loss: sum / steps as f64,
            parts: Some(LossParts {
                sup: sum / steps as f64,
                ..Default::default()
            }),
            seconds: monitor.now() - start,
            steps,
            skipped_steps: 0,
        };
        monitor.epoch_end(&record, &[&model], &rng)?;
        history.epochs.push(record);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            image_channels: 1,
            num_classes: 2,
            base_width: 4,
            depth: 2,
            time_embed_dim: 8,
        }
    }

    #[test]
    fn lambda_ramp() {
        assert_eq!(lambda_at(0, 200, 5.0), 0.0);
        assert_eq!(lambda_at(200, 200, 5.0), 5.0);
        assert_eq!(lambda_at(100, 200, 5.0), 2.5);
    }

    #[test]
    fn epoch_lambda_hits_both_ends() {
        let c = CotrainConfig {
            epochs: 5,
            ..Default::default()
        };
        assert_eq!(c.lambda_for_epoch(0), 0.0);
        assert_eq!(c.lambda_for_epoch(4), 5.0);
    }

    #[test]
    fn cps_hand_case() {
        let s = Tensor::<f64>::new(&[1, 2, 1, 1], vec![0.0, 0.0]).unwrap();
        let t = Tensor::<f64>::new(&[1, 2, 1, 1], vec![10.0, -10.0]).unwrap();
        let v = cps_loss(&s, &t).unwrap();
        let expected = core::f64::consts::LN_2 + libm::log1p(libm::exp(-20.0));
        assert!((v - expected).abs() < 1e-12, "{v}");
    }

    #[test]
    fn supervised_uniform_logits() {
        let z = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        let v = supervised_loss(&z, &z, &[0, 1, 1, 0]).unwrap();
        assert!((v - 2.0 * core::f64::consts::LN_2).abs() < 1e-12);
        assert!(supervised_loss(&z, &z, &[0, 1, 2, 0]).is_err());
    }

    #[test]
    fn total_loss_composition() {
        let parts = BatchLossBreakdown {
            sup: Some(1.0),
            semi: 0.5,
            align: vec![0.2],
            reconstr: vec![0.1],
            total: 0.0,
        };
        let w = LossWeights {
            lambda: 2.0,
            ..Default::default()
        };
        assert!((total_loss(true, &parts, &w).unwrap() - 2.6).abs() < 1e-12);
        let missing = BatchLossBreakdown { sup: None, ..parts };
        assert_eq!(total_loss(true, &missing, &w), Err(Error::MissingSupervisedLoss));
    }

    #[test]
    fn multi_round_lengths_and_signs() {
        let model = DualPathwayDenoiser::<f32>::init(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = Tensor::<f32>::full(&[1, 1, 8, 8], 0.3);
        let logits = Tensor::<f32>::zeros(&[1, 2, 8, 8]);
        let target = vec![0usize; 64];
        let s = NoiseSchedule::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, r) = multi_round(&model, &img, &logits, &target, 1, &s, &mut rng).unwrap();
        assert_eq!((a.len(), r.len()), (1, 1));
        let (a, r) = multi_round(&model, &img, &logits, &target, 3, &s, &mut rng).unwrap();
        assert_eq!(a.len(), 3);
        assert!(r.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(multi_round(&model, &img, &logits, &target, 0, &s, &mut rng).is_err());
    }

    #[test]
    fn unlabeled_step_at_zero_lambda_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = DualPathwayDenoiser::<f32>::init(tiny(), &mut rng).unwrap();
        let s = DualPathwayDenoiser::<f32>::init(tiny(), &mut rng).unwrap();
        let mut trainer = CoTrainer::new(t.clone(), s.clone(), AdamConfig::default());
        let x = Tensor::<f32>::full(&[2, 1, 8, 8], 0.1);
        let w = LossWeights::default();
        let r = trainer
            .step(None, Some(&x), &w, &NoiseSchedule::standard(), 0.01, &mut rng)
            .unwrap();
        assert_eq!(r.total, 0.0);
        assert!(!r.updated);
        assert_eq!(trainer.teacher, t);
        assert_eq!(trainer.student, s);
    }
}
