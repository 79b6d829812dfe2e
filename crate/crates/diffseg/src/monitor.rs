//! Per-epoch CSV logs, validation metrics and periodic checkpoints.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::Instant;

use diffseg_core::data::LabeledSample;
use diffseg_core::denoiser::DualPathwayDenoiser;
use diffseg_core::evaluator::{evaluate, EvalConfig};
use diffseg_core::schedule::NoiseSchedule;
use diffseg_core::training::{EpochRecord, TrainingMonitor};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Cotrain,
    Supervised,
}

impl Phase {
    fn model_labels(self) -> &'static [&'static str] {
        match self {
            Phase::Pretrain => &["teacher"],
            Phase::Cotrain => &["teacher", "student"],
            Phase::Supervised => &["supervised"],
        }
    }

    /// Index of the model whose validation metrics are logged.
    fn validated_model(self) -> usize {
        match self {
            Phase::Cotrain => 1,
            _ => 0,
        }
    }
}

#[derive(Serialize)]
struct PretrainRow {
    epoch: usize,
    loss: f64,
    lr: f64,
    seconds: f64,
}

#[derive(Serialize)]
struct CotrainRow {
    epoch: usize,
    lambda: f64,
    sup: f64,
    semi: f64,
    align_mean: f64,
    reconstr_mean: f64,
    total: f64,
    #[serde(rename = "val_DC")]
    val_dc: Option<f64>,
    #[serde(rename = "val_JI")]
    val_ji: Option<f64>,
}

pub struct Checkpointing {
    pub root: PathBuf,
    /// Every this many epochs; the last epoch is always saved.
    pub every: usize,
    pub epochs: usize,
    pub config: serde_json::Value,
}

pub struct RunMonitor<'a> {
    start: Instant,
    phase: Phase,
    log: Option<csv::Writer<File>>,
    validation: &'a [LabeledSample],
    validate_every: usize,
    schedule: &'a NoiseSchedule,
    eval: EvalConfig,
    checkpoints: Option<Checkpointing>,
    pub saved: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

impl<'a> RunMonitor<'a> {
    pub fn new(phase: Phase, schedule: &'a NoiseSchedule) -> Self {
        Self {
            start: Instant::now(),
            phase,
            log: None,
            validation: &[],
            validate_every: 0,
            schedule,
            eval: EvalConfig {
                ensemble: 1,
                ..EvalConfig::default()
            },
            checkpoints: None,
            saved: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn with_log(mut self, path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        self.log = Some(csv::Writer::from_path(path)?);
        Ok(self)
    }

    pub fn with_validation(mut self, samples: &'a [LabeledSample], every: usize, seed: u64) -> Self {
        self.validation = samples;
        self.validate_every = every;
        self.eval.seed = seed;
        self
    }

    pub fn with_checkpoints(mut self, policy: Checkpointing) -> Self {
        self.checkpoints = Some(policy);
        self
    }

    fn validate(&self, epoch: usize, model: &DualPathwayDenoiser<f32>) -> diffseg_core::Result<Option<(f64, f64)>> {
        if self.validate_every == 0 || self.validation.is_empty() || !(epoch + 1).is_multiple_of(self.validate_every) {
            return Ok(None);
        }
        let r = evaluate(model, self.validation, self.schedule, &self.eval)?;
        Ok(Some((r.dice, r.jaccard)))
    }

    fn write_row(&mut self, record: &EpochRecord, val: Option<(f64, f64)>) -> csv::Result<()> {
        let Some(log) = self.log.as_mut() else {
            return Ok(());
        };
        match self.phase {
            Phase::Pretrain => log.serialize(PretrainRow {
                epoch: record.epoch,
                loss: record.loss,
                lr: record.lr,
                seconds: record.seconds,
            })?,
            Phase::Cotrain | Phase::Supervised => {
                let parts = record.parts.clone().unwrap_or_default();
                log.serialize(CotrainRow {
                    epoch: record.epoch,
                    lambda: record.lambda,
                    sup: parts.sup,
                    semi: parts.semi,
                    align_mean: parts.align_mean,
                    reconstr_mean: parts.reconstr_mean,
                    total: record.loss,
                    val_dc: val.map(|v| v.0),
                    val_ji: val.map(|v| v.1),
                })?
            }
        }
        log.flush()?;
        Ok(())
    }
}

fn to_core(e: Error) -> diffseg_core::Error {
    match e {
        Error::Core(e) => e,
        other => diffseg_core::Error::Monitor(other.to_string()),
    }
}

impl TrainingMonitor<f32> for RunMonitor<'_> {
    fn now(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn epoch_end(
        &mut self,
        record: &EpochRecord,
        models: &[&DualPathwayDenoiser<f32>],
        rng: &ChaCha8Rng,
    ) -> diffseg_core::Result<()> {
        let val = match models.get(self.phase.validated_model()) {
            Some(m) => self.validate(record.epoch, m)?,
            None => None,
        };
        self.write_row(record, val)
            .map_err(|e| diffseg_core::Error::Monitor(format!("training log: {e}")))?;
        if let Some(policy) = &self.checkpoints {
            let done = record.epoch + 1;
            let due = done == policy.epochs || (policy.every > 0 && done.is_multiple_of(policy.every));
            if due {
                for (label, model) in self.phase.model_labels().iter().zip(models) {
                    let dir = checkpoint::epoch_dir(&policy.root, label, done);
                    checkpoint::save(&dir, model, done as u64, Some(rng), policy.config.clone()).map_err(to_core)?;
                    self.saved.push(dir);
                }
            }
        }
        Ok(())
    }

    fn warn(&mut self, message: &str) {
        eprintln!("warning: {message}");
        self.warnings.push(message.to_string());
    }
}
