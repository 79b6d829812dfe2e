//! The two-phase pipeline: pretrain the teacher on every training image
//! (labels stripped), co-train teacher and student on a label-scarce split,
//! then evaluate both on the held-out test set.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use diffseg_core::cotrainer::{cotrain, train_supervised, SupervisedConfig};
use diffseg_core::data::{resize, split_label_scarcity, synth_shapes_with, ImageView, LabeledSample, SegmentationSample};
use diffseg_core::denoiser::DualPathwayDenoiser;
use diffseg_core::evaluator::evaluate;
use diffseg_core::schedule::NoiseSchedule;
use diffseg_core::training::TrainingHistory;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{DatasetSpec, ExperimentConfig};
use crate::dataset::load_folder_dataset;
use crate::error::{Error, Result};
use crate::monitor::{Checkpointing, Phase, RunMonitor};
use crate::record::{Method, RunRecord};

pub struct Datasets {
    pub train: Vec<SegmentationSample>,
    pub validation: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

fn all_labeled(samples: Vec<SegmentationSample>, what: &str) -> Result<Vec<LabeledSample>> {
    samples
        .into_iter()
        .map(|s| s.labeled().map_err(|e| Error::Config(format!("{what} set: {e}"))))
        .collect()
}

pub fn load_datasets(spec: &DatasetSpec) -> Result<Datasets> {
    match spec {
        DatasetSpec::Synthetic {
            train,
            test,
            validation,
            size,
            seed,
            shapes,
            ..
        } => {
            let gen = |n: usize, offset: u64| -> Result<Vec<SegmentationSample>> {
                if n == 0 {
                    return Ok(Vec::new());
                }
                Ok(synth_shapes_with(n, *size, seed.wrapping_add(offset), shapes)?)
            };
            Ok(Datasets {
                train: gen(*train, 0)?,
                validation: all_labeled(gen(*validation, 2)?, "validation")?,
                test: all_labeled(gen(*test, 1)?, "test")?,
            })
        }
        DatasetSpec::Folder {
            train_root,
            test_root,
            validation_root,
            num_classes,
            resize: target,
            ..
        } => {
            let load = |root: &Path| -> Result<Vec<SegmentationSample>> {
                let samples = load_folder_dataset(root, *num_classes)?;
                match target {
                    Some([h, w]) => Ok(samples.iter().map(|s| resize(s, *h, *w)).collect::<diffseg_core::Result<_>>()?),
                    None => Ok(samples),
                }
            };
            let validation = match validation_root {
                Some(root) => all_labeled(load(root)?, "validation")?,
                None => Vec::new(),
            };
            Ok(Datasets {
                train: load(train_root)?,
                validation,
                test: all_labeled(load(test_root)?, "test")?,
            })
        }
    }
}

/// Fails if any evaluation sample id also names a training sample.
pub fn ensure_disjoint(data: &Datasets) -> Result<()> {
    let train: HashSet<&str> = data.train.iter().map(|s| s.id.as_str()).collect();
    let leaked: Vec<&str> = data
        .test
        .iter()
        .chain(&data.validation)
        .map(|s| s.id.as_str())
        .filter(|id| train.contains(id))
        .collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("evaluation samples overlap the training set: {leaked:?}")))
    }
}

pub struct Harness {
    cfg: ExperimentConfig,
    schedule: NoiseSchedule,
    data: Datasets,
}

/// A pretrained teacher with its history and checkpoints.
#[derive(Clone)]
pub struct Pretrained {
    pub teacher: DualPathwayDenoiser<f32>,
    pub history: Option<TrainingHistory>,
    pub checkpoints: Vec<PathBuf>,
}

impl Harness {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let data = load_datasets(&cfg.dataset)?;
        Self::with_datasets(cfg, data)
    }

    pub fn with_datasets(cfg: ExperimentConfig, data: Datasets) -> Result<Self> {
        cfg.validate()?;
        if data.train.is_empty() || data.test.is_empty() {
            return Err(Error::Config("training and test sets must be non-empty".into()));
        }
        ensure_disjoint(&data)?;
        let divisor = cfg.model.spatial_divisor();
        let images = data
            .train
            .iter()
            .map(|s| (&s.id, &s.image))
            .chain(data.test.iter().chain(&data.validation).map(|s| (&s.id, &s.image)));
        for (id, image) in images {
            let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
            if c != cfg.model.image_channels {
                return Err(Error::Config(format!(
                    "{id}: {c} channels, model expects {}",
                    cfg.model.image_channels
                )));
            }
            if h % divisor != 0 || w % divisor != 0 {
                return Err(Error::Config(format!("{id}: {h}x{w} is not a multiple of {divisor}")));
            }
        }
        Ok(Self {
            schedule: cfg.schedule.build()?,
            cfg,
            data,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn data(&self) -> &Datasets {
        &self.data
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn out(&self) -> &Path {
        &self.cfg.output_dir
    }

    fn cell_name(&self, method: &str, fraction: f64, seed: u64) -> String {
        format!("{method}-{}-f{fraction:.4}-s{seed}", self.cfg.dataset.name())
    }

    /// Teacher and student initializations for `seed`; the supervised
    /// baseline starts from the same student weights.
    pub fn init_models(&self, seed: u64) -> Result<(DualPathwayDenoiser<f32>, DualPathwayDenoiser<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher = DualPathwayDenoiser::init(self.cfg.model.clone(), &mut rng)?;
        let student = DualPathwayDenoiser::init(self.cfg.model.clone(), &mut rng)?;
        Ok((teacher, student))
    }

    fn config_echo(&self, seed: u64) -> serde_json::Value {
        serde_json::to_value(self.cfg.for_seed(seed)).expect("config serializes")
    }

    fn monitor(&self, phase: Phase, name: &str, epochs: usize, seed: u64) -> Result<RunMonitor<'_>> {
        let suffix = match phase {
            Phase::Pretrain => "pretrain",
            Phase::Cotrain => "cotrain",
            Phase::Supervised => "supervised",
        };
        Ok(RunMonitor::new(phase, &self.schedule)
            .with_log(&self.out().join("logs").join(format!("{name}-{suffix}.csv")))?
            .with_validation(&self.data.validation, self.cfg.validate_every, seed)
            .with_checkpoints(Checkpointing {
                root: self.out().join("checkpoints").join(name),
                every: self.cfg.checkpoint_every,
                epochs,
                config: self.config_echo(seed),
            }))
    }

    /// Cycle-consistency pretraining on all training images.
    pub fn pretrain_teacher(&self, seed: u64) -> Result<Pretrained> {
        let cfg = self.cfg.for_seed(seed);
        let views: Vec<ImageView> = self.data.train.iter().map(|s| s.view()).collect();
        let (teacher, _) = self.init_models(seed)?;
        let name = format!("pretrain-{}-s{seed}", self.cfg.dataset.name());
        let mut monitor = self.monitor(Phase::Pretrain, &name, cfg.pretrain.epochs, seed)?;
        let (teacher, history) = diffseg_core::pretrainer::pretrain(teacher, &views, &self.schedule, &cfg.pretrain, &mut monitor)?;
        Ok(Pretrained {
            teacher,
            history: Some(history),
            checkpoints: monitor.saved,
        })
    }

    fn empty_record(&self, method: Method, fraction: f64, seed: u64) -> RunRecord {
        RunRecord {
            config_hash: self.cfg.hash(),
            method,
            dataset: self.cfg.dataset.name().to_string(),
            seed,
            fraction,
            labeled: 0,
            unlabeled: 0,
            pretrain: None,
            train: None,
            student: None,
            teacher: None,
            wall_clock_seconds: 0.0,
            checkpoints: Vec::new(),
            error: None,
            config: self.cfg.for_seed(seed),
        }
    }

    /// Co-trains one cell from a pretrained teacher (pretraining first when
    /// `pretrained` is `None`). Failures are captured in the record.
    pub fn cotrain_cell(&self, fraction: f64, seed: u64, pretrained: Option<&Pretrained>) -> RunRecord {
        let start = Instant::now();
        let mut record = self.empty_record(Method::Cotrain, fraction, seed);
        let result = (|| -> Result<()> {
            let owned;
            let pre = match pretrained {
                Some(p) => p,
                None => {
                    owned = self.pretrain_teacher(seed)?;
                    &owned
                }
            };
            record.pretrain = pre.history.clone();
            record.checkpoints.extend(pre.checkpoints.iter().cloned());
            let cfg = self.cfg.for_seed(seed);
            let split = split_label_scarcity(&self.data.train, fraction, seed)?;
            record.labeled = split.labeled.len();
            record.unlabeled = split.unlabeled.len();
            let (_, student) = self.init_models(seed)?;
            let name = self.cell_name("cotrain", fraction, seed);
            let mut monitor = self.monitor(Phase::Cotrain, &name, cfg.cotrain.epochs, seed)?;
            let out = cotrain(
                pre.teacher.clone(),
                student,
                &split.labeled,
                &split.unlabeled,
                &self.schedule,
                &cfg.cotrain,
                &mut monitor,
            );
            record.checkpoints.append(&mut monitor.saved);
            let out = out?;
            record.train = Some(out.history);
            record.student = Some(evaluate(&out.student, &self.data.test, &self.schedule, &cfg.eval)?);
            record.teacher = Some(evaluate(&out.teacher, &self.data.test, &self.schedule, &cfg.eval)?);
            Ok(())
        })();
        record.error = result.err().map(|e| e.to_string());
        record.wall_clock_seconds = start.elapsed().as_secs_f64();
        record
    }

    /// Optimizer steps per epoch matched to co-training, which makes one pass
    /// over the unlabeled images per epoch.
    pub fn supervised_config(&self, seed: u64, unlabeled: usize) -> SupervisedConfig {
        let cfg = self.cfg.for_seed(seed);
        let steps = (unlabeled > 0).then(|| unlabeled.div_ceil(cfg.cotrain.unlabeled_batch_size));
        SupervisedConfig::matching(&cfg.cotrain, steps)
    }

    /// Supervised-only training of the student architecture on the labeled subset.
    pub fn supervised_cell(&self, fraction: f64, seed: u64) -> RunRecord {
        let start = Instant::now();
        let mut record = self.empty_record(Method::Supervised, fraction, seed);
        let result = (|| -> Result<()> {
            let cfg = self.cfg.for_seed(seed);
            let split = split_label_scarcity(&self.data.train, fraction, seed)?;
            record.labeled = split.labeled.len();
            record.unlabeled = split.unlabeled.len();
            let (_, student) = self.init_models(seed)?;
            let scfg = self.supervised_config(seed, split.unlabeled.len());
            let name = self.cell_name("supervised", fraction, seed);
            let mut monitor = self.monitor(Phase::Supervised, &name, scfg.epochs, seed)?;
            let out = train_supervised(student, &split.labeled, &self.schedule, &scfg, &mut monitor);
            record.checkpoints.append(&mut monitor.saved);
            let (model, history) = out?;
            record.train = Some(history);
            record.student = Some(evaluate(&model, &self.data.test, &self.schedule, &cfg.eval)?);
            Ok(())
        })();
        record.error = result.err().map(|e| e.to_string());
        record.wall_clock_seconds = start.elapsed().as_secs_f64();
        record
    }

    fn persist(&self, record: &RunRecord) -> Result<()> {
        record.save(&self.out().join("records"))?;
        Ok(())
    }

    /// Runs `job` for every seed, in parallel when allowed, and returns the
    /// records in (seed, fraction) order.
    fn sweep(&self, job: impl Fn(u64) -> Vec<RunRecord> + Sync) -> Result<Vec<RunRecord>> {
        let seeds = &self.cfg.seeds;
        let workers = if self.cfg.deterministic { 1 } else { self.cfg.workers.min(seeds.len()) };
        let mut per_seed: Vec<Vec<RunRecord>> = if workers <= 1 {
            seeds.iter().map(|&s| job(s)).collect()
        } else {
            let next = Mutex::new(0usize);
            let slots: Mutex<Vec<Option<Vec<RunRecord>>>> = Mutex::new(vec![None; seeds.len()]);
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    scope.spawn(|| loop {
                        let i = {
                            let mut n = next.lock().expect("unpoisoned");
                            let i = *n;
                            *n += 1;
                            i
                        };
                        if i >= seeds.len() {
                            break;
                        }
                        let records = job(seeds[i]);
                        slots.lock().expect("unpoisoned")[i] = Some(records);
                    });
                }
            });
            slots.into_inner().expect("unpoisoned").into_iter().map(|r| r.expect("every seed ran")).collect()
        };
        let records: Vec<RunRecord> = per_seed.drain(..).flatten().collect();
        for r in &records {
            self.persist(r)?;
        }
        Ok(records)
    }

    /// Every (fraction, seed) cell of the semi-supervised method. The teacher
    /// is pretrained once per seed and shared by that seed's fractions, unless
    /// `teacher` supplies one.
    pub fn run_experiment(&self, teacher: Option<&DualPathwayDenoiser<f32>>) -> Result<Vec<RunRecord>> {
        self.sweep(|seed| {
            let pre = match teacher {
                Some(t) => Ok(Pretrained {
                    teacher: t.clone(),
                    history: None,
                    checkpoints: Vec::new(),
                }),
                None => self.pretrain_teacher(seed),
            };
            self.cfg
                .fractions
                .iter()
                .map(|&f| match &pre {
                    Ok(p) => self.cotrain_cell(f, seed, Some(p)),
                    Err(e) => {
                        let mut r = self.empty_record(Method::Cotrain, f, seed);
                        r.error = Some(format!("pretraining failed: {e}"));
                        r
                    }
                })
                .collect()
        })
    }

    pub fn run_supervised_baseline(&self) -> Result<Vec<RunRecord>> {
        self.sweep(|seed| self.cfg.fractions.iter().map(|&f| self.supervised_cell(f, seed)).collect())
    }

    /// Pretrains one teacher per seed and returns the final checkpoint paths.
    pub fn run_pretraining(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for &seed in &self.cfg.seeds {
            let p = self.pretrain_teacher(seed)?;
            out.extend(p.checkpoints.last().cloned());
        }
        Ok(out)
    }

    /// Evaluates a checkpoint on the test split.
    pub fn evaluate_checkpoint(&self, dir: &Path, seed: u64) -> Result<diffseg_core::evaluator::EvalResult> {
        let (model, manifest) = checkpoint::load(dir)?;
        if manifest.model != self.cfg.model {
            return Err(Error::Config(format!(
                "checkpoint model {:?} differs from the configured {:?}",
                manifest.model, self.cfg.model
            )));
        }
        let cfg = self.cfg.for_seed(seed);
        Ok(evaluate(&model, &self.data.test, &self.schedule, &cfg.eval)?)
    }
}

pub fn run_experiment(cfg: ExperimentConfig) -> Result<Vec<RunRecord>> {
    Harness::new(cfg)?.run_experiment(None)
}

pub fn run_supervised_baseline(cfg: ExperimentConfig) -> Result<Vec<RunRecord>> {
    Harness::new(cfg)?.run_supervised_baseline()
}
