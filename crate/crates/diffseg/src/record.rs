use std::fs;
use std::path::{Path, PathBuf};

use diffseg_core::evaluator::EvalResult;
use diffseg_core::training::TrainingHistory;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Pretrained teacher co-trained with a student.
    Cotrain,
    /// Student architecture trained on the labeled subset only.
    Supervised,
}

/// Outcome of one (method, fraction, seed) cell. Together with the
/// checkpoints it references, it determines the reported numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub method: Method,
    pub dataset: String,
    pub seed: u64,
    pub fraction: f64,
    pub labeled: usize,
    pub unlabeled: usize,
    pub pretrain: Option<TrainingHistory>,
    /// Co-training history, or the supervised run's history.
    pub train: Option<TrainingHistory>,
    /// The co-trained student, or the supervised model.
    pub student: Option<EvalResult>,
    pub teacher: Option<EvalResult>,
    pub wall_clock_seconds: f64,
    pub checkpoints: Vec<PathBuf>,
    /// Set when a phase failed; fields of later phases stay empty.
    pub error: Option<String>,
    pub config: ExperimentConfig,
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub method: String,
    pub labeled_fraction: f64,
    pub seed: u64,
    #[serde(rename = "DC")]
    pub dc: f64,
    #[serde(rename = "JI")]
    pub ji: f64,
}

impl RunRecord {
    pub fn file_name(&self) -> String {
        let method = match self.method {
            Method::Cotrain => "cotrain",
            Method::Supervised => "supervised",
        };
        format!("{method}-{}-f{:.4}-s{}.json", self.dataset, self.fraction, self.seed)
    }

    /// Metric rows: `student`/`teacher` for co-training, `supervised` otherwise.
    pub fn metric_rows(&self) -> Vec<MetricRow> {
        let named: Vec<(&str, &Option<EvalResult>)> = match self.method {
            Method::Cotrain => vec![("student", &self.student), ("teacher", &self.teacher)],
            Method::Supervised => vec![("supervised", &self.student)],
        };
        named
            .into_iter()
            .filter_map(|(method, r)| {
                r.as_ref().map(|r| MetricRow {
                    dataset: self.dataset.clone(),
                    method: method.to_string(),
                    labeled_fraction: self.fraction,
                    seed: self.seed,
                    dc: r.dice,
                    ji: r.jaccard,
                })
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = dir.join(self.file_name());
        let text = serde_json::to_string_pretty(self).map_err(Error::json(&path))?;
        fs::write(&path, text).map_err(Error::io(&path))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(Error::json(path))
    }
}

/// Every `*.json` record in `dir`, in file-name order.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .map(|e| e.map(|e| e.path()).map_err(Error::io(dir)))
        .collect::<Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    paths.iter().map(|p| RunRecord::load(p)).collect()
}
