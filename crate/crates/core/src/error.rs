use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("expected a rank-{expected} tensor, found rank {found}")]
    Rank { expected: usize, found: usize },
    #[error("timestep {t} outside [{min}, {max}]")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },
    #[error("spatial size {height}x{width} is not divisible by {divisor}")]
    SpatialSize {
        height: usize,
        width: usize,
        divisor: usize,
    },
    #[error("label value {value} is not below {num_classes}")]
    LabelOutOfRange { value: usize, num_classes: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("sample {0} has no label")]
    MissingLabel(String),
    #[error("labeled batch without a supervised loss term")]
    MissingSupervisedLoss,
    #[error("non-finite loss: {0}")]
    NonFinite(Diagnostics),
    /// Raised by a [`crate::training::TrainingMonitor`] (logging, checkpoint IO).
    #[error("training monitor: {0}")]
    Monitor(String),
    #[error("volume {volume:?} is smaller than patch {patch:?}")]
    VolumeTooSmall { volume: [usize; 3], patch: [usize; 3] },
}

/// Snapshot of the inputs of a step whose loss went non-finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub stage: &'static str,
    pub loss: f64,
    pub input_norm: f64,
    pub timesteps: Vec<usize>,
    pub secondary_timesteps: Vec<usize>,
}

impl core::fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "{} loss={} |input|={} t={:?} t'={:?}",
            self.stage, self.loss, self.input_norm, self.timesteps, self.secondary_timesteps
        )
    }
}
