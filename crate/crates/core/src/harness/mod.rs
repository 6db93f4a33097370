//! Training, evaluation and sweeps over synthetic tasks.

mod data;
mod optim;
mod sweep;
mod train;

use std::fmt;
use std::str::FromStr;

pub use data::{gen_blobs, gen_duplicate_task, gen_majority_task, majority_label, Dataset, Split, Task};
pub use optim::{adam_step, AdamConfig, Moments};
pub use sweep::{sweep_compare, MethodSpec, SweepCell, SweepOutcome, SweepRun, TABLE_HEADER};
pub use train::{evaluate, train, EvalRow, RunOutcome, RunRecord};

use crate::error::{Result, SpurError};
use crate::models::{ModelConfig, ModelKind};
use crate::pruner::{PruningSchedule, TargetDomain};
use crate::regularizer::{DevianceVariant, LambdaSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Plain iterative magnitude pruning.
    Imp,
    /// Magnitude pruning with the deviance regularizer.
    ImpSpur,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Imp => "imp",
            Self::ImpSpur => "imp_spur",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = SpurError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "imp" => Ok(Self::Imp),
            "imp_spur" | "imp+spur" | "spur" => Ok(Self::ImpSpur),
            other => Err(SpurError::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Dataset sizes and noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Gaussian noise of the blobs task.
    pub spread: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 4096,
            n_test: 1024,
            spread: 1.0,
        }
    }
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub task: Task,
    pub data: DataConfig,
    pub method: Method,
    pub variant: DevianceVariant,
    pub domain: TargetDomain,
    pub schedule: PruningSchedule,
    pub lambda_schedule: LambdaSchedule,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    /// The toy reference experiment.
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            task: Task::Duplicate,
            data: DataConfig::default(),
            method: Method::ImpSpur,
            variant: DevianceVariant::Spur,
            domain: TargetDomain::All,
            schedule: PruningSchedule {
                v_initial: 1.0,
                v_final: 0.05,
                t_i: 500,
                ramp_steps: 4500,
                cadence: 16,
                total_steps: 6000,
            },
            lambda_schedule: LambdaSchedule {
                lambda_final: 10.0,
                t_i: 500,
                ramp_steps: 4500,
            },
            optimizer: AdamConfig::default(),
            batch_size: 32,
            eval_every: 250,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.lambda_schedule.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(SpurError::Config(
                "batch_size and eval_every must be positive".into(),
            ));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0)
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || !(o.eps > 0.0)
        {
            return Err(SpurError::Config(format!("invalid optimizer settings {o:?}")));
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(SpurError::Config("data.n_train and data.n_test must be positive".into()));
        }
        let wants = match self.task {
            Task::Duplicate | Task::Majority => ModelKind::Transformer,
            Task::Blobs => ModelKind::Mlp,
        };
        if self.model.kind != wants {
            return Err(SpurError::Config(format!(
                "task `{}` needs a {} model",
                self.task,
                wants.as_str()
            )));
        }
        match self.task {
            Task::Duplicate | Task::Majority if self.model.classes != 2 => {
                Err(SpurError::Config(format!("task `{}` has 2 classes", self.task)))
            }
            Task::Majority if self.model.vocab < 2 => {
                Err(SpurError::Config("majority task needs vocab >= 2".into()))
            }
            _ => Ok(()),
        }
    }

    /// Regularization strength actually used; plain magnitude pruning never regularizes.
    pub fn lambda_at(&self, t: usize) -> f64 {
        match self.method {
            Method::Imp => 0.0,
            Method::ImpSpur => crate::regularizer::lambda_at(t, &self.lambda_schedule),
        }
    }

    /// Generates the dataset described by `task` and `data`.
    pub fn dataset(&self) -> Result<Dataset> {
        let d = &self.data;
        let m = &self.model;
        match self.task {
            Task::Duplicate => gen_duplicate_task(self.seed, d.n_train, d.n_test, m.max_seq, m.vocab),
            Task::Majority => gen_majority_task(self.seed, d.n_train, d.n_test, m.max_seq),
            Task::Blobs => gen_blobs(self.seed, d.n_train, d.n_test, m.input_dim, m.classes, d.spread),
        }
    }
}
