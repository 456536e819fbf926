//! FOML and the comparison learners.
//!
//! Learners that work without task boundaries implement [`OnlineLearner`];
//! those that need them implement [`BoundaryAwareLearner`]. Neither trait
//! receives task identities.

pub mod baselines;
pub mod foml;
pub mod ftml;

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::AutodiffError;
use crate::data::{Example, LabeledBatch};
use crate::models::{self, Architecture, ModelError};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::{ParamError, ParameterVector};
use crate::streams::StreamError;
use crate::tensor::Tensor;

pub use baselines::{BaselineConfig, Ftl, Tfs, Toe};
pub use foml::{Foml, FomlConfig, TrajectoryEntry};
pub use ftml::{Ftml, FtmlConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LearnerError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("meta update needs at least one recorded online step")]
    EmptyTrajectory,
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid learner configuration: {0}")]
    Config(String),
}

impl LearnerError {
    /// Whether the error comes from a numeric failure rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            LearnerError::NonFinite(_)
                | LearnerError::Autodiff(AutodiffError::NonFinite { .. })
                | LearnerError::Model(ModelError::Autodiff(AutodiffError::NonFinite { .. }))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn with_lr(self, lr: f64) -> OptimizerConfig {
        match self {
            OptimizerKind::Sgd => OptimizerConfig::Sgd { lr },
            OptimizerKind::Adam => OptimizerConfig::adam(lr),
        }
    }
}

/// What a learner reports for one observed batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepOutcome {
    /// Logits made before updating, on the examples the learner trained on.
    pub predictions: Option<Tensor>,
    /// Loss of the updated parameters on held-back examples of the batch.
    pub val_loss: Option<f64>,
}

pub trait OnlineLearner {
    fn arch(&self) -> &Architecture;
    /// Parameters used for prediction.
    fn params(&self) -> &ParameterVector;
    fn observe(&mut self, batch: &LabeledBatch) -> Result<StepOutcome, LearnerError>;
}

pub trait BoundaryAwareLearner {
    fn arch(&self) -> &Architecture;
    fn params(&self) -> &ParameterVector;
    /// `boundary` is true on the first batch of every task.
    fn observe(
        &mut self,
        batch: &LabeledBatch,
        boundary: bool,
    ) -> Result<StepOutcome, LearnerError>;
}

/// Number of updates to run at step `pos` of a task with `steps` steps so
/// that a budget of `budget` updates is spread evenly over the task.
pub fn updates_at(pos: usize, budget: usize, steps: usize) -> usize {
    let steps = steps.max(1);
    let pos = pos % steps;
    (pos + 1) * budget / steps - pos * budget / steps
}

/// Budget that grows by `growth` every hundred tasks.
pub fn grown_budget(base: usize, growth: usize, task_index: usize) -> usize {
    base + growth * (task_index / 100)
}

/// `n` examples drawn uniformly with replacement.
pub fn sample_examples(
    data: &[Example],
    n: usize,
    item_shape: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> LabeledBatch {
    let picks: Vec<&Example> = (0..n)
        .map(|_| &data[rng.gen_range(0..data.len())])
        .collect();
    LabeledBatch::from_examples(picks, item_shape)
}

/// One optimizer step on the model loss of `batch`.
pub fn train_step(
    arch: &Architecture,
    params: &mut ParameterVector,
    opt: &mut Optimizer,
    batch: &LabeledBatch,
) -> Result<f64, LearnerError> {
    let (loss, grad) = models::loss_and_grad(arch, params, batch)?;
    if !grad.is_finite() {
        return Err(LearnerError::NonFinite(String::from("training gradient")));
    }
    *params = opt.step(params, &grad)?.0;
    Ok(loss)
}

pub(crate) fn learner_rng(seed: u64, domain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain);
    rng
}
