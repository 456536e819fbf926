//! Drives a learner over a stream and keeps the metrics.
//!
//! The harness is the only place that reads the stream's side channel: it
//! hands boundary flags to learners that declare they need them and uses the
//! task count to score each finished task on its heldout set.

use alloc::format;
use alloc::string::String;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::LabeledBatch;
use crate::eval::{self, EvalError, MetricsRecord, StepMetric, TaskMetric};
use crate::learners::{
    BaselineConfig, BoundaryAwareLearner, Foml, FomlConfig, Ftl, Ftml, FtmlConfig, LearnerError,
    OnlineLearner, StepOutcome, Tfs, Toe,
};
use crate::models::{self, init_params, Architecture, ModelError};
use crate::params::ParameterVector;
use crate::streams::{Stream, StreamBatch};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Capability(String),
    #[error("stream position {state} does not match run state position {stream}")]
    Position { state: u64, stream: u64 },
}

impl HarnessError {
    pub fn is_numeric(&self) -> bool {
        match self {
            HarnessError::Learner(e) => e.is_numeric(),
            HarnessError::Model(ModelError::Autodiff(
                crate::autodiff::AutodiffError::NonFinite { .. },
            )) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    Foml,
    Tfs,
    Toe,
    Ftl,
    Ftml,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 5] = [
        LearnerKind::Foml,
        LearnerKind::Tfs,
        LearnerKind::Toe,
        LearnerKind::Ftl,
        LearnerKind::Ftml,
    ];

    pub fn needs_boundaries(self) -> bool {
        matches!(
            self,
            LearnerKind::Tfs | LearnerKind::Ftl | LearnerKind::Ftml
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::Foml => "foml",
            LearnerKind::Tfs => "tfs",
            LearnerKind::Toe => "toe",
            LearnerKind::Ftl => "ftl",
            LearnerKind::Ftml => "ftml",
        }
    }
}

impl FromStr for LearnerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LearnerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown learner `{s}` (expected foml, tfs, toe, ftl or ftml)"))
    }
}

/// Any of the five learners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AnyLearner {
    Foml(Foml),
    Tfs(Tfs),
    Toe(Toe),
    Ftl(Ftl),
    Ftml(Ftml),
}

/// Everything needed to build a learner.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    pub arch: Architecture,
    pub seed: u64,
    pub foml: FomlConfig,
    pub baseline: BaselineConfig,
    pub ftml: FtmlConfig,
}

impl AnyLearner {
    /// Builds the learner; `steps_per_task` spreads the baselines' budgets.
    pub fn build(spec: &LearnerSpec, steps_per_task: usize) -> Result<Self, LearnerError> {
        let arch = spec.arch.clone();
        let baseline = BaselineConfig {
            seed: spec.seed,
            steps_per_task,
            ..spec.baseline.clone()
        };
        Ok(match spec.kind {
            LearnerKind::Foml => {
                let config = FomlConfig {
                    seed: spec.seed,
                    ..spec.foml.clone()
                };
                AnyLearner::Foml(Foml::new(
                    arch.clone(),
                    init_params(&arch, spec.seed),
                    config,
                )?)
            }
            LearnerKind::Tfs => AnyLearner::Tfs(Tfs::new(arch, baseline)),
            LearnerKind::Toe => AnyLearner::Toe(Toe::new(arch, baseline)),
            LearnerKind::Ftl => AnyLearner::Ftl(Ftl::new(arch, baseline)),
            LearnerKind::Ftml => AnyLearner::Ftml(Ftml::new(
                arch,
                FtmlConfig {
                    base: baseline,
                    ..spec.ftml.clone()
                },
            )),
        })
    }

    pub fn kind(&self) -> LearnerKind {
        match self {
            AnyLearner::Foml(_) => LearnerKind::Foml,
            AnyLearner::Tfs(_) => LearnerKind::Tfs,
            AnyLearner::Toe(_) => LearnerKind::Toe,
            AnyLearner::Ftl(_) => LearnerKind::Ftl,
            AnyLearner::Ftml(_) => LearnerKind::Ftml,
        }
    }

    pub fn arch(&self) -> &Architecture {
        match self {
            AnyLearner::Foml(l) => OnlineLearner::arch(l),
            AnyLearner::Toe(l) => OnlineLearner::arch(l),
            AnyLearner::Tfs(l) => BoundaryAwareLearner::arch(l),
            AnyLearner::Ftl(l) => BoundaryAwareLearner::arch(l),
            AnyLearner::Ftml(l) => BoundaryAwareLearner::arch(l),
        }
    }

    pub fn params(&self) -> &ParameterVector {
        match self {
            AnyLearner::Foml(l) => OnlineLearner::params(l),
            AnyLearner::Toe(l) => OnlineLearner::params(l),
            AnyLearner::Tfs(l) => BoundaryAwareLearner::params(l),
            AnyLearner::Ftl(l) => BoundaryAwareLearner::params(l),
            AnyLearner::Ftml(l) => BoundaryAwareLearner::params(l),
        }
    }

    /// Boundary-free learners never see `boundary`.
    pub fn observe(
        &mut self,
        batch: &LabeledBatch,
        boundary: bool,
    ) -> Result<StepOutcome, LearnerError> {
        match self {
            AnyLearner::Foml(l) => l.observe(batch),
            AnyLearner::Toe(l) => l.observe(batch),
            AnyLearner::Tfs(l) => l.observe(batch, boundary),
            AnyLearner::Ftl(l) => l.observe(batch, boundary),
            AnyLearner::Ftml(l) => l.observe(batch, boundary),
        }
    }
}

/// Whether the stream reveals task boundaries to learners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundaries {
    Visible,
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Compute best-in-hindsight losses and the regret series.
    pub hindsight: bool,
    pub hindsight_steps: usize,
    pub hindsight_lr: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            hindsight: false,
            hindsight_steps: 200,
            hindsight_lr: 0.001,
        }
    }
}

/// The resumable part of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub learner: AnyLearner,
    pub record: MetricsRecord,
    /// Index of the next stream batch.
    pub position: u64,
    pub tasks_completed: usize,
    pub task_loss_sum: f64,
    pub task_loss_count: usize,
}

impl RunState {
    pub fn new(learner: AnyLearner) -> Self {
        Self {
            learner,
            record: MetricsRecord::default(),
            position: 0,
            tasks_completed: 0,
            task_loss_sum: 0.0,
            task_loss_count: 0,
        }
    }
}

pub struct Harness {
    stream: Stream,
    state: RunState,
    boundaries: Boundaries,
    eval: EvalOptions,
    hindsight_init: ParameterVector,
}

impl Harness {
    /// Rejects learners that need boundaries on a stream that hides them.
    pub fn new(
        mut stream: Stream,
        state: RunState,
        boundaries: Boundaries,
        eval: EvalOptions,
        hindsight_seed: u64,
    ) -> Result<Self, HarnessError> {
        let kind = state.learner.kind();
        if boundaries == Boundaries::Hidden && kind.needs_boundaries() {
            return Err(HarnessError::Capability(format!(
                "learner `{}` requires boundary signals, but the stream hides them",
                kind.name()
            )));
        }
        stream.seek(state.position);
        let hindsight_init = init_params(state.learner.arch(), hindsight_seed);
        Ok(Self {
            stream,
            state,
            boundaries,
            eval,
            hindsight_init,
        })
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn record(&self) -> &MetricsRecord {
        &self.state.record
    }

    pub fn stream(&self) -> &Stream {
        &self.stream
    }

    pub fn into_state(self) -> RunState {
        self.state
    }

    /// Processes the next stream batch; `false` once the stream is exhausted.
    pub fn step(&mut self) -> Result<bool, HarnessError> {
        match self.stream.next_batch() {
            Some(sb) => {
                self.step_with(&sb)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    /// Processes a batch taken from this harness's stream. Only the batch
    /// and the boundary flags are read; the task descriptor is ignored.
    pub fn step_with(&mut self, sb: &StreamBatch) -> Result<(), HarnessError> {
        if sb.j != self.state.position {
            return Err(HarnessError::Position {
                state: self.state.position,
                stream: sb.j,
            });
        }
        let state = &mut self.state;
        let loss = models::loss(state.learner.arch(), state.learner.params(), &sb.batch)?;
        let boundary = self.boundaries == Boundaries::Visible && sb.task_start;
        let outcome = state.learner.observe(&sb.batch, boundary)?;
        state.record.push_step(StepMetric {
            j: sb.j,
            loss,
            val_loss: outcome.val_loss,
        });
        state.task_loss_sum += loss;
        state.task_loss_count += 1;
        if sb.task_end {
            let t = state.tasks_completed;
            let arch = state.learner.arch();
            let heldout = self.stream.heldout(t);
            let error_rate = eval::task_error_rate(arch, state.learner.params(), &heldout)?;
            state.record.push_task(TaskMetric {
                task_index: t,
                error_rate,
            })?;
            let hindsight = if self.eval.hindsight {
                let data = LabeledBatch::from_examples(
                    &self.stream.task(t).samples,
                    self.stream.item_shape(),
                );
                Some(eval::hindsight_loss(
                    arch,
                    &self.hindsight_init,
                    &data,
                    self.eval.hindsight_steps,
                    self.eval.hindsight_lr,
                )?)
            } else {
                None
            };
            state.record.push_task_losses(
                state.task_loss_sum / state.task_loss_count as f64,
                hindsight,
            );
            state.tasks_completed += 1;
            state.task_loss_sum = 0.0;
            state.task_loss_count = 0;
        }
        state.position = sb.j + 1;
        Ok(())
    }

    /// Steps until the stream ends or `max_steps` more batches were
    /// processed; returns how many were.
    pub fn run(&mut self, max_steps: Option<u64>) -> Result<u64, HarnessError> {
        let mut done = 0;
        while max_steps.is_none_or(|m| done < m) && self.step()? {
            done += 1;
        }
        Ok(done)
    }
}
