//! Train from scratch, train on everything, and follow the leader.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use rand_chacha::ChaCha8Rng;

use super::{
    grown_budget, learner_rng, sample_examples, train_step, updates_at, BoundaryAwareLearner,
    LearnerError, OnlineLearner, StepOutcome,
};
use crate::data::{Example, LabeledBatch};
use crate::models::{init_params, Architecture};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::ParameterVector;
use crate::streams::ReplayBuffer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Adam learning rate.
    pub lr: f64,
    /// Gradient updates per task.
    pub updates_per_task: usize,
    /// Extra updates per task added every hundred tasks (train on everything
    /// and the pretraining of follow the leader).
    pub growth_per_100_tasks: usize,
    pub batch_size: usize,
    /// Stream steps per task, used to spread the update budget.
    pub steps_per_task: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            updates_per_task: 50,
            growth_per_100_tasks: 10,
            batch_size: 10,
            steps_per_task: 20,
            seed: 0,
        }
    }
}

const DOMAIN_FINETUNE: u64 = 21;
const DOMAIN_PRETRAIN: u64 = 22;
const DOMAIN_TOE: u64 = 23;

/// Spends this step's share of the per-task budget on minibatches of the
/// current task's data.
fn finetune(
    arch: &Architecture,
    config: &BaselineConfig,
    params: &mut ParameterVector,
    opt: &mut Optimizer,
    data: &[Example],
    pos: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(), LearnerError> {
    for _ in 0..updates_at(pos, config.updates_per_task, config.steps_per_task) {
        let batch = sample_examples(data, config.batch_size, arch.input_shape, rng);
        train_step(arch, params, opt, &batch)?;
    }
    Ok(())
}

/// Re-initialises at every boundary and trains only on the current task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tfs {
    pub arch: Architecture,
    pub config: BaselineConfig,
    pub params: ParameterVector,
    pub opt: Optimizer,
    pub task_data: Vec<Example>,
    /// Boundaries seen so far.
    pub tasks_started: u64,
    pub pos: usize,
    pub rng: ChaCha8Rng,
}

impl Tfs {
    pub fn new(arch: Architecture, config: BaselineConfig) -> Self {
        Self {
            params: init_params(&arch, config.seed),
            opt: Optimizer::new(OptimizerConfig::adam(config.lr)),
            task_data: Vec::new(),
            tasks_started: 0,
            pos: 0,
            rng: learner_rng(config.seed, DOMAIN_FINETUNE),
            arch,
            config,
        }
    }
}

impl BoundaryAwareLearner for Tfs {
    fn arch(&self) -> &Architecture {
        &self.arch
    }

    fn params(&self) -> &ParameterVector {
        &self.params
    }

    fn observe(
        &mut self,
        batch: &LabeledBatch,
        boundary: bool,
    ) -> Result<StepOutcome, LearnerError> {
        if boundary {
            self.params = init_params(
                &self.arch,
                self.config.seed.wrapping_add(self.tasks_started),
            );
            self.opt.reset();
            self.task_data.clear();
            self.pos = 0;
            self.tasks_started += 1;
        }
        self.task_data.extend(batch.examples());
        finetune(
            &self.arch,
            &self.config,
            &mut self.params,
            &mut self.opt,
            &self.task_data,
            self.pos,
            &mut self.rng,
        )?;
        self.pos += 1;
        Ok(StepOutcome::default())
    }
}

/// Trains one model on uniform samples of everything seen so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Toe {
    pub arch: Architecture,
    pub config: BaselineConfig,
    pub params: ParameterVector,
    pub opt: Optimizer,
    pub buffer: ReplayBuffer,
    pub j: u64,
    pub rng: ChaCha8Rng,
}

impl Toe {
    pub fn new(arch: Architecture, config: BaselineConfig) -> Self {
        Self {
            params: init_params(&arch, config.seed),
            opt: Optimizer::new(OptimizerConfig::adam(config.lr)),
            buffer: ReplayBuffer::new(arch.input_shape, config.seed),
            j: 0,
            rng: learner_rng(config.seed, DOMAIN_TOE),
            arch,
            config,
        }
    }

    /// Updates run at step `j`: the grown per-task budget spread over the
    /// steps of a task, with tasks counted in stream steps.
    pub fn updates_at_step(&self, j: u64) -> usize {
        let steps = self.config.steps_per_task.max(1);
        let task = j as usize / steps;
        let budget = grown_budget(
            self.config.updates_per_task,
            self.config.growth_per_100_tasks,
            task,
        );
        updates_at(j as usize % steps, budget, steps)
    }
}

impl OnlineLearner for Toe {
    fn arch(&self) -> &Architecture {
        &self.arch
    }

    fn params(&self) -> &ParameterVector {
        &self.params
    }

    fn observe(&mut self, batch: &LabeledBatch) -> Result<StepOutcome, LearnerError> {
        self.buffer.append(batch, self.j);
        for _ in 0..self.updates_at_step(self.j) {
            let sample =
                self.buffer
                    .sample_random_with(self.config.batch_size, None, &mut self.rng)?;
            train_step(&self.arch, &mut self.params, &mut self.opt, &sample)?;
        }
        self.j += 1;
        Ok(StepOutcome::default())
    }
}

/// Pretrains on completed tasks and fine-tunes a throwaway copy on the
/// current one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ftl {
    pub arch: Architecture,
    pub config: BaselineConfig,
    pub pretrained: ParameterVector,
    pub pretrain_opt: Optimizer,
    /// Data of completed tasks.
    pub past: ReplayBuffer,
    pub tasks_completed: u64,
    pub current: Vec<Example>,
    pub params: ParameterVector,
    pub finetune_opt: Optimizer,
    pub pos: usize,
    pub rng: ChaCha8Rng,
    pub pretrain_rng: ChaCha8Rng,
}

impl Ftl {
    pub fn new(arch: Architecture, config: BaselineConfig) -> Self {
        let init = init_params(&arch, config.seed);
        Self {
            pretrained: init.clone(),
            pretrain_opt: Optimizer::new(OptimizerConfig::adam(config.lr)),
            past: ReplayBuffer::new(arch.input_shape, config.seed),
            tasks_completed: 0,
            current: Vec::new(),
            params: init,
            finetune_opt: Optimizer::new(OptimizerConfig::adam(config.lr)),
            pos: 0,
            rng: learner_rng(config.seed, DOMAIN_FINETUNE),
            pretrain_rng: learner_rng(config.seed, DOMAIN_PRETRAIN),
            arch,
            config,
        }
    }
}

impl BoundaryAwareLearner for Ftl {
    fn arch(&self) -> &Architecture {
        &self.arch
    }

    fn params(&self) -> &ParameterVector {
        &self.params
    }

    fn observe(
        &mut self,
        batch: &LabeledBatch,
        boundary: bool,
    ) -> Result<StepOutcome, LearnerError> {
        if boundary {
            if !self.current.is_empty() {
                let finished = LabeledBatch::from_examples(&self.current, self.arch.input_shape);
                self.past.append(&finished, self.tasks_completed);
                self.tasks_completed += 1;
                self.current.clear();
            }
            if !self.past.is_empty() {
                let budget = grown_budget(
                    self.config.updates_per_task,
                    self.config.growth_per_100_tasks,
                    self.tasks_completed as usize,
                );
                for _ in 0..budget {
                    let sample = self.past.sample_random_with(
                        self.config.batch_size,
                        None,
                        &mut self.pretrain_rng,
                    )?;
                    train_step(
                        &self.arch,
                        &mut self.pretrained,
                        &mut self.pretrain_opt,
                        &sample,
                    )?;
                }
            }
            self.params = self.pretrained.clone();
            self.finetune_opt.reset();
            self.pos = 0;
        }
        self.current.extend(batch.examples());
        finetune(
            &self.arch,
            &self.config,
            &mut self.params,
            &mut self.finetune_opt,
            &self.current,
            self.pos,
            &mut self.rng,
        )?;
        self.pos += 1;
        Ok(StepOutcome::default())
    }
}
