//! Boundary-free task streams.
//!
//! A [`Stream`] walks through a sequence of tasks and hands out fixed-size
//! batches. Each [`StreamBatch`] carries the true task and boundary flags for
//! the harness; learners only ever receive its [`LabeledBatch`].

pub mod buffer;
pub mod glyphs;
pub mod rainbow;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Example, LabeledBatch};
pub use buffer::{Entry, ReplayBuffer};
pub use glyphs::{synthetic_glyphs, BaseDataset};
pub use rainbow::{Transform, NUM_TRANSFORMS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StreamError {
    #[error("invalid stream configuration: {0}")]
    Config(String),
    #[error("cannot sample from an empty buffer")]
    EmptyBuffer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskDescriptor {
    Rainbow {
        task_index: usize,
        transform: Transform,
    },
    Pair {
        task_index: usize,
        classes: Vec<usize>,
    },
}

impl TaskDescriptor {
    pub fn task_index(&self) -> usize {
        match self {
            TaskDescriptor::Rainbow { task_index, .. }
            | TaskDescriptor::Pair { task_index, .. } => *task_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Rainbow,
    Pair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskOrder {
    /// A fresh seeded permutation of the transforms for every pass.
    Random,
    /// Transforms in index order.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub kind: StreamKind,
    pub num_tasks: usize,
    /// Examples streamed per task.
    pub samples_per_task: usize,
    /// Share of each task's examples kept back for evaluation.
    pub heldout_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub order: TaskOrder,
    pub classes_per_task: usize,
    pub carry_over: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            kind: StreamKind::Rainbow,
            num_tasks: NUM_TRANSFORMS,
            samples_per_task: 200,
            heldout_fraction: 0.2,
            batch_size: 10,
            seed: 0,
            order: TaskOrder::Random,
            classes_per_task: 5,
            carry_over: 2,
        }
    }
}

impl StreamConfig {
    /// Heldout examples per task, so that they make up `heldout_fraction` of
    /// the task's streamed plus heldout examples.
    pub fn heldout_per_task(&self) -> usize {
        let f = self.heldout_fraction;
        let n = self.samples_per_task as f64 * f / (1.0 - f);
        (n + 0.5) as usize
    }

    pub fn batches_per_task(&self) -> usize {
        self.samples_per_task / self.batch_size
    }
}

/// Everything one task contributes: the streamed examples and the heldout set.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub descriptor: TaskDescriptor,
    pub samples: Vec<Example>,
    pub heldout: Vec<Example>,
}

/// One delivered batch plus the evaluation-only side channel.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub batch: LabeledBatch,
    pub j: u64,
    pub true_task: TaskDescriptor,
    /// First batch of a task.
    pub task_start: bool,
    /// Last batch of a task.
    pub task_end: bool,
}

#[derive(Debug, Clone)]
pub struct Stream {
    config: StreamConfig,
    base: BaseDataset,
    by_class: Vec<Vec<usize>>,
    descriptors: Vec<TaskDescriptor>,
    item_shape: [usize; 3],
    j: u64,
    current: Option<TaskData>,
}

const DOMAIN_ORDER: u64 = 1;
const DOMAIN_TASK: u64 = 2;
const DOMAIN_CLASSES: u64 = 3;

fn rng_for(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 48) | index);
    rng
}

impl Stream {
    pub fn new(config: StreamConfig, base: BaseDataset) -> Result<Self, StreamError> {
        let bad = |m: String| Err(StreamError::Config(m));
        if config.num_tasks < 1 {
            return bad(String::from("num_tasks must be at least 1"));
        }
        if config.batch_size < 1 {
            return bad(String::from("batch_size must be at least 1"));
        }
        if config.samples_per_task == 0 || !config.samples_per_task.is_multiple_of(config.batch_size) {
            return bad(format!(
                "samples_per_task ({}) must be a positive multiple of batch_size ({})",
                config.samples_per_task, config.batch_size
            ));
        }
        if !(0.0..1.0).contains(&config.heldout_fraction) {
            return bad(format!(
                "heldout_fraction {} outside [0, 1)",
                config.heldout_fraction
            ));
        }
        if base.is_empty() {
            return bad(String::from("base dataset is empty"));
        }
        let by_class = base.by_class();
        let (descriptors, item_shape) = match config.kind {
            StreamKind::Rainbow => {
                if base.channels != 1 || base.height != base.width {
                    return bad(format!(
                        "rainbow stream needs square single-channel images, got {}x{}x{}",
                        base.channels, base.height, base.width
                    ));
                }
                let needed = config.samples_per_task + config.heldout_per_task();
                if needed > base.len() {
                    return bad(format!(
                        "{} samples plus {} heldout per task exceed the base dataset size {}",
                        config.samples_per_task,
                        config.heldout_per_task(),
                        base.len()
                    ));
                }
                (rainbow_order(&config), [3, base.height, base.width])
            }
            StreamKind::Pair => {
                let (k, carry) = (config.classes_per_task, config.carry_over);
                if k < 2 || carry >= k {
                    return bad(format!(
                        "pair stream needs carry_over < classes_per_task, got {carry} and {k}"
                    ));
                }
                let available = by_class.iter().filter(|c| !c.is_empty()).count();
                if available < 2 * k - carry {
                    return bad(format!(
                        "pair stream needs at least {} classes, base dataset has {available}",
                        2 * k - carry
                    ));
                }
                (
                    pair_classes(&config, &by_class),
                    [base.channels, base.height, base.width],
                )
            }
        };
        Ok(Self {
            config,
            base,
            by_class,
            descriptors,
            item_shape,
            j: 0,
            current: None,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn descriptors(&self) -> &[TaskDescriptor] {
        &self.descriptors
    }

    /// Classes of the base dataset.
    pub fn num_classes(&self) -> usize {
        self.base.num_classes()
    }

    pub fn item_shape(&self) -> [usize; 3] {
        self.item_shape
    }

    pub fn batches_per_task(&self) -> usize {
        self.config.batches_per_task()
    }

    pub fn total_batches(&self) -> u64 {
        (self.config.num_tasks * self.batches_per_task()) as u64
    }

    /// Index of the next batch to be delivered.
    pub fn position(&self) -> u64 {
        self.j
    }

    /// Moves the cursor so the next batch delivered is batch `j`.
    pub fn seek(&mut self, j: u64) {
        self.j = j;
    }

    /// Content of task `t`: a pure function of the configuration and `t`.
    pub fn task(&self, t: usize) -> TaskData {
        let descriptor = self.descriptors[t].clone();
        let mut rng = rng_for(self.config.seed, DOMAIN_TASK, t as u64);
        let (samples, heldout) = match &descriptor {
            TaskDescriptor::Rainbow { transform, .. } => {
                let total = self.config.samples_per_task + self.config.heldout_per_task();
                let n = self.base.height;
                let picked: Vec<Example> =
                    rand::seq::index::sample(&mut rng, self.base.len(), total)
                        .into_iter()
                        .map(|i| Example {
                            input: transform.apply(&self.base.images[i], n),
                            partner: None,
                            label: self.base.labels[i],
                        })
                        .collect();
                let mut picked = picked;
                let heldout = picked.split_off(self.config.samples_per_task);
                (picked, heldout)
            }
            TaskDescriptor::Pair { classes, .. } => {
                let samples = (0..self.config.samples_per_task)
                    .map(|_| self.pair(classes, &mut rng))
                    .collect();
                let heldout = (0..self.config.heldout_per_task())
                    .map(|_| self.pair(classes, &mut rng))
                    .collect();
                (samples, heldout)
            }
        };
        TaskData {
            descriptor,
            samples,
            heldout,
        }
    }

    fn pair(&self, classes: &[usize], rng: &mut ChaCha8Rng) -> Example {
        let a = classes[rng.gen_range(0..classes.len())];
        let b = if rng.gen_bool(0.5) {
            a
        } else {
            let others: Vec<usize> = classes.iter().copied().filter(|&c| c != a).collect();
            others[rng.gen_range(0..others.len())]
        };
        let pick = |c: usize, rng: &mut ChaCha8Rng| {
            self.base.images[self.by_class[c][rng.gen_range(0..self.by_class[c].len())]].clone()
        };
        let input = pick(a, rng);
        let partner = pick(b, rng);
        Example {
            input,
            partner: Some(partner),
            label: usize::from(a == b),
        }
    }

    /// Heldout set of task `t` as one batch.
    pub fn heldout(&self, t: usize) -> LabeledBatch {
        LabeledBatch::from_examples(&self.task(t).heldout, self.item_shape)
    }

    /// Delivers the next batch, or `None` once every task has been streamed.
    pub fn next_batch(&mut self) -> Option<StreamBatch> {
        if self.j >= self.total_batches() {
            return None;
        }
        let per_task = self.batches_per_task();
        let t = self.j as usize / per_task;
        let pos = self.j as usize % per_task;
        if self.current.as_ref().map(|d| d.descriptor.task_index()) != Some(t) {
            self.current = Some(self.task(t));
        }
        let data = self.current.as_ref().expect("loaded above");
        let n = self.config.batch_size;
        let batch =
            LabeledBatch::from_examples(&data.samples[pos * n..(pos + 1) * n], self.item_shape);
        let out = StreamBatch {
            batch,
            j: self.j,
            true_task: data.descriptor.clone(),
            task_start: pos == 0,
            task_end: pos + 1 == per_task,
        };
        self.j += 1;
        Some(out)
    }
}

fn rainbow_order(config: &StreamConfig) -> Vec<TaskDescriptor> {
    let mut out = Vec::with_capacity(config.num_tasks);
    let mut pass = 0u64;
    while out.len() < config.num_tasks {
        let mut order: Vec<usize> = (0..NUM_TRANSFORMS).collect();
        if config.order == TaskOrder::Random {
            order.shuffle(&mut rng_for(config.seed, DOMAIN_ORDER, pass));
        }
        for i in order {
            if out.len() == config.num_tasks {
                break;
            }
            out.push(TaskDescriptor::Rainbow {
                task_index: out.len(),
                transform: Transform::from_index(i),
            });
        }
        pass += 1;
    }
    out
}

fn pair_classes(config: &StreamConfig, by_class: &[Vec<usize>]) -> Vec<TaskDescriptor> {
    let mut rng = rng_for(config.seed, DOMAIN_CLASSES, 0);
    let all: Vec<usize> = (0..by_class.len())
        .filter(|&c| !by_class[c].is_empty())
        .collect();
    let k = config.classes_per_task;
    let mut out: Vec<TaskDescriptor> = Vec::with_capacity(config.num_tasks);
    let mut prev: Vec<usize> = Vec::new();
    for t in 0..config.num_tasks {
        let classes: Vec<usize> = if t == 0 {
            all.choose_multiple(&mut rng, k).copied().collect()
        } else {
            let mut kept: Vec<usize> = prev
                .choose_multiple(&mut rng, config.carry_over)
                .copied()
                .collect();
            let unused: Vec<usize> = all.iter().copied().filter(|c| !prev.contains(c)).collect();
            kept.extend(
                unused
                    .choose_multiple(&mut rng, k - config.carry_over)
                    .copied(),
            );
            kept
        };
        prev = classes.clone();
        out.push(TaskDescriptor::Pair {
            task_index: t,
            classes,
        });
    }
    out
}
