//! Follow the meta-leader: MAML over completed tasks, then fine-tuning a
//! copy of the meta-parameters on the current task.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::baselines::BaselineConfig;
use super::{
    grown_budget, learner_rng, sample_examples, train_step, updates_at, BoundaryAwareLearner,
    LearnerError, StepOutcome,
};
use crate::autodiff::{Tape, Var};
use crate::data::{Example, LabeledBatch};
use crate::models::{self, init_params, Architecture};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::{grad_params_through_update, ParameterVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtmlConfig {
    /// Fine-tuning and budget settings shared with the other baselines.
    pub base: BaselineConfig,
    pub inner_steps: usize,
    /// Plain gradient-descent step size of the inner loop.
    pub inner_lr: f64,
    /// Adam learning rate of the outer loop.
    pub outer_lr: f64,
    /// Share of a sampled task used as the support set.
    pub support_fraction: f64,
    /// Examples drawn from the support and the query set per outer step.
    pub meta_batch_size: usize,
}

impl Default for FtmlConfig {
    fn default() -> Self {
        Self {
            base: BaselineConfig::default(),
            inner_steps: 5,
            inner_lr: 0.001,
            outer_lr: 0.0005,
            support_fraction: 0.8,
            meta_batch_size: 20,
        }
    }
}

/// Gradient with respect to `theta` of `outer(phi_S)`, where `phi_0 = theta`
/// and `phi_{s+1} = phi_s - inner_lr * grad inner(phi_s)`.
pub fn maml_gradient<F, G>(
    theta: &ParameterVector,
    inner_steps: usize,
    inner_lr: f64,
    inner: F,
    outer: G,
) -> Result<(f64, ParameterVector), LearnerError>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>, LearnerError>,
    G: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>, LearnerError>,
{
    let tape = Tape::new();
    let theta_vars = theta.leaves(&tape);
    let mut phi = theta_vars.clone();
    for _ in 0..inner_steps {
        let loss = inner(&phi)?;
        let grads = tape.gradients(loss, &phi)?;
        phi = phi
            .iter()
            .zip(&grads)
            .map(|(&p, &g)| p - g.scale(inner_lr))
            .collect();
    }
    let loss = outer(&phi)?;
    tape.check()?;
    let value = loss.item().expect("outer loss is scalar");
    Ok((
        value,
        grad_params_through_update(&tape, loss, &theta_vars, theta)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ftml {
    pub arch: Architecture,
    pub config: FtmlConfig,
    pub theta: ParameterVector,
    pub outer_opt: Optimizer,
    /// Stored data of every completed task, the privilege this learner gets
    /// from knowing the boundaries.
    pub tasks: Vec<Vec<Example>>,
    pub current: Vec<Example>,
    pub params: ParameterVector,
    pub finetune_opt: Optimizer,
    pub pos: usize,
    pub rng: ChaCha8Rng,
    pub meta_rng: ChaCha8Rng,
}

const DOMAIN_FINETUNE: u64 = 21;
const DOMAIN_MAML: u64 = 24;

impl Ftml {
    pub fn new(arch: Architecture, config: FtmlConfig) -> Self {
        let init = init_params(&arch, config.base.seed);
        Self {
            theta: init.clone(),
            outer_opt: Optimizer::new(OptimizerConfig::adam(config.outer_lr)),
            tasks: Vec::new(),
            current: Vec::new(),
            params: init,
            finetune_opt: Optimizer::new(OptimizerConfig::adam(config.base.lr)),
            pos: 0,
            rng: learner_rng(config.base.seed, DOMAIN_FINETUNE),
            meta_rng: learner_rng(config.base.seed, DOMAIN_MAML),
            arch,
            config,
        }
    }

    /// One outer step on a uniformly chosen completed task. Does nothing
    /// before the first task is complete.
    pub fn outer_step(&mut self) -> Result<Option<f64>, LearnerError> {
        if self.tasks.is_empty() {
            return Ok(None);
        }
        let task = &self.tasks[self.meta_rng.gen_range(0..self.tasks.len())];
        let mut order: Vec<usize> = (0..task.len()).collect();
        order.shuffle(&mut self.meta_rng);
        let n_support = ((task.len() as f64 * self.config.support_fraction) as usize)
            .clamp(1, task.len().saturating_sub(1).max(1));
        let support: Vec<Example> = order[..n_support]
            .iter()
            .map(|&i| task[i].clone())
            .collect();
        let query: Vec<Example> = match &order[n_support..] {
            [] => support.clone(),
            rest => rest.iter().map(|&i| task[i].clone()).collect(),
        };
        let shape = self.arch.input_shape;
        let m = self.config.meta_batch_size;
        let support = sample_examples(&support, m, shape, &mut self.meta_rng);
        let query = sample_examples(&query, m, shape, &mut self.meta_rng);
        let arch = &self.arch;
        let (loss, grad) = maml_gradient(
            &self.theta,
            self.config.inner_steps,
            self.config.inner_lr,
            |phi| Ok(models::loss_on_tape(arch, phi, &support)?),
            |phi| Ok(models::loss_on_tape(arch, phi, &query)?),
        )?;
        if !grad.is_finite() {
            return Err(LearnerError::NonFinite(alloc::string::String::from(
                "meta-leader outer gradient",
            )));
        }
        self.theta = self.outer_opt.step(&self.theta, &grad)?.0;
        Ok(Some(loss))
    }
}

impl BoundaryAwareLearner for Ftml {
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
        let base = &self.config.base;
        if boundary {
            if !self.current.is_empty() {
                self.tasks.push(core::mem::take(&mut self.current));
            }
            let budget = grown_budget(
                base.updates_per_task,
                base.growth_per_100_tasks,
                self.tasks.len(),
            );
            if !self.tasks.is_empty() {
                for _ in 0..budget {
                    self.outer_step()?;
                }
            }
            self.params = self.theta.clone();
            self.finetune_opt.reset();
            self.pos = 0;
        }
        self.current.extend(batch.examples());
        let base = &self.config.base;
        for _ in 0..updates_at(self.pos, base.updates_per_task, base.steps_per_task) {
            let sample = sample_examples(
                &self.current,
                base.batch_size,
                self.arch.input_shape,
                &mut self.rng,
            );
            train_step(
                &self.arch,
                &mut self.params,
                &mut self.finetune_opt,
                &sample,
            )?;
        }
        self.pos += 1;
        Ok(StepOutcome::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::Tfs;
    use crate::params::grad_params;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn arch() -> Architecture {
        Architecture::mlp(&[5], 3, [1, 2, 2]).unwrap()
    }

    fn batch(seed: u64, n: usize) -> LabeledBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let exs: Vec<Example> = (0..n)
            .map(|i| Example {
                input: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                partner: None,
                label: i % 3,
            })
            .collect();
        LabeledBatch::from_examples(&exs, [1, 2, 2])
    }

    fn config() -> FtmlConfig {
        FtmlConfig {
            base: BaselineConfig {
                steps_per_task: 3,
                updates_per_task: 6,
                lr: 0.01,
                ..BaselineConfig::default()
            },
            meta_batch_size: 6,
            ..FtmlConfig::default()
        }
    }

    #[test]
    fn without_past_tasks_it_fine_tunes_from_init() {
        let mut ftml = Ftml::new(arch(), config());
        let mut tfs = Tfs::new(arch(), config().base);
        for s in 0..3 {
            ftml.observe(&batch(s, 10), s == 0).unwrap();
            tfs.observe(&batch(s, 10), s == 0).unwrap();
        }
        assert_eq!(ftml.params, tfs.params);
        assert_eq!(ftml.theta, init_params(&arch(), 0));
    }

    #[test]
    fn zero_inner_rate_gives_plain_gradient() {
        let theta = init_params(&arch(), 4);
        let (support, query) = (batch(1, 6), batch(2, 6));
        let a = arch();
        let (_, g) = maml_gradient(
            &theta,
            5,
            0.0,
            |p| Ok(models::loss_on_tape(&a, p, &support)?),
            |p| Ok(models::loss_on_tape(&a, p, &query)?),
        )
        .unwrap();
        let (_, plain) = models::loss_and_grad(&a, &theta, &query).unwrap();
        let diff = g.zip_with(&plain, |x, y| (x - y).abs()).unwrap();
        assert!(diff.flatten().iter().all(|&d| d <= 1e-10));
    }

    #[test]
    fn one_step_quadratic_matches_closed_form() {
        // inner = 1/2 |phi - c|^2, outer = 1/2 |phi - d|^2, one step of size a:
        // phi' = theta - a (theta - c), grad = (1 - a)(phi' - d).
        let theta = ParameterVector::new(alloc::vec![crate::params::Segment {
            name: "w".into(),
            value: Tensor::from_vec(&[3], alloc::vec![0.3, -1.2, 2.0]),
        }]);
        let c = Tensor::from_vec(&[3], alloc::vec![1.0, 0.5, -0.5]);
        let d = Tensor::from_vec(&[3], alloc::vec![-0.2, 0.7, 0.1]);
        let a = 0.3;
        let (cc, dd) = (c.clone(), d.clone());
        let (_, g) = maml_gradient(
            &theta,
            1,
            a,
            move |p| {
                Ok((p[0] - p[0].tape().constant(cc.clone()))
                    .square()
                    .sum()
                    .scale(0.5))
            },
            move |p| {
                Ok((p[0] - p[0].tape().constant(dd.clone()))
                    .square()
                    .sum()
                    .scale(0.5))
            },
        )
        .unwrap();
        let t = theta.flatten();
        for i in 0..3 {
            let phi = t[i] - a * (t[i] - c.data()[i]);
            let expected = (1.0 - a) * (phi - d.data()[i]);
            assert!((g.flatten()[i] - expected).abs() <= 1e-10);
        }
        // Sanity: the zero-step variant is the direct gradient.
        let tape = Tape::new();
        let p = theta.leaves(&tape);
        let l = (p[0] - tape.constant(d.clone())).square().sum().scale(0.5);
        let direct = grad_params(&tape, l, &p, &theta).unwrap();
        let (_, g0) = maml_gradient(
            &theta,
            0,
            a,
            |_| unreachable!(),
            move |p| {
                Ok((p[0] - p[0].tape().constant(d.clone()))
                    .square()
                    .sum()
                    .scale(0.5))
            },
        )
        .unwrap();
        assert_eq!(g0, direct);
    }

    #[test]
    fn meta_training_starts_after_first_task_and_adapted_copy_is_discarded() {
        let mut ftml = Ftml::new(arch(), config());
        for s in 0..3 {
            ftml.observe(&batch(s, 10), s == 0).unwrap();
        }
        let adapted = ftml.params.clone();
        ftml.observe(&batch(7, 10), true).unwrap();
        assert_eq!(ftml.tasks.len(), 1);
        assert_eq!(ftml.outer_opt.t, 6);
        assert_ne!(ftml.theta, init_params(&arch(), 0));
        assert_ne!(ftml.params, adapted);
    }
}
