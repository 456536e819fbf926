//! Fully online meta-learning.
//!
//! Online step on the first part of each batch:
//!
//! ```text
//! phi <- phi - a1 * grad_phi [ L(phi; D_tr) + b1 * R(phi, theta) ],   R = sum (phi - theta)^2
//! ```
//!
//! Meta step on a batch sampled from the replay buffer, differentiating
//! through the last K online steps:
//!
//! ```text
//! theta <- theta - a2 * grad_theta [ L(phi_j(theta); D_m) + b2 * sum_{k=0..K} R(theta, phi_{j-k}(theta)) ]
//! ```

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use rand_chacha::ChaCha8Rng;

use super::{learner_rng, LearnerError, OnlineLearner, OptimizerKind, StepOutcome};
use crate::autodiff::{Tape, Var};
use crate::data::LabeledBatch;
use crate::models::{self, Architecture};
use crate::optim::{replay_step, Optimizer, StepRecord};
use crate::params::{grad_params, grad_params_through_update, ParamError, ParameterVector};
use crate::streams::ReplayBuffer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FomlConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Online steps the meta-gradient differentiates through.
    pub k: usize,
    /// Share of each incoming batch used for the online update.
    pub train_fraction: f64,
    pub online_optimizer: OptimizerKind,
    pub meta_optimizer: OptimizerKind,
    pub meta_updates: bool,
    /// Size of the meta-validation batch drawn from the buffer.
    pub meta_batch_size: usize,
    /// Keep the batch just observed out of the meta-validation sample.
    pub exclude_current_batch: bool,
    pub seed: u64,
}

impl Default for FomlConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.001,
            alpha2: 0.001,
            beta1: 0.01,
            beta2: 0.001,
            k: 10,
            train_fraction: 0.8,
            online_optimizer: OptimizerKind::Adam,
            meta_optimizer: OptimizerKind::Adam,
            meta_updates: true,
            meta_batch_size: 10,
            exclude_current_batch: false,
            seed: 0,
        }
    }
}

impl FomlConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |m| Err(LearnerError::Config(m));
        if !(self.alpha1 > 0.0 && self.alpha2 > 0.0) {
            return bad(format!(
                "learning rates must be positive, got {} and {}",
                self.alpha1, self.alpha2
            ));
        }
        if !(self.beta1 >= 0.0 && self.beta2 >= 0.0) {
            return bad(format!(
                "beta1 and beta2 must be non-negative, got {} and {}",
                self.beta1, self.beta2
            ));
        }
        if self.k == 0 {
            return bad(String::from("K must be at least 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!(
                "train_fraction {} outside (0, 1]",
                self.train_fraction
            ));
        }
        if self.meta_batch_size == 0 {
            return bad(String::from("meta_batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// What is kept of one online step so it can be re-recorded on a tape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub phi_before: ParameterVector,
    pub train: LabeledBatch,
    pub record: StepRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Foml {
    pub config: FomlConfig,
    pub arch: Architecture,
    pub phi: ParameterVector,
    pub theta: ParameterVector,
    pub trajectory: VecDeque<TrajectoryEntry>,
    pub j: u64,
    pub online_opt: Optimizer,
    pub meta_opt: Optimizer,
    pub buffer: ReplayBuffer,
    pub rng: ChaCha8Rng,
}

const DOMAIN_BUFFER: u64 = 11;
const DOMAIN_META: u64 = 12;

/// Sum of squared differences of two equally laid-out parameter lists.
pub fn regularizer_on_tape<'t>(a: &[Var<'t>], b: &[Var<'t>]) -> Var<'t> {
    let mut total = (a[0] - b[0]).square().sum();
    for (&x, &y) in a.iter().zip(b).skip(1) {
        total = total + (x - y).square().sum();
    }
    total
}

/// Sum over all coordinates of `(phi - theta)^2`.
pub fn regularizer(phi: &ParameterVector, theta: &ParameterVector) -> Result<f64, ParamError> {
    Ok(phi
        .zip_with(theta, |p, t| (p - t) * (p - t))?
        .flatten()
        .iter()
        .sum())
}

/// `L(phi; batch) + beta1 * R(phi, theta)`; the regularizer is left out when
/// `beta1` is zero.
pub fn online_objective<'t>(
    arch: &Architecture,
    phi: &[Var<'t>],
    theta: &[Var<'t>],
    batch: &LabeledBatch,
    beta1: f64,
) -> Result<Var<'t>, LearnerError> {
    let loss = models::loss_on_tape(arch, phi, batch)?;
    Ok(if beta1 == 0.0 {
        loss
    } else {
        loss + regularizer_on_tape(phi, theta).scale(beta1)
    })
}

/// Gradient of `outer(phi_K) + beta2 * sum_k R(theta, phi_k)` with respect to
/// `theta`, where `phi_0 = start` and `phi_{k+1}` is the step `records[k]`
/// applied to `inner(k, phi_k) + beta1 * R(phi_k, theta)`.
pub fn unrolled_meta_gradient<F, G>(
    theta: &ParameterVector,
    start: &ParameterVector,
    records: &[&StepRecord],
    beta1: f64,
    beta2: f64,
    inner: F,
    outer: G,
) -> Result<(f64, ParameterVector), LearnerError>
where
    F: for<'t> Fn(usize, &[Var<'t>]) -> Result<Var<'t>, LearnerError>,
    G: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>, LearnerError>,
{
    theta.check_layout(start)?;
    let tape = Tape::new();
    let theta_vars = theta.leaves(&tape);
    let mut phi = start.constants(&tape);
    let mut states: Vec<Vec<Var<'_>>> = Vec::with_capacity(records.len() + 1);
    for (k, record) in records.iter().enumerate() {
        let mut objective = inner(k, &phi)?;
        if beta1 != 0.0 {
            objective = objective + regularizer_on_tape(&phi, &theta_vars).scale(beta1);
        }
        let grads = tape.gradients(objective, &phi)?;
        let next = replay_step(record, &phi, &grads);
        states.push(core::mem::replace(&mut phi, next));
    }
    let mut meta = outer(&phi)?;
    states.push(phi);
    if beta2 != 0.0 {
        for state in &states {
            meta = meta + regularizer_on_tape(&theta_vars, state).scale(beta2);
        }
    }
    tape.check()?;
    let value = meta.item().expect("meta objective is scalar");
    let grad = grad_params_through_update(&tape, meta, &theta_vars, theta)?;
    Ok((value, grad))
}

impl Foml {
    /// Starts with `theta = phi = init`.
    pub fn new(
        arch: Architecture,
        init: ParameterVector,
        config: FomlConfig,
    ) -> Result<Self, LearnerError> {
        config.validate()?;
        let item_shape = arch.input_shape;
        Ok(Self {
            online_opt: Optimizer::new(config.online_optimizer.with_lr(config.alpha1)),
            meta_opt: Optimizer::new(config.meta_optimizer.with_lr(config.alpha2)),
            buffer: ReplayBuffer::new(item_shape, config.seed ^ DOMAIN_BUFFER),
            rng: learner_rng(config.seed, DOMAIN_META),
            theta: init.clone(),
            phi: init,
            trajectory: VecDeque::new(),
            j: 0,
            arch,
            config,
        })
    }

    /// One regularized online step on `dtr`; records it in the trajectory.
    pub fn online_update(&mut self, dtr: &LabeledBatch) -> Result<(), LearnerError> {
        let grad = {
            let tape = Tape::new();
            let phi = self.phi.leaves(&tape);
            let theta = self.theta.constants(&tape);
            let objective = online_objective(&self.arch, &phi, &theta, dtr, self.config.beta1)?;
            grad_params(&tape, objective, &phi, &self.phi)?
        };
        if !grad.is_finite() {
            return Err(LearnerError::NonFinite(format!(
                "online gradient at step {}",
                self.j
            )));
        }
        let (next, record) = self.online_opt.step(&self.phi, &grad)?;
        self.trajectory.push_back(TrajectoryEntry {
            phi_before: self.phi.clone(),
            train: dtr.clone(),
            record,
        });
        while self.trajectory.len() > self.config.k {
            self.trajectory.pop_front();
        }
        self.phi = next;
        self.j += 1;
        Ok(())
    }

    /// Value and exact gradient with respect to `theta` of the meta objective
    /// on `dval`, re-recording the retained online steps from the stored
    /// parameters at the start of the window.
    pub fn meta_gradient(
        &self,
        dval: &LabeledBatch,
    ) -> Result<(f64, ParameterVector), LearnerError> {
        let start = self
            .trajectory
            .front()
            .ok_or(LearnerError::EmptyTrajectory)?;
        let records: Vec<&StepRecord> = self.trajectory.iter().map(|e| &e.record).collect();
        let arch = &self.arch;
        let trajectory = &self.trajectory;
        unrolled_meta_gradient(
            &self.theta,
            &start.phi_before,
            &records,
            self.config.beta1,
            self.config.beta2,
            |k, phi| Ok(models::loss_on_tape(arch, phi, &trajectory[k].train)?),
            |phi| Ok(models::loss_on_tape(arch, phi, dval)?),
        )
    }

    pub fn meta_update(&mut self, dval: &LabeledBatch) -> Result<f64, LearnerError> {
        let (value, grad) = self.meta_gradient(dval)?;
        if !grad.is_finite() {
            return Err(LearnerError::NonFinite(format!(
                "meta gradient at step {}",
                self.j
            )));
        }
        self.theta = self.meta_opt.step(&self.theta, &grad)?.0;
        Ok(value)
    }

    /// One pass of the online loop: store the batch, split it, predict on
    /// the train part, update online, score the held-back part, then update
    /// the meta-parameters on a buffer sample.
    pub fn step(&mut self, batch: &LabeledBatch) -> Result<StepOutcome, LearnerError> {
        let arrival = self.j;
        self.buffer.append(batch, arrival);
        let n_train = ((batch.len() as f64 * self.config.train_fraction).round() as usize)
            .clamp(1, batch.len().max(1));
        let (dtr, dval) = batch.split_at(n_train);
        let predictions = models::predict(&self.arch, &self.phi, &dtr)?;
        self.online_update(&dtr)?;
        let val_loss = if dval.is_empty() {
            None
        } else {
            Some(models::loss(&self.arch, &self.phi, &dval)?)
        };
        if self.config.meta_updates {
            let exclude = self.config.exclude_current_batch.then_some(arrival);
            let dm = self.buffer.sample_random_with(
                self.config.meta_batch_size,
                exclude,
                &mut self.rng,
            )?;
            self.meta_update(&dm)?;
        }
        Ok(StepOutcome {
            predictions: Some(predictions),
            val_loss,
        })
    }
}

impl OnlineLearner for Foml {
    fn arch(&self) -> &Architecture {
        &self.arch
    }

    fn params(&self) -> &ParameterVector {
        &self.phi
    }

    fn observe(&mut self, batch: &LabeledBatch) -> Result<StepOutcome, LearnerError> {
        self.step(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Example;
    use crate::models::init_params;
    use crate::params::Segment;
    use crate::tensor::Tensor;
    use alloc::vec;
    use rand::{Rng, SeedableRng};

    fn arch() -> Architecture {
        Architecture::mlp(&[4], 3, [1, 2, 2]).unwrap()
    }

    fn batch(n: usize, seed: u64) -> LabeledBatch {
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

    fn sgd_config() -> FomlConfig {
        FomlConfig {
            alpha1: 0.1,
            alpha2: 0.1,
            beta1: 0.5,
            beta2: 0.01,
            online_optimizer: OptimizerKind::Sgd,
            meta_optimizer: OptimizerKind::Sgd,
            ..FomlConfig::default()
        }
    }

    #[test]
    fn regularizer_values() {
        let p = init_params(&arch(), 1);
        assert_eq!(regularizer(&p, &p).unwrap(), 0.0);
        let shifted = p.map_segments(|t| t.map(|x| x + 1.0));
        assert_eq!(regularizer(&shifted, &p).unwrap(), p.total_dim() as f64);
        let other = ParameterVector::new(vec![Segment {
            name: "w".into(),
            value: Tensor::zeros(&[1]),
        }]);
        assert!(regularizer(&p, &other).is_err());
    }

    #[test]
    fn regularizer_gradient_is_twice_the_residual() {
        let phi = init_params(&arch(), 1);
        let theta = init_params(&arch(), 2);
        let tape = Tape::new();
        let (p, t) = (phi.leaves(&tape), theta.constants(&tape));
        let r = regularizer_on_tape(&p, &t);
        let g = grad_params(&tape, r, &p, &phi).unwrap();
        let expected = phi.zip_with(&theta, |a, b| 2.0 * (a - b)).unwrap();
        assert!(g
            .zip_with(&expected, |a, b| (a - b).abs())
            .unwrap()
            .flatten()
            .iter()
            .all(|&d| d <= 1e-12));
    }

    #[test]
    fn trajectory_is_capped_at_k() {
        let config = FomlConfig {
            k: 3,
            ..sgd_config()
        };
        let mut f = Foml::new(arch(), init_params(&arch(), 0), config).unwrap();
        for s in 0..5 {
            f.online_update(&batch(8, s)).unwrap();
        }
        assert_eq!(f.trajectory.len(), 3);
        assert_eq!(f.j, 5);
    }

    #[test]
    fn empty_trajectory_is_a_precondition_error() {
        let mut f = Foml::new(arch(), init_params(&arch(), 0), sgd_config()).unwrap();
        assert_eq!(
            f.meta_update(&batch(2, 0)),
            Err(LearnerError::EmptyTrajectory)
        );
    }

    #[test]
    fn first_step_fills_buffer_and_trajectory() {
        let mut f = Foml::new(arch(), init_params(&arch(), 0), sgd_config()).unwrap();
        let out = f.step(&batch(10, 3)).unwrap();
        assert_eq!(f.buffer.len(), 10);
        assert_eq!(f.trajectory.len(), 1);
        assert_eq!(f.trajectory[0].train.len(), 8);
        assert_eq!(out.predictions.unwrap().shape(), &[8, 3]);
        assert!(out.val_loss.is_some());
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        for config in [
            FomlConfig {
                beta1: -1.0,
                ..FomlConfig::default()
            },
            FomlConfig {
                k: 0,
                ..FomlConfig::default()
            },
            FomlConfig {
                alpha1: 0.0,
                ..FomlConfig::default()
            },
        ] {
            assert!(matches!(
                Foml::new(arch(), init_params(&arch(), 0), config),
                Err(LearnerError::Config(_))
            ));
        }
    }
}
