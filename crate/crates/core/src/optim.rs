//! First-order optimizers over [`ParameterVector`]s.
//!
//! Every step returns a [`StepRecord`] holding what is needed to re-express
//! the same update on a tape with [`replay_step`], so that a later loss can be
//! differentiated through it.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::math;
use crate::params::{ParamError, ParameterVector};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }
}

/// Optimizer with its running moments. Moments are created lazily on the
/// first step so a fresh optimizer carries no layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub m: Option<ParameterVector>,
    pub v: Option<ParameterVector>,
    pub t: u64,
}

/// Per-step constants of an update.
///
/// For Adam the update is `p - m_t * scale` with
/// `m_t = beta1 * m_prev + (1 - beta1) * g` and
/// `scale = lr / ((1 - beta1^t) * (sqrt(v_hat) + eps))`. The second-moment
/// term is kept fixed at its recorded value when the step is replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StepRecord {
    Sgd {
        lr: f64,
    },
    Adam {
        beta1: f64,
        m_prev: ParameterVector,
        scale: ParameterVector,
    },
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            m: None,
            v: None,
            t: 0,
        }
    }

    /// Clears moments and the step counter.
    pub fn reset(&mut self) {
        self.m = None;
        self.v = None;
        self.t = 0;
    }

    /// Returns the updated parameters and the record of this step.
    pub fn step(
        &mut self,
        params: &ParameterVector,
        grad: &ParameterVector,
    ) -> Result<(ParameterVector, StepRecord), ParamError> {
        params.check_layout(grad)?;
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                self.t += 1;
                Ok((
                    params.zip_with(grad, |p, g| p - g * lr)?,
                    StepRecord::Sgd { lr },
                ))
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let m_prev = match &self.m {
                    Some(m) => {
                        m.check_layout(params)?;
                        m.clone()
                    }
                    None => params.zeros_like(),
                };
                let v_prev = self.v.clone().unwrap_or_else(|| params.zeros_like());
                let t = self.t + 1;
                let m = m_prev.zip_with(grad, |m, g| m * beta1 + g * (1.0 - beta1))?;
                let v = v_prev.zip_with(grad, |v, g| v * beta2 + g * g * (1.0 - beta2))?;
                let bc1 = 1.0 - math::powi(beta1, t as i32);
                let bc2 = 1.0 - math::powi(beta2, t as i32);
                let scale = v.map_segments(|s| s.map(|v| lr / (bc1 * (math::sqrt(v / bc2) + eps))));
                let updated = params.zip_with(&m.zip_with(&scale, |m, s| m * s)?, |p, d| p - d)?;
                self.m = Some(m);
                self.v = Some(v);
                self.t = t;
                Ok((
                    updated,
                    StepRecord::Adam {
                        beta1,
                        m_prev,
                        scale,
                    },
                ))
            }
        }
    }
}

/// Records on the tape the update that `record` describes, applied to
/// `params` with gradient `grads`. With the same inputs the result equals
/// the eager [`Optimizer::step`] output bit for bit.
pub fn replay_step<'t>(record: &StepRecord, params: &[Var<'t>], grads: &[Var<'t>]) -> Vec<Var<'t>> {
    match record {
        StepRecord::Sgd { lr } => params
            .iter()
            .zip(grads)
            .map(|(&p, &g)| p - g.scale(*lr))
            .collect(),
        StepRecord::Adam {
            beta1,
            m_prev,
            scale,
        } => {
            let tape = params[0].tape();
            params
                .iter()
                .zip(grads)
                .zip(m_prev.segments().iter().zip(scale.segments()))
                .map(|((&p, &g), (m0, s))| {
                    let m = tape.constant(m0.value.clone()).scale(*beta1) + g.scale(1.0 - beta1);
                    p - m * tape.constant(s.value.clone())
                })
                .collect()
        }
    }
}

/// Values of the given vars as a vector laid out like `like`.
pub fn values_like(like: &ParameterVector, vars: &[Var<'_>]) -> ParameterVector {
    like.with_values(vars.iter().map(|v| v.value()).collect::<Vec<Tensor>>())
        .expect("vars follow the parameter layout")
}
