//! Error rates, regret, and the metrics record of a run.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::LabeledBatch;
use crate::models::{self, Architecture, ModelError};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::ParameterVector;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("heldout set is empty")]
    EmptyHeldout,
    #[error("{online} online losses but {hindsight} hindsight losses")]
    LengthMismatch { online: usize, hindsight: usize },
    #[error("task index {got} does not follow {last}")]
    TaskOrder { last: usize, got: usize },
    #[error("error rate {0} outside [0, 1]")]
    ErrorRange(f64),
    #[error("metrics record has no tasks")]
    EmptyRecord,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Fraction of `heldout` misclassified by `params`.
pub fn task_error_rate(
    arch: &Architecture,
    params: &ParameterVector,
    heldout: &LabeledBatch,
) -> Result<f64, EvalError> {
    if heldout.is_empty() {
        return Err(EvalError::EmptyHeldout);
    }
    let logits = models::predict(arch, params, heldout)?;
    let predicted = models::predicted_classes(arch, &logits);
    let wrong = predicted
        .iter()
        .zip(&heldout.labels)
        .filter(|(p, l)| p != l)
        .count();
    Ok(wrong as f64 / heldout.len() as f64)
}

/// Cumulative online loss minus cumulative best-in-hindsight loss.
pub fn regret(online: &[f64], hindsight: &[f64]) -> Result<f64, EvalError> {
    if online.len() != hindsight.len() {
        return Err(EvalError::LengthMismatch {
            online: online.len(),
            hindsight: hindsight.len(),
        });
    }
    Ok(online.iter().sum::<f64>() - hindsight.iter().sum::<f64>())
}

/// Loss on `data` after `steps` full-batch Adam steps from `init`: the
/// stand-in for the best fixed parameters of a task in hindsight.
pub fn hindsight_loss(
    arch: &Architecture,
    init: &ParameterVector,
    data: &LabeledBatch,
    steps: usize,
    lr: f64,
) -> Result<f64, EvalError> {
    let mut params = init.clone();
    let mut opt = Optimizer::new(OptimizerConfig::adam(lr));
    for _ in 0..steps {
        let (_, grad) = models::loss_and_grad(arch, &params, data)?;
        params = opt
            .step(&params, &grad)
            .expect("gradient follows parameter layout")
            .0;
    }
    Ok(models::loss(arch, &params, data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetric {
    pub j: u64,
    /// Loss of the parameters before the update on the incoming batch.
    pub loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub task_index: usize,
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub per_step: Vec<StepMetric>,
    pub per_task: Vec<TaskMetric>,
    /// Running regret after each task, when hindsight losses are computed.
    pub regret_series: Vec<f64>,
    /// Mean pre-update loss of each task.
    pub online_task_losses: Vec<f64>,
    pub hindsight_task_losses: Vec<f64>,
}

impl MetricsRecord {
    pub fn push_step(&mut self, metric: StepMetric) {
        self.per_step.push(metric);
    }

    pub fn push_task(&mut self, metric: TaskMetric) -> Result<(), EvalError> {
        if let Some(last) = self.per_task.last() {
            if metric.task_index <= last.task_index {
                return Err(EvalError::TaskOrder {
                    last: last.task_index,
                    got: metric.task_index,
                });
            }
        }
        if !(0.0..=1.0).contains(&metric.error_rate) {
            return Err(EvalError::ErrorRange(metric.error_rate));
        }
        self.per_task.push(metric);
        Ok(())
    }

    /// Records a task's mean online loss and, if given, its hindsight loss,
    /// extending the regret series.
    pub fn push_task_losses(&mut self, online: f64, hindsight: Option<f64>) {
        self.online_task_losses.push(online);
        if let Some(h) = hindsight {
            self.hindsight_task_losses.push(h);
            let previous = self.regret_series.last().copied().unwrap_or(0.0);
            self.regret_series.push(previous + online - h);
        }
    }

    pub fn error_rates(&self) -> Vec<f64> {
        self.per_task.iter().map(|t| t.error_rate).collect()
    }

    /// Running mean of the per-task error rates.
    pub fn cum_mean_errors(&self) -> Vec<f64> {
        let mut sum = 0.0;
        self.per_task
            .iter()
            .enumerate()
            .map(|(i, t)| {
                sum += t.error_rate;
                sum / (i + 1) as f64
            })
            .collect()
    }

    /// Mean error over the tasks in `range` of the per-task list.
    pub fn mean_error(&self, range: core::ops::Range<usize>) -> f64 {
        let slice = &self.per_task[range];
        slice.iter().map(|t| t.error_rate).sum::<f64>() / slice.len() as f64
    }

    pub fn first_tasks_mean_error(&self, n: usize) -> f64 {
        self.mean_error(0..n.min(self.per_task.len()))
    }

    pub fn last_tasks_mean_error(&self, n: usize) -> f64 {
        let len = self.per_task.len();
        self.mean_error(len.saturating_sub(n)..len)
    }
}

pub const CURVE_HEADER: &str = "task_index,error_rate,cum_mean_error";

/// The learning curve as CSV text, one row per task.
pub fn curve_csv(record: &MetricsRecord) -> Result<String, EvalError> {
    if record.per_task.is_empty() {
        return Err(EvalError::EmptyRecord);
    }
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for (t, cum) in record.per_task.iter().zip(record.cum_mean_errors()) {
        writeln!(out, "{},{:.6},{:.6}", t.task_index, t.error_rate, cum)
            .expect("writing to a string");
    }
    Ok(out)
}

/// Formats a float for the text outputs.
pub fn fmt_metric(x: f64) -> String {
    format!("{x:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Example;
    use alloc::vec;

    fn record(errors: &[f64]) -> MetricsRecord {
        let mut r = MetricsRecord::default();
        for (i, &e) in errors.iter().enumerate() {
            r.push_task(TaskMetric {
                task_index: i,
                error_rate: e,
            })
            .unwrap();
        }
        r
    }

    #[test]
    fn regret_of_equal_and_shifted_losses() {
        let h = [0.5, 0.25, 1.5, 0.75, 0.1, 0.2, 0.3, 0.4, 0.6, 0.7];
        assert_eq!(regret(&h, &h).unwrap(), 0.0);
        let shifted: Vec<f64> = h.iter().map(|x| x + 0.1).collect();
        assert!((regret(&shifted, &h).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            regret(&h[..3], &h),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn curve_has_header_and_running_mean() {
        let csv = curve_csv(&record(&[0.2, 0.2])).unwrap();
        assert_eq!(
            csv,
            "task_index,error_rate,cum_mean_error\n0,0.200000,0.200000\n1,0.200000,0.200000\n"
        );
        assert_eq!(csv, curve_csv(&record(&[0.2, 0.2])).unwrap());
        assert!(matches!(
            curve_csv(&MetricsRecord::default()),
            Err(EvalError::EmptyRecord)
        ));
    }

    #[test]
    fn cum_mean_is_exact_prefix_mean() {
        let r = record(&[0.9, 0.5, 0.1, 0.3]);
        let cum = r.cum_mean_errors();
        for t in 0..4 {
            let mean = r.error_rates()[..=t].iter().sum::<f64>() / (t + 1) as f64;
            assert_eq!(cum[t], mean);
        }
        assert!((r.last_tasks_mean_error(2) - 0.2).abs() < 1e-15);
        assert!((r.first_tasks_mean_error(2) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn task_order_and_range_are_enforced() {
        let mut r = record(&[0.1]);
        assert!(matches!(
            r.push_task(TaskMetric {
                task_index: 0,
                error_rate: 0.1
            }),
            Err(EvalError::TaskOrder { .. })
        ));
        assert!(matches!(
            r.push_task(TaskMetric {
                task_index: 1,
                error_rate: 1.5
            }),
            Err(EvalError::ErrorRange(_))
        ));
    }

    #[test]
    fn regret_series_accumulates() {
        let mut r = MetricsRecord::default();
        r.push_task_losses(1.0, Some(0.5));
        r.push_task_losses(0.75, Some(0.5));
        assert_eq!(r.regret_series, vec![0.5, 0.75]);
    }

    #[test]
    fn error_rate_of_perfect_and_constant_predictors() {
        let arch = Architecture::mlp(&[], 2, [1, 1, 2]).unwrap();
        let exs = vec![
            Example {
                input: vec![1.0, 0.0],
                partner: None,
                label: 0,
            },
            Example {
                input: vec![0.0, 1.0],
                partner: None,
                label: 1,
            },
        ];
        let heldout = LabeledBatch::from_examples(&exs, [1, 1, 2]);
        let params = models::init_params(&arch, 0);
        let identity = params
            .with_values(vec![
                crate::tensor::Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]),
                crate::tensor::Tensor::zeros(&[2]),
            ])
            .unwrap();
        assert_eq!(task_error_rate(&arch, &identity, &heldout).unwrap(), 0.0);
        // All-zero logits tie and resolve to class 0.
        assert_eq!(
            task_error_rate(&arch, &params.zeros_like(), &heldout).unwrap(),
            0.5
        );
        let empty = LabeledBatch::from_examples(&[], [1, 1, 2]);
        assert!(matches!(
            task_error_rate(&arch, &identity, &empty),
            Err(EvalError::EmptyHeldout)
        ));
    }
}
