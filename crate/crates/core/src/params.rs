//! Named, segmented parameter vectors.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParamError {
    #[error("parameter layouts differ: {0}")]
    LayoutMismatch(String),
    #[error("flat vector has {got} entries, layout needs {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

/// One named tensor inside a [`ParameterVector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub value: Tensor,
}

/// A flat weight vector viewed as an ordered list of named tensors.
///
/// Holds both the online parameters and the meta-parameters of a learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    segments: Vec<Segment>,
}

impl ParameterVector {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Tensor> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| &s.value)
    }

    pub fn total_dim(&self) -> usize {
        self.segments.iter().map(|s| s.value.len()).sum()
    }

    /// A vector with this layout and every entry zero.
    pub fn zeros_like(&self) -> Self {
        self.map_segments(|t| Tensor::zeros(t.shape()))
    }

    pub fn map_segments(&self, f: impl Fn(&Tensor) -> Tensor) -> Self {
        Self {
            segments: self
                .segments
                .iter()
                .map(|s| Segment {
                    name: s.name.clone(),
                    value: f(&s.value),
                })
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParameterVector) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    pub fn check_layout(&self, other: &ParameterVector) -> Result<(), ParamError> {
        if self.same_layout(other) {
            return Ok(());
        }
        let describe = |p: &ParameterVector| {
            p.segments
                .iter()
                .map(|s| alloc::format!("{}{:?}", s.name, s.value.shape()))
                .collect::<Vec<_>>()
                .join(", ")
        };
        Err(ParamError::LayoutMismatch(alloc::format!(
            "[{}] vs [{}]",
            describe(self),
            describe(other)
        )))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_dim());
        for s in &self.segments {
            out.extend_from_slice(s.value.data());
        }
        out
    }

    /// Rebuilds a vector with this layout from flat values.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self, ParamError> {
        if flat.len() != self.total_dim() {
            return Err(ParamError::LengthMismatch {
                expected: self.total_dim(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        let segments = self
            .segments
            .iter()
            .map(|s| {
                let n = numel(s.value.shape());
                let value = Tensor::from_vec(s.value.shape(), flat[offset..offset + n].to_vec());
                offset += n;
                Segment {
                    name: s.name.clone(),
                    value,
                }
            })
            .collect();
        Ok(Self { segments })
    }

    /// Applies `f` to every coordinate pair of two equally laid-out vectors.
    pub fn zip_with(
        &self,
        other: &ParameterVector,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self, ParamError> {
        self.check_layout(other)?;
        let segments = self
            .segments
            .iter()
            .zip(&other.segments)
            .map(|(a, b)| {
                let data = a
                    .value
                    .data()
                    .iter()
                    .zip(b.value.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                Segment {
                    name: a.name.clone(),
                    value: Tensor::from_vec(a.value.shape(), data),
                }
            })
            .collect();
        Ok(Self { segments })
    }

    /// Records every segment as a leaf of `tape`.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.segments
            .iter()
            .map(|s| tape.leaf(s.value.clone()))
            .collect()
    }

    /// Records every segment as a constant of `tape`.
    pub fn constants<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.segments
            .iter()
            .map(|s| tape.constant(s.value.clone()))
            .collect()
    }

    /// Reassembles gradient tensors (one per segment) into a vector with this layout.
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<Self, ParamError> {
        if values.len() != self.segments.len() {
            return Err(ParamError::LengthMismatch {
                expected: self.segments.len(),
                got: values.len(),
            });
        }
        let segments = self
            .segments
            .iter()
            .zip(values)
            .map(|(s, v)| {
                if v.shape() != s.value.shape() {
                    return Err(ParamError::LayoutMismatch(alloc::format!(
                        "{}: expected {:?}, got {:?}",
                        s.name,
                        s.value.shape(),
                        v.shape()
                    )));
                }
                Ok(Segment {
                    name: s.name.clone(),
                    value: v,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { segments })
    }

    pub fn dot(&self, other: &ParameterVector) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        crate::math::sqrt(
            self.segments
                .iter()
                .flat_map(|s| s.value.data())
                .map(|x| x * x)
                .sum(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.segments.iter().all(|s| s.value.is_finite())
    }
}

/// `d loss / d segment` for every segment, as a vector with the layout of `like`.
pub fn grad_params<'t>(
    tape: &'t Tape,
    loss: Var<'t>,
    wrt: &[Var<'t>],
    like: &ParameterVector,
) -> Result<ParameterVector, AutodiffError> {
    let values = tape.grad(loss, wrt)?;
    Ok(like
        .with_values(values)
        .expect("gradient segments follow the parameter layout"))
}

/// Like [`grad_params`] but differentiating through recorded update steps.
pub fn grad_params_through_update<'t>(
    tape: &'t Tape,
    loss: Var<'t>,
    wrt: &[Var<'t>],
    like: &ParameterVector,
) -> Result<ParameterVector, AutodiffError> {
    let values = tape.grad_through_update(loss, wrt)?;
    Ok(like
        .with_values(values)
        .expect("gradient segments follow the parameter layout"))
}
