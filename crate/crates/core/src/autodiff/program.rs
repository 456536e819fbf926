//! Computations described as data: a list of named primitives over parameter
//! segments, inputs, and earlier results.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::str::FromStr;

use super::{AutodiffError, NodeId, Tape, Var};
use crate::params::ParameterVector;
use crate::tensor::Tensor;

/// The primitives a [`Program`] may name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    Conv,
    Add,
    Mul,
    Relu,
    Sigmoid,
    SoftmaxCrossEntropy,
    Mean,
    Sum,
    Subtract,
    Square,
    AddRowBias,
    AddChannelBias,
    MaxPool,
    AvgPool,
    Flatten,
}

impl Primitive {
    fn arity(self) -> usize {
        match self {
            Primitive::MatMul
            | Primitive::Conv
            | Primitive::Add
            | Primitive::Mul
            | Primitive::Subtract
            | Primitive::AddRowBias
            | Primitive::AddChannelBias => 2,
            _ => 1,
        }
    }
}

impl FromStr for Primitive {
    type Err = AutodiffError;

    fn from_str(name: &str) -> Result<Self, Self::Err> {
        Ok(match name {
            "matmul" => Primitive::MatMul,
            "conv" => Primitive::Conv,
            "add" => Primitive::Add,
            "mul" => Primitive::Mul,
            "relu" => Primitive::Relu,
            "sigmoid" => Primitive::Sigmoid,
            "softmax_cross_entropy" => Primitive::SoftmaxCrossEntropy,
            "mean" => Primitive::Mean,
            "sum" => Primitive::Sum,
            "subtract" => Primitive::Subtract,
            "square" => Primitive::Square,
            "add_row_bias" => Primitive::AddRowBias,
            "add_channel_bias" => Primitive::AddChannelBias,
            "max_pool" => Primitive::MaxPool,
            "avg_pool" => Primitive::AvgPool,
            "flatten" => Primitive::Flatten,
            other => return Err(AutodiffError::UnsupportedOp(other.to_string())),
        })
    }
}

/// Where an instruction reads an operand from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operand {
    /// Segment `i` of the parameter vector.
    Param(usize),
    /// The `i`-th input tensor.
    Input(usize),
    /// Result of instruction `i`.
    Step(usize),
}

#[derive(Clone, Debug)]
pub struct Instruction {
    pub primitive: String,
    pub operands: Vec<Operand>,
}

impl Instruction {
    pub fn new(primitive: &str, operands: &[Operand]) -> Self {
        Self {
            primitive: primitive.to_string(),
            operands: operands.to_vec(),
        }
    }
}

/// A straight-line computation; its result is the last instruction's output.
#[derive(Clone, Debug, Default)]
pub struct Program {
    pub instructions: Vec<Instruction>,
    /// Class labels consumed by `softmax_cross_entropy`.
    pub labels: Vec<usize>,
}

/// A finished recording: the tape, its parameter leaves, and the output node.
pub struct Recording {
    pub tape: Tape,
    pub leaves: Vec<NodeId>,
    pub output: NodeId,
}

impl Recording {
    pub fn output(&self) -> Tensor {
        self.tape.value(self.output)
    }

    /// Gradient of the (scalar) output with respect to every parameter segment.
    pub fn grad(&self, like: &ParameterVector) -> Result<ParameterVector, AutodiffError> {
        let wrt: Vec<Var<'_>> = self.leaves.iter().map(|&id| self.tape.var(id)).collect();
        crate::params::grad_params(&self.tape, self.tape.var(self.output), &wrt, like)
    }
}

/// Records `program` on a fresh tape with `params` as leaves.
pub fn record_forward(
    params: &ParameterVector,
    program: &Program,
    inputs: &[Tensor],
) -> Result<Recording, AutodiffError> {
    let primitives = program
        .instructions
        .iter()
        .map(|ins| ins.primitive.parse::<Primitive>())
        .collect::<Result<Vec<_>, _>>()?;
    let tape = Tape::new();
    let (leaves, output) = {
        let leaves = params.leaves(&tape);
        let input_vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let mut results: Vec<Var<'_>> = Vec::with_capacity(primitives.len());
        for (step, (ins, prim)) in program.instructions.iter().zip(&primitives).enumerate() {
            if ins.operands.len() != prim.arity() {
                return Err(AutodiffError::Shape {
                    node: tape.len(),
                    op: "program",
                    detail: alloc::format!(
                        "instruction {step} ({}) takes {} operands, got {}",
                        ins.primitive,
                        prim.arity(),
                        ins.operands.len()
                    ),
                });
            }
            let fetch = |o: Operand| -> Result<Var<'_>, AutodiffError> {
                let found = match o {
                    Operand::Param(i) => leaves.get(i),
                    Operand::Input(i) => input_vars.get(i),
                    Operand::Step(i) => results.get(i),
                };
                found.copied().ok_or_else(|| AutodiffError::Shape {
                    node: tape.len(),
                    op: "program",
                    detail: alloc::format!("instruction {step} refers to missing operand {o:?}"),
                })
            };
            let a = fetch(ins.operands[0])?;
            let b = if prim.arity() == 2 {
                Some(fetch(ins.operands[1])?)
            } else {
                None
            };
            let out = match (prim, b) {
                (Primitive::MatMul, Some(b)) => a.matmul(b),
                (Primitive::Conv, Some(b)) => a.conv2d(b),
                (Primitive::Add, Some(b)) => a + b,
                (Primitive::Mul, Some(b)) => a * b,
                (Primitive::Subtract, Some(b)) => a - b,
                (Primitive::AddRowBias, Some(b)) => a.add_row_bias(b),
                (Primitive::AddChannelBias, Some(b)) => a.add_channel_bias(b),
                (Primitive::Relu, None) => a.relu(),
                (Primitive::Sigmoid, None) => a.sigmoid(),
                (Primitive::SoftmaxCrossEntropy, None) => a.softmax_cross_entropy(&program.labels),
                (Primitive::Mean, None) => a.mean(),
                (Primitive::Sum, None) => a.sum(),
                (Primitive::Square, None) => a.square(),
                (Primitive::MaxPool, None) => a.max_pool2d(),
                (Primitive::AvgPool, None) => a.global_avg_pool(),
                (Primitive::Flatten, None) => {
                    let s = a.shape();
                    let rows = s.first().copied().unwrap_or(1);
                    let cols = s.iter().skip(1).product();
                    a.reshape(&[rows, cols])
                }
                _ => unreachable!("arity checked above"),
            };
            results.push(out);
        }
        tape.check()?;
        let output = results
            .last()
            .map(|v| v.id())
            .ok_or_else(|| AutodiffError::Shape {
                node: 0,
                op: "program",
                detail: "empty program".to_string(),
            })?;
        (leaves.iter().map(|v| v.id()).collect::<Vec<_>>(), output)
    };
    Ok(Recording {
        tape,
        leaves,
        output,
    })
}
