//! Network architectures shared by every learner.
//!
//! * `Mlp`: flattened input, ReLU hidden layers, linear class head.
//! * `ConvNet4`: four 3×3 conv layers, each followed by ReLU and 2×2 max
//!   pooling, then a global average pool and a linear class head.
//! * `Siamese7`: a seven-layer conv embedding (pooling after every other
//!   layer, global average pool) applied to both images of a pair; the
//!   elementwise absolute difference of the embeddings feeds a one-unit head
//!   whose output is the pre-sigmoid "same class" score.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::data::LabeledBatch;
use crate::math;
use crate::params::{grad_params, ParameterVector, Segment};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("batch does not fit the architecture: {0}")]
    Shape(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Mlp,
    ConvNet4,
    Siamese7,
}

/// Kernel size of every conv layer.
pub const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ArchKind,
    /// Hidden widths for `Mlp`, filter counts for the conv nets.
    pub widths: Vec<usize>,
    /// Class count; pair classifiers use 2.
    pub num_classes: usize,
    /// `[channels, height, width]` of one input image.
    pub input_shape: [usize; 3],
}

impl Architecture {
    pub fn new(
        kind: ArchKind,
        widths: Vec<usize>,
        num_classes: usize,
        input_shape: [usize; 3],
    ) -> Result<Self, ModelError> {
        let arch = Self {
            kind,
            widths,
            num_classes,
            input_shape,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn mlp(
        hidden: &[usize],
        num_classes: usize,
        input_shape: [usize; 3],
    ) -> Result<Self, ModelError> {
        Self::new(ArchKind::Mlp, hidden.to_vec(), num_classes, input_shape)
    }

    pub fn convnet4(
        filters: &[usize],
        num_classes: usize,
        input_shape: [usize; 3],
    ) -> Result<Self, ModelError> {
        Self::new(
            ArchKind::ConvNet4,
            filters.to_vec(),
            num_classes,
            input_shape,
        )
    }

    pub fn siamese7(filters: &[usize], input_shape: [usize; 3]) -> Result<Self, ModelError> {
        Self::new(ArchKind::Siamese7, filters.to_vec(), 2, input_shape)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidArchitecture(m));
        if self.num_classes < 2 {
            return bad(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            ));
        }
        if self.input_shape.contains(&0) {
            return bad(format!(
                "input shape {:?} has a zero dimension",
                self.input_shape
            ));
        }
        if self.widths.contains(&0) {
            return bad(format!("layer widths {:?} contain zero", self.widths));
        }
        match self.kind {
            ArchKind::ConvNet4 if self.widths.len() != 4 => bad(format!(
                "convnet4 needs 4 filter counts, got {}",
                self.widths.len()
            )),
            ArchKind::Siamese7 if self.widths.len() != 7 => bad(format!(
                "siamese7 needs 7 filter counts, got {}",
                self.widths.len()
            )),
            ArchKind::Siamese7 if self.num_classes != 2 => {
                bad(String::from("siamese7 is a binary pair classifier"))
            }
            _ => Ok(()),
        }
    }

    pub fn is_pair_classifier(&self) -> bool {
        self.kind == ArchKind::Siamese7
    }

    /// Width of the logit row per example.
    pub fn output_width(&self) -> usize {
        if self.is_pair_classifier() {
            1
        } else {
            self.num_classes
        }
    }

    /// Segment names and shapes, in parameter order, with their fan-in.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let [c, h, w] = self.input_shape;
        let mut out = Vec::new();
        match self.kind {
            ArchKind::Mlp => {
                let mut fan_in = c * h * w;
                for (i, &width) in self.widths.iter().enumerate() {
                    out.push((format!("fc{i}.weight"), alloc::vec![fan_in, width], fan_in));
                    out.push((format!("fc{i}.bias"), alloc::vec![width], fan_in));
                    fan_in = width;
                }
                out.push((
                    String::from("head.weight"),
                    alloc::vec![fan_in, self.num_classes],
                    fan_in,
                ));
                out.push((
                    String::from("head.bias"),
                    alloc::vec![self.num_classes],
                    fan_in,
                ));
            }
            ArchKind::ConvNet4 | ArchKind::Siamese7 => {
                let mut cin = c;
                for (i, &filters) in self.widths.iter().enumerate() {
                    let fan_in = cin * KERNEL * KERNEL;
                    out.push((
                        format!("conv{i}.weight"),
                        alloc::vec![filters, cin, KERNEL, KERNEL],
                        fan_in,
                    ));
                    out.push((format!("conv{i}.bias"), alloc::vec![filters], fan_in));
                    cin = filters;
                }
                let outputs = self.output_width();
                out.push((String::from("head.weight"), alloc::vec![cin, outputs], cin));
                out.push((String::from("head.bias"), alloc::vec![outputs], cin));
            }
        }
        out
    }
}

/// Weights drawn uniformly from `±sqrt(6 / fan_in)` (`±sqrt(3 / fan_in)` for
/// the head), biases zero. A deterministic function of `(arch, seed)`.
pub fn init_params(arch: &Architecture, seed: u64) -> ParameterVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segments = arch
        .layout()
        .into_iter()
        .map(|(name, shape, fan_in)| {
            let value = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let gain = if name.starts_with("head") { 3.0 } else { 6.0 };
                let bound = math::sqrt(gain / fan_in as f64);
                let n = shape.iter().product();
                Tensor::from_vec(
                    &shape,
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                )
            };
            Segment { name, value }
        })
        .collect();
    ParameterVector::new(segments)
}

fn check_batch(
    arch: &Architecture,
    params: &[Var<'_>],
    batch: &LabeledBatch,
) -> Result<(), ModelError> {
    let expected = arch.layout();
    if params.len() != expected.len() {
        return Err(ModelError::Shape(format!(
            "{} parameter segments for a {}-segment architecture",
            params.len(),
            expected.len()
        )));
    }
    for (p, (name, shape, _)) in params.iter().zip(&expected) {
        if p.shape() != *shape {
            return Err(ModelError::Shape(format!(
                "segment {name} has shape {:?}, expected {:?}",
                p.shape(),
                shape
            )));
        }
    }
    let s = batch.inputs.shape();
    if s.len() != 4 || s[1..] != arch.input_shape[..] {
        return Err(ModelError::Shape(format!(
            "inputs {:?} do not match item shape {:?}",
            s, arch.input_shape
        )));
    }
    if batch.labels.len() != s[0] {
        return Err(ModelError::Shape(format!(
            "{} labels for {} inputs",
            batch.labels.len(),
            s[0]
        )));
    }
    match (&batch.partners, arch.is_pair_classifier()) {
        (Some(p), true) if p.shape() == s => {}
        (_, true) => {
            return Err(ModelError::Shape(String::from(
                "pair classifier needs partner images of the same shape",
            )))
        }
        (Some(_), false) => {
            return Err(ModelError::Shape(String::from(
                "pair batch given to a single-image classifier",
            )))
        }
        (None, false) => {}
    }
    let limit = if arch.is_pair_classifier() {
        2
    } else {
        arch.num_classes
    };
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= limit) {
        return Err(ModelError::Shape(format!(
            "label {bad} outside [0, {limit})"
        )));
    }
    Ok(())
}

fn conv_stack<'t>(kind: ArchKind, params: &[Var<'t>], x: Var<'t>) -> Var<'t> {
    let layers = params.len() / 2 - 1;
    let mut h = x;
    for i in 0..layers {
        h = h
            .conv2d(params[2 * i])
            .add_channel_bias(params[2 * i + 1])
            .relu();
        let pool = match kind {
            ArchKind::ConvNet4 => true,
            _ => i % 2 == 1,
        };
        if pool {
            h = h.max_pool2d();
        }
    }
    h.global_avg_pool()
}

/// Records the forward pass and returns the logits node
/// (`[batch, classes]`, or `[batch, 1]` scores for pair classifiers).
pub fn forward<'t>(
    arch: &Architecture,
    params: &[Var<'t>],
    batch: &LabeledBatch,
) -> Result<Var<'t>, ModelError> {
    check_batch(arch, params, batch)?;
    let tape = params[0].tape();
    let n = batch.len();
    let head = params.len() - 2;
    let out = match arch.kind {
        ArchKind::Mlp => {
            let flat: usize = arch.input_shape.iter().product();
            let mut h = tape.constant(normalized(&batch.inputs)).reshape(&[n, flat]);
            for i in 0..arch.widths.len() {
                h = h
                    .matmul(params[2 * i])
                    .add_row_bias(params[2 * i + 1])
                    .relu();
            }
            h.matmul(params[head]).add_row_bias(params[head + 1])
        }
        ArchKind::ConvNet4 => {
            let features = conv_stack(arch.kind, params, tape.constant(normalized(&batch.inputs)));
            features.matmul(params[head]).add_row_bias(params[head + 1])
        }
        ArchKind::Siamese7 => {
            let partners = batch.partners.clone().expect("checked above");
            let a = conv_stack(arch.kind, params, tape.constant(normalized(&batch.inputs)));
            let b = conv_stack(arch.kind, params, tape.constant(normalized(&partners)));
            (a - b)
                .abs()
                .matmul(params[head])
                .add_row_bias(params[head + 1])
        }
    };
    tape.check()?;
    Ok(out)
}

/// Maps pixel values from [0, 1] to [-1, 1].
fn normalized(x: &Tensor) -> Tensor {
    x.map(|v| 2.0 * v - 1.0)
}

/// Mean cross-entropy (binary for pair classifiers), recorded on the tape.
pub fn loss_on_tape<'t>(
    arch: &Architecture,
    params: &[Var<'t>],
    batch: &LabeledBatch,
) -> Result<Var<'t>, ModelError> {
    let logits = forward(arch, params, batch)?;
    let loss = if arch.is_pair_classifier() {
        logits.binary_cross_entropy_with_logits(&batch.labels)
    } else {
        logits.softmax_cross_entropy(&batch.labels)
    };
    logits.tape().check()?;
    Ok(loss)
}

pub fn predict(
    arch: &Architecture,
    params: &ParameterVector,
    batch: &LabeledBatch,
) -> Result<Tensor, ModelError> {
    let tape = Tape::new();
    let vars = params.constants(&tape);
    Ok(forward(arch, &vars, batch)?.value())
}

pub fn loss(
    arch: &Architecture,
    params: &ParameterVector,
    batch: &LabeledBatch,
) -> Result<f64, ModelError> {
    let tape = Tape::new();
    let vars = params.constants(&tape);
    Ok(loss_on_tape(arch, &vars, batch)?
        .item()
        .expect("loss is scalar"))
}

/// Loss value and its gradient with respect to every parameter segment.
pub fn loss_and_grad(
    arch: &Architecture,
    params: &ParameterVector,
    batch: &LabeledBatch,
) -> Result<(f64, ParameterVector), ModelError> {
    let tape = Tape::new();
    let vars = params.leaves(&tape);
    let loss = loss_on_tape(arch, &vars, batch)?;
    let grad = grad_params(&tape, loss, &vars, params)?;
    Ok((loss.item().expect("loss is scalar"), grad))
}

/// Predicted class per example: argmax of the logits with ties going to the
/// lower index, or `score > 0` (probability above one half) for pairs.
pub fn predicted_classes(arch: &Architecture, logits: &Tensor) -> Vec<usize> {
    let width = arch.output_width();
    logits
        .data()
        .chunks(width)
        .map(|row| {
            if arch.is_pair_classifier() {
                usize::from(row[0] > 0.0)
            } else {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            }
        })
        .collect()
}
