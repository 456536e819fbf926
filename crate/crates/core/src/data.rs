//! Labeled examples and batches: the only data a learner ever sees.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// One labeled datapoint. `partner` is the second image of a pair example,
/// whose label is 1 for "same class" and 0 otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<f64>,
    pub partner: Option<Vec<f64>>,
    pub label: usize,
}

/// A batch of examples laid out as `[batch, channels, height, width]`.
///
/// This type carries no task identity or boundary information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub partners: Option<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    /// Stacks examples of shape `item_shape = [C, H, W]`.
    ///
    /// # Panics
    /// Panics if an example's length does not match `item_shape` or the
    /// examples disagree on whether they are pairs.
    pub fn from_examples<'a>(
        examples: impl IntoIterator<Item = &'a Example>,
        item_shape: [usize; 3],
    ) -> Self {
        let item = item_shape.iter().product::<usize>();
        let mut inputs = Vec::new();
        let mut partners: Option<Vec<f64>> = None;
        let mut labels = Vec::new();
        for (i, ex) in examples.into_iter().enumerate() {
            assert_eq!(
                ex.input.len(),
                item,
                "example {i} does not match item shape {item_shape:?}"
            );
            inputs.extend_from_slice(&ex.input);
            match (&ex.partner, i) {
                (Some(p), 0) => partners = Some(p.clone()),
                (Some(p), _) => partners
                    .as_mut()
                    .expect("mixed pair and single examples")
                    .extend_from_slice(p),
                (None, _) => assert!(partners.is_none(), "mixed pair and single examples"),
            }
            labels.push(ex.label);
        }
        let shape = [labels.len(), item_shape[0], item_shape[1], item_shape[2]];
        Self {
            inputs: Tensor::from_vec(&shape, inputs),
            partners: partners.map(|p| Tensor::from_vec(&shape, p)),
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_shape(&self) -> [usize; 3] {
        let s = self.inputs.shape();
        [s[1], s[2], s[3]]
    }

    pub fn example(&self, i: usize) -> Example {
        let item: usize = self.item_shape().iter().product();
        let slice = |t: &Tensor| t.data()[i * item..(i + 1) * item].to_vec();
        Example {
            input: slice(&self.inputs),
            partner: self.partners.as_ref().map(slice),
            label: self.labels[i],
        }
    }

    pub fn examples(&self) -> Vec<Example> {
        (0..self.len()).map(|i| self.example(i)).collect()
    }

    /// Splits into the first `n` examples and the rest.
    pub fn split_at(&self, n: usize) -> (LabeledBatch, LabeledBatch) {
        let shape = self.item_shape();
        let all = self.examples();
        let n = n.min(all.len());
        (
            Self::from_examples(&all[..n], shape),
            Self::from_examples(&all[n..], shape),
        )
    }
}
