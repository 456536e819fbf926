//! Straight-line reference implementations used as test oracles.

#![allow(dead_code)]

use foml_core::data::{Example, LabeledBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One-hidden-layer ReLU classifier over flat parameters laid out as
/// `w1 [inputs, hidden]`, `b1 [hidden]`, `w2 [hidden, classes]`, `b2 [classes]`.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Mlp {
    pub fn num_params(&self) -> usize {
        self.inputs * self.hidden + self.hidden + self.hidden * self.classes + self.classes
    }

    fn split<'a>(&self, p: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let (w1, rest) = p.split_at(self.inputs * self.hidden);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.hidden * self.classes);
        (w1, b1, w2, b2)
    }

    /// Mean softmax cross-entropy over the examples and its gradient.
    /// Pixels are mapped from [0, 1] to [-1, 1] first.
    pub fn loss_grad(&self, p: &[f64], xs: &[Vec<f64>], ys: &[usize]) -> (f64, Vec<f64>) {
        let (w1, b1, w2, b2) = self.split(p);
        let (ni, nh, nc) = (self.inputs, self.hidden, self.classes);
        let mut grad = vec![0.0; p.len()];
        let mut total = 0.0;
        let scale = 1.0 / xs.len() as f64;
        for (x, &y) in xs.iter().zip(ys) {
            let x: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
            let mut pre = b1.to_vec();
            for i in 0..ni {
                for h in 0..nh {
                    pre[h] += x[i] * w1[i * nh + h];
                }
            }
            let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
            let mut logits = b2.to_vec();
            for h in 0..nh {
                for c in 0..nc {
                    logits[c] += act[h] * w2[h * nc + c];
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            total += m + z.ln() - logits[y];
            let mut dlogits: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
            dlogits[y] -= 1.0;
            let (gw1, rest) = grad.split_at_mut(ni * nh);
            let (gb1, rest) = rest.split_at_mut(nh);
            let (gw2, gb2) = rest.split_at_mut(nh * nc);
            let mut dact = vec![0.0; nh];
            for c in 0..nc {
                gb2[c] += scale * dlogits[c];
                for h in 0..nh {
                    gw2[h * nc + c] += scale * act[h] * dlogits[c];
                    dact[h] += w2[h * nc + c] * dlogits[c];
                }
            }
            for h in 0..nh {
                if pre[h] <= 0.0 {
                    continue;
                }
                gb1[h] += scale * dact[h];
                for i in 0..ni {
                    gw1[i * nh + h] += scale * x[i] * dact[h];
                }
            }
        }
        (total * scale, grad)
    }

    pub fn loss(&self, p: &[f64], xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        self.loss_grad(p, xs, ys).0
    }
}

/// Inputs and labels of a batch.
pub fn unpack(batch: &LabeledBatch) -> (Vec<Vec<f64>>, Vec<usize>) {
    let xs = (0..batch.len()).map(|i| batch.example(i).input).collect();
    (xs, batch.labels.clone())
}

/// `n` random examples with pixels in [0, 1] and labels cycling over `classes`.
pub fn random_batch(n: usize, item: [usize; 3], classes: usize, seed: u64) -> LabeledBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = item.iter().product();
    let exs: Vec<Example> = (0..n)
        .map(|i| Example {
            input: (0..len).map(|_| rng.gen_range(0.0..1.0)).collect(),
            partner: None,
            label: (i + seed as usize) % classes,
        })
        .collect();
    LabeledBatch::from_examples(&exs, item)
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Plain-SGD online steps from `phi0` on the given batches, each step on
/// `L(phi) + beta1 * |phi - theta|^2`, followed by the meta objective
/// `L(phi_K; val) + beta2 * sum_{k=0..K} |theta - phi_k|^2`.
#[allow(clippy::too_many_arguments)]
pub fn meta_objective(
    mlp: &Mlp,
    theta: &[f64],
    phi0: &[f64],
    train: &[(Vec<Vec<f64>>, Vec<usize>)],
    val: &(Vec<Vec<f64>>, Vec<usize>),
    alpha1: f64,
    beta1: f64,
    beta2: f64,
) -> f64 {
    let mut phi = phi0.to_vec();
    let mut reg = sq_dist(theta, &phi);
    for (xs, ys) in train {
        let (_, g) = mlp.loss_grad(&phi, xs, ys);
        for i in 0..phi.len() {
            phi[i] -= alpha1 * (g[i] + 2.0 * beta1 * (phi[i] - theta[i]));
        }
        reg += sq_dist(theta, &phi);
    }
    mlp.loss(&phi, &val.0, &val.1) + beta2 * reg
}
