//! The 2-32-32-3 tanh MLP trained by the testbed, with hand-written
//! backpropagation over a flat parameter vector.

use rand::Rng;

use super::data::{Split, CLASSES};

pub const INPUT_DIM: usize = 2;
pub const HIDDEN: usize = 32;

const W1: usize = 0;
const B1: usize = W1 + HIDDEN * INPUT_DIM;
const W2: usize = B1 + HIDDEN;
const B2: usize = W2 + HIDDEN * HIDDEN;
const W3: usize = B2 + HIDDEN;
const B3: usize = W3 + CLASSES * HIDDEN;

/// Weights are stored row-major as `[out][in]`, each followed by its bias.
pub const PARAM_COUNT: usize = B3 + CLASSES;

#[derive(Clone, Debug, PartialEq)]
pub struct Trainee {
    pub theta: Vec<f64>,
}

impl Trainee {
    /// Uniform in `±1/sqrt(fan_in)` for weights and biases alike.
    pub fn init<R: Rng>(rng: &mut R) -> Self {
        let mut theta = vec![0.0; PARAM_COUNT];
        // Each span covers a weight block and the bias that follows it.
        for (start, end, fan_in) in [(W1, W2, INPUT_DIM), (W2, W3, HIDDEN), (W3, PARAM_COUNT, HIDDEN)] {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut theta[start..end] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Self { theta }
    }

    pub fn logits(&self, x: &[f64; 2]) -> [f64; CLASSES] {
        forward(&self.theta, x).logits
    }

    pub fn loss(&self, data: &Split) -> f64 {
        loss(&self.theta, data)
    }

    /// Fraction of examples whose largest logit is the true class. Examples
    /// with any non-finite logit count as wrong.
    pub fn accuracy(&self, data: &Split) -> f64 {
        accuracy(&self.theta, data)
    }
}

struct Activations {
    h1: [f64; HIDDEN],
    h2: [f64; HIDDEN],
    logits: [f64; CLASSES],
}

fn forward(theta: &[f64], x: &[f64; 2]) -> Activations {
    let mut h1 = [0.0; HIDDEN];
    for (j, h) in h1.iter_mut().enumerate() {
        let w = &theta[W1 + j * INPUT_DIM..W1 + (j + 1) * INPUT_DIM];
        *h = (theta[B1 + j] + w[0] * x[0] + w[1] * x[1]).tanh();
    }
    let mut h2 = [0.0; HIDDEN];
    for (j, h) in h2.iter_mut().enumerate() {
        let w = &theta[W2 + j * HIDDEN..W2 + (j + 1) * HIDDEN];
        let mut a = theta[B2 + j];
        for (wi, hi) in w.iter().zip(&h1) {
            a += wi * hi;
        }
        *h = a.tanh();
    }
    let mut logits = [0.0; CLASSES];
    for (c, l) in logits.iter_mut().enumerate() {
        let w = &theta[W3 + c * HIDDEN..W3 + (c + 1) * HIDDEN];
        let mut a = theta[B3 + c];
        for (wi, hi) in w.iter().zip(&h2) {
            a += wi * hi;
        }
        *l = a;
    }
    Activations { h1, h2, logits }
}

/// Softmax probabilities and the cross-entropy of class `y`.
fn softmax_xent(logits: &[f64; CLASSES], y: usize) -> ([f64; CLASSES], f64) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; CLASSES];
    let mut s = 0.0;
    for (pc, l) in p.iter_mut().zip(logits) {
        *pc = (l - m).exp();
        s += *pc;
    }
    for pc in &mut p {
        *pc /= s;
    }
    (p, m + s.ln() - logits[y])
}

/// Mean cross-entropy over the split.
pub fn loss(theta: &[f64], data: &Split) -> f64 {
    let total: f64 = data
        .features
        .iter()
        .zip(&data.labels)
        .map(|(x, &y)| softmax_xent(&forward(theta, x).logits, y).1)
        .sum();
    total / data.len() as f64
}

/// Mean cross-entropy over `idx` (indices into `data`); the gradient is
/// written to `grad`, which is overwritten.
pub fn loss_and_grad(theta: &[f64], data: &Split, idx: &[usize], grad: &mut [f64]) -> f64 {
    loss_and_grad_into(theta, data, idx, grad, None)
}

/// As [`loss_and_grad`], also storing each example's loss at its index.
pub(crate) fn loss_and_grad_into(
    theta: &[f64],
    data: &Split,
    idx: &[usize],
    grad: &mut [f64],
    mut per_example: Option<&mut [f64]>,
) -> f64 {
    assert_eq!(theta.len(), PARAM_COUNT);
    assert_eq!(grad.len(), PARAM_COUNT);
    grad.fill(0.0);
    let mut total = 0.0;
    for &i in idx {
        let x = &data.features[i];
        let act = forward(theta, x);
        let (p, l) = softmax_xent(&act.logits, data.labels[i]);
        total += l;
        if let Some(out) = per_example.as_deref_mut() {
            out[i] = l;
        }

        let mut d3 = p;
        d3[data.labels[i]] -= 1.0;
        let mut dh2 = [0.0; HIDDEN];
        for (c, &d) in d3.iter().enumerate() {
            grad[B3 + c] += d;
            let w = &theta[W3 + c * HIDDEN..W3 + (c + 1) * HIDDEN];
            let g = &mut grad[W3 + c * HIDDEN..W3 + (c + 1) * HIDDEN];
            for j in 0..HIDDEN {
                g[j] += d * act.h2[j];
                dh2[j] += w[j] * d;
            }
        }
        let mut dh1 = [0.0; HIDDEN];
        for j in 0..HIDDEN {
            let d = dh2[j] * (1.0 - act.h2[j] * act.h2[j]);
            grad[B2 + j] += d;
            let w = &theta[W2 + j * HIDDEN..W2 + (j + 1) * HIDDEN];
            let g = &mut grad[W2 + j * HIDDEN..W2 + (j + 1) * HIDDEN];
            for i in 0..HIDDEN {
                g[i] += d * act.h1[i];
                dh1[i] += w[i] * d;
            }
        }
        for j in 0..HIDDEN {
            let d = dh1[j] * (1.0 - act.h1[j] * act.h1[j]);
            grad[B1 + j] += d;
            grad[W1 + j * INPUT_DIM] += d * x[0];
            grad[W1 + j * INPUT_DIM + 1] += d * x[1];
        }
    }
    let inv = 1.0 / idx.len() as f64;
    for g in grad.iter_mut() {
        *g *= inv;
    }
    total * inv
}

pub fn accuracy(theta: &[f64], data: &Split) -> f64 {
    let mut correct = 0usize;
    for (x, &y) in data.features.iter().zip(&data.labels) {
        let l = forward(theta, x).logits;
        if l.iter().all(|v| v.is_finite()) {
            let mut best = 0;
            for c in 1..CLASSES {
                if l[c] > l[best] {
                    best = c;
                }
            }
            correct += usize::from(best == y);
        }
    }
    correct as f64 / data.len() as f64
}
