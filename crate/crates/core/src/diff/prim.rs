use std::fmt;

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::{EngineError, Tensor};

/// The closed primitive set. Every model in the crate is a composition of
/// these nine operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prim {
    MatMul,
    /// Elementwise sum; broadcasts a one-element operand or a `1 x n` row.
    Add,
    /// Elementwise product with the same broadcasting rules as `Add`.
    Mul,
    Tanh,
    Sigmoid,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Sum,
    /// Mean of squared differences.
    Mse,
}

impl fmt::Display for Prim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prim::MatMul => write!(f, "matmul"),
            Prim::Add => write!(f, "add"),
            Prim::Mul => write!(f, "mul"),
            Prim::Tanh => write!(f, "tanh"),
            Prim::Sigmoid => write!(f, "sigmoid"),
            Prim::Concat { axis } => write!(f, "concat(axis={axis})"),
            Prim::Slice { axis, start, end } => write!(f, "slice(axis={axis}, {start}..{end})"),
            Prim::Sum => write!(f, "sum"),
            Prim::Mse => write!(f, "mse"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Left operand has a single element.
    ScalarLeft,
    ScalarRight,
    /// Left operand is a `1 x n` row against an `m x n` right operand.
    RowLeft,
    RowRight,
}

fn broadcast(prim: Prim, a: &Tensor, b: &Tensor) -> Result<Broadcast, EngineError> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    // With two single-element operands the higher-rank shape wins.
    if a.len() == 1 && (b.len() != 1 || a.shape().len() <= b.shape().len()) {
        return Ok(Broadcast::ScalarLeft);
    }
    if b.len() == 1 {
        return Ok(Broadcast::ScalarRight);
    }
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1] {
        if sb[0] == 1 {
            return Ok(Broadcast::RowRight);
        }
        if sa[0] == 1 {
            return Ok(Broadcast::RowLeft);
        }
    }
    Err(mismatch(prim, a, b))
}

fn mismatch(prim: Prim, a: &Tensor, b: &Tensor) -> EngineError {
    EngineError::ShapeMismatch {
        prim: prim.to_string(),
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_rank2(prim: Prim, t: &Tensor) -> Result<(usize, usize), EngineError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(EngineError::ShapeMismatch {
            prim: prim.to_string(),
            left: other.to_vec(),
            right: vec![],
        }),
    }
}

fn elementwise(
    prim: Prim,
    a: &Tensor,
    b: &Tensor,
    op: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, EngineError> {
    let kind = broadcast(prim, a, b)?;
    let (shape, data) = match kind {
        Broadcast::Same => (
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| op(x, y)).collect(),
        ),
        Broadcast::ScalarLeft => {
            let s = a.item();
            (b.shape().to_vec(), b.data().iter().map(|&y| op(s, y)).collect())
        }
        Broadcast::ScalarRight => {
            let s = b.item();
            (a.shape().to_vec(), a.data().iter().map(|&x| op(x, s)).collect())
        }
        Broadcast::RowRight => {
            let row = b.data();
            let mut data = Vec::with_capacity(a.len());
            for chunk in a.data().chunks_exact(row.len()) {
                data.extend(chunk.iter().zip(row).map(|(&x, &y)| op(x, y)));
            }
            (a.shape().to_vec(), data)
        }
        Broadcast::RowLeft => {
            let row = a.data();
            let mut data = Vec::with_capacity(b.len());
            for chunk in b.data().chunks_exact(row.len()) {
                data.extend(row.iter().zip(chunk).map(|(&x, &y)| op(x, y)));
            }
            (b.shape().to_vec(), data)
        }
    };
    Tensor::new(shape, data)
}

/// Evaluates a primitive on concrete inputs.
pub fn forward(prim: Prim, inputs: &[&Tensor]) -> Result<Tensor, EngineError> {
    let arity_ok = match prim {
        Prim::MatMul | Prim::Add | Prim::Mul | Prim::Mse => inputs.len() == 2,
        Prim::Tanh | Prim::Sigmoid | Prim::Sum | Prim::Slice { .. } => inputs.len() == 1,
        Prim::Concat { .. } => !inputs.is_empty(),
    };
    if !arity_ok {
        return Err(EngineError::Arity {
            prim: prim.to_string(),
            got: inputs.len(),
        });
    }
    let out = match prim {
        Prim::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = require_rank2(prim, a)?;
            let (k2, n) = require_rank2(prim, b)?;
            if k != k2 {
                return Err(mismatch(prim, a, b));
            }
            let mut out = vec![0.0; m * n];
            gemm_acc(a.data(), b.data(), m, k, n, &mut out);
            Tensor::matrix(m, n, out)
        }
        Prim::Add => elementwise(prim, inputs[0], inputs[1], |x, y| x + y)?,
        Prim::Mul => elementwise(prim, inputs[0], inputs[1], |x, y| x * y)?,
        Prim::Tanh => inputs[0].map(f64::tanh),
        Prim::Sigmoid => inputs[0].map(sigmoid),
        Prim::Concat { axis } => concat(prim, axis, inputs)?,
        Prim::Slice { axis, start, end } => {
            let a = inputs[0];
            let (r, c) = require_rank2(prim, a)?;
            let extent = if axis == 0 { r } else { c };
            if axis > 1 || start >= end || end > extent {
                return Err(EngineError::SliceRange {
                    axis,
                    start,
                    end,
                    shape: a.shape().to_vec(),
                });
            }
            if axis == 0 {
                Tensor::matrix(end - start, c, a.data()[start * c..end * c].to_vec())
            } else {
                let w = end - start;
                let mut data = Vec::with_capacity(r * w);
                for row in 0..r {
                    data.extend_from_slice(&a.data()[row * c + start..row * c + end]);
                }
                Tensor::matrix(r, w, data)
            }
        }
        Prim::Sum => Tensor::scalar(inputs[0].data().iter().sum()),
        Prim::Mse => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() || a.is_empty() {
                return Err(mismatch(prim, a, b));
            }
            let sse: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            Tensor::scalar(sse / a.len() as f64)
        }
    };
    if !out.is_finite() {
        return Err(EngineError::NonFinite {
            prim: prim.to_string(),
        });
    }
    Ok(out)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn concat(prim: Prim, axis: usize, inputs: &[&Tensor]) -> Result<Tensor, EngineError> {
    let (r0, c0) = require_rank2(prim, inputs[0])?;
    if axis > 1 {
        return Err(EngineError::SliceRange {
            axis,
            start: 0,
            end: 0,
            shape: inputs[0].shape().to_vec(),
        });
    }
    for t in &inputs[1..] {
        let (r, c) = require_rank2(prim, t)?;
        if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
            return Err(mismatch(prim, inputs[0], t));
        }
    }
    if axis == 0 {
        let rows: usize = inputs.iter().map(|t| t.rows()).sum();
        let mut data = Vec::with_capacity(rows * c0);
        for t in inputs {
            data.extend_from_slice(t.data());
        }
        Ok(Tensor::matrix(rows, c0, data))
    } else {
        let cols: usize = inputs.iter().map(|t| t.cols()).sum();
        let mut data = Vec::with_capacity(r0 * cols);
        for row in 0..r0 {
            for t in inputs {
                data.extend_from_slice(t.row_slice(row));
            }
        }
        Ok(Tensor::matrix(r0, cols, data))
    }
}

/// Sums `g` (shaped like the broadcast result) back onto the operand shape.
fn reduce_to(g: &Tensor, target: &Tensor, kind: Broadcast, left: bool) -> Tensor {
    let scalar_side = (kind == Broadcast::ScalarLeft && left) || (kind == Broadcast::ScalarRight && !left);
    let row_side = (kind == Broadcast::RowLeft && left) || (kind == Broadcast::RowRight && !left);
    if scalar_side {
        let mut t = Tensor::zeros(target.shape());
        t.data_mut()[0] = g.data().iter().sum();
        t
    } else if row_side {
        let mut t = Tensor::zeros(target.shape());
        let n = t.len();
        for chunk in g.data().chunks_exact(n) {
            for (acc, v) in t.data_mut().iter_mut().zip(chunk) {
                *acc += v;
            }
        }
        t
    } else {
        g.clone()
    }
}

/// Broadcasts a row or scalar operand up to `like`'s shape, element order
/// matching `elementwise`.
fn expand(t: &Tensor, like: &Tensor) -> Vec<f64> {
    if t.shape() == like.shape() {
        return t.data().to_vec();
    }
    if t.len() == 1 {
        return vec![t.item(); like.len()];
    }
    let mut out = Vec::with_capacity(like.len());
    while out.len() < like.len() {
        out.extend_from_slice(t.data());
    }
    out
}

/// Vector-Jacobian products for one primitive. Returns one adjoint per
/// input; entries whose `needs` flag is false are `None`.
pub fn backward(
    prim: Prim,
    inputs: &[&Tensor],
    output: &Tensor,
    grad: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let mut out: Vec<Option<Tensor>> = vec![None; inputs.len()];
    match prim {
        Prim::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if needs[0] {
                let mut da = vec![0.0; m * k];
                gemm_nt_acc(grad.data(), b.data(), m, k, n, &mut da);
                out[0] = Some(Tensor::matrix(m, k, da));
            }
            if needs[1] {
                let mut db = vec![0.0; k * n];
                gemm_tn_acc(a.data(), grad.data(), m, k, n, &mut db);
                out[1] = Some(Tensor::matrix(k, n, db));
            }
        }
        Prim::Add => {
            let kind = broadcast(prim, inputs[0], inputs[1]).expect("validated in forward");
            for side in 0..2 {
                if needs[side] {
                    out[side] = Some(reduce_to(grad, inputs[side], kind, side == 0));
                }
            }
        }
        Prim::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let kind = broadcast(prim, a, b).expect("validated in forward");
            if needs[0] {
                let bx = expand(b, grad);
                let full = grad.map_indexed(|i, g| g * bx[i]);
                out[0] = Some(reduce_to(&full, a, kind, true));
            }
            if needs[1] {
                let ax = expand(a, grad);
                let full = grad.map_indexed(|i, g| g * ax[i]);
                out[1] = Some(reduce_to(&full, b, kind, false));
            }
        }
        Prim::Tanh => {
            if needs[0] {
                out[0] = Some(grad.map_indexed(|i, g| {
                    let y = output.data()[i];
                    g * (1.0 - y * y)
                }));
            }
        }
        Prim::Sigmoid => {
            if needs[0] {
                out[0] = Some(grad.map_indexed(|i, g| {
                    let y = output.data()[i];
                    g * y * (1.0 - y)
                }));
            }
        }
        Prim::Concat { axis } => {
            let mut offset = 0;
            for (idx, t) in inputs.iter().enumerate() {
                let extent = if axis == 0 { t.rows() } else { t.cols() };
                if needs[idx] {
                    let piece = forward(
                        Prim::Slice {
                            axis,
                            start: offset,
                            end: offset + extent,
                        },
                        &[grad],
                    )
                    .expect("concat adjoint slice");
                    out[idx] = Some(piece);
                }
                offset += extent;
            }
        }
        Prim::Slice { axis, start, end } => {
            if needs[0] {
                let a = inputs[0];
                let c = a.cols();
                let mut d = Tensor::zeros(a.shape());
                if axis == 0 {
                    d.data_mut()[start * c..end * c].copy_from_slice(grad.data());
                } else {
                    let w = end - start;
                    for row in 0..a.rows() {
                        d.data_mut()[row * c + start..row * c + end]
                            .copy_from_slice(&grad.data()[row * w..(row + 1) * w]);
                    }
                }
                out[0] = Some(d);
            }
        }
        Prim::Sum => {
            if needs[0] {
                out[0] = Some(Tensor::filled(inputs[0].shape(), grad.item()));
            }
        }
        Prim::Mse => {
            let (a, b) = (inputs[0], inputs[1]);
            let scale = 2.0 * grad.item() / a.len() as f64;
            if needs[0] {
                out[0] = Some(a.map_indexed(|i, x| scale * (x - b.data()[i])));
            }
            if needs[1] {
                out[1] = Some(a.map_indexed(|i, x| -scale * (x - b.data()[i])));
            }
        }
    }
    out
}

impl Tensor {
    fn map_indexed(&self, f: impl Fn(usize, f64) -> f64) -> Tensor {
        let data = self.data().iter().enumerate().map(|(i, &v)| f(i, v)).collect();
        Tensor::new(self.shape().to_vec(), data).expect("same shape")
    }
}
