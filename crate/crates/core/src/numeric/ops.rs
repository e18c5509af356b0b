use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    Identity,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Relu => "relu",
            ActivationKind::Softmax => "softmax",
            ActivationKind::Identity => "identity",
        }
    }
}

/// `x · W + b` for a batch of row vectors.
pub fn affine_forward(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if x.cols() != w.rows() {
        return Err(Error::dim(
            "affine_forward",
            format!("input width {}", w.rows()),
            x.cols(),
        ));
    }
    if b.len() != w.cols() {
        return Err(Error::dim(
            "affine_forward",
            format!("bias length {}", w.cols()),
            b.len(),
        ));
    }
    let mut out = x.matmul(w)?;
    for n in 0..out.rows() {
        for (o, &bj) in out.row_mut(n).iter_mut().zip(b) {
            *o += bj;
        }
    }
    Ok(out)
}

/// Gradients of an affine map given the upstream gradient `g` (batch × out).
pub struct AffineGrads {
    pub input: Matrix,
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

pub fn affine_backward(x: &Matrix, w: &Matrix, g: &Matrix) -> Result<AffineGrads> {
    if g.cols() != w.cols() || g.rows() != x.rows() {
        return Err(Error::dim(
            "affine_backward",
            format!("{}x{}", x.rows(), w.cols()),
            format!("{}x{}", g.rows(), g.cols()),
        ));
    }
    Ok(AffineGrads {
        input: g.matmul_t(w)?,
        weights: x.t_matmul(g)?,
        bias: g.col_sums(),
    })
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for n in 0..out.rows() {
        let row = out.row_mut(n);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn activation_forward(a: &Matrix, kind: ActivationKind) -> Matrix {
    match kind {
        ActivationKind::Sigmoid => a.map(sigmoid),
        ActivationKind::Tanh => a.map(f64::tanh),
        ActivationKind::Relu => a.map(|v| v.max(0.0)),
        ActivationKind::Identity => a.clone(),
        ActivationKind::Softmax => softmax(a),
    }
}

/// Pulls `grad_out` back through an activation, using the forward input `a`
/// and output `y`.
pub fn activation_backward(a: &Matrix, y: &Matrix, grad_out: &Matrix, kind: ActivationKind) -> Matrix {
    let zip = |f: &dyn Fn(f64, f64) -> f64| {
        let data = a
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .zip(grad_out.as_slice())
            .map(|((&a, &y), &g)| g * f(a, y))
            .collect();
        Matrix::from_vec(a.rows(), a.cols(), data).expect("shapes agree")
    };
    match kind {
        ActivationKind::Sigmoid => zip(&|_, y| y * (1.0 - y)),
        ActivationKind::Tanh => zip(&|_, y| 1.0 - y * y),
        ActivationKind::Relu => zip(&|a, _| if a > 0.0 { 1.0 } else { 0.0 }),
        ActivationKind::Identity => grad_out.clone(),
        ActivationKind::Softmax => {
            let mut out = grad_out.clone();
            for n in 0..out.rows() {
                let yr = y.row(n);
                let dot: f64 = yr.iter().zip(grad_out.row(n)).map(|(y, g)| y * g).sum();
                for (o, &yi) in out.row_mut(n).iter_mut().zip(yr) {
                    *o = yi * (*o - dot);
                }
            }
            out
        }
    }
}

/// Mean negative log-likelihood and its gradient with respect to the logits
/// that produced `probs` through a softmax.
pub fn cross_entropy(probs: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    if probs.rows() != targets.len() {
        return Err(Error::dim(
            "cross_entropy",
            format!("{} targets", probs.rows()),
            targets.len(),
        ));
    }
    let classes = probs.cols();
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Index {
            what: "class targets",
            index: bad,
            bound: classes,
        });
    }
    let batch = probs.rows().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (n, &t) in targets.iter().enumerate() {
        loss -= probs.get(n, t).max(PROB_FLOOR).ln();
        let row = grad.row_mut(n);
        row[t] -= 1.0;
        for v in row.iter_mut() {
            *v /= batch;
        }
    }
    Ok((loss / batch, grad))
}

/// Central-difference gradient of `f` at `theta`.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let up = f(&probe);
        probe[i] = theta[i] - h;
        let down = f(&probe);
        probe[i] = theta[i];
        let g = (up - down) / (2.0 * h);
        if !g.is_finite() {
            return Err(Error::Oracle { coord: i });
        }
        grad.push(g);
    }
    Ok(grad)
}
