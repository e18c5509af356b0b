use serde::{Deserialize, Serialize};

use super::check_grad_out;
use crate::error::{Error, Result};
use crate::numeric::{sigmoid, Matrix};

/// Per-unit LHUC amplitudes `α_k = 2·sigmoid(r_k)`; `r = 0` is the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LhucParams {
    pub r: Vec<f64>,
}

impl LhucParams {
    pub fn identity(units: usize) -> Self {
        Self { r: vec![0.0; units] }
    }
}

#[inline]
pub fn lhuc_amplitude(r: f64) -> f64 {
    2.0 * sigmoid(r)
}

pub fn lhuc_apply(pooled: &Matrix, params: &LhucParams) -> Result<Matrix> {
    if pooled.cols() != params.r.len() {
        return Err(Error::dim("lhuc_apply", format!("{} units", params.r.len()), pooled.cols()));
    }
    let amp: Vec<f64> = params.r.iter().map(|&r| lhuc_amplitude(r)).collect();
    let mut out = pooled.clone();
    for n in 0..out.rows() {
        for (x, a) in out.row_mut(n).iter_mut().zip(&amp) {
            *x *= a;
        }
    }
    Ok(out)
}

/// Returns `(∂L/∂pooled, ∂L/∂r)`.
pub fn lhuc_backward(pooled: &Matrix, params: &LhucParams, grad_out: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    check_grad_out("lhuc_backward", grad_out, pooled.rows(), params.r.len())?;
    let mut grad_pooled = grad_out.clone();
    let mut grad_r = vec![0.0; params.r.len()];
    let slopes: Vec<(f64, f64)> = params
        .r
        .iter()
        .map(|&r| {
            let s = sigmoid(r);
            (2.0 * s, 2.0 * s * (1.0 - s))
        })
        .collect();
    for n in 0..pooled.rows() {
        let x = pooled.row(n);
        for (k, g) in grad_pooled.row_mut(n).iter_mut().enumerate() {
            let (amp, slope) = slopes[k];
            grad_r[k] += *g * x[k] * slope;
            *g *= amp;
        }
    }
    Ok((grad_pooled, grad_r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{fd_gradient, Rng};

    #[test]
    fn zero_is_bitwise_identity() {
        let mut rng = Rng::new(1);
        let x = Matrix::from_fn(4, 3, |_, _| rng.normal(0.0, 3.0));
        let y = lhuc_apply(&x, &LhucParams::identity(3)).unwrap();
        assert_eq!(
            x.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn saturates_at_twice_the_input() {
        let x = Matrix::from_rows(&[[1.5, -2.0]]).unwrap();
        let y = lhuc_apply(&x, &LhucParams { r: vec![50.0, 50.0] }).unwrap();
        assert_eq!(y.as_slice(), &[3.0, -4.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(2);
        let x = Matrix::from_fn(3, 4, |_, _| rng.uniform(-2.0, 2.0));
        let g = Matrix::from_fn(3, 4, |_, _| rng.uniform(-1.0, 1.0));
        let r: Vec<f64> = (0..4).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let params = LhucParams { r: r.clone() };
        let (gx, gr) = lhuc_backward(&x, &params, &g).unwrap();
        let obj = |x: &Matrix, r: &[f64]| {
            let y = lhuc_apply(x, &LhucParams { r: r.to_vec() }).unwrap();
            y.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd_r = fd_gradient(|t| obj(&x, t), &r, 1e-5).unwrap();
        for (a, b) in gr.iter().zip(&fd_r) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-3));
        }
        let fd_x = fd_gradient(|t| obj(&Matrix::from_vec(3, 4, t.to_vec()).unwrap(), &r), x.as_slice(), 1e-5).unwrap();
        for (a, b) in gx.as_slice().iter().zip(&fd_x) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-3));
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        assert!(lhuc_apply(&Matrix::zeros(1, 3), &LhucParams::identity(2)).is_err());
    }
}
