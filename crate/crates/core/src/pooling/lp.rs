use serde::{Deserialize, Serialize};

use super::{check_grad_out, PoolSpec};
use crate::error::Result;
use crate::numeric::Matrix;

/// Floor applied to `|a_i|` in both the forward norm and every backward
/// formula, so `log|a_i|` stays finite.
pub const LP_EPS: f64 = 1e-8;

/// Learnable orders, stored unconstrained; the effective order is `max(1, ρ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpPoolParams {
    pub rho: Vec<f64>,
}

impl LpPoolParams {
    pub fn constant(num_pools: usize, rho: f64) -> Self {
        Self {
            rho: vec![rho; num_pools],
        }
    }
}

/// `p = ζ(ρ) = max(1, ρ)`.
#[inline]
pub fn effective_order(rho: f64) -> f64 {
    rho.max(1.0)
}

/// Forward-pass cache for [`lp_backward`].
#[derive(Clone, Debug)]
pub struct LpWorkspace {
    spec: PoolSpec,
    eps: f64,
    rho: Vec<f64>,
    /// Pool inputs `a^k`, batch × P·K.
    input: Matrix,
    /// Pool outputs `f_k` (the entries of `G^k`), batch × P.
    output: Matrix,
    /// Per-pool `max_i |ã_i|`, used to keep `Σ|ã|^p` in range.
    scale: Matrix,
    /// Per-pool `Σ (|ã_i| / scale)^p`.
    scaled_sum: Matrix,
}

impl LpWorkspace {
    pub fn spec(&self) -> PoolSpec {
        self.spec
    }

    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn input(&self) -> &Matrix {
        &self.input
    }

    pub fn orders(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| effective_order(r)).collect()
    }
}

pub struct LpGrads {
    pub input: Matrix,
    pub rho: Vec<f64>,
}

/// `f_k = ( [1/K] Σ_{i∈R_k} |ã_i|^{p_k} )^{1/p_k}` with `ã_i = max(|a_i|, eps)`.
pub fn lp_forward(a: &Matrix, spec: PoolSpec, params: &LpPoolParams, eps: f64) -> Result<(Matrix, LpWorkspace)> {
    spec.check_input("lp_forward", a, params.rho.len())?;
    let (batch, pools, k) = (a.rows(), spec.num_pools, spec.pool_size);
    let mut output = Matrix::zeros(batch, pools);
    let mut scale = Matrix::zeros(batch, pools);
    let mut scaled_sum = Matrix::zeros(batch, pools);
    let norm = if spec.normalize { k as f64 } else { 1.0 };

    for n in 0..batch {
        let row = a.row(n);
        for (pool, &rho) in params.rho.iter().enumerate() {
            let p = effective_order(rho);
            let region = &row[pool * k..(pool + 1) * k];
            // Factor the largest magnitude out of the sum: Σ|ã|^p = m^p Σ(|ã|/m)^p.
            let m = region.iter().fold(eps, |m, &x| m.max(x.abs()));
            let s: f64 = region.iter().map(|&x| (x.abs().max(eps) / m).powf(p)).sum();
            output.set(n, pool, m * (s / norm).powf(1.0 / p));
            scale.set(n, pool, m);
            scaled_sum.set(n, pool, s);
        }
    }

    let ws = LpWorkspace {
        spec,
        eps,
        rho: params.rho.clone(),
        input: a.clone(),
        output: output.clone(),
        scale,
        scaled_sum,
    };
    Ok((output, ws))
}

/// Back-propagates through [`lp_forward`].
///
/// Input gradient: `∂f/∂a_i = a_i |ã_i|^{p-2} / Σ|ã|^p · f`.
/// Order gradient: `∂f/∂ρ = ( Σ log|ã_i| |ã_i|^p / (p Σ|ã|^p) - log([1/K] Σ|ã|^p) / p² ) · ζ'(ρ) · f`,
/// where `ζ'(ρ)` is 1 for `ρ > 1` and 0 otherwise. A pool whose inputs all sit
/// at the `eps` floor is locally constant and contributes zero gradient.
pub fn lp_backward(ws: &LpWorkspace, grad_out: &Matrix) -> Result<LpGrads> {
    let (batch, pools, k) = (ws.input.rows(), ws.spec.num_pools, ws.spec.pool_size);
    check_grad_out("lp_backward", grad_out, batch, pools)?;
    let log_norm = if ws.spec.normalize { (k as f64).ln() } else { 0.0 };
    let mut grad_input = Matrix::zeros(batch, pools * k);
    let mut grad_rho = vec![0.0; pools];

    for n in 0..batch {
        let row = ws.input.row(n);
        let grad_row = grad_input.row_mut(n);
        for pool in 0..pools {
            let g = grad_out.get(n, pool);
            let region = &row[pool * k..(pool + 1) * k];
            if g == 0.0 || region.iter().all(|x| x.abs() <= ws.eps) {
                continue;
            }
            let rho = ws.rho[pool];
            let p = effective_order(rho);
            let f = ws.output.get(n, pool);
            let m = ws.scale.get(n, pool);
            let s = ws.scaled_sum.get(n, pool);

            // a_i |ã_i|^{p-2} f / Σ|ã|^p, written with the scaled sum:
            // (a_i / ã_i) (ã_i/m)^{p-1} f / (m s).
            let common = f / (m * s);
            for (i, &x) in region.iter().enumerate() {
                let t = x.abs().max(ws.eps);
                grad_row[pool * k + i] = g * (x / t) * (t / m).powf(p - 1.0) * common;
            }

            if rho > 1.0 {
                // Σ log|ã_i| |ã_i|^p / (p Σ|ã|^p) − log([1/K]Σ|ã|^p)/p², with
                // log m pulled out of both terms where it cancels.
                let weighted_log: f64 = region
                    .iter()
                    .map(|&x| {
                        let r = x.abs().max(ws.eps) / m;
                        r.ln() * r.powf(p)
                    })
                    .sum::<f64>()
                    / s;
                let d = weighted_log / p - (s.ln() - log_norm) / (p * p);
                grad_rho[pool] += g * d * f;
            }
        }
    }
    Ok(LpGrads {
        input: grad_input,
        rho: grad_rho,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{fd_gradient, Rng};

    fn pool1(values: &[f64], rho: f64, normalize: bool) -> f64 {
        let a = Matrix::from_rows(&[values]).unwrap();
        let spec = PoolSpec::new(values.len(), 1).normalized(normalize);
        let (out, _) = lp_forward(&a, spec, &LpPoolParams::constant(1, rho), LP_EPS).unwrap();
        out.get(0, 0)
    }

    /// Plain evaluation of the pooled norm, without the scaling trick.
    fn oracle(values: &[f64], p: f64, normalize: bool) -> f64 {
        let k = if normalize { values.len() as f64 } else { 1.0 };
        (values.iter().map(|v| v.abs().max(LP_EPS).powf(p)).sum::<f64>() / k).powf(1.0 / p)
    }

    #[test]
    fn forward_reference_values() {
        assert_eq!(pool1(&[3.0, 4.0], 2.0, false), 5.0);
        assert_eq!(pool1(&[-1.0, 1.0], 1.0, false), 2.0);
        assert!((pool1(&[0.5, -2.0, 1.0], 200.0, false) - 2.0).abs() < 1e-2);
        let normalised = pool1(&[3.0, 4.0], 2.0, true);
        assert!((normalised - oracle(&[3.0, 4.0], 2.0, true)).abs() < 1e-15);
        assert!((normalised - 12.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rho_below_one_acts_as_l1() {
        assert_eq!(pool1(&[0.5, -1.5, 2.0], 0.3, false), 4.0);
    }

    #[test]
    fn forward_agrees_with_direct_oracle() {
        let mut rng = Rng::new(21);
        for _ in 0..200 {
            let k = 1 + rng.index(5);
            let v: Vec<f64> = (0..k).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let rho = rng.uniform(0.5, 6.0);
            let normalize = rng.coin();
            let got = pool1(&v, rho, normalize);
            let want = oracle(&v, effective_order(rho), normalize);
            assert!((got - want).abs() <= 1e-13 * want.max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn large_orders_do_not_overflow() {
        let f = pool1(&[1e4, 2e4, -3e4], 300.0, false);
        assert!((f - 3e4).abs() / 3e4 < 1e-2);
        let f = pool1(&[1e-6, 2e-6], 300.0, false);
        assert!(f.is_finite() && f > 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Matrix::zeros(1, 5);
        let spec = PoolSpec::new(2, 2);
        assert!(lp_forward(&a, spec, &LpPoolParams::constant(2, 2.0), LP_EPS).is_err());
        let a = Matrix::zeros(1, 4);
        assert!(lp_forward(&a, spec, &LpPoolParams::constant(3, 2.0), LP_EPS).is_err());
    }

    #[test]
    fn gate_closed_below_one() {
        let a = Matrix::from_rows(&[[0.3, -1.2, 0.7]]).unwrap();
        let spec = PoolSpec::new(3, 1);
        for rho in [0.5, 1.0, -3.0] {
            let (_, ws) = lp_forward(&a, spec, &LpPoolParams::constant(1, rho), LP_EPS).unwrap();
            let g = lp_backward(&ws, &Matrix::filled(1, 1, 1.0)).unwrap();
            assert_eq!(g.rho[0], 0.0);
        }
    }

    fn check_against_fd(a: &Matrix, spec: PoolSpec, rho: &[f64], tol: f64) {
        let mut rng = Rng::new(99);
        let gout = Matrix::from_fn(a.rows(), spec.num_pools, |_, _| rng.uniform(-1.0, 1.0));
        let params = LpPoolParams { rho: rho.to_vec() };
        let (_, ws) = lp_forward(a, spec, &params, LP_EPS).unwrap();
        let grads = lp_backward(&ws, &gout).unwrap();
        let objective = |a: &Matrix, rho: &[f64]| {
            let (out, _) = lp_forward(a, spec, &LpPoolParams { rho: rho.to_vec() }, LP_EPS).unwrap();
            out.as_slice().iter().zip(gout.as_slice()).map(|(o, g)| o * g).sum::<f64>()
        };
        let fd_a = fd_gradient(
            |t| objective(&Matrix::from_vec(a.rows(), a.cols(), t.to_vec()).unwrap(), rho),
            a.as_slice(),
            1e-5,
        )
        .unwrap();
        let fd_rho = fd_gradient(|t| objective(a, t), rho, 1e-5).unwrap();
        for (x, y) in grads.input.as_slice().iter().zip(&fd_a) {
            assert!((x - y).abs() <= tol * x.abs().max(y.abs()).max(1e-3), "grad_a {x} vs {y}");
        }
        for (x, y) in grads.rho.iter().zip(&fd_rho) {
            assert!((x - y).abs() <= tol * x.abs().max(y.abs()).max(1e-3), "grad_rho {x} vs {y}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(4);
        let a = Matrix::from_fn(1, 5, |_, _| {
            let m = rng.uniform(0.1, 2.0);
            if rng.coin() { m } else { -m }
        });
        check_against_fd(&a, PoolSpec::new(5, 1), &[2.3], 1e-6);
        check_against_fd(&a, PoolSpec::new(5, 1).normalized(true), &[2.3], 1e-6);

        let a = Matrix::from_fn(3, 6, |_, _| {
            let m = rng.uniform(0.2, 1.5);
            if rng.coin() { m } else { -m }
        });
        check_against_fd(&a, PoolSpec::new(3, 2), &[1.4, 3.7], 1e-6);
    }

    #[test]
    fn fd_of_output_wrt_rho_matches_eq_form() {
        // Direct transcription of the order gradient without the scaling
        // rearrangement, checked through the finite-difference oracle.
        let v = [0.4, -1.3, 0.9, 2.2];
        let p = 2.7;
        let s: f64 = v.iter().map(|x: &f64| x.abs().powf(p)).sum();
        let f = s.powf(1.0 / p);
        let num: f64 = v.iter().map(|x: &f64| x.abs().ln() * x.abs().powf(p)).sum();
        let direct = (num / (p * s) - s.ln() / (p * p)) * f;
        let fd = fd_gradient(|t| pool1(&v, t[0], false), &[p], 1e-5).unwrap()[0];
        assert!((direct - fd).abs() < 1e-9 * direct.abs().max(1.0));

        let a = Matrix::from_rows(&[v]).unwrap();
        let (_, ws) = lp_forward(&a, PoolSpec::new(4, 1), &LpPoolParams::constant(1, p), LP_EPS).unwrap();
        let g = lp_backward(&ws, &Matrix::filled(1, 1, 1.0)).unwrap();
        assert!((g.rho[0] - direct).abs() < 1e-12 * direct.abs().max(1.0));
    }

    #[test]
    fn constant_pool_has_symmetric_input_gradient() {
        for rho in [1.0, 1.7, 2.0, 4.5] {
            let a = Matrix::filled(1, 4, 0.8);
            let (_, ws) = lp_forward(&a, PoolSpec::new(4, 1), &LpPoolParams::constant(1, rho), LP_EPS).unwrap();
            let g = lp_backward(&ws, &Matrix::filled(1, 1, 1.3)).unwrap();
            let first = g.input.get(0, 0);
            assert!(g.input.as_slice().iter().all(|&x| x == first));
        }
    }

    #[test]
    fn all_zero_pool_gives_zero_gradients() {
        let a = Matrix::zeros(2, 6);
        let spec = PoolSpec::new(3, 2);
        for rho in [0.5, 2.0, 60.0] {
            let (out, ws) = lp_forward(&a, spec, &LpPoolParams::constant(2, rho), LP_EPS).unwrap();
            assert!(out.is_finite());
            let g = lp_backward(&ws, &Matrix::filled(2, 2, 1.0)).unwrap();
            assert!(g.input.as_slice().iter().all(|&x| x == 0.0));
            assert!(g.rho.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn wrong_upstream_shape_is_contract_error() {
        let a = Matrix::filled(2, 4, 1.0);
        let (_, ws) = lp_forward(&a, PoolSpec::new(2, 2), &LpPoolParams::constant(2, 2.0), LP_EPS).unwrap();
        let err = lp_backward(&ws, &Matrix::zeros(3, 2)).err().unwrap();
        assert!(matches!(err, crate::Error::Contract(_)));
    }
}
