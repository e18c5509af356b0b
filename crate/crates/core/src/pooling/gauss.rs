use serde::{Deserialize, Serialize};

use super::{check_grad_out, PoolSpec};
use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Per-pool kernel centre `μ`, precision `β` and amplitude `η`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussPoolParams {
    pub mu: Vec<f64>,
    pub beta: Vec<f64>,
    pub eta: Vec<f64>,
}

impl GaussPoolParams {
    pub fn uniform(num_pools: usize, mu: f64, beta: f64, eta: f64) -> Self {
        Self {
            mu: vec![mu; num_pools],
            beta: vec![beta; num_pools],
            eta: vec![eta; num_pools],
        }
    }

    fn len_checked(&self) -> Result<usize> {
        let n = self.mu.len();
        if self.beta.len() != n || self.eta.len() != n {
            return Err(Error::dim(
                "gauss_forward",
                format!("equal mu/beta/eta lengths ({n})"),
                format!("beta {}, eta {}", self.beta.len(), self.eta.len()),
            ));
        }
        Ok(n)
    }
}

/// Forward-pass cache for [`gauss_backward`].
///
/// `kernel` holds `v(z_i)` rescaled per pool by `exp(-max_i e_i)`, where
/// `e_i = -β/2 (z_i - μ)²`. The weights `u` and every product `J_u J_v` are
/// invariant to that per-pool factor.
#[derive(Clone, Debug)]
pub struct GaussWorkspace {
    spec: PoolSpec,
    params: GaussPoolParams,
    /// `tanh(a)`, batch × P·K.
    activation: Matrix,
    /// `z = η·tanh(a)`, batch × P·K.
    z: Matrix,
    kernel: Matrix,
    /// `u = v / Σv`, batch × P·K.
    weights: Matrix,
    /// Per-pool `Σ v` (rescaled like `kernel`), batch × P.
    kernel_sum: Matrix,
    output: Matrix,
}

impl GaussWorkspace {
    pub fn spec(&self) -> PoolSpec {
        self.spec
    }

    pub fn z(&self) -> &Matrix {
        &self.z
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn kernel(&self) -> &Matrix {
        &self.kernel
    }

    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

pub struct GaussGrads {
    pub input: Matrix,
    pub mu: Vec<f64>,
    pub beta: Vec<f64>,
    pub eta: Vec<f64>,
}

/// Gaussian-kernel pooling of `z = η·tanh(a)`:
/// `f_k = Σ_i u_i z_i`, `u_i = v_i / Σ v`, `v_i = exp(-β_k/2 (z_i - μ_k)²)`.
pub fn gauss_forward(a: &Matrix, spec: PoolSpec, params: &GaussPoolParams) -> Result<(Matrix, GaussWorkspace)> {
    let n_params = params.len_checked()?;
    spec.check_input("gauss_forward", a, n_params)?;
    let (batch, pools, k) = (a.rows(), spec.num_pools, spec.pool_size);
    let activation = a.map(f64::tanh);
    let mut z = Matrix::zeros(batch, pools * k);
    let mut kernel = Matrix::zeros(batch, pools * k);
    let mut weights = Matrix::zeros(batch, pools * k);
    let mut kernel_sum = Matrix::zeros(batch, pools);
    let mut output = Matrix::zeros(batch, pools);
    let mut expo = vec![0.0; k];

    for n in 0..batch {
        for pool in 0..pools {
            let (mu, beta, eta) = (params.mu[pool], params.beta[pool], params.eta[pool]);
            let span = pool * k..(pool + 1) * k;
            let t = &activation.row(n)[span.clone()];
            let zr = &mut z.row_mut(n)[span.clone()];
            for (zi, &ti) in zr.iter_mut().zip(t) {
                *zi = eta * ti;
            }
            let zr = &z.row(n)[span.clone()];
            let mut emax = f64::NEG_INFINITY;
            for (e, &zi) in expo.iter_mut().zip(zr) {
                *e = (-0.5 * beta * (zi - mu).powi(2)).clamp(f64::MIN, f64::MAX);
                emax = emax.max(*e);
            }
            let vr = &mut kernel.row_mut(n)[span.clone()];
            let mut sum = 0.0;
            for (v, &e) in vr.iter_mut().zip(&expo) {
                *v = (e - emax).exp();
                sum += *v;
            }
            kernel_sum.set(n, pool, sum);
            let vr = &kernel.row(n)[span.clone()];
            let ur = &mut weights.row_mut(n)[span.clone()];
            for (u, &v) in ur.iter_mut().zip(vr) {
                *u = v / sum;
            }
            // Σ u_i z_i, accumulated relative to z_0 so tied values pool exactly.
            let z0 = zr[0];
            let centred: f64 = ur.iter().zip(zr).map(|(u, zi)| u * (zi - z0)).sum();
            output.set(n, pool, z0 + centred);
        }
    }

    let ws = GaussWorkspace {
        spec,
        params: params.clone(),
        activation,
        z,
        kernel,
        weights,
        kernel_sum,
        output: output.clone(),
    };
    Ok((output, ws))
}

/// Back-propagates through [`gauss_forward`].
///
/// With `J_u = ∂u/∂v` (`(1-u_i)/Σv` on the diagonal, `-u_i/Σv` elsewhere) and
/// the diagonal `J_v = ∂v/∂z` (`-β (z_i - μ) v_i`):
///
/// * `∂f/∂z = zᵀ (J_u J_v) + uᵀ`
/// * `∂f/∂μ = -Σ_i [zᵀ (J_u J_v)]_i`, since `∂v/∂μ = -∂v/∂z`
/// * `∂f/∂β = Σ_i [zᵀ J_u]_i ∂v_i/∂β` with `∂v_i/∂β = -½ (z_i - μ)² v_i`
/// * `∂f/∂η = Σ_i ∂f/∂z_i · tanh(a_i)` and `∂f/∂a_i = ∂f/∂z_i · η (1 - tanh²(a_i))`
pub fn gauss_backward(ws: &GaussWorkspace, grad_out: &Matrix) -> Result<GaussGrads> {
    let (batch, pools, k) = (ws.z.rows(), ws.spec.num_pools, ws.spec.pool_size);
    check_grad_out("gauss_backward", grad_out, batch, pools)?;
    let mut grad_input = Matrix::zeros(batch, pools * k);
    let mut grad_mu = vec![0.0; pools];
    let mut grad_beta = vec![0.0; pools];
    let mut grad_eta = vec![0.0; pools];
    let mut jac_u = vec![0.0; k * k];
    let mut zt_ju = vec![0.0; k];

    for n in 0..batch {
        for pool in 0..pools {
            let g = grad_out.get(n, pool);
            if g == 0.0 {
                continue;
            }
            let (mu, beta, eta) = (ws.params.mu[pool], ws.params.beta[pool], ws.params.eta[pool]);
            let span = pool * k..(pool + 1) * k;
            let z = &ws.z.row(n)[span.clone()];
            let v = &ws.kernel.row(n)[span.clone()];
            let u = &ws.weights.row(n)[span.clone()];
            let t = &ws.activation.row(n)[span.clone()];
            let sum_v = ws.kernel_sum.get(n, pool);

            for i in 0..k {
                for j in 0..k {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    jac_u[i * k + j] = (delta - u[i]) / sum_v;
                }
            }
            // 1ᵀ J_u = 0, so z may be shifted by z_0 before the product; this
            // makes tied pools yield exact zeros.
            let z0 = z[0];
            for (j, out) in zt_ju.iter_mut().enumerate() {
                *out = (0..k).map(|i| (z[i] - z0) * jac_u[i * k + j]).sum();
            }

            let mut kernel_path = 0.0;
            let mut d_beta = 0.0;
            let mut d_eta = 0.0;
            let grad_a = &mut grad_input.row_mut(n)[span.clone()];
            for i in 0..k {
                let dv_dz = -beta * (z[i] - mu) * v[i];
                let dv_dbeta = -0.5 * (z[i] - mu).powi(2) * v[i];
                let through_kernel = zt_ju[i] * dv_dz;
                kernel_path += through_kernel;
                d_beta += zt_ju[i] * dv_dbeta;
                let df_dz = through_kernel + u[i];
                d_eta += df_dz * t[i];
                grad_a[i] = g * df_dz * eta * (1.0 - t[i] * t[i]);
            }
            grad_mu[pool] -= g * kernel_path;
            grad_beta[pool] += g * d_beta;
            grad_eta[pool] += g * d_eta;
        }
    }
    Ok(GaussGrads {
        input: grad_input,
        mu: grad_mu,
        beta: grad_beta,
        eta: grad_eta,
    })
}
