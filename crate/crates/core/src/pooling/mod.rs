//! Differentiable pooling kernels: Lp-norm, Gaussian-kernel, and LHUC scaling.
//!
//! Pools are non-overlapping and contiguous: pool `k` owns input columns
//! `k*K .. (k+1)*K` of a `batch × P·K` pre-activation matrix and produces
//! column `k` of a `batch × P` output.

mod gauss;
mod lhuc;
mod lp;

use serde::{Deserialize, Serialize};

pub use gauss::{gauss_backward, gauss_forward, GaussGrads, GaussPoolParams, GaussWorkspace};
pub use lhuc::{lhuc_amplitude, lhuc_apply, lhuc_backward, LhucParams};
pub use lp::{effective_order, lp_backward, lp_forward, LpGrads, LpPoolParams, LpWorkspace, LP_EPS};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub pool_size: usize,
    pub num_pools: usize,
    /// Divide the pooled sum by `pool_size` before taking the root.
    #[serde(default)]
    pub normalize: bool,
}

impl PoolSpec {
    pub fn new(pool_size: usize, num_pools: usize) -> Self {
        Self {
            pool_size,
            num_pools,
            normalize: false,
        }
    }

    pub fn normalized(mut self, on: bool) -> Self {
        self.normalize = on;
        self
    }

    pub fn input_width(&self) -> usize {
        self.pool_size * self.num_pools
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 || self.num_pools == 0 {
            return Err(Error::Config(format!(
                "pool size and pool count must be positive (K={}, P={})",
                self.pool_size, self.num_pools
            )));
        }
        Ok(())
    }

    pub(crate) fn check_input(&self, op: &'static str, a: &Matrix, n_params: usize) -> Result<()> {
        self.validate()?;
        if a.cols() != self.input_width() {
            return Err(Error::dim(
                op,
                format!("{} input columns (P={} x K={})", self.input_width(), self.num_pools, self.pool_size),
                a.cols(),
            ));
        }
        if n_params != self.num_pools {
            return Err(Error::dim(op, format!("{} pool parameters", self.num_pools), n_params));
        }
        Ok(())
    }
}

pub(crate) fn check_grad_out(op: &'static str, grad_out: &Matrix, batch: usize, pools: usize) -> Result<()> {
    if grad_out.shape() != (batch, pools) {
        return Err(Error::Contract(format!(
            "{op}: upstream gradient is {}x{} but the workspace holds a {batch}x{pools} forward pass",
            grad_out.rows(),
            grad_out.cols()
        )));
    }
    Ok(())
}
