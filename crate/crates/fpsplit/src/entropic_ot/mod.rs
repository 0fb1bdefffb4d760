//! Dissipative phase: the perturbed cost `c_h`, entropic transport by
//! log-domain scaling, the entropic JKO step, and exact small-instance oracles.

mod banded;
mod euler_lagrange;
mod exact;
mod jko;
pub(crate) mod kernel;
mod sinkhorn;
mod solver;

use nalgebra::DMatrix;

use crate::error::{config, Result};
use crate::grid::Grid;
use crate::model::{DiffusionMatrix, PSD_TOL};

pub use euler_lagrange::{euler_lagrange_residual, euler_lagrange_residuals, TestFunction};
pub use exact::{exact_jko_small, exact_ot_small, ExactOt, ORACLE_MAX_CELLS, ORACLE_MAX_PAIRS};
pub use jko::{jko_step, JkoOptions, JkoResult, JkoSolver, TransportPlan};
pub use sinkhorn::{sinkhorn, wasserstein2, ScalingState, SinkhornOptions};
pub use solver::{JkoMethod, ScalingInit};

/// `A_h = A + hI` (or `A` itself when unperturbed), its inverse, and `ε`.
#[derive(Clone, Debug)]
pub struct CostSpec {
    a: DiffusionMatrix,
    h: f64,
    epsilon: f64,
    unperturbed: bool,
    a_h: Vec<f64>,
    a_h_inv: Vec<f64>,
    lambda_min: f64,
    lambda_max: f64,
}

/// Factorizes `A_h` once for the cost `⟨A_h⁻¹(x−y), x−y⟩`.
pub fn build_cost(grid: &Grid, a: &DiffusionMatrix, h: f64, unperturbed: bool) -> Result<CostSpec> {
    let d = a.dim();
    if grid.dim() != d {
        return config(format!("diffusion matrix is {d}-dimensional but the grid is {}-dimensional", grid.dim()));
    }
    if unperturbed {
        if a.lambda_min() <= PSD_TOL {
            return config("unperturbed cost requested but the diffusion matrix is singular");
        }
    } else if !(h > 0.0 && h.is_finite()) {
        return config("the perturbed cost needs h > 0");
    }
    let mut m = a.to_matrix();
    if !unperturbed {
        for i in 0..d {
            m[(i, i)] += h;
        }
    }
    let chol = m.clone().cholesky().ok_or_else(|| crate::Error::Config("A_h is not positive definite".into()))?;
    let inv: DMatrix<f64> = chol.inverse();
    let mut ev: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    let flat = |x: &DMatrix<f64>| (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| x[(i, j)]).collect();
    Ok(CostSpec {
        a: a.clone(),
        h,
        epsilon: 0.0,
        unperturbed,
        a_h: flat(&m),
        a_h_inv: flat(&inv),
        lambda_min: ev[0],
        lambda_max: ev[d - 1],
    })
}

impl CostSpec {
    /// Sets the entropic weight `ε ≥ 0`.
    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return config("epsilon must be finite and >= 0");
        }
        self.epsilon = epsilon;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn unperturbed(&self) -> bool {
        self.unperturbed
    }

    pub fn diffusion(&self) -> &DiffusionMatrix {
        &self.a
    }

    /// Row-major `A_h`.
    pub fn a_h(&self) -> &[f64] {
        &self.a_h
    }

    pub fn a_h_inverse(&self) -> &[f64] {
        &self.a_h_inv
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    /// Diagonal of `A_h` when it has no off-diagonal entries.
    pub fn diagonal(&self) -> Option<Vec<f64>> {
        let d = self.dim();
        let off = (0..d).any(|i| (0..d).any(|j| i != j && self.a_h[i * d + j] != 0.0));
        (!off).then(|| (0..d).map(|i| self.a_h[i * d + i]).collect())
    }

    /// `c_h(x, y)`.
    pub fn cost(&self, x: &[f64], y: &[f64]) -> f64 {
        let d = self.dim();
        let mut s = 0.0;
        for i in 0..d {
            let di = x[i] - y[i];
            for j in 0..d {
                s += di * self.a_h_inv[i * d + j] * (x[j] - y[j]);
            }
        }
        s
    }

    /// Same matrix with `ε` and `h` replaced (Euclidean cost for `W₂`).
    pub(crate) fn euclidean(d: usize, epsilon: f64) -> CostSpec {
        let eye: Vec<f64> = (0..d * d).map(|e| if e / d == e % d { 1.0 } else { 0.0 }).collect();
        CostSpec {
            a: DiffusionMatrix::identity(d),
            h: 0.0,
            epsilon,
            unperturbed: true,
            a_h: eye.clone(),
            a_h_inv: eye,
            lambda_min: 1.0,
            lambda_max: 1.0,
        }
    }
}
