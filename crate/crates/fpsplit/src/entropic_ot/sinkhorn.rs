//! Balanced entropic transport between two grid densities by log-domain
//! scaling, and the `W₂` estimator built on it.

use super::exact::{exact_ot_small, ORACLE_MAX_PAIRS};
use super::kernel::{AxisKernel, LogKernel};
use super::CostSpec;
use crate::error::{config, Error, Result};
use crate::grid::Density;

const NEG: f64 = f64::NEG_INFINITY;

/// Solver controls for [`sinkhorn`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornOptions {
    /// Total-variation tolerance on the first marginal.
    pub tol_marg: f64,
    pub max_iter: usize,
    /// Largest cell count for a dense (non-diagonal `A_h`) kernel.
    pub dense_limit: usize,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self { tol_marg: 1e-8, max_iter: 100_000, dense_limit: 4096 }
    }
}

/// Log-scalings of a converged (or stopped) scaling run.
///
/// The coupling density with respect to the product quadrature measure is
/// `γ_ij = exp(log_a_i + log_b_j − c_ij/ε)`.
#[derive(Clone, Debug)]
pub struct ScalingState {
    pub log_a: Vec<f64>,
    pub log_b: Vec<f64>,
    pub epsilon: f64,
    pub iterations: usize,
    /// First- and second-marginal TV residuals.
    pub residual_first: f64,
    pub residual_second: f64,
    /// Dual objective after each iteration (non-decreasing).
    pub dual_history: Vec<f64>,
    pub(crate) kernel: LogKernel,
    pub(crate) w: f64,
}

impl ScalingState {
    /// Mass `γ_ij w²` the plan moves from cell `i` to cell `j`.
    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        let e = self.log_a[i] + self.log_b[j] - self.kernel.entry(i, j);
        if e.is_finite() {
            e.exp() * self.w * self.w
        } else {
            0.0
        }
    }
}

pub(crate) fn kernel_for(mu: &Density, cost: &CostSpec, eps: f64, dense_limit: usize) -> Result<LogKernel> {
    let g = mu.grid();
    match cost.diagonal() {
        Some(a) => Ok(LogKernel::Separable {
            shape: g.shape(),
            axes: (0..g.dim())
                .map(|k| {
                    let ax = g.axis(k);
                    let dx = ax.spacing();
                    AxisKernel::new(ax.n, dx, dx * dx / (a[k] * eps), ax.n)
                })
                .collect(),
        }),
        None => {
            let n = g.len();
            if n > dense_limit {
                return Err(Error::Size(format!("dense kernel needs {n} cells, above the limit {dense_limit}")));
            }
            let c = g.centers();
            let d = g.dim();
            Ok(LogKernel::Dense {
                n,
                c: (0..n * n).map(|e| cost.cost(&c[(e / n) * d..(e / n + 1) * d], &c[(e % n) * d..(e % n + 1) * d]) / eps).collect(),
            })
        }
    }
}

/// Entropic transport value `(c_h, γ) + ε H(γ)` at the produced plan.
pub fn sinkhorn(mu: &Density, nu: &Density, cost: &CostSpec, tol_marg: f64, max_iter: usize) -> Result<(ScalingState, f64)> {
    sinkhorn_with(mu, nu, cost, &SinkhornOptions { tol_marg, max_iter, ..SinkhornOptions::default() })
}

pub(crate) fn sinkhorn_with(mu: &Density, nu: &Density, cost: &CostSpec, opts: &SinkhornOptions) -> Result<(ScalingState, f64)> {
    if mu.grid() != nu.grid() {
        return config("sinkhorn needs both densities on the same grid");
    }
    if cost.dim() != mu.grid().dim() {
        return config("cost and grid dimensions differ");
    }
    let eps = cost.epsilon();
    if !(eps > 0.0) {
        return config("sinkhorn needs epsilon > 0; use exact_ot_small for epsilon = 0");
    }
    let kernel = kernel_for(mu, cost, eps, opts.dense_limit)?;
    let w = mu.grid().cell_volume();
    let lw = w.ln();
    let n = kernel.len();
    let lmu: Vec<f64> = mu.values().iter().map(|&m| if m > 0.0 { m.ln() } else { NEG }).collect();
    let lnu: Vec<f64> = nu.values().iter().map(|&m| if m > 0.0 { m.ln() } else { NEG }).collect();
    let mut u: Vec<f64> = lmu.iter().map(|l| if l.is_finite() { 0.0 } else { NEG }).collect();
    let mut v = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut history = Vec::new();
    let update = |src: &[f64], target: &[f64], dst: &mut [f64], t: &mut [f64]| {
        kernel.lse(src, t, None);
        for i in 0..n {
            dst[i] = if target[i].is_finite() { target[i] - lw - t[i] } else { NEG };
        }
    };
    let tv = |x: &[f64], t: &mut [f64], other: &[f64], m: &[f64]| -> f64 {
        kernel.lse(other, t, None);
        let mut s = 0.0;
        for i in 0..n {
            let r = if x[i].is_finite() && t[i].is_finite() { (x[i] + lw + t[i]).exp() } else { 0.0 };
            s += (r - m[i]).abs();
        }
        s * w
    };
    let mut it = 0;
    loop {
        update(&u, &lnu, &mut v, &mut t);
        // After the target update the second marginal is exact and the plan has unit mass.
        let dual = eps * w * (dot_finite(&u, mu.values()) + dot_finite(&v, nu.values())) - eps;
        history.push(dual);
        let r1 = tv(&u, &mut t, &v, mu.values());
        it += 1;
        if !r1.is_finite() {
            return Err(Error::NonConvergence { iterations: it, residual: r1 });
        }
        if r1 <= opts.tol_marg {
            let r2 = tv(&v, &mut t, &u, nu.values());
            let value = primal(&kernel, &u, &v, w, eps);
            let state = ScalingState {
                log_a: u,
                log_b: v,
                epsilon: eps,
                iterations: it,
                residual_first: r1,
                residual_second: r2,
                dual_history: history,
                kernel,
                w,
            };
            return Ok((state, value));
        }
        if it >= opts.max_iter {
            return Err(Error::NonConvergence { iterations: it, residual: r1 });
        }
        update(&v, &lmu, &mut u, &mut t);
    }
}

fn dot_finite(x: &[f64], m: &[f64]) -> f64 {
    x.iter().zip(m).filter(|(x, m)| x.is_finite() && **m > 0.0).map(|(x, m)| x * m).sum()
}

/// `ε (Σ u r w + Σ v s w)` with `r, s` the plan's marginals: equals `(c, γ) + ε H(γ)`.
fn primal(kernel: &LogKernel, u: &[f64], v: &[f64], w: f64, eps: f64) -> f64 {
    let n = u.len();
    let lw = w.ln();
    let mut t = vec![0.0; n];
    let mut s = 0.0;
    kernel.lse(v, &mut t, None);
    for i in 0..n {
        if u[i].is_finite() && t[i].is_finite() {
            s += u[i] * (u[i] + lw + t[i]).exp();
        }
    }
    kernel.lse(u, &mut t, None);
    for j in 0..n {
        if v[j].is_finite() && t[j].is_finite() {
            s += v[j] * (v[j] + lw + t[j]).exp();
        }
    }
    eps * s * w
}

/// `W₂(μ, ν)` for densities on one grid.
///
/// One dimension uses the monotone rearrangement; small instances use the
/// exact transportation simplex; larger ones extrapolate two entropic values
/// `2 W(ε/2) − W(ε)` to remove the leading entropic bias.
pub fn wasserstein2(mu: &Density, nu: &Density) -> Result<f64> {
    let g = mu.grid();
    if g != nu.grid() {
        return config("wasserstein2 needs both densities on the same grid");
    }
    let d = g.dim();
    if d == 1 {
        return Ok(quantile_w2(mu, nu).sqrt());
    }
    let support = |x: &Density| x.values().iter().filter(|v| **v > 0.0).count();
    let euclid = CostSpec::euclidean(d, 0.0);
    if support(mu) * support(nu) <= ORACLE_MAX_PAIRS {
        return Ok(exact_ot_small(mu, nu, &euclid)?.value.max(0.0).sqrt());
    }
    let dx = (0..d).map(|k| g.spacing(k)).fold(0.0, f64::max);
    let eps = 4.0 * dx * dx;
    let opts = SinkhornOptions { tol_marg: 1e-7, max_iter: 200_000, dense_limit: 0 };
    let entropic = |e: f64| -> Result<f64> {
        let c = CostSpec::euclidean(d, e);
        let (state, _) = sinkhorn_with(mu, nu, &c, &opts)?;
        // Transport part (c, γ) of the plan.
        Ok(transport_part(&state, mu))
    };
    let (c1, c2) = (entropic(eps)?, entropic(eps / 2.0)?);
    Ok((2.0 * c2 - c1).max(0.0).sqrt())
}

/// `(c, γ)` of a scaling state whose kernel is the Euclidean cost over `ε`.
fn transport_part(s: &ScalingState, mu: &Density) -> f64 {
    use super::kernel::Weight;
    let n = s.log_a.len();
    let lw = s.w.ln();
    let axes = mu.grid().dim();
    let mut t = vec![0.0; n];
    let mut c = 0.0;
    for k in 0..axes {
        s.kernel.lse(&s.log_b, &mut t, Some((k, Weight::Cost)));
        for i in 0..n {
            if s.log_a[i].is_finite() && t[i].is_finite() {
                c += (s.log_a[i] + lw + t[i]).exp() * s.w;
            }
        }
    }
    c * s.epsilon
}

/// Squared `W₂` between 1-d cell densities (piecewise constant on cells).
fn quantile_w2(mu: &Density, nu: &Density) -> f64 {
    let ax = mu.grid().axis(0);
    let dx = ax.spacing();
    let w = mu.grid().cell_volume();
    let masses = |x: &Density| -> Vec<f64> { x.values().iter().map(|v| v * w).collect() };
    let (a, b) = (masses(mu), masses(nu));
    // Quantile function of a piecewise-uniform density: linear inside each cell.
    let mut breaks: Vec<f64> = Vec::with_capacity(2 * a.len() + 2);
    let cum = |m: &[f64]| -> Vec<f64> {
        let mut c = vec![0.0; m.len() + 1];
        for i in 0..m.len() {
            c[i + 1] = c[i] + m[i];
        }
        let t = c[m.len()];
        c.iter_mut().for_each(|x| *x /= t);
        c
    };
    let (ca, cb) = (cum(&a), cum(&b));
    breaks.extend_from_slice(&ca);
    breaks.extend_from_slice(&cb);
    breaks.sort_by(|x, y| x.total_cmp(y));
    breaks.dedup();
    let quantile = |c: &[f64], p: f64| -> f64 {
        let i = match c.binary_search_by(|x| x.total_cmp(&p)) {
            Ok(i) => i.min(c.len() - 2),
            Err(i) => i.saturating_sub(1).min(c.len() - 2),
        };
        // Skip empty cells.
        let mut i = i;
        while i + 1 < c.len() - 1 && c[i + 1] - c[i] <= 0.0 {
            i += 1;
        }
        let m = c[i + 1] - c[i];
        let frac = if m > 0.0 { ((p - c[i]) / m).clamp(0.0, 1.0) } else { 0.5 };
        ax.lo + dx * (i as f64 + frac)
    };
    let mut s = 0.0;
    for k in 0..breaks.len() - 1 {
        let (p0, p1) = (breaks[k], breaks[k + 1]);
        if p1 <= p0 {
            continue;
        }
        // Both quantiles are affine on (p0, p1): integrate the squared difference exactly.
        let e = 1e-12 * (p1 - p0);
        let (qa0, qa1) = (quantile(&ca, p0 + e), quantile(&ca, p1 - e));
        let (qb0, qb1) = (quantile(&cb, p0 + e), quantile(&cb, p1 - e));
        let (d0, d1) = (qa0 - qb0, qa1 - qb1);
        s += (p1 - p0) * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0;
    }
    s
}
