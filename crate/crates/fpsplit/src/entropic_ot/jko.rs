//! The entropic JKO step `argmin_ρ (1/2h) W_{c_h,ε}(ρ̃, ρ) + F(ρ)` on a grid.
//!
//! For diagonal `A_h` the problem splits into independent fibers along the
//! axes whose diffusion length `√(2h a_k)` is far below one cell (those axes
//! carry the identity plan), and each fiber is solved on a sub-grid refined
//! until the entropic kernel width is resolved. Non-diagonal `A_h` uses a
//! dense kernel on the whole (refined) grid.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernel::{AxisKernel, LogKernel, CUT};
use super::solver::{self, CoreOptions, JkoMethod, Problem, ScalingInit, Solution};
use super::CostSpec;
use crate::error::{config, Error, Result};
use crate::grid::{Density, Grid};
use crate::model::Model;

/// Solver controls for the JKO step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JkoOptions {
    pub method: JkoMethod,
    /// First-marginal total-variation tolerance.
    pub tol_marg: f64,
    pub max_iter: usize,
    /// Scaling sweeps before each Newton step.
    pub sweeps_per_newton: usize,
    /// Largest sub-grid refinement factor per axis (1 disables refinement).
    pub max_refine: usize,
    /// Largest number of sub-grid cells in one separable fiber.
    pub cell_budget: usize,
    /// Largest number of cells for the dense kernel.
    pub dense_limit: usize,
    /// Solve a decreasing sequence of `ε` down to the target (small instances).
    pub continuation: bool,
    pub init: ScalingInit,
    /// Keep the sub-grid plans for Euler-Lagrange diagnostics.
    pub keep_plan: bool,
}

impl Default for JkoOptions {
    fn default() -> Self {
        Self {
            method: JkoMethod::Newton,
            tol_marg: 1e-8,
            max_iter: 100_000,
            sweeps_per_newton: 2,
            max_refine: 32,
            cell_budget: 1 << 16,
            dense_limit: 2048,
            continuation: false,
            init: ScalingInit::Ones,
            keep_plan: false,
        }
    }
}

impl JkoOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_marg > 0.0) {
            return config("tol_marg must be positive");
        }
        if self.max_iter == 0 || self.max_refine == 0 || self.cell_budget == 0 || self.dense_limit == 0 {
            return config("max_iter, max_refine, cell_budget and dense_limit must be positive");
        }
        Ok(())
    }
}

/// One independent sub-problem of a JKO step.
#[derive(Clone, Debug)]
pub(crate) struct FiberPlan {
    /// `None` for an identity plan on the coarse cells.
    pub kernel: Option<LogKernel>,
    /// Grid axes spanned by the kernel, in kernel order.
    pub active: Vec<usize>,
    /// Cell centers, `len × d` in full coordinates.
    pub centers: Vec<f64>,
    pub w: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub rho: Vec<f64>,
}

/// Sub-grid plans of a JKO step.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub(crate) fibers: Vec<FiberPlan>,
    pub(crate) dim: usize,
    pub(crate) epsilon: f64,
    pub(crate) h: f64,
    pub(crate) a_h: Vec<f64>,
}

/// Outcome of one JKO step.
#[derive(Clone, Debug)]
pub struct JkoResult {
    pub rho_next: Density,
    /// `(c_h, γ)`.
    pub transport_cost: f64,
    /// `H(γ)` with respect to the product quadrature measure.
    pub plan_entropy: f64,
    /// `(1/2h)((c_h,γ) + ε H(γ)) + F(ρ)` on the solve grid.
    pub objective: f64,
    /// Objective of the competitor `ρ = ρ̃` with the identity coupling.
    pub competitor: f64,
    /// `H` of the identity coupling of `ρ̃`.
    pub identity_entropy: f64,
    pub iterations: usize,
    /// Summed first-marginal TV residual.
    pub residual: f64,
    /// Sub-grid factor per axis (1 for frozen axes).
    pub refinement: Vec<usize>,
    pub plan: Option<TransportPlan>,
}

impl JkoResult {
    /// `(ε/2h) max(0, H_id − H(γ))`, the slack in the minimizing-movement inequality.
    pub fn entropic_slack(&self, epsilon: f64, h: f64) -> f64 {
        epsilon / (2.0 * h) * (self.identity_entropy - self.plan_entropy).max(0.0)
    }
}

/// JKO solver carrying warm-start potentials between steps.
#[derive(Clone, Debug, Default)]
pub struct JkoSolver {
    opts: JkoOptions,
    warm: HashMap<usize, (f64, Vec<f64>)>,
}

#[derive(Default)]
struct Totals {
    cost: f64,
    entropy: f64,
    objective: f64,
    competitor: f64,
    identity_entropy: f64,
    iterations: usize,
    residual: f64,
}

fn xlogy_sum(mu: &[f64], w: f64) -> f64 {
    mu.iter().filter(|m| **m > 0.0).map(|m| m * (m / w).ln()).sum::<f64>() * w
}

fn free_energy(rho: &[f64], f: &[f64], w: f64) -> f64 {
    rho.iter().zip(f).filter(|(r, _)| **r > 0.0).map(|(r, f)| (f + r.ln()) * r).sum::<f64>() * w
}

impl JkoSolver {
    pub fn new(opts: JkoOptions) -> Self {
        Self { opts, warm: HashMap::new() }
    }

    pub fn options(&self) -> &JkoOptions {
        &self.opts
    }

    /// Drops warm-start state.
    pub fn reset(&mut self) {
        self.warm.clear();
    }

    pub fn step(&mut self, mu: &Density, cost: &CostSpec, model: &Model) -> Result<JkoResult> {
        self.opts.validate()?;
        let g = mu.grid_arc().clone();
        let d = g.dim();
        if cost.dim() != d || model.dim() != d {
            return config(format!("cost ({}), model ({}) and grid ({d}) dimensions differ", cost.dim(), model.dim()));
        }
        let eps = cost.epsilon();
        let h = cost.h();
        if !(eps > 0.0) {
            return config("the entropic JKO step needs epsilon > 0; use exact_jko_small for epsilon = 0");
        }
        if !(h > 0.0) {
            return config("the JKO step needs h > 0");
        }
        match cost.diagonal() {
            Some(a) => self.fibered(mu, &g, &a, cost, model),
            None => self.dense(mu, &g, cost, model),
        }
    }

    fn core(&self) -> CoreOptions {
        CoreOptions {
            method: self.opts.method,
            tol: self.opts.tol_marg,
            max_iter: self.opts.max_iter,
            sweeps: self.opts.sweeps_per_newton,
        }
    }

    fn warm_start(&self, key: usize, mu: &[f64], eps: f64) -> Vec<f64> {
        match self.warm.get(&key) {
            Some((e, u)) if u.len() == mu.len() => {
                let s = e / eps;
                u.iter().zip(mu).map(|(&x, &m)| if m > 0.0 { if x.is_finite() { x * s } else { 0.0 } } else { f64::NEG_INFINITY }).collect()
            }
            _ => solver::initial_u(mu, self.opts.init),
        }
    }

    /// Solves one sub-problem, optionally along a decreasing `ε` sequence.
    fn solve_one(
        &self,
        build: &dyn Fn(f64) -> LogKernel,
        mu: &[f64],
        f: &[f64],
        w: f64,
        eps: f64,
        h: f64,
        u0: Vec<f64>,
    ) -> Result<(LogKernel, Solution)> {
        let mut levels = vec![eps];
        if self.opts.continuation {
            let mut e = eps;
            while e * 10.0 <= 1e-2 {
                e *= 10.0;
                levels.push(e);
            }
            levels.reverse();
        }
        let mut u = u0;
        let mut prev = levels[0];
        let mut iterations = 0;
        let last = levels.len() - 1;
        for (k, &e) in levels.iter().enumerate() {
            let s = prev / e;
            u.iter_mut().filter(|x| x.is_finite()).for_each(|x| *x *= s);
            prev = e;
            let kernel = build(e);
            let mut opts = self.core();
            if k < last {
                opts.tol = opts.tol.max(1e-6);
            }
            let p = Problem { kernel: &kernel, mu, f, w, eps: e, h };
            let sol = solver::solve(&p, u, &opts)?;
            iterations += sol.iterations;
            if k == last {
                let sol = Solution { iterations, ..sol };
                return Ok((kernel, sol));
            }
            u = sol.u;
        }
        unreachable!("at least one level")
    }

    fn fibered(&mut self, mu: &Density, g: &Arc<Grid>, a: &[f64], cost: &CostSpec, model: &Model) -> Result<JkoResult> {
        let d = g.dim();
        let (eps, h) = (cost.epsilon(), cost.h());
        let w = g.cell_volume();
        let vals = mu.values();
        let fc = model.potential_on(g);
        let strides = g.strides().to_vec();
        let thr = 1e-12 * vals.iter().cloned().fold(0.0, f64::max);
        // Largest free-energy slope between significant neighbors, per axis.
        let mut grad = vec![0.0f64; d];
        let mut idx = vec![0usize; d];
        for c in 0..g.len() {
            if vals[c] <= thr {
                continue;
            }
            g.multi_index(c, &mut idx);
            for k in 0..d {
                if idx[k] + 1 < g.axis(k).n {
                    let c2 = c + strides[k];
                    if vals[c2] > thr {
                        let s = ((vals[c2].ln() + fc[c2]) - (vals[c].ln() + fc[c])).abs() / g.spacing(k);
                        grad[k] = grad[k].max(s);
                    }
                }
            }
        }
        let frozen: Vec<bool> = (0..d)
            .map(|k| {
                let dx = g.spacing(k);
                g.axis(k).n == 1 || (dx * dx / (2.0 * h * a[k]) > CUT && 2.5 * h * a[k] * grad[k] < dx)
            })
            .collect();
        let active: Vec<usize> = (0..d).filter(|&k| !frozen[k]).collect();
        let mut refine = vec![1usize; d];
        for &k in &active {
            let std = (eps * a[k] / 2.0).sqrt();
            refine[k] = ((g.spacing(k) / (2.0 * std)).ceil() as usize).clamp(1, self.opts.max_refine);
        }
        let fine_cells = |r: &[usize]| active.iter().map(|&k| g.axis(k).n * r[k]).product::<usize>();
        while fine_cells(&refine) > self.opts.cell_budget {
            let k = *active.iter().max_by_key(|&&k| refine[k]).expect("active axes");
            if refine[k] == 1 {
                break;
            }
            refine[k] -= 1;
        }
        let bands: Vec<usize> = (0..d)
            .map(|k| {
                if frozen[k] {
                    return 0;
                }
                let dxf = g.spacing(k) / refine[k] as f64;
                let reach = (CUT * eps * a[k]).sqrt() + 1.25 * h * a[k] * grad[k];
                (reach / dxf).ceil() as usize + 2
            })
            .collect();

        let frozen_axes: Vec<usize> = (0..d).filter(|&k| frozen[k]).collect();
        let n_fibers: usize = frozen_axes.iter().map(|&k| g.axis(k).n).product();
        let coarse_shape: Vec<usize> = active.iter().map(|&k| g.axis(k).n).collect();
        let fine_shape: Vec<usize> = active.iter().map(|&k| g.axis(k).n * refine[k]).collect();
        let n_coarse: usize = coarse_shape.iter().product();
        let n_fine: usize = fine_shape.iter().product();
        let r_total: usize = active.iter().map(|&k| refine[k]).product();
        let w_f = w / r_total as f64;

        let mut out = vec![0.0; g.len()];
        let mut tot = Totals::default();
        let mut plans = Vec::new();
        let keep = self.opts.keep_plan;
        let mut fidx = vec![0usize; d];
        let mut center = vec![0.0; d];

        for fiber in 0..n_fibers {
            // Multi-index on the frozen axes.
            let mut rem = fiber;
            for &k in frozen_axes.iter().rev() {
                fidx[k] = rem % g.axis(k).n;
                rem /= g.axis(k).n;
            }
            let coarse_flat = |sub: usize, idx: &mut Vec<usize>| -> usize {
                let mut rem = sub;
                for (t, &k) in active.iter().enumerate().rev() {
                    idx[k] = rem % coarse_shape[t];
                    rem /= coarse_shape[t];
                }
                for &k in &frozen_axes {
                    idx[k] = fidx[k];
                }
                g.flat(idx)
            };
            let mut work = vec![0usize; d];
            let cells: Vec<usize> = (0..n_coarse).map(|s| coarse_flat(s, &mut work)).collect();
            let mu_c: Vec<f64> = cells.iter().map(|&c| vals[c]).collect();
            let mass: f64 = mu_c.iter().sum::<f64>() * w;
            if active.is_empty() || mass <= 1e-15 {
                let f_c: Vec<f64> = cells.iter().map(|&c| fc[c]).collect();
                let hid = xlogy_sum(&mu_c, w);
                let fe = free_energy(&mu_c, &f_c, w);
                tot.entropy += hid;
                tot.identity_entropy += hid;
                tot.objective += eps * hid / (2.0 * h) + fe;
                tot.competitor += eps * hid / (2.0 * h) + fe;
                for &c in &cells {
                    out[c] = vals[c];
                }
                if keep {
                    let centers = cells.iter().flat_map(|&c| g.center(c)).collect();
                    plans.push(FiberPlan { kernel: None, active: vec![], centers, w, u: vec![], v: vec![], rho: mu_c });
                }
                continue;
            }
            // Prolongation to the sub-grid and potential at sub-grid centers.
            let mut parent = vec![0usize; n_fine];
            let mut centers = vec![0.0; n_fine * d];
            let mut fsub = vec![0usize; active.len()];
            for s in 0..n_fine {
                let mut rem = s;
                for t in (0..active.len()).rev() {
                    fsub[t] = rem % fine_shape[t];
                    rem /= fine_shape[t];
                }
                let mut cs = 0;
                for (t, &k) in active.iter().enumerate() {
                    cs = cs * coarse_shape[t] + fsub[t] / refine[k];
                }
                parent[s] = cs;
                for k in 0..d {
                    center[k] = g.axis(k).center(fidx[k]);
                }
                for (t, &k) in active.iter().enumerate() {
                    let ax = g.axis(k);
                    let dxf = ax.spacing() / refine[k] as f64;
                    center[k] = ax.lo + dxf * (fsub[t] as f64 + 0.5);
                }
                centers[s * d..(s + 1) * d].copy_from_slice(&center);
            }
            let sub_refine: Vec<usize> = active.iter().map(|&k| refine[k]).collect();
            let mu_f = prolong(&mu_c, &coarse_shape, &sub_refine);
            let f_f: Vec<f64> = (0..n_fine).map(|s| model.potential(&centers[s * d..(s + 1) * d])).collect();
            let mut band = bands.clone();
            let u0 = self.warm_start(fiber, &mu_f, eps);
            let (kernel, sol) = loop {
                let build = |e: f64| LogKernel::Separable {
                    shape: fine_shape.clone(),
                    axes: active
                        .iter()
                        .enumerate()
                        .map(|(t, &k)| {
                            let dxf = g.spacing(k) / refine[k] as f64;
                            AxisKernel::new(fine_shape[t], dxf, dxf * dxf / (a[k] * e), band[k])
                        })
                        .collect(),
                };
                let (kernel, sol) = self.solve_one(&build, &mu_f, &f_f, w_f, eps, h, u0.clone())?;
                // Widen the band while the plan still carries mass at its edge.
                let LogKernel::Separable { axes, .. } = &kernel else { unreachable!() };
                let mut widened = false;
                for (t, &k) in active.iter().enumerate() {
                    if axes[t].band + 1 >= fine_shape[t] {
                        continue;
                    }
                    let edge = edge_mass(&kernel, t, &sol, w_f);
                    if edge > 1e-13 * mass {
                        band[k] = ((band[k] as f64 * 1.5).ceil() as usize).min(fine_shape[t] - 1);
                        widened = true;
                    }
                }
                if !widened {
                    break (kernel, sol);
                }
            };
            let p = Problem { kernel: &kernel, mu: &mu_f, f: &f_f, w: w_f, eps, h };
            let q = solver::summarize(&p, &sol);
            let hid = xlogy_sum(&mu_f, w_f);
            tot.cost += q.cost;
            tot.entropy += q.entropy;
            tot.objective += (q.cost + eps * q.entropy) / (2.0 * h) + q.free_energy;
            tot.competitor += eps * hid / (2.0 * h) + free_energy(&mu_f, &f_f, w_f);
            tot.identity_entropy += hid;
            tot.iterations += sol.iterations;
            tot.residual += sol.residual;
            let mut acc = vec![0.0; n_coarse];
            for s in 0..n_fine {
                acc[parent[s]] += sol.rho[s];
            }
            for (t, &c) in cells.iter().enumerate() {
                out[c] = acc[t] / r_total as f64;
            }
            self.warm.insert(fiber, (eps, sol.u.clone()));
            if keep {
                plans.push(FiberPlan { kernel: Some(kernel), active: active.clone(), centers, w: w_f, u: sol.u, v: sol.v, rho: sol.rho });
            }
        }
        self.finish(g, out, tot, refine, plans, cost)
    }

    fn dense(&mut self, mu: &Density, g: &Arc<Grid>, cost: &CostSpec, model: &Model) -> Result<JkoResult> {
        let d = g.dim();
        let (eps, h) = (cost.epsilon(), cost.h());
        let std = (eps * cost.lambda_min() / 2.0).sqrt();
        let dxmax = (0..d).map(|k| g.spacing(k)).fold(0.0, f64::max);
        let mut r = ((dxmax / (2.0 * std)).ceil() as usize).clamp(1, self.opts.max_refine);
        while r > 1 && g.len() * r.pow(d as u32) > self.opts.dense_limit {
            r -= 1;
        }
        if g.len() > self.opts.dense_limit {
            return Err(Error::Size(format!(
                "dense kernel needs {} cells, above the limit {}",
                g.len(),
                self.opts.dense_limit
            )));
        }
        let fine = g.refined(&vec![r; d]);
        let n = fine.len();
        let w_f = fine.cell_volume();
        let mut parent = vec![0usize; n];
        let mut fi = vec![0usize; d];
        let mut ci = vec![0usize; d];
        for s in 0..n {
            fine.multi_index(s, &mut fi);
            for k in 0..d {
                ci[k] = fi[k] / r;
            }
            parent[s] = g.flat(&ci);
        }
        let centers = fine.centers();
        let mu_f = prolong(mu.values(), &g.shape(), &vec![r; d]);
        let f_f: Vec<f64> = (0..n).map(|s| model.potential(&centers[s * d..(s + 1) * d])).collect();
        let pair_cost: Vec<f64> = (0..n * n)
            .map(|e| {
                let (i, j) = (e / n, e % n);
                cost.cost(&centers[i * d..(i + 1) * d], &centers[j * d..(j + 1) * d])
            })
            .collect();
        let build = |e: f64| LogKernel::Dense { n, c: pair_cost.iter().map(|c| c / e).collect() };
        let u0 = self.warm_start(0, &mu_f, eps);
        let (kernel, sol) = self.solve_one(&build, &mu_f, &f_f, w_f, eps, h, u0)?;
        let p = Problem { kernel: &kernel, mu: &mu_f, f: &f_f, w: w_f, eps, h };
        let q = solver::summarize(&p, &sol);
        let hid = xlogy_sum(&mu_f, w_f);
        let tot = Totals {
            cost: q.cost,
            entropy: q.entropy,
            objective: (q.cost + eps * q.entropy) / (2.0 * h) + q.free_energy,
            competitor: eps * hid / (2.0 * h) + free_energy(&mu_f, &f_f, w_f),
            identity_entropy: hid,
            iterations: sol.iterations,
            residual: sol.residual,
        };
        let scale = (r.pow(d as u32)) as f64;
        let mut out = vec![0.0; g.len()];
        for s in 0..n {
            out[parent[s]] += sol.rho[s] / scale;
        }
        self.warm.insert(0, (eps, sol.u.clone()));
        let plans = if self.opts.keep_plan {
            vec![FiberPlan { kernel: Some(kernel), active: (0..d).collect(), centers, w: w_f, u: sol.u, v: sol.v, rho: sol.rho }]
        } else {
            vec![]
        };
        self.finish(g, out, tot, vec![r; d], plans, cost)
    }

    fn finish(&self, g: &Arc<Grid>, out: Vec<f64>, tot: Totals, refinement: Vec<usize>, plans: Vec<FiberPlan>, cost: &CostSpec) -> Result<JkoResult> {
        let rho_next = Density::new(g.clone(), out)?;
        let plan = self.opts.keep_plan.then(|| TransportPlan {
            fibers: plans,
            dim: g.dim(),
            epsilon: cost.epsilon(),
            h: cost.h(),
            a_h: cost.a_h().to_vec(),
        });
        Ok(JkoResult {
            rho_next,
            transport_cost: tot.cost,
            plan_entropy: tot.entropy,
            objective: tot.objective,
            competitor: tot.competitor,
            identity_entropy: tot.identity_entropy,
            iterations: tot.iterations,
            residual: tot.residual,
            refinement,
            plan,
        })
    }
}

/// Plan mass on the outermost diagonal of the band along kernel axis `t`.
/// Conservative piecewise-quadratic prolongation, axis by axis.
///
/// Each coarse cell keeps its mass; a cell whose quadratic would turn negative
/// falls back to constant. Unlike a constant prolongation this does not inflate
/// the second moment by a fraction of `dx²` on every step.
fn prolong(coarse: &[f64], shape: &[usize], refine: &[usize]) -> Vec<f64> {
    let mut cur = coarse.to_vec();
    let mut dims = shape.to_vec();
    for t in 0..dims.len() {
        let r = refine[t];
        if r == 1 {
            continue;
        }
        let n = dims[t];
        let inner: usize = dims[t + 1..].iter().product();
        let outer: usize = dims[..t].iter().product();
        // Sub-cell means of ξ and ξ² on [-1/2, 1/2].
        let moments: Vec<(f64, f64)> = (0..r)
            .map(|j| {
                let (a, b) = (-0.5 + j as f64 / r as f64, -0.5 + (j + 1) as f64 / r as f64);
                (0.5 * (a + b), (b * b * b - a * a * a) * r as f64 / 3.0)
            })
            .collect();
        let mut next = vec![0.0; outer * n * r * inner];
        let mut sub = vec![0.0; r];
        for o in 0..outer {
            for q in 0..inner {
                let at = |i: usize| cur[(o * n + i) * inner + q];
                for i in 0..n {
                    let c = at(i);
                    let left = if i > 0 { at(i - 1) } else { c };
                    let right = if i + 1 < n { at(i + 1) } else { c };
                    let slope = 0.5 * (right - left);
                    let curv = 0.5 * (right - 2.0 * c + left);
                    for (j, &(m1, m2)) in moments.iter().enumerate() {
                        sub[j] = c + slope * m1 + curv * (m2 - 1.0 / 12.0);
                    }
                    if sub.iter().any(|v| *v < 0.0) {
                        sub.fill(c);
                    }
                    for j in 0..r {
                        next[(o * n * r + i * r + j) * inner + q] = sub[j];
                    }
                }
            }
        }
        cur = next;
        dims[t] = n * r;
    }
    cur
}

fn edge_mass(kernel: &LogKernel, t: usize, sol: &Solution, w: f64) -> f64 {
    let LogKernel::Separable { shape, axes } = kernel else { return 0.0 };
    if shape.len() != 1 {
        // Multi-axis fibers: bound the edge weight by the 1-d kernel factor alone.
        let ax = &axes[t];
        let b = ax.band as f64;
        return if ax.coef * b * b > CUT + 10.0 { 0.0 } else { f64::INFINITY.min(1.0) };
    }
    let ax = &axes[0];
    let (n, b) = (ax.n, ax.band);
    let cb = ax.coef * (b * b) as f64;
    let mut s = 0.0;
    for i in 0..n {
        if !sol.u[i].is_finite() {
            continue;
        }
        if i >= b {
            s += (sol.u[i] + sol.v[i - b] - cb).exp();
        }
        if i + b < n {
            s += (sol.u[i] + sol.v[i + b] - cb).exp();
        }
    }
    s * w * w
}

/// One entropic JKO step with default options and the given tolerance.
pub fn jko_step(mu_tilde: &Density, cost: &CostSpec, h: f64, model: &Model, tol: f64, max_iter: usize) -> Result<JkoResult> {
    if (h - cost.h()).abs() > 1e-15 * h.abs().max(1.0) {
        return config(format!("time step {h} differs from the cost's h = {}", cost.h()));
    }
    let opts = JkoOptions { tol_marg: tol, max_iter, ..JkoOptions::default() };
    JkoSolver::new(opts).step(mu_tilde, cost, model)
}
