//! Discrete Euler-Lagrange residual of a JKO step.
//!
//! Perturbing the target of the optimal plan along `η = A_h∇φ` gives
//! `(1/h)∫⟨y−x, ∇φ(y)⟩dγ + ∫ρ⟨A_h∇φ, ∇f⟩ − ∫ρ div(A_h∇φ) − (ε/2h)∫ρ div(A_h∇φ) = 0`
//! at the minimizer; the residual evaluates the left side on the stored plan.

use std::sync::Arc;

use super::jko::{JkoResult, TransportPlan};
use super::kernel::{LogKernel, Weight};
use crate::error::{config, Result};
use crate::model::Model;

type GradFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type ValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Smooth test function with analytic gradient and Hessian.
#[derive(Clone)]
pub struct TestFunction {
    pub label: String,
    dim: usize,
    value: ValueFn,
    grad: GradFn,
    /// Row-major `d × d` Hessian.
    hessian: GradFn,
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TestFunction").field("label", &self.label).field("dim", &self.dim).finish()
    }
}

impl TestFunction {
    pub fn new(
        label: impl Into<String>,
        dim: usize,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        hessian: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self { label: label.into(), dim, value: Arc::new(value), grad: Arc::new(grad), hessian: Arc::new(hessian) }
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Self::new("constant", dim, move |_| c, |_, g| g.fill(0.0), |_, h| h.fill(0.0))
    }

    /// `exp(−‖x−c‖²/(2s²))`.
    pub fn gaussian(center: Vec<f64>, width: f64) -> Self {
        let d = center.len();
        let s2 = width * width;
        let (c1, c2, c3) = (center.clone(), center.clone(), center);
        let val = move |x: &[f64], c: &[f64]| (-x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * s2)).exp();
        Self::new(
            format!("gaussian(s={width})"),
            d,
            move |x| val(x, &c1),
            move |x, g| {
                let e = val(x, &c2);
                for k in 0..d {
                    g[k] = -(x[k] - c2[k]) / s2 * e;
                }
            },
            move |x, h| {
                let e = val(x, &c3);
                for i in 0..d {
                    for j in 0..d {
                        let delta = if i == j { 1.0 } else { 0.0 };
                        h[i * d + j] = ((x[i] - c3[i]) * (x[j] - c3[j]) / (s2 * s2) - delta / s2) * e;
                    }
                }
            },
        )
    }

    /// `∏_k sin(m_k (x_k − a_k))` , smooth and bounded; for periodic-style batteries.
    pub fn sine(freq: Vec<f64>, shift: Vec<f64>) -> Self {
        let d = freq.len();
        let (f1, f2, f3) = (freq.clone(), freq.clone(), freq);
        let (s1, s2, s3) = (shift.clone(), shift.clone(), shift);
        Self::new(
            "sine",
            d,
            move |x| (0..d).map(|k| (f1[k] * (x[k] - s1[k])).sin()).product(),
            move |x, g| {
                for k in 0..d {
                    g[k] = (0..d)
                        .map(|l| {
                            let a = f2[l] * (x[l] - s2[l]);
                            if l == k { f2[l] * a.cos() } else { a.sin() }
                        })
                        .product();
                }
            },
            move |x, h| {
                for i in 0..d {
                    for j in 0..d {
                        h[i * d + j] = (0..d)
                            .map(|l| {
                                let a = f3[l] * (x[l] - s3[l]);
                                match (l == i, l == j) {
                                    (true, true) => -f3[l] * f3[l] * a.sin(),
                                    (true, false) | (false, true) => f3[l] * a.cos(),
                                    (false, false) => a.sin(),
                                }
                            })
                            .product();
                    }
                }
            },
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        (self.grad)(x, out)
    }

    pub fn hessian(&self, x: &[f64], out: &mut [f64]) {
        (self.hessian)(x, out)
    }
}

/// Largest absolute Euler-Lagrange residual over the test functions.
pub fn euler_lagrange_residual(result: &JkoResult, plan: &TransportPlan, h: f64, model: &Model, tests: &[TestFunction]) -> Result<f64> {
    Ok(euler_lagrange_residuals(result, plan, h, model, tests)?.into_iter().fold(0.0, |m, r| m.max(r.abs())))
}

/// Signed residual per test function.
pub fn euler_lagrange_residuals(_result: &JkoResult, plan: &TransportPlan, h: f64, model: &Model, tests: &[TestFunction]) -> Result<Vec<f64>> {
    let d = plan.dim;
    if model.dim() != d || tests.iter().any(|t| t.dim != d) {
        return config("test functions, model and plan dimensions differ");
    }
    if (h - plan.h).abs() > 1e-15 * h.abs().max(1.0) {
        return config(format!("time step {h} differs from the plan's h = {}", plan.h));
    }
    let eps = plan.epsilon;
    let ah = &plan.a_h;
    let mut out = vec![0.0; tests.len()];
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    let mut gf = vec![0.0; d];
    for fiber in &plan.fibers {
        let n = fiber.rho.len();
        let w = fiber.w;
        // Mean displacement Σ_i γ_ij (y_j − x_i) w² per target cell, `n × d`.
        let disp = displacement(fiber, d);
        for j in 0..n {
            let rho = fiber.rho[j];
            let y = &fiber.centers[j * d..(j + 1) * d];
            if rho <= 0.0 && disp[j * d..(j + 1) * d].iter().all(|v| *v == 0.0) {
                continue;
            }
            model.potential_gradient(y, &mut gf);
            for (t, phi) in tests.iter().enumerate() {
                phi.gradient(y, &mut grad);
                phi.hessian(y, &mut hess);
                let mut s = 0.0;
                for k in 0..d {
                    s += disp[j * d + k] * grad[k] / h;
                }
                // ⟨A_h∇φ, ∇f⟩ and div(A_h∇φ) = tr(A_h Hess φ).
                let mut drift = 0.0;
                let mut div = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        drift += ah[a * d + b] * grad[b] * gf[a];
                        div += ah[a * d + b] * hess[b * d + a];
                    }
                }
                s += rho * w * (drift - (1.0 + eps / (2.0 * h)) * div);
                out[t] += s;
            }
        }
    }
    Ok(out)
}

fn displacement(fiber: &super::jko::FiberPlan, d: usize) -> Vec<f64> {
    let n = fiber.rho.len();
    let mut out = vec![0.0; n * d];
    let Some(kernel) = &fiber.kernel else { return out };
    let lw2 = 2.0 * fiber.w.ln();
    match kernel {
        LogKernel::Separable { shape, .. } => {
            let mut pos = vec![0.0; n];
            let mut neg = vec![0.0; n];
            for (t, &k) in fiber.active.iter().enumerate() {
                if shape[t] == 1 {
                    continue;
                }
                // δ = i − j along the axis, so y − x = −δ Δx.
                kernel.lse(&fiber.u, &mut pos, Some((t, Weight::Pos)));
                kernel.lse(&fiber.u, &mut neg, Some((t, Weight::Neg)));
                for j in 0..n {
                    if !fiber.v[j].is_finite() {
                        continue;
                    }
                    let e = |l: f64| if l.is_finite() { (fiber.v[j] + lw2 + l).exp() } else { 0.0 };
                    out[j * d + k] = e(neg[j]) - e(pos[j]);
                }
            }
        }
        LogKernel::Dense { .. } => {
            for j in 0..n {
                if !fiber.v[j].is_finite() {
                    continue;
                }
                for i in 0..n {
                    if !fiber.u[i].is_finite() {
                        continue;
                    }
                    let g = (fiber.u[i] + fiber.v[j] - kernel.entry(i, j) + lw2).exp();
                    if g == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        out[j * d + k] += g * (fiber.centers[j * d + k] - fiber.centers[i * d + k]);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropic_ot::{build_cost, JkoOptions, JkoSolver};
    use crate::grid::{Axis, Density, Grid};
    use crate::model::{preset_kolmogorov_chain, BlockPotential};

    #[test]
    fn test_function_derivatives_match_finite_differences() {
        let fs = [TestFunction::gaussian(vec![0.3, -0.2], 0.7), TestFunction::sine(vec![1.3, 0.7], vec![0.1, 0.4])];
        let x = [0.41, 0.17];
        let e = 1e-5;
        for f in &fs {
            let mut g = [0.0; 2];
            let mut hm = [0.0; 4];
            f.gradient(&x, &mut g);
            f.hessian(&x, &mut hm);
            for k in 0..2 {
                let mut a = x;
                let mut b = x;
                a[k] += e;
                b[k] -= e;
                assert!(((f.value(&a) - f.value(&b)) / (2.0 * e) - g[k]).abs() < 1e-8);
                let (mut ga, mut gb) = ([0.0; 2], [0.0; 2]);
                f.gradient(&a, &mut ga);
                f.gradient(&b, &mut gb);
                for l in 0..2 {
                    assert!(((ga[l] - gb[l]) / (2.0 * e) - hm[l * 2 + k]).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn constant_test_function_gives_zero() {
        let g = Arc::new(Grid::new(vec![Axis::new(-3.0, 3.0, 30).unwrap()]).unwrap());
        let m = preset_kolmogorov_chain(1, 1, BlockPotential::quadratic(1.0)).unwrap();
        let mu = Density::gaussian(g.clone(), &[0.5], &[0.4]).unwrap();
        let h = 0.1;
        let cost = build_cost(&g, m.diffusion(), h, false).unwrap().with_epsilon(0.004).unwrap();
        let r = JkoSolver::new(JkoOptions { keep_plan: true, ..JkoOptions::default() }).step(&mu, &cost, &m).unwrap();
        let plan = r.plan.clone().unwrap();
        assert_eq!(euler_lagrange_residual(&r, &plan, h, &m, &[TestFunction::constant(1, 2.0)]).unwrap(), 0.0);
    }

    #[test]
    fn converged_step_has_small_residual() {
        let g = Arc::new(Grid::new(vec![Axis::new(-4.0, 4.0, 64).unwrap()]).unwrap());
        let m = preset_kolmogorov_chain(1, 1, BlockPotential::quadratic(1.0)).unwrap();
        let mu = Density::gaussian(g.clone(), &[0.5], &[0.4]).unwrap();
        let h: f64 = 0.05;
        let eps = h * h / h.ln().abs();
        let cost = build_cost(&g, m.diffusion(), h, false).unwrap().with_epsilon(eps).unwrap();
        let r = JkoSolver::new(JkoOptions { keep_plan: true, tol_marg: 1e-10, ..JkoOptions::default() }).step(&mu, &cost, &m).unwrap();
        let plan = r.plan.clone().unwrap();
        let tests = [TestFunction::gaussian(vec![0.0], 1.0), TestFunction::gaussian(vec![1.0], 0.6), TestFunction::sine(vec![0.8], vec![0.2])];
        let res = euler_lagrange_residual(&r, &plan, h, &m, &tests).unwrap();
        assert!(res < 1e-3, "{res}");
    }
}
