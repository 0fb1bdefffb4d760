//! Entropic JKO step on one point set: the first marginal is enforced by
//! scaling, the second marginal is the closed-form KL-proximal of the free
//! energy, and Newton steps on the reduced dual accelerate the scaling.
//!
//! Plan densities (with respect to `w²`) are `γ_ij = exp(u_i + v_j − C_ij)`,
//! `C = c/ε`. With `κ = ε/2h` and `L_j = log w + LSE_i(u_i − C_ij)` the
//! optimal second marginal is `ρ_j = exp((κ L_j − f_j − 1)/(1 + κ))`, i.e.
//! `v_j = −(f_j + 1 + L_j)/(1 + κ)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::banded::BandMatrix;
use super::kernel::{LogKernel, Weight};
use crate::error::{Error, Result};

/// How the scaling potentials are advanced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum JkoMethod {
    /// Scaling sweeps interleaved with Newton steps on the reduced dual.
    #[default]
    Newton,
    /// Plain alternating scaling updates.
    Scaling,
}

impl std::str::FromStr for JkoMethod {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "newton" => Ok(JkoMethod::Newton),
            "scaling" => Ok(JkoMethod::Scaling),
            _ => Err(format!("unknown jko method '{s}' (expected newton or scaling)")),
        }
    }
}

/// Starting scalings when no warm start is available.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScalingInit {
    /// `a ≡ 1`.
    #[default]
    Ones,
    /// Log-scalings uniform in `[−2, 2]` from the given seed.
    Random(u64),
}

const NEG: f64 = f64::NEG_INFINITY;
/// `Z` entries below this are dropped from the Newton matrix.
const Z_FLOOR: f64 = -20.7;
/// Dense Newton systems above this size fall back to conjugate gradients.
const DENSE_DIRECT: usize = 600;

pub(crate) struct Problem<'a> {
    pub kernel: &'a LogKernel,
    pub mu: &'a [f64],
    pub f: &'a [f64],
    pub w: f64,
    pub eps: f64,
    pub h: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct Solution {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub rho: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Plan functionals of a solution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct PlanSummary {
    /// `(c, γ)`.
    pub cost: f64,
    /// `H(γ) = Σ γ log γ w²`.
    pub entropy: f64,
    /// `Σ (f ρ + ρ log ρ) w`.
    pub free_energy: f64,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct CoreOptions {
    pub method: JkoMethod,
    pub tol: f64,
    pub max_iter: usize,
    pub sweeps: usize,
}

struct Dual<'a> {
    p: &'a Problem<'a>,
    lmu: Vec<f64>,
    lw: f64,
    kappa: f64,
}

impl<'a> Dual<'a> {
    fn new(p: &'a Problem<'a>) -> Self {
        let lmu = p.mu.iter().map(|&m| if m > 0.0 { m.ln() } else { NEG }).collect();
        Self { p, lmu, lw: p.w.ln(), kappa: p.eps / (2.0 * p.h) }
    }

    fn cols(&self, u: &[f64], l: &mut [f64], v: &mut [f64]) {
        self.p.kernel.lse(u, l, None);
        let k1 = 1.0 + self.kappa;
        for j in 0..l.len() {
            l[j] += self.lw;
            v[j] = if l[j].is_finite() { -(self.p.f[j] + 1.0 + l[j]) / k1 } else { -(self.p.f[j] + 1.0) / k1 };
        }
    }

    fn rows(&self, u: &[f64], v: &[f64], lr: &mut [f64]) {
        self.p.kernel.lse(v, lr, None);
        for i in 0..lr.len() {
            lr[i] = if u[i].is_finite() { u[i] + self.lw + lr[i] } else { NEG };
        }
    }

    fn sweep(&self, v: &[f64], u: &mut [f64]) {
        self.p.kernel.lse(v, u, None);
        for i in 0..u.len() {
            u[i] = if self.lmu[i].is_finite() { self.lmu[i] - self.lw - u[i] } else { NEG };
        }
    }

    fn value(&self, u: &[f64], l: &[f64], v: &[f64]) -> f64 {
        let p = self.p;
        let tau = 2.0 * p.h;
        let mut a = 0.0;
        for i in 0..u.len() {
            if p.mu[i] > 0.0 {
                a += (u[i] + 1.0) * p.mu[i];
            }
        }
        let mut b = 0.0;
        for j in 0..v.len() {
            if l[j].is_finite() {
                b += (v[j] + l[j]).exp();
            }
        }
        (p.eps * a - (p.eps + tau) * b) * p.w
    }

    fn residual(&self, lr: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..lr.len() {
            let r = if lr[i].is_finite() { lr[i].exp() } else { 0.0 };
            s += (r - self.p.mu[i]).abs();
        }
        s * self.p.w
    }

    fn newton_direction(&self, u: &[f64], v: &[f64], l: &[f64], lr: &[f64]) -> Option<Vec<f64>> {
        let n = u.len();
        let active: Vec<bool> = (0..n).map(|i| self.p.mu[i] > 0.0 && lr[i].is_finite()).collect();
        let rhs: Vec<f64> = (0..n)
            .map(|i| if active[i] { (self.p.mu[i] - lr[i].exp()) * (-0.5 * lr[i]).exp() } else { 0.0 })
            .collect();
        let lc: Vec<f64> = (0..n).map(|j| v[j] + l[j]).collect();
        let y = match self.p.kernel {
            LogKernel::Separable { shape, axes } if shape.len() == 1 => {
                self.banded_solve(axes[0].band, u, v, lr, &lc, &active, rhs)?
            }
            LogKernel::Dense { n, .. } if *n <= DENSE_DIRECT => self.dense_solve(u, v, lr, &lc, &active, &rhs)?,
            _ => self.cg_solve(u, v, lr, &lc, &active, &rhs)?,
        };
        Some((0..n).map(|i| if active[i] { y[i] * (-0.5 * lr[i]).exp() } else { 0.0 }).collect())
    }

    fn z_exponent(&self, i: usize, j: usize, u: &[f64], v: &[f64], lr: &[f64], lc: &[f64]) -> f64 {
        if !lc[j].is_finite() {
            return NEG;
        }
        self.lw + u[i] + v[j] - self.p.kernel.entry(i, j) - 0.5 * lr[i] - 0.5 * lc[j]
    }

    #[allow(clippy::too_many_arguments)]
    fn banded_solve(
        &self,
        band: usize,
        u: &[f64],
        v: &[f64],
        lr: &[f64],
        lc: &[f64],
        active: &[bool],
        mut rhs: Vec<f64>,
    ) -> Option<Vec<f64>> {
        let n = u.len();
        let (coef, b) = match self.p.kernel {
            LogKernel::Separable { axes, .. } => (axes[0].coef, band),
            LogKernel::Dense { .. } => unreachable!(),
        };
        // Rows of Z trimmed to their significant window.
        let mut lo = vec![0usize; n];
        let mut rows: Vec<Vec<f64>> = vec![Vec::new(); n];
        for i in 0..n {
            if !active[i] {
                lo[i] = i;
                continue;
            }
            let (j0, j1) = (i.saturating_sub(b), (i + b).min(n - 1));
            let base = self.lw + u[i] - 0.5 * lr[i];
            let e = |j: usize| -> f64 {
                if !lc[j].is_finite() {
                    return NEG;
                }
                let d = i.abs_diff(j) as f64;
                base + v[j] - coef * d * d - 0.5 * lc[j]
            };
            let mut first = None;
            let mut last = j0;
            for j in j0..=j1 {
                if e(j) > Z_FLOOR {
                    first.get_or_insert(j);
                    last = j;
                }
            }
            match first {
                None => lo[i] = i,
                Some(f) => {
                    lo[i] = f;
                    rows[i] = (f..=last).map(|j| e(j).exp()).collect();
                }
            }
        }
        let hi = |i: usize, rows: &Vec<Vec<f64>>| lo[i] + rows[i].len();
        let mut bw = 0;
        for i in 0..n {
            if rows[i].is_empty() {
                continue;
            }
            let h = hi(i, &rows);
            for k in i + 1..(i + 2 * b + 1).min(n) {
                if !rows[k].is_empty() && lo[k] < h {
                    bw = bw.max(k - i);
                }
            }
        }
        let mut m = BandMatrix::zeros(n, bw);
        let k1 = 1.0 + self.kappa;
        for i in 0..n {
            *m.at(i, i) = 1.0;
        }
        for i in 0..n {
            if rows[i].is_empty() {
                continue;
            }
            let hi_i = hi(i, &rows);
            for k in i..(i + bw + 1).min(n) {
                if rows[k].is_empty() {
                    continue;
                }
                let (a, z) = (lo[i].max(lo[k]), hi_i.min(hi(k, &rows)));
                if a >= z {
                    continue;
                }
                let mut s = 0.0;
                for j in a..z {
                    s += rows[i][j - lo[i]] * rows[k][j - lo[k]];
                }
                *m.at(k, i) -= s / k1;
            }
        }
        if !m.cholesky() {
            return None;
        }
        m.solve(&mut rhs);
        Some(rhs)
    }

    fn dense_solve(&self, u: &[f64], v: &[f64], lr: &[f64], lc: &[f64], active: &[bool], rhs: &[f64]) -> Option<Vec<f64>> {
        let n = u.len();
        let mut z = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in 0..n {
                let e = self.z_exponent(i, j, u, v, lr, lc);
                if e > Z_FLOOR {
                    z[(i, j)] = e.exp();
                }
            }
        }
        let mut m = -(&z * z.transpose()) / (1.0 + self.kappa);
        for i in 0..n {
            m[(i, i)] += 1.0;
        }
        let chol = m.cholesky()?;
        let x = chol.solve(&DVector::from_column_slice(rhs));
        Some(x.iter().copied().collect())
    }

    /// `out_j = Σ_i Z_ij y_i` (transpose) or `out_i = Σ_j Z_ij y_j`, in stabilized log form.
    fn apply_z(&self, y: &[f64], transpose: bool, u: &[f64], v: &[f64], lr: &[f64], lc: &[f64], active: &[bool]) -> Vec<f64> {
        let n = y.len();
        let (src_a, src_b, dst_a, dst_b) = if transpose { (u, lr, v, lc) } else { (v, lc, u, lr) };
        let mut pos = vec![NEG; n];
        let mut neg = vec![NEG; n];
        for s in 0..n {
            let ok = if transpose { active[s] } else { lc[s].is_finite() };
            if !ok || y[s] == 0.0 {
                continue;
            }
            let t = src_a[s] - 0.5 * src_b[s] + y[s].abs().ln();
            if y[s] > 0.0 {
                pos[s] = t;
            } else {
                neg[s] = t;
            }
        }
        let mut lp = vec![0.0; n];
        let mut ln = vec![0.0; n];
        self.p.kernel.lse(&pos, &mut lp, None);
        self.p.kernel.lse(&neg, &mut ln, None);
        (0..n)
            .map(|d| {
                let ok = if transpose { lc[d].is_finite() } else { active[d] };
                if !ok {
                    return 0.0;
                }
                let base = self.lw + dst_a[d] - 0.5 * dst_b[d];
                let p = if lp[d].is_finite() { (base + lp[d]).exp() } else { 0.0 };
                let q = if ln[d].is_finite() { (base + ln[d]).exp() } else { 0.0 };
                p - q
            })
            .collect()
    }

    fn cg_solve(&self, u: &[f64], v: &[f64], lr: &[f64], lc: &[f64], active: &[bool], rhs: &[f64]) -> Option<Vec<f64>> {
        let n = u.len();
        let k1 = 1.0 + self.kappa;
        let apply = |y: &[f64]| -> Vec<f64> {
            let zt = self.apply_z(y, true, u, v, lr, lc, active);
            let zz = self.apply_z(&zt, false, u, v, lr, lc, active);
            (0..n).map(|i| if active[i] { y[i] - zz[i] / k1 } else { y[i] }).collect()
        };
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut x = vec![0.0; n];
        let mut r = rhs.to_vec();
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        let stop = 1e-16 * rr.max(f64::MIN_POSITIVE);
        for _ in 0..500 {
            if rr <= stop {
                break;
            }
            let ap = apply(&p);
            let pap = dot(&p, &ap);
            if !(pap > 0.0) {
                break;
            }
            let alpha = rr / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rr_new = dot(&r, &r);
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
        }
        x.iter().all(|v| v.is_finite()).then_some(x)
    }
}

pub(crate) fn initial_u(mu: &[f64], init: ScalingInit) -> Vec<f64> {
    match init {
        ScalingInit::Ones => mu.iter().map(|&m| if m > 0.0 { 0.0 } else { NEG }).collect(),
        ScalingInit::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            mu.iter().map(|&m| {
                let r: f64 = rng.random_range(-2.0..2.0);
                if m > 0.0 { r } else { NEG }
            })
            .collect()
        }
    }
}

/// Solves the entropic JKO step from the potentials `u0`.
pub(crate) fn solve(p: &Problem, u0: Vec<f64>, opts: &CoreOptions) -> Result<Solution> {
    let dual = Dual::new(p);
    let n = p.kernel.len();
    let mut u: Vec<f64> = u0.iter().zip(p.mu).map(|(&x, &m)| if m > 0.0 && x.is_finite() { x } else if m > 0.0 { 0.0 } else { NEG }).collect();
    let mut l = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut lr = vec![0.0; n];
    dual.cols(&u, &mut l, &mut v);
    let mut it = 0;
    let mut residual;
    loop {
        dual.rows(&u, &v, &mut lr);
        residual = dual.residual(&lr);
        if !residual.is_finite() {
            return Err(Error::NonConvergence { iterations: it, residual });
        }
        if residual <= opts.tol {
            break;
        }
        if it >= opts.max_iter {
            return Err(Error::NonConvergence { iterations: it, residual });
        }
        it += 1;
        match opts.method {
            JkoMethod::Scaling => {
                dual.sweep(&v, &mut u);
                dual.cols(&u, &mut l, &mut v);
            }
            JkoMethod::Newton => {
                for _ in 0..opts.sweeps {
                    dual.sweep(&v, &mut u);
                    dual.cols(&u, &mut l, &mut v);
                }
                dual.rows(&u, &v, &mut lr);
                if dual.residual(&lr) <= opts.tol {
                    continue;
                }
                if let Some(du) = dual.newton_direction(&u, &v, &l, &lr) {
                    line_search(&dual, &mut u, &mut l, &mut v, &lr, &du);
                }
            }
        }
    }
    let rho = (0..n).map(|j| if l[j].is_finite() { (v[j] + l[j]).exp() } else { 0.0 }).collect();
    Ok(Solution { u, v, rho, iterations: it, residual })
}

fn line_search(dual: &Dual, u: &mut [f64], l: &mut [f64], v: &mut [f64], lr: &[f64], du: &[f64]) {
    let p = dual.p;
    let d0 = dual.value(u, l, v);
    let mut slope = 0.0;
    for i in 0..u.len() {
        if p.mu[i] > 0.0 {
            let r = if lr[i].is_finite() { lr[i].exp() } else { 0.0 };
            slope += (p.mu[i] - r) * du[i];
        }
    }
    slope *= p.eps * p.w;
    let n = u.len();
    let mut trial = vec![0.0; n];
    let mut lt = vec![0.0; n];
    let mut vt = vec![0.0; n];
    let mut t = 1.0;
    // Below this slope the change in D is lost to round-off.
    let flat = slope.abs() < 1e-11 * d0.abs();
    while t > 1e-10 {
        for i in 0..n {
            trial[i] = if u[i].is_finite() { u[i] + t * du[i] } else { NEG };
        }
        dual.cols(&trial, &mut lt, &mut vt);
        let d1 = dual.value(&trial, &lt, &vt);
        if d1.is_finite() && (flat || d1 >= d0 + 1e-4 * t * slope) {
            u.copy_from_slice(&trial);
            l.copy_from_slice(&lt);
            v.copy_from_slice(&vt);
            return;
        }
        t *= 0.5;
    }
}

/// `(c, γ)`, `H(γ)` and the free energy of the second marginal.
pub(crate) fn summarize(p: &Problem, s: &Solution) -> PlanSummary {
    let n = p.kernel.len();
    let lw = p.w.ln();
    // Σ_ij C_ij γ_ij w², split by axis for separable kernels.
    let mut ccost = 0.0;
    let mut tmp = vec![0.0; n];
    let axes = match p.kernel {
        LogKernel::Separable { shape, .. } => shape.len(),
        LogKernel::Dense { .. } => 1,
    };
    for k in 0..axes {
        p.kernel.lse(&s.v, &mut tmp, Some((k, Weight::Cost)));
        for i in 0..n {
            if s.u[i].is_finite() && tmp[i].is_finite() {
                ccost += (s.u[i] + lw + tmp[i]).exp() * p.w;
            }
        }
    }
    let mut lr = vec![0.0; n];
    p.kernel.lse(&s.v, &mut lr, None);
    let mut ent = -ccost;
    for i in 0..n {
        if s.u[i].is_finite() {
            ent += s.u[i] * (s.u[i] + lw + lr[i]).exp() * p.w;
        }
    }
    let mut fe = 0.0;
    for j in 0..n {
        if s.rho[j] > 0.0 {
            ent += s.v[j] * s.rho[j] * p.w;
            fe += (p.f[j] + s.rho[j].ln()) * s.rho[j] * p.w;
        }
    }
    PlanSummary { cost: p.eps * ccost, entropy: ent, free_energy: fe }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropic_ot::kernel::AxisKernel;

    fn problem_1d(n: usize, eps: f64, h: f64) -> (LogKernel, Vec<f64>, Vec<f64>, f64) {
        let dx = 4.0 / n as f64;
        let x: Vec<f64> = (0..n).map(|i| -2.0 + dx * (i as f64 + 0.5)).collect();
        let a = 1.0 + h;
        let kernel = LogKernel::Separable { shape: vec![n], axes: vec![AxisKernel::new(n, dx, dx * dx / (a * eps), n)] };
        let mut mu: Vec<f64> = x.iter().map(|x| (-(x - 0.3) * (x - 0.3) / 0.3).exp()).collect();
        let m: f64 = mu.iter().sum::<f64>() * dx;
        mu.iter_mut().for_each(|v| *v /= m);
        let f = x.iter().map(|x| 0.5 * x * x).collect();
        (kernel, mu, f, dx)
    }

    fn objective(p: &Problem, s: &Solution) -> f64 {
        let q = summarize(p, s);
        (q.cost + p.eps * q.entropy) / (2.0 * p.h) + q.free_energy
    }

    #[test]
    fn closed_form_second_marginal_satisfies_pointwise_optimality() {
        // (ε/2h) v + f + log ρ + 1 = 0 at the returned second scaling.
        let (kernel, mu, f, dx) = problem_1d(24, 0.05, 0.1);
        let p = Problem { kernel: &kernel, mu: &mu, f: &f, w: dx, eps: 0.05, h: 0.1 };
        let opts = CoreOptions { method: JkoMethod::Newton, tol: 1e-12, max_iter: 200, sweeps: 2 };
        let s = solve(&p, initial_u(&mu, ScalingInit::Ones), &opts).unwrap();
        let kappa = 0.05 / 0.2;
        for j in 0..24 {
            let g = kappa * s.v[j] + f[j] + s.rho[j].ln() + 1.0;
            assert!(g.abs() < 1e-10, "{j}: {g}");
        }
    }

    #[test]
    fn newton_and_scaling_agree() {
        let (kernel, mu, f, dx) = problem_1d(20, 0.05, 0.1);
        let p = Problem { kernel: &kernel, mu: &mu, f: &f, w: dx, eps: 0.05, h: 0.1 };
        let a = solve(&p, initial_u(&mu, ScalingInit::Ones), &CoreOptions { method: JkoMethod::Newton, tol: 1e-11, max_iter: 500, sweeps: 2 }).unwrap();
        let b = solve(&p, initial_u(&mu, ScalingInit::Ones), &CoreOptions { method: JkoMethod::Scaling, tol: 1e-11, max_iter: 200_000, sweeps: 0 }).unwrap();
        let l1: f64 = a.rho.iter().zip(&b.rho).map(|(x, y)| (x - y).abs()).sum::<f64>() * dx;
        assert!(l1 < 1e-9, "{l1}");
        assert!((objective(&p, &a) - objective(&p, &b)).abs() < 1e-9);
        assert!(a.iterations < b.iterations);
    }

    #[test]
    fn dense_and_cg_paths_match_banded() {
        let (kernel, mu, f, dx) = problem_1d(16, 0.05, 0.1);
        let n = 16;
        let c: Vec<f64> = (0..n * n).map(|e| kernel.entry(e / n, e % n)).collect();
        let dense = LogKernel::Dense { n, c };
        // A second axis of length one turns the 1-d kernel into the CG path.
        let LogKernel::Separable { axes, .. } = &kernel else { unreachable!() };
        let sep2 = LogKernel::Separable { shape: vec![1, n], axes: vec![AxisKernel::new(1, 1.0, 1.0, 0), axes[0].clone()] };
        let opts = CoreOptions { method: JkoMethod::Newton, tol: 1e-11, max_iter: 500, sweeps: 2 };
        let run = |k: &LogKernel| {
            let p = Problem { kernel: k, mu: &mu, f: &f, w: dx, eps: 0.05, h: 0.1 };
            solve(&p, initial_u(&mu, ScalingInit::Ones), &opts).unwrap().rho
        };
        let (a, b, c) = (run(&kernel), run(&dense), run(&sep2));
        for j in 0..n {
            assert!((a[j] - b[j]).abs() < 1e-9 && (a[j] - c[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn random_initialization_reaches_the_same_marginal() {
        let (kernel, mu, f, dx) = problem_1d(20, 0.02, 0.1);
        let p = Problem { kernel: &kernel, mu: &mu, f: &f, w: dx, eps: 0.02, h: 0.1 };
        let opts = CoreOptions { method: JkoMethod::Newton, tol: 1e-11, max_iter: 500, sweeps: 2 };
        let a = solve(&p, initial_u(&mu, ScalingInit::Ones), &opts).unwrap();
        let b = solve(&p, initial_u(&mu, ScalingInit::Random(7)), &opts).unwrap();
        let l1: f64 = a.rho.iter().zip(&b.rho).map(|(x, y)| (x - y).abs()).sum::<f64>() * dx;
        assert!(l1 < 1e-6);
    }

    #[test]
    fn iteration_limit_reports_residual() {
        let (kernel, mu, f, dx) = problem_1d(20, 0.02, 0.1);
        let p = Problem { kernel: &kernel, mu: &mu, f: &f, w: dx, eps: 0.02, h: 0.1 };
        let opts = CoreOptions { method: JkoMethod::Scaling, tol: 1e-14, max_iter: 3, sweeps: 0 };
        match solve(&p, initial_u(&mu, ScalingInit::Ones), &opts) {
            Err(Error::NonConvergence { iterations, residual }) => {
                assert_eq!(iterations, 3);
                assert!(residual > 1e-14);
            }
            other => panic!("{other:?}"),
        }
    }
}
