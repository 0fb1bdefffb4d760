//! Exact (`ε = 0`) small-instance oracles: a transportation simplex for the
//! optimal transport value and a log-barrier interior-point method for the JKO
//! step. Both certify their answer through the optimality conditions.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use super::jko::JkoResult;
use super::CostSpec;
use crate::error::{config, Error, Result};
use crate::grid::Density;
use crate::model::Model;

/// Largest `|supp μ| × |supp ν|` accepted by [`exact_ot_small`].
pub const ORACLE_MAX_PAIRS: usize = 10_000;
/// Largest grid accepted by [`exact_jko_small`].
pub const ORACLE_MAX_CELLS: usize = 30;

/// Certified exact transport solution.
#[derive(Clone, Debug)]
pub struct ExactOt {
    pub value: f64,
    /// Basic cells `(source, target, mass)` of the optimal plan.
    pub plan: Vec<(usize, usize, f64)>,
    /// Dual potentials on the supports (source, then target).
    pub dual_source: Vec<f64>,
    pub dual_target: Vec<f64>,
    /// `|primal − dual|` at the certificate.
    pub duality_gap: f64,
}

struct Basis {
    m: usize,
    n: usize,
    cells: Vec<(usize, usize, f64)>,
}

impl Basis {
    /// North-west corner start with exactly `m + n − 1` basic cells.
    fn northwest(a: &[f64], b: &[f64]) -> Self {
        let (m, n) = (a.len(), b.len());
        let (mut a, mut b) = (a.to_vec(), b.to_vec());
        let mut cells = Vec::with_capacity(m + n - 1);
        let (mut i, mut j) = (0, 0);
        loop {
            let x = a[i].min(b[j]);
            cells.push((i, j, x));
            a[i] -= x;
            b[j] -= x;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if (a[i] <= b[j] && i < m - 1) || j == n - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self { m, n, cells }
    }

    /// Node adjacency: sources `0..m`, targets `m..m+n`; values are cell indices.
    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.m + self.n];
        for (k, &(i, j, _)) in self.cells.iter().enumerate() {
            adj[i].push((self.m + j, k));
            adj[self.m + j].push((i, k));
        }
        adj
    }

    fn potentials(&self, c: &dyn Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>) {
        let adj = self.adjacency();
        let mut pot = vec![f64::NAN; self.m + self.n];
        pot[0] = 0.0;
        let mut q = VecDeque::from([0usize]);
        while let Some(x) = q.pop_front() {
            for &(y, k) in &adj[x] {
                if pot[y].is_nan() {
                    let (i, j, _) = self.cells[k];
                    pot[y] = c(i, j) - pot[x];
                    q.push_back(y);
                }
            }
        }
        let (u, v) = pot.split_at(self.m);
        (u.to_vec(), v.to_vec())
    }

    /// Tree path from source `i` to target `j` as a list of basic cell indices.
    fn path(&self, i: usize, j: usize) -> Vec<usize> {
        let adj = self.adjacency();
        let total = self.m + self.n;
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; total];
        let mut seen = vec![false; total];
        seen[i] = true;
        let mut q = VecDeque::from([i]);
        let goal = self.m + j;
        while let Some(x) = q.pop_front() {
            if x == goal {
                break;
            }
            for &(y, k) in &adj[x] {
                if !seen[y] {
                    seen[y] = true;
                    prev[y] = Some((x, k));
                    q.push_back(y);
                }
            }
        }
        let mut out = Vec::new();
        let mut x = goal;
        while let Some((p, k)) = prev[x] {
            out.push(k);
            x = p;
        }
        out.reverse();
        out
    }
}

/// Exact optimal transport value `W_{c_h}(μ, ν)` (masses `ρ·w`, costs `c_h`).
pub fn exact_ot_small(mu: &Density, nu: &Density, cost: &CostSpec) -> Result<ExactOt> {
    let g = mu.grid();
    if g != nu.grid() {
        return config("exact_ot_small needs both densities on the same grid");
    }
    let w = g.cell_volume();
    let src: Vec<usize> = (0..g.len()).filter(|&i| mu.values()[i] > 0.0).collect();
    let dst: Vec<usize> = (0..g.len()).filter(|&j| nu.values()[j] > 0.0).collect();
    if src.len() * dst.len() > ORACLE_MAX_PAIRS {
        return Err(Error::Size(format!(
            "exact transport with {} x {} support cells exceeds {ORACLE_MAX_PAIRS} pairs",
            src.len(),
            dst.len()
        )));
    }
    let a: Vec<f64> = src.iter().map(|&i| mu.values()[i] * w).collect();
    let mut b: Vec<f64> = dst.iter().map(|&j| nu.values()[j] * w).collect();
    // Absorb the round-off mass difference into the largest target.
    let diff = a.iter().sum::<f64>() - b.iter().sum::<f64>();
    let jmax = (0..b.len()).max_by(|&x, &y| b[x].total_cmp(&b[y])).expect("nonempty support");
    b[jmax] += diff;
    let centers = g.centers();
    let d = g.dim();
    let cmat: Vec<f64> = src
        .iter()
        .flat_map(|&i| dst.iter().map(move |&j| (i, j)))
        .map(|(i, j)| cost.cost(&centers[i * d..(i + 1) * d], &centers[j * d..(j + 1) * d]))
        .collect();
    let (m, n) = (src.len(), dst.len());
    let c = |i: usize, j: usize| cmat[i * n + j];
    let scale = cmat.iter().cloned().fold(0.0, f64::max).max(1e-300);
    let tol = 1e-12 * scale;
    let mut basis = Basis::northwest(&a, &b);
    let max_pivots = 50 * (m + n) * (m + n) + 1000;
    let mut degenerate_run = 0usize;
    for _ in 0..max_pivots {
        let (u, v) = basis.potentials(&c);
        // Dantzig pricing; Bland's rule after a long degenerate stretch.
        let bland = degenerate_run > m + n;
        let mut enter = None;
        let mut best = -tol;
        'scan: for i in 0..m {
            for j in 0..n {
                let r = c(i, j) - u[i] - v[j];
                if r < best {
                    enter = Some((i, j));
                    if bland {
                        break 'scan;
                    }
                    best = r;
                }
            }
        }
        let Some((ei, ej)) = enter else {
            return certify(&basis, &a, &b, &c, u, v, scale);
        };
        let path = basis.path(ei, ej);
        // Cycle: entering cell (+) then alternate − + − … along the tree path from i to j.
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for (s, &k) in path.iter().enumerate() {
            if s % 2 == 0 && basis.cells[k].2 < theta {
                theta = basis.cells[k].2;
                leave = k;
            }
        }
        let theta = theta.max(0.0);
        degenerate_run = if theta <= 1e-15 { degenerate_run + 1 } else { 0 };
        for (s, &k) in path.iter().enumerate() {
            if s % 2 == 0 {
                basis.cells[k].2 = (basis.cells[k].2 - theta).max(0.0);
            } else {
                basis.cells[k].2 += theta;
            }
        }
        basis.cells[leave] = (ei, ej, theta);
    }
    Err(Error::Oracle(format!("transportation simplex did not terminate after {max_pivots} pivots")))
}

fn certify(basis: &Basis, a: &[f64], b: &[f64], c: &dyn Fn(usize, usize) -> f64, u: Vec<f64>, v: Vec<f64>, scale: f64) -> Result<ExactOt> {
    let (m, n) = (a.len(), b.len());
    let mut rows = vec![0.0; m];
    let mut cols = vec![0.0; n];
    let mut primal = 0.0;
    for &(i, j, x) in &basis.cells {
        rows[i] += x;
        cols[j] += x;
        primal += c(i, j) * x;
    }
    let feas = rows.iter().zip(a).chain(cols.iter().zip(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let dual = u.iter().zip(a).map(|(x, y)| x * y).sum::<f64>() + v.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut viol = 0.0f64;
    for i in 0..m {
        for j in 0..n {
            viol = viol.max(u[i] + v[j] - c(i, j));
        }
    }
    let gap = (primal - dual).abs();
    if feas > 1e-12 || viol > 1e-9 * scale || gap > 1e-10 * scale.max(1.0) {
        return Err(Error::Oracle(format!("exact transport certificate failed: feasibility {feas:e}, dual violation {viol:e}, gap {gap:e}")));
    }
    Ok(ExactOt { value: primal, plan: basis.cells.clone(), dual_source: u, dual_target: v, duality_gap: gap })
}

/// Exact JKO step `argmin_ρ (1/2h) W_{c_h}(ρ̃, ρ) + F(ρ)` for tiny grids.
///
/// Minimizes over couplings `P ≥ 0` (masses) with row sums `ρ̃ w` by a
/// log-barrier method; the Newton systems are reduced to the row constraints
/// through the column-block structure of the Hessian. The result is accepted
/// when the complementarity measure `Σ P_ij (s_ij − min_k s_ik)` of the
/// first-order conditions is at most `1e-8`.
pub fn exact_jko_small(mu_tilde: &Density, cost: &CostSpec, h: f64, model: &Model) -> Result<JkoResult> {
    let g = mu_tilde.grid_arc().clone();
    let n = g.len();
    if n > ORACLE_MAX_CELLS {
        return Err(Error::Size(format!("exact JKO oracle accepts at most {ORACLE_MAX_CELLS} cells, got {n}")));
    }
    if !(h > 0.0) {
        return config("exact JKO step needs h > 0");
    }
    if cost.dim() != g.dim() || model.dim() != g.dim() {
        return config("cost, model and grid dimensions differ");
    }
    let w = g.cell_volume();
    let d = g.dim();
    let centers = g.centers();
    let f = model.potential_on(&g);
    let src: Vec<usize> = (0..n).filter(|&i| mu_tilde.values()[i] > 0.0).collect();
    let m = src.len();
    let a: Vec<f64> = src.iter().map(|&i| mu_tilde.values()[i] * w).collect();
    let cmat: Vec<f64> = src
        .iter()
        .flat_map(|&i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| cost.cost(&centers[i * d..(i + 1) * d], &centers[j * d..(j + 1) * d]) / (2.0 * h))
        .collect();
    let lw = w.ln();
    // Objective in masses: Σ c/2h P + Σ_j q_j (f_j + log q_j − log w).
    let objective = |p: &[f64]| -> f64 {
        let mut s = 0.0;
        let mut q = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                s += cmat[i * n + j] * p[i * n + j];
                q[j] += p[i * n + j];
            }
        }
        for j in 0..n {
            if q[j] > 0.0 {
                s += q[j] * (f[j] + q[j].ln() - lw);
            }
        }
        s
    };
    let barrier = |p: &[f64], t: f64| -> f64 {
        if p.iter().any(|&x| !(x > 0.0)) {
            return f64::INFINITY;
        }
        t * objective(p) - p.iter().map(|x| x.ln()).sum::<f64>()
    };
    let total = (m * n) as f64;
    let mut p: Vec<f64> = (0..m * n).map(|e| a[e / n] / n as f64).collect();
    let mut t = 1.0;
    let t_final = total / 1e-10;
    let mut iterations = 0;
    loop {
        // Centering by equality-constrained Newton from a feasible point.
        for _ in 0..200 {
            iterations += 1;
            let q: Vec<f64> = (0..n).map(|j| (0..m).map(|i| p[i * n + j]).sum()).collect();
            // Row-constant shifts of the gradient only change the multipliers; they keep it O(1/P).
            let mut grad: Vec<f64> = (0..m * n).map(|e| cmat[e] + f[e % n] + q[e % n].ln() - lw + 1.0).collect();
            for i in 0..m {
                let row = &mut grad[i * n..(i + 1) * n];
                let smin = row.iter().cloned().fold(f64::INFINITY, f64::min);
                row.iter_mut().for_each(|g| *g -= smin);
            }
            for e in 0..m * n {
                grad[e] = t * grad[e] - 1.0 / p[e];
            }
            // Each column block j has Hessian diag(1/P_ij²) + (t/q_j) 11ᵀ, inverted by
            // Sherman-Morrison in a form free of cancellation: with d = P², T = q/t + Σd,
            // (H⁻¹r)_i = d_i ((T − d_i) r_i − Σ_{k≠i} d_k r_k) / T.
            let dinv: Vec<f64> = p.iter().map(|x| x * x).collect();
            let col = |j: usize| -> (Vec<f64>, f64) {
                let d: Vec<f64> = (0..m).map(|i| dinv[i * n + j]).collect();
                let tt = q[j] / t + d.iter().sum::<f64>();
                (d, tt)
            };
            let block_inv = |d: &[f64], tt: f64, r: &[f64], out: &mut [f64]| {
                let qt = tt - d.iter().sum::<f64>();
                for i in 0..m {
                    let (mut rest, mut dr) = (qt, 0.0);
                    for k in (0..m).filter(|&k| k != i) {
                        rest += d[k];
                        dr += d[k] * r[k];
                    }
                    out[i] = d[i] * (rest * r[i] - dr) / tt;
                }
            };
            let mut s_mat = DMatrix::<f64>::zeros(m, m);
            let mut rhs = DVector::<f64>::zeros(m);
            let mut tmp = vec![0.0; m];
            let mut gc = vec![0.0; m];
            for j in 0..n {
                let (d, tt) = col(j);
                for i in 0..m {
                    gc[i] = grad[i * n + j];
                }
                block_inv(&d, tt, &gc, &mut tmp);
                for i in 0..m {
                    rhs[i] -= tmp[i];
                    let rest = q[j] / t + (0..m).filter(|&k| k != i).map(|k| d[k]).sum::<f64>();
                    s_mat[(i, i)] += d[i] * rest / tt;
                    for k in 0..m {
                        if k != i {
                            s_mat[(i, k)] -= d[i] * d[k] / tt;
                        }
                    }
                }
            }
            let chol = s_mat.cholesky().ok_or_else(|| Error::Oracle("interior-point Schur complement is not positive definite".into()))?;
            let nu = chol.solve(&rhs);
            // Δ = −H⁻¹(g + Eᵀν).
            let mut step = vec![0.0; m * n];
            for j in 0..n {
                let (d, tt) = col(j);
                for i in 0..m {
                    gc[i] = grad[i * n + j] + nu[i];
                }
                block_inv(&d, tt, &gc, &mut tmp);
                for i in 0..m {
                    step[i * n + j] = -tmp[i];
                }
            }
            // Newton decrement ΔᵀHΔ, always nonnegative.
            let mut decrement = 0.0;
            for j in 0..n {
                let mut cs = 0.0;
                for i in 0..m {
                    let e = i * n + j;
                    decrement += step[e] * step[e] / dinv[e];
                    cs += step[e];
                }
                decrement += t / q[j] * cs * cs;
            }
            if decrement / 2.0 <= 1e-12 {
                break;
            }
            let b0 = barrier(&p, t);
            let mut alpha = 1.0;
            for (x, s) in p.iter().zip(&step) {
                if *s < 0.0 {
                    alpha = f64::min(alpha, -0.99 * x / s);
                }
            }
            let mut trial = vec![0.0; m * n];
            loop {
                for e in 0..m * n {
                    trial[e] = p[e] + alpha * step[e];
                }
                // Inside the quadratic region the barrier change is below round-off: take the step.
                if decrement < 0.1 || barrier(&trial, t) <= b0 - 0.25 * alpha * decrement || alpha < 1e-14 {
                    break;
                }
                alpha *= 0.5;
            }
            p.copy_from_slice(&trial);
        }
        if t >= t_final {
            break;
        }
        t = (t * 10.0).min(t_final);
    }
    // First-order certificate.
    let q: Vec<f64> = (0..n).map(|j| (0..m).map(|i| p[i * n + j]).sum()).collect();
    let mut comp = 0.0;
    for i in 0..m {
        let s: Vec<f64> = (0..n).map(|j| cmat[i * n + j] + f[j] + q[j].ln() - lw + 1.0).collect();
        let smin = s.iter().cloned().fold(f64::INFINITY, f64::min);
        for j in 0..n {
            comp += p[i * n + j] * (s[j] - smin);
        }
    }
    if !(comp <= 1e-8) {
        return Err(Error::Oracle(format!("exact JKO oracle KKT residual {comp:e} above 1e-8")));
    }
    let transport: f64 = (0..m * n).map(|e| cmat[e] * 2.0 * h * p[e]).sum();
    let plan_entropy: f64 = p.iter().map(|x| x * (x.ln() - 2.0 * lw)).sum();
    let rho_vals: Vec<f64> = q.iter().map(|x| x / w).collect();
    let fe = |r: &[f64]| -> f64 { r.iter().zip(&f).filter(|(r, _)| **r > 0.0).map(|(r, f)| (f + r.ln()) * r).sum::<f64>() * w };
    let competitor = fe(mu_tilde.values());
    let objective = transport / (2.0 * h) + fe(&rho_vals);
    let identity_entropy = mu_tilde.values().iter().filter(|r| **r > 0.0).map(|r| r * (r / w).ln()).sum::<f64>() * w;
    Ok(JkoResult {
        rho_next: Density::new(g.clone(), rho_vals)?,
        transport_cost: transport,
        plan_entropy,
        objective,
        competitor,
        identity_entropy,
        iterations,
        residual: comp,
        refinement: vec![1; d],
        plan: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropic_ot::build_cost;
    use crate::grid::{Axis, Grid};
    use crate::model::{preset_kolmogorov_chain, BlockPotential, DiffusionMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn line(n: usize, lo: f64, hi: f64) -> Arc<Grid> {
        Arc::new(Grid::new(vec![Axis::new(lo, hi, n).unwrap()]).unwrap())
    }

    #[test]
    fn identical_measures_cost_nothing() {
        let g = line(6, 0.0, 6.0);
        let mu = Density::new(g.clone(), vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.1]).unwrap();
        let c = build_cost(&g, &DiffusionMatrix::identity(1), 0.0, true).unwrap();
        let r = exact_ot_small(&mu, &mu, &c).unwrap();
        assert!(r.value.abs() < 1e-14);
        for (i, j, x) in r.plan {
            assert!(i == j || x < 1e-15);
        }
    }

    #[test]
    fn forced_plan() {
        let g = line(2, 0.0, 2.0);
        let mu = Density::new(g.clone(), vec![1.0, 0.0]).unwrap();
        let nu = Density::new(g.clone(), vec![0.0, 1.0]).unwrap();
        let c = build_cost(&g, &DiffusionMatrix::identity(1), 0.5, false).unwrap();
        assert!((exact_ot_small(&mu, &nu, &c).unwrap().value - c.cost(&[0.5], &[1.5])).abs() < 1e-14);
    }

    #[test]
    fn one_dimensional_value_matches_monotone_rearrangement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = line(12, -1.0, 1.0);
        let c = build_cost(&g, &DiffusionMatrix::identity(1), 0.0, true).unwrap();
        for _ in 0..10 {
            let a: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
            let (a, b) = (Density::new(g.clone(), a).unwrap(), Density::new(g.clone(), b).unwrap());
            // Monotone coupling of atoms at the centers, computed by a two-pointer sweep.
            let w = g.cell_volume();
            let (mut x, mut y) = (a.values().iter().map(|v| v * w).collect::<Vec<_>>(), b.values().iter().map(|v| v * w).collect::<Vec<_>>());
            let (mut i, mut j, mut s) = (0, 0, 0.0);
            while i < 12 && j < 12 {
                let t = x[i].min(y[j]);
                s += t * (g.axis(0).center(i) - g.axis(0).center(j)).powi(2);
                x[i] -= t;
                y[j] -= t;
                if x[i] <= 1e-15 { i += 1 } else { j += 1 }
            }
            let e = exact_ot_small(&a, &b, &c).unwrap().value;
            assert!((e - s).abs() < 1e-12, "{e} vs {s}");
        }
    }

    #[test]
    fn size_limit() {
        let g = Arc::new(Grid::new(vec![Axis::new(0.0, 1.0, 101).unwrap(), Axis::new(0.0, 1.0, 101).unwrap()]).unwrap());
        let mu = Density::uniform(g.clone(), &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let c = build_cost(&g, &DiffusionMatrix::identity(2), 0.0, true).unwrap();
        assert!(matches!(exact_ot_small(&mu, &mu, &c), Err(Error::Size(_))));
        let g2 = line(31, 0.0, 1.0);
        let mu2 = Density::uniform(g2.clone(), &[0.0], &[1.0]).unwrap();
        let c2 = build_cost(&g2, &DiffusionMatrix::identity(1), 0.1, false).unwrap();
        let m = preset_kolmogorov_chain(1, 1, BlockPotential::zero()).unwrap();
        assert!(matches!(exact_jko_small(&mu2, &c2, 0.1, &m), Err(Error::Size(_))));
    }

    #[test]
    fn exact_jko_beats_competitor_and_blurs() {
        let g = line(9, -2.0, 2.0);
        let mu = Density::new(g.clone(), vec![0.0, 0.0, 0.0, 0.2, 1.0, 0.2, 0.0, 0.0, 0.0]).unwrap();
        let m = preset_kolmogorov_chain(1, 1, BlockPotential::zero()).unwrap();
        let h = 0.05;
        let c = build_cost(&g, m.diffusion(), h, false).unwrap();
        let r = exact_jko_small(&mu, &c, h, &m).unwrap();
        assert!(r.objective <= r.competitor);
        // Mass spreads into the empty cells.
        let spread = |x: &Density| x.covariance()[0];
        assert!(spread(&r.rho_next) > spread(&mu));
        assert!(r.residual <= 1e-8);
    }

    #[test]
    fn exact_jko_transport_shrinks_with_h() {
        let g = line(11, -2.0, 2.0);
        let mu = Density::gaussian(g.clone(), &[0.2], &[0.3]).unwrap();
        let m = preset_kolmogorov_chain(1, 1, BlockPotential::quadratic(1.0)).unwrap();
        let costs: Vec<f64> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&h| {
                let c = build_cost(&g, m.diffusion(), h, false).unwrap();
                exact_jko_small(&mu, &c, h, &m).unwrap().transport_cost
            })
            .collect();
        assert!(costs[0] > costs[1] && costs[1] > costs[2], "{costs:?}");
    }
}
