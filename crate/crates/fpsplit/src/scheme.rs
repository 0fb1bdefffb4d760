//! The splitting loop: for each window, the exact transport phase followed by
//! one entropic JKO step, with the a priori estimates recorded as diagnostics.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::entropic_ot::{build_cost, euler_lagrange_residual, wasserstein2, JkoOptions, JkoSolver, TestFunction, TransportPlan};
use crate::error::{config, Error, Result};
use crate::grid::{entropy, free_energy, Density};
use crate::model::{eval_drift, Model};
use crate::transport::{continuous_interpolant, push_forward, FlowConfig};

/// `ε` as a function of the window length `h`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum EpsilonRule {
    /// `ε = h² / max(1, |log h|)`.
    #[default]
    LogQuadratic,
    /// The same `ε` for every `h`.
    Fixed(f64),
    /// `ε = c h`.
    Linear(f64),
}

impl EpsilonRule {
    pub fn epsilon(&self, h: f64) -> f64 {
        match *self {
            EpsilonRule::LogQuadratic => h * h / h.ln().abs().max(1.0),
            EpsilonRule::Fixed(e) => e,
            EpsilonRule::Linear(c) => c * h,
        }
    }

    /// Whether `ε |log ε| ≤ 3 h²` at this `h`.
    pub fn admissible(&self, h: f64) -> bool {
        let e = self.epsilon(h);
        e > 0.0 && e * e.ln().abs() <= 3.0 * h * h
    }
}

/// Settings of one run.
#[derive(Clone, Debug)]
pub struct SchemeConfig {
    /// Final time `T`.
    pub t_final: f64,
    /// Window count `N`, so `h = T/N`.
    pub windows: usize,
    pub epsilon_rule: EpsilonRule,
    pub flow: FlowConfig,
    pub jko: JkoOptions,
    /// Keep every stored plan (memory heavy).
    pub keep_plans: bool,
    /// Test functions for the per-step Euler-Lagrange residual; empty disables it.
    pub el_tests: Vec<TestFunction>,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            t_final: 1.0,
            windows: 16,
            epsilon_rule: EpsilonRule::LogQuadratic,
            flow: FlowConfig::default(),
            jko: JkoOptions::default(),
            keep_plans: false,
            el_tests: Vec::new(),
        }
    }
}

impl SchemeConfig {
    pub fn h(&self) -> f64 {
        self.t_final / self.windows as f64
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon_rule.epsilon(self.h())
    }

    pub fn validate(&self) -> Result<()> {
        if self.windows == 0 {
            return config("window count N must be >= 1");
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return config("final time T must be positive and finite");
        }
        let h = self.h();
        if !self.epsilon_rule.admissible(h) {
            let e = self.epsilon_rule.epsilon(h);
            return config(format!("epsilon {e:e} at h = {h} violates eps*|log eps| <= 3h^2 (= {:e})", 3.0 * h * h));
        }
        self.flow.validate()?;
        self.jko.validate()
    }
}

/// Diagnostics of one window, after both phases.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub n: usize,
    pub t: f64,
    pub mass_defect: f64,
    pub second_moment: f64,
    pub entropy: f64,
    pub entropy_plus: f64,
    pub entropy_minus: f64,
    pub free_energy: f64,
    pub step_cost: f64,
    pub cumulative_cost: f64,
    pub entropy_defect: f64,
    pub el_residual: Option<f64>,
    pub boundary_mass: f64,
    /// `(ε/2h) max(0, H_id − H(γ))`.
    pub entropic_slack: f64,
    /// `(λ_max(A)+h) (c_h, γ)`, an upper bound for the step's `W₂²`.
    pub jko_w2_sq_bound: f64,
    /// `h² ∫‖b[ρⁿ]‖² ρⁿ`, an upper bound for the transport phase's `W₂²`.
    pub transport_w2_sq_bound: f64,
    /// `H₋ / (M + 1)^{d/(d+2)}`.
    pub entropy_ratio: f64,
    pub jko_iterations: usize,
    pub jko_residual: f64,
    /// `F(ρⁿ⁺¹) ≤ F(ρ̃ⁿ⁺¹) + entropic_slack`, the JKO step's own energy inequality.
    pub dissipation_ok: bool,
}

/// Per-window diagnostics in emission order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
}

impl RunReport {
    pub const COLUMNS: [&'static str; 20] = [
        "n",
        "t",
        "mass_defect",
        "second_moment",
        "entropy",
        "entropy_plus",
        "entropy_minus",
        "free_energy",
        "step_cost",
        "cumulative_cost",
        "entropy_defect",
        "el_residual",
        "boundary_mass",
        "entropic_slack",
        "jko_w2_sq_bound",
        "transport_w2_sq_bound",
        "entropy_ratio",
        "jko_iterations",
        "jko_residual",
        "dissipation_ok",
    ];

    pub fn to_csv(&self) -> String {
        let mut s = Self::COLUMNS.join(",");
        s.push('\n');
        for r in &self.rows {
            let el = r.el_residual.map(|v| format!("{v:e}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{:e},{:e},{:e},{:e},{:e},{},{:e},{}",
                r.n,
                r.t,
                r.mass_defect,
                r.second_moment,
                r.entropy,
                r.entropy_plus,
                r.entropy_minus,
                r.free_energy,
                r.step_cost,
                r.cumulative_cost,
                r.entropy_defect,
                el,
                r.boundary_mass,
                r.entropic_slack,
                r.jko_w2_sq_bound,
                r.transport_w2_sq_bound,
                r.entropy_ratio,
                r.jko_iterations,
                r.jko_residual,
                r.dissipation_ok
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// `Σₙ (c_h, γⁿ)`.
    pub fn total_cost(&self) -> f64 {
        self.rows.last().map(|r| r.cumulative_cost).unwrap_or(0.0)
    }
}

/// Densities `ρ⁰…ρᴺ`, `ρ̃¹…ρ̃ᴺ` and the run report.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub h: f64,
    pub epsilon: f64,
    pub t_final: f64,
    pub rho: Vec<Density>,
    pub rho_tilde: Vec<Density>,
    /// Plans of each JKO step when requested.
    pub plans: Vec<Option<TransportPlan>>,
    pub report: RunReport,
}

impl Trajectory {
    /// Completed windows.
    pub fn windows(&self) -> usize {
        self.rho_tilde.len()
    }

    /// `ρᴺ` (or the last completed window).
    pub fn last(&self) -> &Density {
        self.rho.last().expect("trajectory holds the initial density")
    }

    /// Window index `n` with `t ∈ [t_n, t_{n+1})`.
    pub fn window_of(&self, t: f64) -> Result<usize> {
        if !(t >= 0.0 && t < self.t_final) {
            return Err(Error::TimeRange { t, horizon: self.t_final });
        }
        let mut n = (t / self.h).floor() as usize;
        let nmax = self.rho.len() - 1;
        if n >= nmax {
            n = nmax.saturating_sub(1);
        }
        while n > 0 && t < n as f64 * self.h {
            n -= 1;
        }
        while n + 1 < nmax && t >= (n + 1) as f64 * self.h {
            n += 1;
        }
        Ok(n)
    }
}

/// Rejects initial data with infinite free energy or concentrated on one cell.
fn check_initial(rho0: &Density, model: &Model) -> Result<()> {
    if model.dim() != rho0.grid().dim() {
        return config(format!("model is {}-dimensional but the grid is {}-dimensional", model.dim(), rho0.grid().dim()));
    }
    let f = free_energy(rho0, model);
    if !f.f_free.is_finite() {
        return config("initial free energy is not finite");
    }
    if rho0.values().iter().filter(|v| **v > 0.0).count() < 2 {
        return config("initial density is a single-cell atom; its free energy is infinite in the continuum");
    }
    Ok(())
}

/// Runs the scheme; on failure returns the error wrapped with the failing window.
pub fn run(model: &Model, rho0: &Density, cfg: &SchemeConfig) -> Result<Trajectory> {
    let (traj, err) = run_partial(model, rho0, cfg)?;
    match err {
        None => Ok(traj),
        Some(e) => Err(e),
    }
}

/// Runs the scheme and keeps the completed windows when a phase fails.
///
/// The outer error covers validation failures before any window starts.
pub fn run_partial(model: &Model, rho0: &Density, cfg: &SchemeConfig) -> Result<(Trajectory, Option<Error>)> {
    cfg.validate()?;
    check_initial(rho0, model)?;
    let g = rho0.grid_arc().clone();
    let d = g.dim();
    let h = cfg.h();
    let eps = cfg.epsilon();
    let cost = build_cost(&g, model.diffusion(), h, model.unperturbed())?.with_epsilon(eps)?;
    let lambda_max = model.diffusion().lambda_max();
    let mut jko_opts = cfg.jko;
    jko_opts.keep_plan = cfg.keep_plans || !cfg.el_tests.is_empty();
    let mut solver = JkoSolver::new(jko_opts);
    let mut traj = Trajectory {
        h,
        epsilon: eps,
        t_final: cfg.t_final,
        rho: vec![rho0.clone()],
        rho_tilde: Vec::new(),
        plans: Vec::new(),
        report: RunReport::default(),
    };
    let alpha = d as f64 / (d as f64 + 2.0);
    let mut cumulative = 0.0;
    for n in 0..cfg.windows {
        let wrap = |e: Error| Error::Window { window: n, source: Box::new(e) };
        let rho_n = traj.rho[n].clone();
        let step = (|| -> Result<_> {
            let drift = eval_drift(model, &rho_n, &g)?;
            let w = g.cell_volume();
            let b2: f64 = (0..g.len()).map(|c| rho_n.values()[c] * drift[c * d..(c + 1) * d].iter().map(|v| v * v).sum::<f64>()).sum::<f64>() * w;
            let pf = push_forward(&rho_n, model, h, &cfg.flow)?;
            let jr = solver.step(&pf.rho, &cost, model)?;
            Ok((pf, jr, h * h * b2))
        })();
        let (pf, jr, transport_bound) = match step {
            Ok(s) => s,
            Err(e) => return Ok((traj, Some(wrap(e)))),
        };
        let el = match (&jr.plan, cfg.el_tests.is_empty()) {
            (Some(plan), false) => match euler_lagrange_residual(&jr, plan, h, model, &cfg.el_tests) {
                Ok(v) => Some(v),
                Err(e) => return Ok((traj, Some(wrap(e)))),
            },
            _ => None,
        };
        let fun = free_energy(&jr.rho_next, model);
        let f_tilde = free_energy(&pf.rho, model).f_free;
        let slack = jr.entropic_slack(eps, h);
        let ent_before = entropy(&rho_n).h;
        let ent_after = entropy(&pf.rho).h;
        cumulative += jr.transport_cost;
        let boundary = pf.boundary_mass.max(jr.rho_next.boundary_mass());
        if boundary > cfg.flow.mass_tol {
            log::warn!("window {n}: boundary-layer mass {boundary:.3e} above {:.1e}", cfg.flow.mass_tol);
        }
        traj.report.rows.push(ReportRow {
            n: n + 1,
            t: (n + 1) as f64 * h,
            mass_defect: pf.mass_defect.max((jr.rho_next.mass() - 1.0).abs()),
            second_moment: fun.m,
            entropy: fun.h,
            entropy_plus: fun.h_plus,
            entropy_minus: fun.h_minus,
            free_energy: fun.f_free,
            step_cost: jr.transport_cost,
            cumulative_cost: cumulative,
            entropy_defect: (ent_after - ent_before).abs(),
            el_residual: el,
            boundary_mass: boundary,
            entropic_slack: slack,
            jko_w2_sq_bound: (lambda_max + h) * jr.transport_cost,
            transport_w2_sq_bound: transport_bound,
            entropy_ratio: fun.h_minus / (fun.m + 1.0).powf(alpha),
            jko_iterations: jr.iterations,
            jko_residual: jr.residual,
            dissipation_ok: fun.f_free <= f_tilde + slack + 1e-12 * f_tilde.abs().max(1.0),
        });
        log::info!("window {}/{}: F = {:.6e}, step cost = {:.3e}", n + 1, cfg.windows, fun.f_free, jr.transport_cost);
        traj.plans.push(if cfg.keep_plans { jr.plan.clone() } else { None });
        traj.rho_tilde.push(pf.rho);
        traj.rho.push(jr.rho_next);
    }
    Ok((traj, None))
}

/// Which time interpolation of the discrete trajectory to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolant {
    /// `ρ_h(t) = ρⁿ⁺¹` on `[t_n, t_{n+1})`.
    Piecewise,
    /// `ρ̃_h(t) = ρ̃ⁿ⁺¹` on `[t_n, t_{n+1})`.
    PiecewiseTilde,
    /// `ρ†_h(t) = X(t − t_n)_# ρⁿ`.
    TransportContinuous,
}

pub fn evaluate_interpolant(traj: &Trajectory, which: Interpolant, t: f64, model: &Model, cfg: &SchemeConfig) -> Result<Density> {
    let n = traj.window_of(t)?;
    match which {
        Interpolant::Piecewise => Ok(traj.rho[n + 1].clone()),
        Interpolant::PiecewiseTilde => Ok(traj.rho_tilde[n].clone()),
        Interpolant::TransportContinuous => {
            let off = (t - n as f64 * traj.h).clamp(0.0, traj.h * (1.0 - 1e-15));
            continuous_interpolant(&traj.rho[n], model, off, traj.h, &cfg.flow)
        }
    }
}

/// Space-time test function `φ(t, x) = ψ(t) χ(x)` with `ψ(T) = 0`.
#[derive(Clone)]
pub struct SpaceTimeTest {
    pub label: String,
    psi: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    dpsi: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub space: TestFunction,
}

impl std::fmt::Debug for SpaceTimeTest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpaceTimeTest").field("label", &self.label).field("space", &self.space).finish()
    }
}

impl SpaceTimeTest {
    pub fn new(
        label: impl Into<String>,
        psi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        dpsi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        space: TestFunction,
    ) -> Self {
        Self { label: label.into(), psi: Arc::new(psi), dpsi: Arc::new(dpsi), space }
    }

    /// `ψ(t) = cos(π t / 2T)`.
    pub fn cosine(t_final: f64, space: TestFunction) -> Self {
        let k = std::f64::consts::PI / (2.0 * t_final);
        let label = format!("cos*{}", space.label);
        Self::new(label, move |t| (k * t).cos(), move |t| -k * (k * t).sin(), space)
    }

    /// `ψ(t) = (1 − t/T)²`.
    pub fn quadratic(t_final: f64, space: TestFunction) -> Self {
        let label = format!("quad*{}", space.label);
        Self::new(label, move |t| (1.0 - t / t_final).powi(2), move |t| -2.0 * (1.0 - t / t_final) / t_final, space)
    }

    pub fn psi(&self, t: f64) -> f64 {
        (self.psi)(t)
    }

    pub fn dpsi(&self, t: f64) -> f64 {
        (self.dpsi)(t)
    }
}

/// `|∫ρ⁰φ(0) + ∫₀ᵀ∫ρ_h (∂tφ + ⟨b[ρ_h],∇φ⟩ + div(A∇φ) − ⟨A∇f,∇φ⟩)|` with the
/// time integral taken by the midpoint rule on each window.
pub fn weak_residual(traj: &Trajectory, model: &Model, phi: &SpaceTimeTest) -> Result<f64> {
    let rho0 = &traj.rho[0];
    let g = rho0.grid();
    let d = g.dim();
    if phi.space.dim() != d || model.dim() != d {
        return config("test function, model and grid dimensions differ");
    }
    let w = g.cell_volume();
    let a = model.diffusion();
    let centers = g.centers();
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    let mut gf = vec![0.0; d];
    let mut agrad = vec![0.0; d];
    // Spatial parts tabulated once.
    let mut chi = vec![0.0; g.len()];
    let mut chi_grad = vec![0.0; g.len() * d];
    let mut chi_diff = vec![0.0; g.len()];
    for c in 0..g.len() {
        let x = &centers[c * d..(c + 1) * d];
        chi[c] = phi.space.value(x);
        phi.space.gradient(x, &mut grad);
        phi.space.hessian(x, &mut hess);
        model.potential_gradient(x, &mut gf);
        a.mul_vec(&grad, &mut agrad);
        let div: f64 = (0..d).map(|i| (0..d).map(|j| a.get(i, j) * hess[j * d + i]).sum::<f64>()).sum();
        let drift: f64 = agrad.iter().zip(&gf).map(|(x, y)| x * y).sum();
        chi_grad[c * d..(c + 1) * d].copy_from_slice(&grad);
        chi_diff[c] = div - drift;
    }
    let mut total = phi.psi(0.0) * rho0.values().iter().zip(&chi).map(|(r, c)| r * c).sum::<f64>() * w;
    for n in 0..traj.windows() {
        let rho = &traj.rho[n + 1];
        let tm = (n as f64 + 0.5) * traj.h;
        let b = eval_drift(model, rho, g)?;
        let (ps, dps) = (phi.psi(tm), phi.dpsi(tm));
        let mut s = 0.0;
        for c in 0..g.len() {
            let r = rho.values()[c];
            if r == 0.0 {
                continue;
            }
            let bg: f64 = (0..d).map(|k| b[c * d + k] * chi_grad[c * d + k]).sum();
            s += r * (dps * chi[c] + ps * (bg + chi_diff[c]));
        }
        total += traj.h * s * w;
    }
    Ok(total.abs())
}

/// Reference solution for a convergence study.
#[derive(Clone)]
pub enum Reference {
    /// Closed-form density at time `t` on the run's grid.
    Analytic(Arc<dyn Fn(f64) -> Result<Density> + Send + Sync>),
    /// The run with the largest window count.
    Finest,
}

/// Extra per-run metric reported as its own column.
pub type Metric = Arc<dyn Fn(&Trajectory) -> f64 + Send + Sync>;

/// One row of a convergence study.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub windows: usize,
    pub h: f64,
    /// Largest `W₂` to the reference over the sampled window ends.
    pub sup_w2: f64,
    pub terminal_l1: f64,
    /// Largest weak residual over the supplied test functions.
    pub weak_residual: f64,
    pub cumulative_cost: f64,
    /// `Σ step costs / h`.
    pub cost_constant: f64,
    pub max_second_moment: f64,
    pub max_free_energy: f64,
    pub max_entropy_plus: f64,
    pub metric: Option<f64>,
    pub error: Option<String>,
}

/// Convergence study settings beyond the scheme configuration.
#[derive(Clone, Default)]
pub struct StudyOptions {
    pub tests: Vec<SpaceTimeTest>,
    /// Window ends sampled for `sup W₂` (all when 0).
    pub w2_samples: usize,
    pub metric: Option<(String, Metric)>,
}

/// Study table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StudyTable {
    pub metric_name: Option<String>,
    pub rows: Vec<StudyRow>,
}

impl StudyTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("windows,h,sup_w2,terminal_l1,weak_residual,cumulative_cost,cost_constant,max_second_moment,max_free_energy,max_entropy_plus");
        if let Some(m) = &self.metric_name {
            s.push(',');
            s.push_str(m);
        }
        s.push_str(",error\n");
        for r in &self.rows {
            let _ = write!(
                s,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.windows, r.h, r.sup_w2, r.terminal_l1, r.weak_residual, r.cumulative_cost, r.cost_constant, r.max_second_moment, r.max_free_energy, r.max_entropy_plus
            );
            if self.metric_name.is_some() {
                let _ = write!(s, ",{}", r.metric.map(|v| format!("{v:e}")).unwrap_or_default());
            }
            let _ = writeln!(s, ",{}", r.error.as_deref().unwrap_or("").replace(',', ";"));
        }
        s
    }

    /// Whether `max M`, `max F` and `max H₊` stay below 1.5× the first run's
    /// values (with an absolute allowance of 1 for values near zero).
    pub fn bounds_stable(&self) -> bool {
        let ok: Vec<&StudyRow> = self.rows.iter().filter(|r| r.error.is_none()).collect();
        let Some(first) = ok.first() else { return false };
        let within = |v: f64, v0: f64| v <= v0 + 0.5 * v0.abs().max(1.0);
        ok.iter().all(|r| {
            within(r.max_second_moment, first.max_second_moment) && within(r.max_free_energy, first.max_free_energy) && within(r.max_entropy_plus, first.max_entropy_plus)
        })
    }

    /// Whether a column decreases strictly down the successful rows.
    pub fn decreasing(&self, column: impl Fn(&StudyRow) -> f64) -> bool {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.error.is_none()).map(column).collect();
        v.windows(2).all(|p| p[1] < p[0])
    }
}

/// Runs the scheme for each window count and compares against the reference.
///
/// Runs execute concurrently; the table is assembled in `n_list` order.
pub fn convergence_study(model: &Model, rho0: &Density, t_final: f64, n_list: &[usize], cfg: &SchemeConfig, opts: &StudyOptions) -> Result<StudyTable> {
    convergence_study_with(model, rho0, t_final, n_list, cfg, opts, &Reference::Finest)
}

pub fn convergence_study_with(
    model: &Model,
    rho0: &Density,
    t_final: f64,
    n_list: &[usize],
    cfg: &SchemeConfig,
    opts: &StudyOptions,
    reference: &Reference,
) -> Result<StudyTable> {
    if n_list.len() < 2 {
        return config("a convergence study needs at least two window counts");
    }
    if n_list.windows(2).any(|p| p[1] <= p[0]) {
        return config("window counts must be strictly increasing");
    }
    let runs: Vec<Result<Trajectory>> = std::thread::scope(|s| {
        let handles: Vec<_> = n_list
            .iter()
            .map(|&n| {
                let c = SchemeConfig { t_final, windows: n, ..cfg.clone() };
                s.spawn(move || run(model, rho0, &c))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(Error::Config("study run panicked".into())))).collect()
    });
    let finest = match reference {
        Reference::Finest => runs.last().and_then(|r| r.as_ref().ok()),
        Reference::Analytic(_) => None,
    };
    let reference_at = |t: f64, k: usize| -> Result<Density> {
        match reference {
            Reference::Analytic(f) => f(t),
            Reference::Finest => {
                let fin = finest.ok_or_else(|| Error::Config("finest reference run failed".into()))?;
                let _ = k;
                let m = ((t / fin.h).round() as usize).min(fin.rho.len() - 1);
                Ok(fin.rho[m].clone())
            }
        }
    };
    let mut table = StudyTable { metric_name: opts.metric.as_ref().map(|(n, _)| n.clone()), rows: Vec::new() };
    for (k, (&n, r)) in n_list.iter().zip(&runs).enumerate() {
        let h = t_final / n as f64;
        let mut row = StudyRow {
            windows: n,
            h,
            sup_w2: f64::NAN,
            terminal_l1: f64::NAN,
            weak_residual: f64::NAN,
            cumulative_cost: f64::NAN,
            cost_constant: f64::NAN,
            max_second_moment: f64::NAN,
            max_free_energy: f64::NAN,
            max_entropy_plus: f64::NAN,
            metric: None,
            error: None,
        };
        let traj = match r {
            Ok(t) => t,
            Err(e) => {
                row.error = Some(e.to_string());
                table.rows.push(row);
                continue;
            }
        };
        let res = (|| -> Result<()> {
            let samples: Vec<usize> = if opts.w2_samples == 0 || opts.w2_samples >= n {
                (1..=n).collect()
            } else {
                (1..=opts.w2_samples).map(|s| (s * n).div_ceil(opts.w2_samples)).collect()
            };
            let mut sup = 0.0f64;
            for &s in &samples {
                let rf = reference_at(s as f64 * h, k)?;
                sup = sup.max(wasserstein2(&traj.rho[s], &rf)?);
            }
            row.sup_w2 = sup;
            row.terminal_l1 = traj.last().l1_distance(&reference_at(t_final, k)?);
            let mut wr = 0.0f64;
            for phi in &opts.tests {
                wr = wr.max(weak_residual(traj, model, phi)?);
            }
            row.weak_residual = if opts.tests.is_empty() { f64::NAN } else { wr };
            row.cumulative_cost = traj.report.total_cost();
            row.cost_constant = row.cumulative_cost / h;
            let rows = &traj.report.rows;
            row.max_second_moment = rows.iter().map(|r| r.second_moment).fold(f64::MIN, f64::max);
            row.max_free_energy = rows.iter().map(|r| r.free_energy).fold(f64::MIN, f64::max);
            row.max_entropy_plus = rows.iter().map(|r| r.entropy_plus).fold(f64::MIN, f64::max);
            row.metric = opts.metric.as_ref().map(|(_, m)| m(traj));
            Ok(())
        })();
        if let Err(e) = res {
            row.error = Some(e.to_string());
        }
        table.rows.push(row);
    }
    if table.rows.iter().all(|r| r.error.is_some()) {
        return Err(Error::Config(format!("every study run failed; first: {}", table.rows[0].error.as_deref().unwrap_or(""))));
    }
    if !table.decreasing(|r| r.terminal_l1) {
        log::warn!("terminal L1 error is not decreasing across the study");
    }
    if !table.bounds_stable() {
        log::warn!("energy and moment bounds grow by more than 1.5x across the study");
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Axis, Grid};
    use crate::model::{preset_kolmogorov_chain, BlockPotential};

    fn heat() -> Model {
        preset_kolmogorov_chain(1, 1, BlockPotential::zero()).unwrap()
    }

    fn line(n: usize, l: f64) -> Arc<Grid> {
        Arc::new(Grid::new(vec![Axis::new(-l, l, n).unwrap()]).unwrap())
    }

    #[test]
    fn epsilon_rule_guard() {
        for k in 3..=9 {
            let h = 0.5f64.powi(k);
            assert!(EpsilonRule::LogQuadratic.admissible(h));
            assert!(!EpsilonRule::Linear(1.0).admissible(h));
        }
        let c = SchemeConfig { windows: 0, ..SchemeConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn heat_variance_grows_linearly() {
        let g = line(96, 6.0);
        let rho0 = Density::gaussian(g, &[0.0], &[0.25]).unwrap();
        let cfg = SchemeConfig { t_final: 0.25, windows: 16, ..SchemeConfig::default() };
        let traj = run(&heat(), &rho0, &cfg).unwrap();
        assert_eq!(traj.report.rows.len(), 16);
        let var = traj.last().covariance()[0];
        assert!((var - (0.25 + 0.5)).abs() < 0.03, "{var}");
        let rows = &traj.report.rows;
        assert!(rows.windows(2).all(|p| p[1].cumulative_cost >= p[0].cumulative_cost));
        assert!(rows.iter().all(|r| r.mass_defect < 1e-8));
    }

    #[test]
    fn piecewise_interpolants_follow_window_index() {
        let g = line(48, 5.0);
        let rho0 = Density::gaussian(g, &[0.0], &[0.3]).unwrap();
        let cfg = SchemeConfig { t_final: 0.2, windows: 4, ..SchemeConfig::default() };
        let m = heat();
        let traj = run(&m, &rho0, &cfg).unwrap();
        let h = traj.h;
        let a = evaluate_interpolant(&traj, Interpolant::Piecewise, 1.5 * h, &m, &cfg).unwrap();
        assert_eq!(a.values(), traj.rho[2].values());
        let b = evaluate_interpolant(&traj, Interpolant::TransportContinuous, 2.0 * h, &m, &cfg).unwrap();
        assert!(b.l1_distance(&traj.rho[2]) < 1e-12);
        assert!(matches!(evaluate_interpolant(&traj, Interpolant::Piecewise, 0.2, &m, &cfg), Err(Error::TimeRange { .. })));
    }

    #[test]
    fn stationary_trajectory_has_small_weak_residual() {
        let g = line(160, 8.0);
        let m = preset_kolmogorov_chain(1, 1, BlockPotential::quadratic(1.0)).unwrap();
        let gibbs = Density::from_fn(g, |x| (-0.5 * x[0] * x[0]).exp()).unwrap();
        let n = 20;
        let traj = Trajectory {
            h: 1.0 / n as f64,
            epsilon: 0.0,
            t_final: 1.0,
            rho: vec![gibbs.clone(); n + 1],
            rho_tilde: vec![gibbs.clone(); n],
            plans: vec![None; n],
            report: RunReport::default(),
        };
        for phi in [
            SpaceTimeTest::cosine(1.0, TestFunction::gaussian(vec![0.5], 0.7)),
            SpaceTimeTest::quadratic(1.0, TestFunction::sine(vec![1.1], vec![0.3])),
        ] {
            let r = weak_residual(&traj, &m, &phi).unwrap();
            assert!(r < 1e-3, "{}: {r}", phi.label);
        }
    }

    #[test]
    fn zero_test_function_on_support_gives_zero() {
        let g = line(32, 4.0);
        let rho0 = Density::uniform(g, &[-1.0], &[1.0]).unwrap();
        let cfg = SchemeConfig { t_final: 0.1, windows: 2, ..SchemeConfig::default() };
        let m = heat();
        let traj = run(&m, &rho0, &cfg).unwrap();
        let zero = SpaceTimeTest::cosine(0.1, TestFunction::constant(1, 0.0));
        assert_eq!(weak_residual(&traj, &m, &zero).unwrap(), 0.0);
    }

    #[test]
    fn single_cell_initial_data_is_rejected() {
        let g = line(8, 1.0);
        let mut v = vec![0.0; 8];
        v[3] = 1.0;
        let rho0 = Density::new(g, v).unwrap();
        assert!(matches!(run(&heat(), &rho0, &SchemeConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn csv_has_one_row_per_window_and_fixed_header() {
        let g = line(32, 4.0);
        let rho0 = Density::gaussian(g, &[0.0], &[0.3]).unwrap();
        let cfg = SchemeConfig { t_final: 0.1, windows: 3, ..SchemeConfig::default() };
        let csv = run(&heat(), &rho0, &cfg).unwrap().report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], RunReport::COLUMNS.join(","));
        assert!(lines[1..].iter().all(|l| l.split(',').count() == RunReport::COLUMNS.len()));
    }
}
