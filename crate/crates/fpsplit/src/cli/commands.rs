//! The four commands. Each prints a human-readable summary to `out` and
//! returns an error whose exit code follows the CLI contract.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{InitialSpec, RunConfig, RESOLVED_NAME};
use super::default_tests;
use super::moments::{linear_coefficients, moment_ode, LinearCoefficients};
use crate::entropic_ot::{build_cost, euler_lagrange_residual, exact_jko_small, exact_ot_small, JkoOptions, JkoSolver};
use crate::error::{Error, Result};
use crate::grid::{free_energy, Density, Grid};
use crate::model::{check_divergence_free, check_measure_lipschitz, default_divergence_tol, nonnegative_potential, potential_gradient_error, Model};
use crate::scheme::{convergence_study_with, run_partial, Metric, Reference, SpaceTimeTest, StudyOptions, StudyTable, Trajectory};

fn io(e: std::io::Error) -> Error {
    Error::Io(e)
}

struct Setup {
    grid: Arc<Grid>,
    model: Model,
    rho0: Density,
}

fn setup(cfg: &RunConfig) -> Result<Setup> {
    let grid = cfg.grid()?;
    let model = cfg.build_model(&grid)?;
    let rho0 = cfg.initial_density(&grid)?;
    Ok(Setup { grid, model, rho0 })
}

fn write_snapshot(rho: &Density, dir: &Path, n: usize, cfg: &RunConfig) -> Result<()> {
    if cfg.output.csv {
        rho.write_csv(&dir.join(format!("rho_{n:06}.csv")))?;
    }
    if cfg.output.raw {
        rho.write_raw(&dir.join(format!("rho_{n:06}.raw")))?;
    }
    Ok(())
}

/// Solves, then writes `report.csv`, snapshots and the resolved config.
///
/// A failing window still leaves the report and snapshots of the completed
/// windows on disk.
pub fn cmd_run(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let s = setup(cfg)?;
    cfg.scheme.validate()?;
    let dir = &cfg.output.directory;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RESOLVED_NAME), cfg.resolved_toml())?;
    let (traj, err) = run_partial(&s.model, &s.rho0, &cfg.scheme)?;
    traj.report.write_csv(&dir.join("report.csv"))?;
    let stride = cfg.output.snapshot_stride;
    let last = traj.rho.len() - 1;
    for (n, rho) in traj.rho.iter().enumerate() {
        if (stride > 0 && n % stride == 0) || n == last {
            write_snapshot(rho, dir, n, cfg)?;
        }
    }
    match err {
        None => {
            let f = free_energy(traj.last(), &s.model);
            writeln!(
                out,
                "run: {} windows, h = {}, eps = {:e}, final F = {:.6e}, cumulative cost = {:.6e}, output in {}",
                traj.windows(),
                traj.h,
                traj.epsilon,
                f.f_free,
                traj.report.total_cost(),
                dir.display()
            )
            .map_err(io)?;
            Ok(())
        }
        Some(e) => {
            writeln!(out, "run: stopped after {} of {} windows", traj.windows(), cfg.scheme.windows).map_err(io)?;
            Err(e)
        }
    }
}

struct Check {
    name: String,
    value: String,
    limit: String,
    pass: bool,
    hard: bool,
}

/// Random Gaussian blobs inside the middle of the box, in pairs.
fn random_pairs(grid: &Arc<Grid>, count: usize, seed: u64) -> Result<Vec<(Density, Density)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = grid.dim();
    let blob = |rng: &mut ChaCha8Rng| -> Result<Density> {
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for k in 0..d {
            let ax = grid.axis(k);
            let (c, half) = (0.5 * (ax.lo + ax.hi), 0.25 * (ax.hi - ax.lo));
            mean[k] = c + half * rng.random_range(-1.0..1.0);
            let s = half * rng.random_range(0.2..0.6);
            var[k] = (s * s).max(ax.spacing().powi(2));
        }
        Density::gaussian(grid.clone(), &mean, &var)
    };
    (0..count).map(|_| Ok((blob(&mut rng)?, blob(&mut rng)?))).collect()
}

/// Assumption checks; any failing hard check is a configuration error.
pub fn cmd_validate(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let s = setup(cfg)?;
    let mut checks = Vec::new();
    let tol = default_divergence_tol(&s.model);
    match check_divergence_free(&s.model, &s.rho0, &s.grid, tol) {
        Ok(r) => checks.push(Check { name: "divergence_free".into(), value: format!("{:.3e}", r.max_divergence), limit: format!("{tol:.1e}"), pass: r.pass, hard: true }),
        Err(e) => checks.push(Check { name: "divergence_free".into(), value: e.to_string(), limit: format!("{tol:.1e}"), pass: false, hard: true }),
    }
    let lmin = s.model.diffusion().lambda_min();
    checks.push(Check { name: "diffusion_psd".into(), value: format!("{lmin:.3e}"), limit: ">= 0".into(), pass: lmin >= -1e-12, hard: true });
    let pot = nonnegative_potential(&s.model, &s.grid);
    checks.push(Check {
        name: "potential_nonnegative".into(),
        value: match pot {
            Ok(()) => "ok".into(),
            Err((c, v)) => format!("{v:.3e} at cell {c}"),
        },
        limit: ">= 0".into(),
        pass: pot.is_ok(),
        hard: true,
    });
    let ge = potential_gradient_error(&s.model, &s.grid);
    checks.push(Check { name: "potential_gradient".into(), value: format!("{ge:.3e}"), limit: "1.0e-2 (soft)".into(), pass: ge <= 1e-2, hard: false });
    if let Some(k) = &s.model.drift().kernel {
        let pairs = random_pairs(&s.grid, cfg.validate.pairs, cfg.validate.seed)?;
        let emp = check_measure_lipschitz(&s.model, &pairs, &s.grid)?;
        let limit = match k.lipschitz {
            Some(l) => format!("kernel L = {l:.3e}"),
            None => "finite".into(),
        };
        checks.push(Check { name: "kernel_lipschitz".into(), value: format!("{emp:.3e}"), limit, pass: emp.is_finite(), hard: true });
    }
    let f0 = free_energy(&s.rho0, &s.model).f_free;
    checks.push(Check { name: "initial_free_energy".into(), value: format!("{f0:.6e}"), limit: "finite".into(), pass: f0.is_finite(), hard: true });
    let rule = cfg.scheme.epsilon_rule;
    let mut hs = vec![cfg.scheme.h()];
    hs.extend(cfg.validate.check_h.iter().copied());
    for h in hs {
        let e = rule.epsilon(h);
        let lhs = e * e.ln().abs();
        checks.push(Check {
            name: format!("epsilon_scaling h={h}"),
            value: format!("{lhs:.3e}"),
            limit: format!("{:.3e}", 3.0 * h * h),
            pass: rule.admissible(h),
            hard: true,
        });
    }
    writeln!(out, "{:<32} {:>24} {:>20}  result", "check", "value", "limit").map_err(io)?;
    for c in &checks {
        let verdict = match (c.pass, c.hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "WARN",
        };
        writeln!(out, "{:<32} {:>24} {:>20}  {verdict}", c.name, c.value, c.limit).map_err(io)?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| c.hard && !c.pass).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} validation check(s) failed: {}", failed.len(), failed.join(", "))))
    }
}

/// Gaussian density with full covariance on the grid.
fn gaussian_full(grid: &Arc<Grid>, mean: &[f64], cov: &DMatrix<f64>) -> Result<Density> {
    let inv = cov.clone().try_inverse().ok_or_else(|| Error::Degenerate("reference covariance is singular".into()))?;
    let d = mean.len();
    Density::from_fn(grid.clone(), |x| {
        let mut q = 0.0;
        for i in 0..d {
            for j in 0..d {
                q += (x[i] - mean[i]) * inv[(i, j)] * (x[j] - mean[j]);
            }
        }
        (-0.5 * q).exp()
    })
}

fn moment_steps(t: f64) -> usize {
    (4000.0 * t.max(0.25)).ceil() as usize
}

/// Largest componentwise relative error of mean and covariance against the moment ODE.
fn moment_error(traj: &Trajectory, c: &LinearCoefficients, mean0: &[f64], cov0: &DMatrix<f64>) -> f64 {
    let (m, p) = moment_ode(c, mean0, cov0, traj.t_final, moment_steps(traj.t_final));
    let rho = traj.last();
    let d = mean0.len();
    let (mh, ph) = (rho.mean(), rho.covariance());
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-3);
    let mut worst: f64 = 0.0;
    for i in 0..d {
        worst = worst.max(rel(mh[i], m[i]));
        for j in 0..d {
            worst = worst.max(rel(ph[i * d + j], p[(i, j)]));
        }
    }
    worst
}

/// Convergence study over `windows`, written to `study.csv`.
///
/// Linear models started from a Gaussian are compared with the exact Gaussian
/// law and report a `moment_error` column; otherwise the finest run is the
/// reference.
pub fn cmd_study(cfg: &RunConfig, windows: &[usize], out: &mut dyn Write) -> Result<StudyTable> {
    let s = setup(cfg)?;
    if windows.len() < 2 {
        return Err(Error::Config("study needs at least two window counts".into()));
    }
    for &n in windows {
        let c = crate::scheme::SchemeConfig { windows: n, ..cfg.scheme.clone() };
        c.validate().map_err(|e| Error::Config(format!("N = {n}: {e}")))?;
    }
    let t = cfg.scheme.t_final;
    let d = s.grid.dim();
    let tests = vec![
        SpaceTimeTest::cosine(t, crate::entropic_ot::TestFunction::gaussian(vec![0.0; d], 0.8)),
        SpaceTimeTest::quadratic(t, crate::entropic_ot::TestFunction::gaussian(vec![0.5; d], 0.6)),
        SpaceTimeTest::cosine(t, crate::entropic_ot::TestFunction::sine(vec![1.3; d], vec![0.4; d])),
    ];
    let linear = match (&cfg.initial, linear_coefficients(&s.model)) {
        (InitialSpec::Gaussian { mean, var }, Some(c)) => Some((c, mean.clone(), DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(var)))),
        _ => None,
    };
    let (reference, metric) = match &linear {
        Some((c, mean, cov)) => {
            let (c1, m1, p1, g) = (c.clone(), mean.clone(), cov.clone(), s.grid.clone());
            let reference = Reference::Analytic(Arc::new(move |tt: f64| {
                let (m, p) = moment_ode(&c1, &m1, &p1, tt, moment_steps(tt));
                gaussian_full(&g, m.as_slice(), &p)
            }));
            let (c2, m2, p2) = (c.clone(), mean.clone(), cov.clone());
            let metric: Metric = Arc::new(move |traj: &Trajectory| moment_error(traj, &c2, &m2, &p2));
            (reference, Some(("moment_error".to_string(), metric)))
        }
        None => (Reference::Finest, None),
    };
    let opts = StudyOptions { tests, w2_samples: 8, metric };
    let table = convergence_study_with(&s.model, &s.rho0, t, windows, &cfg.scheme, &opts, &reference)?;
    std::fs::create_dir_all(&cfg.output.directory)?;
    std::fs::write(cfg.output.directory.join("study.csv"), table.to_csv())?;
    write!(out, "{}", table.to_csv()).map_err(io)?;
    let trend = |ok: bool| if ok { "decreasing" } else { "not decreasing" };
    writeln!(out, "terminal L1: {}", trend(table.decreasing(|r| r.terminal_l1))).map_err(io)?;
    writeln!(out, "uniform bounds: {}", if table.bounds_stable() { "stable" } else { "not stable" }).map_err(io)?;
    if table.metric_name.is_some() {
        writeln!(out, "moment error: {}", trend(table.decreasing(|r| r.metric.unwrap_or(f64::NAN)))).map_err(io)?;
    }
    Ok(table)
}

/// One ε of the oracle comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleRow {
    pub epsilon: f64,
    pub objective_gap: f64,
    pub l1_gap: f64,
    /// `|(c_h, γ) − W_{c_h}(μ̃, ρ)|` for the entropic step's own marginals.
    pub plan_value_gap: f64,
    pub el_residual: f64,
}

/// Compares one entropic JKO step from `ρ⁰` with the exact oracles.
///
/// The tolerance gate applies to the smallest ε of the sweep.
pub fn cmd_oracle(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<OracleRow>> {
    let s = setup(cfg)?;
    let h = cfg.scheme.h();
    let cost = build_cost(&s.grid, s.model.diffusion(), h, s.model.unperturbed())?;
    let exact = exact_jko_small(&s.rho0, &cost, h, &s.model)?;
    let tests = default_tests(s.grid.dim());
    let mut rows = Vec::new();
    for &eps in &cfg.oracle.epsilons {
        let opts = JkoOptions { max_refine: 1, continuation: true, tol_marg: cfg.oracle.tol_marg, keep_plan: true, ..cfg.scheme.jko };
        let r = JkoSolver::new(opts).step(&s.rho0, &cost.clone().with_epsilon(eps)?, &s.model)?;
        let plan = r.plan.as_ref().expect("plan kept");
        let ot = exact_ot_small(&s.rho0, &r.rho_next, &cost)?;
        rows.push(OracleRow {
            epsilon: eps,
            objective_gap: (r.objective - exact.objective).abs(),
            l1_gap: r.rho_next.l1_distance(&exact.rho_next),
            plan_value_gap: (r.transport_cost - ot.value).abs(),
            el_residual: euler_lagrange_residual(&r, plan, h, &s.model, &tests)?,
        });
    }
    writeln!(out, "{:>10} {:>14} {:>14} {:>14} {:>14}", "epsilon", "objective_gap", "l1_gap", "plan_gap", "el_residual").map_err(io)?;
    for r in &rows {
        writeln!(out, "{:>10.1e} {:>14.3e} {:>14.3e} {:>14.3e} {:>14.3e}", r.epsilon, r.objective_gap, r.l1_gap, r.plan_value_gap, r.el_residual).map_err(io)?;
    }
    let best = rows
        .iter()
        .min_by(|a, b| a.epsilon.total_cmp(&b.epsilon))
        .expect("at least one epsilon");
    if best.objective_gap > cfg.oracle.tol_objective || best.l1_gap > cfg.oracle.tol_l1 {
        return Err(Error::Oracle(format!(
            "at eps = {:e}: objective gap {:.3e} (tol {:.1e}), L1 gap {:.3e} (tol {:.1e})",
            best.epsilon, best.objective_gap, cfg.oracle.tol_objective, best.l1_gap, cfg.oracle.tol_l1
        )));
    }
    writeln!(out, "oracle: PASS").map_err(io)?;
    Ok(rows)
}
