//! Conservative phase: characteristics of the frozen divergence-free drift
//! and the semi-Lagrangian push-forward `ρ̃(x) = ρ(X(−h, x))`.

use std::sync::Arc;

use crate::error::{config, Error, Result};
use crate::grid::{entropy, mass_of, Density, Grid};
use crate::interp::{self, Interpolation};
use crate::model::{eval_drift, Model};

/// Characteristic integration and foot-point reconstruction settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowConfig {
    /// Classical RK4 substeps per window.
    pub substeps: usize,
    /// Reconstruction of `ρ` at foot points.
    pub interpolation: Interpolation,
    /// Boundary-layer mass above which a warning is logged.
    pub mass_tol: f64,
    /// Boundary-layer mass above which the push-forward fails.
    pub hard_limit: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { substeps: 8, interpolation: Interpolation::Multilinear, mass_tol: 1e-6, hard_limit: 1e-3 }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.substeps == 0 {
            return config("flow substeps must be >= 1");
        }
        if !(self.mass_tol > 0.0 && self.hard_limit >= self.mass_tol) {
            return config("boundary mass limits must satisfy 0 < mass_tol <= hard_limit");
        }
        Ok(())
    }
}

/// Drift sampled at cell centers and read back multilinearly, zero outside the box.
#[derive(Clone, Debug)]
pub struct FrozenField {
    grid: Arc<Grid>,
    values: Vec<f64>,
    zero: bool,
}

impl FrozenField {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() * grid.dim() {
            return config("drift field size does not match the grid");
        }
        if let Some(c) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Integration(format!("drift is not finite at cell {}", c / grid.dim())));
        }
        let zero = values.iter().all(|v| *v == 0.0);
        Ok(Self { grid, values, zero })
    }

    /// `b[ρ]` frozen at `rho` for one window.
    pub fn from_model(model: &Model, rho: &Density) -> Result<Self> {
        let values = eval_drift(model, rho, rho.grid())?;
        Self::new(rho.grid_arc().clone(), values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    fn sample(&self, x: &[f64], out: &mut [f64]) -> bool {
        interp::sample(&self.grid, &self.values, self.grid.dim(), x, Interpolation::Multilinear, out)
    }
}

/// End point of a characteristic.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPoint {
    pub x: Vec<f64>,
    /// Some RK stage was evaluated outside the box.
    pub left_box: bool,
}

/// RK4 trajectory of `ẋ = b(x)` over `duration` (negative for backward characteristics).
pub fn integrate_flow(field: &FrozenField, x0: &[f64], duration: f64, cfg: &FlowConfig) -> Result<FlowPoint> {
    let d = field.grid.dim();
    if x0.len() != d {
        return config(format!("start point has {} coordinates, the grid has {d}", x0.len()));
    }
    if !duration.is_finite() || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration("non-finite start point or duration".into()));
    }
    if field.zero || duration == 0.0 {
        return Ok(FlowPoint { x: x0.to_vec(), left_box: !field.grid.contains(x0) });
    }
    let n = cfg.substeps.max(1);
    let dt = duration / n as f64;
    let mut x = x0.to_vec();
    let mut k = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut y = vec![0.0; d];
    let mut left = false;
    for _ in 0..n {
        left |= !field.sample(&x, &mut k[0]);
        for i in 0..d {
            y[i] = x[i] + 0.5 * dt * k[0][i];
        }
        left |= !field.sample(&y, &mut k[1]);
        for i in 0..d {
            y[i] = x[i] + 0.5 * dt * k[1][i];
        }
        left |= !field.sample(&y, &mut k[2]);
        for i in 0..d {
            y[i] = x[i] + dt * k[2][i];
        }
        left |= !field.sample(&y, &mut k[3]);
        for i in 0..d {
            x[i] += dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration("characteristic became non-finite".into()));
    }
    Ok(FlowPoint { x, left_box: left })
}

/// Push-forward result with its truncation diagnostics.
#[derive(Clone, Debug)]
pub struct PushForward {
    pub rho: Density,
    /// `1 − mass` before renormalization.
    pub mass_defect: f64,
    /// Mass in the outermost cell layer after renormalization.
    pub boundary_mass: f64,
    /// Target cells whose characteristic touched the outside of the box.
    pub escaped: usize,
}

/// Transports `rho` along `field` for `duration`.
pub fn push_forward_field(rho: &Density, field: &FrozenField, duration: f64, cfg: &FlowConfig) -> Result<PushForward> {
    cfg.validate()?;
    let grid = rho.grid_arc().clone();
    if field.grid() != &*grid {
        return config("drift field and density live on different grids");
    }
    let (values, escaped) = if field.zero || duration == 0.0 {
        (rho.values().to_vec(), 0)
    } else {
        let d = grid.dim();
        let mut x = vec![0.0; d];
        let mut out = [0.0];
        let mut escaped = 0;
        let mut values = vec![0.0; grid.len()];
        for (c, v) in values.iter_mut().enumerate() {
            grid.center_into(c, &mut x);
            let foot = integrate_flow(field, &x, -duration, cfg)?;
            if foot.left_box {
                escaped += 1;
            }
            if interp::sample(&grid, rho.values(), 1, &foot.x, cfg.interpolation, &mut out) {
                *v = out[0].max(0.0);
            }
        }
        (values, escaped)
    };
    let mass = mass_of(&grid, &values);
    let rho = Density::new(grid, values)?;
    let boundary_mass = rho.boundary_mass();
    if boundary_mass > cfg.hard_limit {
        return Err(Error::Truncation { mass: boundary_mass, limit: cfg.hard_limit });
    }
    if boundary_mass > cfg.mass_tol {
        log::warn!("boundary mass {boundary_mass:.3e} exceeds {:.1e}; enlarge the box", cfg.mass_tol);
    }
    Ok(PushForward { rho, mass_defect: 1.0 - mass, boundary_mass, escaped })
}

/// `ρ̃ⁿ⁺¹`: the drift is frozen at `rho` and the density transported for `h`.
pub fn push_forward(rho: &Density, model: &Model, h: f64, cfg: &FlowConfig) -> Result<PushForward> {
    if !(h > 0.0) {
        return config("time step must be positive");
    }
    let field = FrozenField::from_model(model, rho)?;
    push_forward_field(rho, &field, h, cfg)
}

/// `|H(after) − H(before)|` against a tolerance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyReport {
    pub defect: f64,
    pub tol: f64,
    pub pass: bool,
}

pub fn check_entropy_preservation(before: &Density, after: &Density, tol: f64) -> EntropyReport {
    let defect = (entropy(after).h - entropy(before).h).abs();
    EntropyReport { defect, tol, pass: defect <= tol }
}

/// `ρ†` at `t_n + t_offset`: the partial-window push-forward of `rho_n`.
pub fn continuous_interpolant(rho_n: &Density, model: &Model, t_offset: f64, h: f64, cfg: &FlowConfig) -> Result<Density> {
    if !(0.0..h).contains(&t_offset) {
        return Err(Error::TimeRange { t: t_offset, horizon: h });
    }
    if t_offset == 0.0 {
        return Ok(rho_n.clone());
    }
    let field = FrozenField::from_model(model, rho_n)?;
    Ok(push_forward_field(rho_n, &field, t_offset, cfg)?.rho)
}
