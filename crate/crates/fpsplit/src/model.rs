//! PDE data: divergence-free drift `b[ρ]`, constant diffusion matrix `A`,
//! potential `f`, the example presets, and numerical checks of their
//! structural assumptions.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::entropic_ot;
use crate::error::{config, Error, Result};
use crate::grid::{Density, Grid};
use crate::interp::{self, Interpolation};

/// Vector field `ℝ^k → ℝ^m` writing into the output slice.
pub type VectorFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Scalar field `ℝ^k → ℝ`.
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Eigenvalue floor accepted as positive semi-definite.
pub const PSD_TOL: f64 = 1e-12;

/// Symmetric positive semi-definite constant matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionMatrix {
    d: usize,
    entries: Vec<f64>,
}

impl DiffusionMatrix {
    /// Row-major `d × d` entries; must be exactly symmetric and PSD.
    pub fn new(d: usize, entries: Vec<f64>) -> Result<Self> {
        if d == 0 || entries.len() != d * d {
            return config(format!("diffusion matrix needs {} entries, got {}", d * d, entries.len()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return config("diffusion matrix entries must be finite");
        }
        for i in 0..d {
            for j in 0..i {
                if entries[i * d + j] != entries[j * d + i] {
                    return config(format!("diffusion matrix is not symmetric at ({i},{j})"));
                }
            }
        }
        let m = Self { d, entries };
        let lmin = m.lambda_min();
        if lmin < -PSD_TOL {
            return config(format!("diffusion matrix has negative eigenvalue {lmin:.3e}"));
        }
        Ok(m)
    }

    pub fn zeros(d: usize) -> Self {
        Self { d, entries: vec![0.0; d * d] }
    }

    pub fn identity(d: usize) -> Self {
        Self::diagonal(&vec![1.0; d])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let d = diag.len();
        let mut entries = vec![0.0; d * d];
        for (i, v) in diag.iter().enumerate() {
            entries[i * d + i] = *v;
        }
        Self { d, entries }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.d + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d, self.d, &self.entries)
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.to_matrix()).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues()[0]
    }

    pub fn lambda_max(&self) -> f64 {
        *self.eigenvalues().last().expect("nonempty")
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.d).all(|i| (0..self.d).all(|j| i == j || self.get(i, j) == 0.0))
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.d {
            out[i] = (0..self.d).map(|j| self.get(i, j) * x[j]).sum();
        }
    }
}

/// Scalar potential on one coordinate block, with its analytic gradient.
#[derive(Clone)]
pub struct BlockPotential {
    pub label: String,
    pub value: ScalarFn,
    pub grad: VectorFn,
}

impl fmt::Debug for BlockPotential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BlockPotential({})", self.label)
    }
}

impl BlockPotential {
    pub fn new(
        label: impl Into<String>,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self { label: label.into(), value: Arc::new(value), grad: Arc::new(grad) }
    }

    pub fn zero() -> Self {
        Self::new("zero", |_| 0.0, |_, g| g.iter_mut().for_each(|v| *v = 0.0))
    }

    /// `k/2 ‖x‖²`.
    pub fn quadratic(k: f64) -> Self {
        Self::new(
            format!("quadratic({k})"),
            move |x| 0.5 * k * x.iter().map(|v| v * v).sum::<f64>(),
            move |x, g| {
                for (g, x) in g.iter_mut().zip(x) {
                    *g = k * x;
                }
            },
        )
    }
}

/// Interaction kernel `K: ℝ^{d₁} → ℝ^{d₁}` convolved against the marginal of
/// `ρ` on the first `d₁` coordinates, with the result scaled by
/// `coefficient` and added to the drift components `target..target+d₁`.
#[derive(Clone)]
pub struct InteractionKernel {
    pub label: String,
    pub dim: usize,
    pub target: usize,
    pub coefficient: f64,
    pub eval: VectorFn,
    /// Lipschitz constant of `K` when known in closed form.
    pub lipschitz: Option<f64>,
}

impl fmt::Debug for InteractionKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "InteractionKernel({}, dim {}, target {}, coef {})", self.label, self.dim, self.target, self.coefficient)
    }
}

impl InteractionKernel {
    pub fn new(
        label: impl Into<String>,
        dim: usize,
        eval: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        lipschitz: Option<f64>,
    ) -> Self {
        Self { label: label.into(), dim, target: 0, coefficient: 1.0, eval: Arc::new(eval), lipschitz }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new("zero", dim, |_, out| out.iter_mut().for_each(|v| *v = 0.0), Some(0.0))
    }

    /// `K(r) = c r`.
    pub fn linear(dim: usize, c: f64) -> Self {
        Self::new(
            format!("linear({c})"),
            dim,
            move |r, out| {
                for (o, r) in out.iter_mut().zip(r) {
                    *o = c * r;
                }
            },
            Some(c.abs()),
        )
    }

    /// `K(r) = s r exp(-‖r‖²/(2w²))`, bounded and Lipschitz with constant `|s|`.
    pub fn gaussian(dim: usize, strength: f64, width: f64) -> Self {
        let inv = 1.0 / (2.0 * width * width);
        Self::new(
            format!("gaussian({strength},{width})"),
            dim,
            move |r, out| {
                let e = strength * (-inv * r.iter().map(|v| v * v).sum::<f64>()).exp();
                for (o, r) in out.iter_mut().zip(r) {
                    *o = e * r;
                }
            },
            Some(strength.abs()),
        )
    }

    /// `∇Γ^ϵ` of the regularized Coulomb potential in dimension `dim ≥ 2`.
    pub fn regularized_coulomb(dim: usize, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return config("regularized Coulomb kernel needs epsilon > 0");
        }
        if dim < 2 {
            return config("regularized Coulomb kernel needs position dimension >= 2");
        }
        Ok(Self::new(
            format!("coulomb_reg({eps})"),
            dim,
            move |r, out| coulomb_grad(r, eps, out),
            Some(coulomb_lipschitz(dim, eps)),
        ))
    }

    fn placed(mut self, target: usize, coefficient: f64) -> Self {
        self.target = target;
        self.coefficient = coefficient;
        self
    }
}

/// Drift `b[ρ](x) = local(x) + coefficient · (K * ρ)(x)` on the kernel's target block.
#[derive(Clone)]
pub struct DriftField {
    pub local: VectorFn,
    pub kernel: Option<InteractionKernel>,
}

impl fmt::Debug for DriftField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftField").field("kernel", &self.kernel).finish_non_exhaustive()
    }
}

/// The triple `(b, A, f)`.
#[derive(Clone)]
pub struct Model {
    name: String,
    dim: usize,
    drift: DriftField,
    diffusion: DiffusionMatrix,
    potential: ScalarFn,
    potential_gradient: VectorFn,
    unperturbed: bool,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("diffusion", &self.diffusion)
            .field("unperturbed", &self.unperturbed)
            .field("drift", &self.drift)
            .finish()
    }
}

impl Model {
    pub fn new(
        name: impl Into<String>,
        drift: DriftField,
        diffusion: DiffusionMatrix,
        potential: ScalarFn,
        potential_gradient: VectorFn,
    ) -> Result<Self> {
        let dim = diffusion.dim();
        if let Some(k) = &drift.kernel {
            if k.dim == 0 || k.dim > dim || k.target + k.dim > dim {
                return config(format!(
                    "kernel block (dim {}, target {}) does not fit a {dim}-dimensional model",
                    k.dim, k.target
                ));
            }
        }
        Ok(Self { name: name.into(), dim, drift, diffusion, potential, potential_gradient, unperturbed: false })
    }

    /// Zero drift, `A = I`, and the given potential.
    pub fn custom_potential(
        dim: usize,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Model {
        Model::new(
            "custom",
            DriftField { local: zero_field(), kernel: None },
            DiffusionMatrix::identity(dim),
            Arc::new(f),
            Arc::new(grad),
        )
        .expect("valid custom model")
    }

    /// Model with every field sampled on a grid and read back by multilinear interpolation.
    pub fn tabulated(
        grid: Arc<Grid>,
        drift: Vec<f64>,
        potential: Vec<f64>,
        potential_gradient: Vec<f64>,
        diffusion: DiffusionMatrix,
    ) -> Result<Model> {
        let (n, d) = (grid.len(), grid.dim());
        if diffusion.dim() != d {
            return config(format!("diffusion matrix is {}x{} but the grid is {d}-dimensional", diffusion.dim(), diffusion.dim()));
        }
        if drift.len() != n * d || potential.len() != n || potential_gradient.len() != n * d {
            return config(format!(
                "tabulated fields need {} drift, {n} potential and {} gradient values",
                n * d,
                n * d
            ));
        }
        if let Some(v) = potential.iter().find(|v| !v.is_finite()) {
            return config(format!("tabulated potential value {v} is not finite"));
        }
        let table = |data: Vec<f64>, ncomp: usize| -> VectorFn {
            let g = grid.clone();
            Arc::new(move |x: &[f64], out: &mut [f64]| {
                interp::sample(&g, &data, ncomp, x, Interpolation::Multilinear, out);
            })
        };
        let pot = table(potential, 1);
        Model::new(
            "custom",
            DriftField { local: table(drift, d), kernel: None },
            diffusion,
            Arc::new(move |x: &[f64]| {
                let mut v = [0.0];
                pot(x, &mut v);
                v[0]
            }),
            table(potential_gradient, d),
        )
    }

    /// Marks `A` as invertible so the cost uses `A` itself rather than `A + hI`.
    pub fn with_unperturbed(mut self, flag: bool) -> Result<Self> {
        if flag && self.diffusion.lambda_min() <= PSD_TOL {
            return config("unperturbed cost requested but the diffusion matrix is singular");
        }
        self.unperturbed = flag;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn diffusion(&self) -> &DiffusionMatrix {
        &self.diffusion
    }

    pub fn drift(&self) -> &DriftField {
        &self.drift
    }

    pub fn unperturbed(&self) -> bool {
        self.unperturbed
    }

    pub fn potential(&self, x: &[f64]) -> f64 {
        (self.potential)(x)
    }

    pub fn potential_gradient(&self, x: &[f64], out: &mut [f64]) {
        (self.potential_gradient)(x, out)
    }

    pub fn local_drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift.local)(x, out)
    }

    /// Potential sampled at every cell center.
    pub fn potential_on(&self, grid: &Grid) -> Vec<f64> {
        let mut x = vec![0.0; grid.dim()];
        (0..grid.len())
            .map(|c| {
                grid.center_into(c, &mut x);
                self.potential(&x)
            })
            .collect()
    }
}

fn zero_field() -> VectorFn {
    Arc::new(|_, out: &mut [f64]| out.iter_mut().for_each(|v| *v = 0.0))
}

fn check_dims(model: &Model, grid: &Grid) -> Result<()> {
    if model.dim() != grid.dim() {
        return config(format!("model is {}-dimensional but the grid is {}-dimensional", model.dim(), grid.dim()));
    }
    Ok(())
}

/// `K * ρ` on the kernel's coordinate block, one `d₁`-vector per block cell.
fn convolve(kernel: &InteractionKernel, rho: &Density) -> Vec<f64> {
    let g = rho.grid();
    let d1 = kernel.dim;
    let n1: usize = (0..d1).map(|k| g.axis(k).n).product();
    let rest = g.len() / n1;
    let w_rest: f64 = (d1..g.dim()).map(|k| g.spacing(k)).product();
    let w1: f64 = (0..d1).map(|k| g.spacing(k)).product();
    let vals = rho.values();
    let marginal: Vec<f64> = (0..n1).map(|c1| vals[c1 * rest..(c1 + 1) * rest].iter().sum::<f64>() * w_rest).collect();
    let sub = crate::grid::Grid::new(g.axes()[..d1].to_vec()).expect("sub-grid of a valid grid");
    let centers = sub.centers();
    let mut out = vec![0.0; n1 * d1];
    let mut r = vec![0.0; d1];
    let mut kv = vec![0.0; d1];
    for i in 0..n1 {
        let xi = &centers[i * d1..(i + 1) * d1];
        for j in 0..n1 {
            let m = marginal[j];
            if m == 0.0 {
                continue;
            }
            let xj = &centers[j * d1..(j + 1) * d1];
            for k in 0..d1 {
                r[k] = xi[k] - xj[k];
            }
            (kernel.eval)(&r, &mut kv);
            for k in 0..d1 {
                out[i * d1 + k] += kv[k] * m * w1;
            }
        }
    }
    out
}

/// `b[ρ]` at every cell center, flattened `len × d`.
pub fn eval_drift(model: &Model, rho: &Density, grid: &Grid) -> Result<Vec<f64>> {
    check_dims(model, grid)?;
    if rho.grid() != grid {
        return config("density and grid differ");
    }
    let d = grid.dim();
    let mut out = vec![0.0; grid.len() * d];
    let mut x = vec![0.0; d];
    for c in 0..grid.len() {
        grid.center_into(c, &mut x);
        model.local_drift(&x, &mut out[c * d..(c + 1) * d]);
    }
    if let Some(k) = &model.drift.kernel {
        let conv = convolve(k, rho);
        let n1: usize = (0..k.dim).map(|a| grid.axis(a).n).product();
        let rest = grid.len() / n1;
        for c in 0..grid.len() {
            let c1 = c / rest;
            for a in 0..k.dim {
                out[c * d + k.target + a] += k.coefficient * conv[c1 * k.dim + a];
            }
        }
    }
    Ok(out)
}

/// Result of the central-difference divergence check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DivergenceReport {
    pub max_divergence: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Central-difference divergence of a sampled field at interior nodes.
pub fn divergence_of_field(grid: &Grid, field: &[f64]) -> f64 {
    let d = grid.dim();
    let strides = grid.strides();
    let mut idx = vec![0usize; d];
    let mut worst: f64 = 0.0;
    'cells: for c in 0..grid.len() {
        grid.multi_index(c, &mut idx);
        for k in 0..d {
            if idx[k] == 0 || idx[k] + 1 == grid.axis(k).n {
                continue 'cells;
            }
        }
        let mut div = 0.0;
        for k in 0..d {
            let up = field[(c + strides[k]) * d + k];
            let dn = field[(c - strides[k]) * d + k];
            div += (up - dn) / (2.0 * grid.spacing(k));
        }
        worst = worst.max(div.abs());
    }
    worst
}

pub fn check_divergence_free(model: &Model, rho: &Density, grid: &Grid, tol: f64) -> Result<DivergenceReport> {
    if grid.axes().iter().any(|a| a.n < 3) {
        return config("divergence check needs at least 3 points per axis");
    }
    let field = eval_drift(model, rho, grid)?;
    let max_divergence = divergence_of_field(grid, &field);
    Ok(DivergenceReport { max_divergence, tol, pass: max_divergence <= tol })
}

/// Empirical constant in `∫‖b[ν]−b[μ]‖² dν ≤ C W₂²(ν,μ)`, maximized over pairs.
pub fn check_measure_lipschitz(model: &Model, pairs: &[(Density, Density)], grid: &Grid) -> Result<f64> {
    check_dims(model, grid)?;
    let d = grid.dim();
    let w = grid.cell_volume();
    let mut worst: f64 = 0.0;
    for (nu, mu) in pairs {
        if nu.grid() != grid || mu.grid() != grid {
            return config("lipschitz pair lives on a different grid");
        }
        if nu.values() == mu.values() || model.drift.kernel.is_none() {
            continue;
        }
        let bn = eval_drift(model, nu, grid)?;
        let bm = eval_drift(model, mu, grid)?;
        let num: f64 = (0..grid.len())
            .map(|c| {
                let s: f64 = (0..d).map(|k| (bn[c * d + k] - bm[c * d + k]).powi(2)).sum();
                s * nu.values()[c]
            })
            .sum::<f64>()
            * w;
        if num == 0.0 {
            continue;
        }
        let w2 = entropic_ot::wasserstein2(nu, mu)?;
        if w2 > 0.0 {
            worst = worst.max(num / (w2 * w2));
        }
    }
    Ok(worst)
}

fn block(x: &[f64], start: usize, len: usize) -> &[f64] {
    &x[start..start + len]
}

/// Vlasov-Fokker-Planck: `b = (v, −(∇g(x) + K*ρ(x)))`, `A = blockdiag(0, I)`, `f = f_v(v)`.
pub fn preset_vlasov_fpe(
    dpos: usize,
    g: BlockPotential,
    kernel: Option<InteractionKernel>,
    f_v: BlockPotential,
) -> Result<Model> {
    if dpos == 0 {
        return config("vlasov_fpe needs position dimension >= 1");
    }
    if let Some(k) = &kernel {
        if k.dim != dpos {
            return config(format!("kernel dimension {} must equal the position dimension {dpos}", k.dim));
        }
    }
    let d = 2 * dpos;
    let gg = g.grad.clone();
    let local: VectorFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
        out[..dpos].copy_from_slice(&x[dpos..]);
        gg(&x[..dpos], &mut out[dpos..]);
        for o in &mut out[dpos..] {
            *o = -*o;
        }
    });
    let mut diag = vec![0.0; d];
    diag[dpos..].iter_mut().for_each(|v| *v = 1.0);
    kinetic_model("vlasov_fpe", dpos, local, kernel.map(|k| k.placed(dpos, -1.0)), &diag, f_v)
}

fn kinetic_model(
    name: &str,
    dpos: usize,
    local: VectorFn,
    kernel: Option<InteractionKernel>,
    diag: &[f64],
    f_v: BlockPotential,
) -> Result<Model> {
    let fv = f_v.value.clone();
    let fg = f_v.grad.clone();
    Model::new(
        name,
        DriftField { local, kernel },
        DiffusionMatrix::diagonal(diag),
        Arc::new(move |x: &[f64]| fv(&x[dpos..])),
        Arc::new(move |x: &[f64], out: &mut [f64]| {
            out[..dpos].iter_mut().for_each(|v| *v = 0.0);
            fg(&x[dpos..], &mut out[dpos..]);
        }),
    )
}

/// Linearized Wigner-Fokker-Planck in `x, v ∈ ℝ^d`.
pub fn preset_wigner_fpe(d: usize, alpha: f64, beta: f64, sigma: f64, lambda: f64) -> Result<Model> {
    if d == 0 {
        return config("wigner_fpe needs dimension >= 1");
    }
    if !(alpha > 0.0 && sigma > 0.0 && beta >= 0.0) {
        return config("wigner_fpe needs alpha > 0, sigma > 0 and beta >= 0");
    }
    if lambda * lambda >= alpha * sigma {
        return config("wigner_fpe block matrix [[alpha, lambda], [lambda, sigma]] is not positive definite");
    }
    let n = 2 * d;
    let mut a = vec![0.0; n * n];
    for i in 0..d {
        a[i * n + i] = alpha;
        a[(d + i) * n + d + i] = sigma;
        a[i * n + d + i] = lambda;
        a[(d + i) * n + i] = lambda;
    }
    let speed = beta * lambda / sigma + 1.0;
    let c = beta / (2.0 * sigma);
    let local: VectorFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
        for i in 0..d {
            out[i] = speed * x[d + i];
            out[d + i] = 0.0;
        }
    });
    Model::new(
        "wigner_fpe",
        DriftField { local, kernel: None },
        DiffusionMatrix::new(n, a)?,
        Arc::new(move |x: &[f64]| c * block(x, d, d).iter().map(|v| v * v).sum::<f64>()),
        Arc::new(move |x: &[f64], out: &mut [f64]| {
            for i in 0..d {
                out[i] = 0.0;
                out[d + i] = 2.0 * c * x[d + i];
            }
        }),
    )?
    .with_unperturbed(true)
}

/// Surface area of the unit sphere in `ℝ^d`: `2π^{d/2} / Γ(d/2)`.
pub fn unit_sphere_area(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    2.0 * std::f64::consts::PI.powf(h) / statrs::function::gamma::gamma(h)
}

/// Regularized Coulomb potential `Γ^ϵ`.
pub fn coulomb_potential(r: &[f64], eps: f64) -> f64 {
    let d = r.len();
    let s = r.iter().map(|v| v * v).sum::<f64>() + eps;
    let w = unit_sphere_area(d);
    if d == 2 {
        0.5 * w * s.ln()
    } else {
        w / s.powf((d as f64 - 2.0) / 2.0)
    }
}

/// `∇Γ^ϵ`.
pub fn coulomb_grad(r: &[f64], eps: f64, out: &mut [f64]) {
    let d = r.len();
    let s = r.iter().map(|v| v * v).sum::<f64>() + eps;
    let w = unit_sphere_area(d);
    let scale = if d == 2 { w / s } else { -(d as f64 - 2.0) * w / s.powf(d as f64 / 2.0) };
    for (o, r) in out.iter_mut().zip(r) {
        *o = scale * r;
    }
}

/// Dimension constant of the Hessian display: `ω₂` for `d = 2`, `−(d−2)ω_d` above.
pub fn coulomb_hessian_constant(d: usize) -> f64 {
    let w = unit_sphere_area(d);
    if d == 2 {
        w
    } else {
        -(d as f64 - 2.0) * w
    }
}

/// `∂ᵢ∂ⱼΓ^ϵ`, row-major `d × d`.
pub fn coulomb_hessian(r: &[f64], eps: f64, out: &mut [f64]) {
    let d = r.len();
    let s = r.iter().map(|v| v * v).sum::<f64>() + eps;
    let c = coulomb_hessian_constant(d);
    let a = 1.0 / s.powf(d as f64 / 2.0);
    let b = d as f64 / s.powf((d as f64 + 2.0) / 2.0);
    for i in 0..d {
        for j in 0..d {
            let delta = if i == j { a } else { 0.0 };
            out[i * d + j] = c * (delta - b * r[i] * r[j]);
        }
    }
}

fn golden_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    // Dense scan then golden refinement; the profiles are unimodal or monotone.
    let n = 2000;
    let (mut best_t, mut best) = (lo, f(lo));
    for i in 1..=n {
        let t = lo + (hi - lo) * i as f64 / n as f64;
        let v = f(t);
        if v > best {
            best = v;
            best_t = t;
        }
    }
    let step = (hi - lo) / n as f64;
    let (mut a, mut b) = ((best_t - step).max(lo), (best_t + step).min(hi));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let c = b - g * (b - a);
        let e = a + g * (b - a);
        if f(c) > f(e) {
            b = e;
        } else {
            a = c;
        }
    }
    best.max(f(0.5 * (a + b)))
}

/// Largest Hessian operator norm of `Γ^ϵ`, found by a 1-d search in `‖r‖`.
pub fn coulomb_lipschitz(d: usize, eps: f64) -> f64 {
    let c = coulomb_hessian_constant(d).abs();
    let df = d as f64;
    // Eigenvalues: radial c(s − d r²)/s^{(d+2)/2}, tangential c/s^{d/2}.
    let prof = |r: f64| {
        let s = r * r + eps;
        let radial = ((s - df * r * r) / s.powf((df + 2.0) / 2.0)).abs();
        let tangential = 1.0 / s.powf(df / 2.0);
        radial.max(tangential)
    };
    c * golden_max(prof, 0.0, 10.0 * eps.sqrt().max(1.0))
}

/// Largest `‖∇Γ^ϵ‖`, found by a 1-d search in `‖r‖`.
pub fn coulomb_grad_bound(d: usize, eps: f64) -> f64 {
    let probe = |r: f64| {
        let mut x = vec![0.0; d];
        x[0] = r;
        let mut g = vec![0.0; d];
        coulomb_grad(&x, eps, &mut g);
        g[0].abs()
    };
    golden_max(probe, 0.0, 10.0 * eps.sqrt().max(1.0))
}

/// Regularized Vlasov-Poisson-Fokker-Planck with friction `βv` and velocity diffusion `σI`.
pub fn preset_vpfp_regularized(dpos: usize, g: BlockPotential, eps_kernel: f64, beta: f64, sigma: f64) -> Result<Model> {
    if !(eps_kernel > 0.0) {
        return config("vpfp_reg needs epsilon_kernel > 0 (singular kernels are not supported)");
    }
    if dpos < 2 {
        return config("vpfp_reg needs position dimension >= 2");
    }
    if !(beta >= 0.0 && sigma > 0.0) {
        return config("vpfp_reg needs beta >= 0 and sigma > 0");
    }
    let kernel = InteractionKernel::regularized_coulomb(dpos, eps_kernel)?;
    let gg = g.grad.clone();
    let local: VectorFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
        out[..dpos].copy_from_slice(&x[dpos..]);
        gg(&x[..dpos], &mut out[dpos..]);
        for o in &mut out[dpos..] {
            *o = -*o;
        }
    });
    let mut diag = vec![0.0; 2 * dpos];
    diag[dpos..].iter_mut().for_each(|v| *v = sigma);
    let friction = BlockPotential::quadratic(beta / sigma);
    kinetic_model("vpfp_reg", dpos, local, Some(kernel.placed(dpos, -1.0)), &diag, friction)
}

/// Kolmogorov chain of `n` blocks of dimension `d`: `b = (x₂,…,xₙ,0)`, noise on the last block.
pub fn preset_kolmogorov_chain(n: usize, d: usize, f_n: BlockPotential) -> Result<Model> {
    if n == 0 || d == 0 {
        return config("kolmogorov_chain needs n >= 1 and block dimension >= 1");
    }
    let dim = n * d;
    let last = (n - 1) * d;
    let local: VectorFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
        out[..last].copy_from_slice(&x[d..]);
        out[last..].iter_mut().for_each(|v| *v = 0.0);
    });
    let mut diag = vec![0.0; dim];
    diag[last..].iter_mut().for_each(|v| *v = 1.0);
    let fv = f_n.value.clone();
    let fg = f_n.grad.clone();
    Model::new(
        "kolmogorov_chain",
        DriftField { local, kernel: None },
        DiffusionMatrix::diagonal(&diag),
        Arc::new(move |x: &[f64]| fv(&x[last..])),
        Arc::new(move |x: &[f64], out: &mut [f64]| {
            out[..last].iter_mut().for_each(|v| *v = 0.0);
            fg(&x[last..], &mut out[last..]);
        }),
    )
}

fn diagonal_of(m: &[f64], d: usize, what: &str) -> Result<Vec<f64>> {
    if m.len() != d * d {
        return config(format!("{what} must be {d}x{d}"));
    }
    for i in 0..d {
        for j in 0..d {
            if i != j && m[i * d + j] != 0.0 {
                return config(format!("{what} must be diagonal"));
            }
        }
    }
    Ok((0..d).map(|i| m[i * d + i]).collect())
}

/// Generalized Vlasov-Langevin with `m` auxiliary heat-bath blocks.
///
/// Coordinates are `(q, p, z¹, …, zᵐ)`, each of dimension `d`; `lambdas` and
/// `alphas` are row-major `d × d` matrices that must be diagonal.
pub fn preset_generalized_langevin(
    d: usize,
    force: VectorFn,
    kernel: Option<InteractionKernel>,
    lambdas: &[Vec<f64>],
    alphas: &[Vec<f64>],
) -> Result<Model> {
    if d == 0 {
        return config("gen_langevin needs block dimension >= 1");
    }
    if lambdas.len() != alphas.len() {
        return config("gen_langevin needs as many alpha matrices as lambda matrices");
    }
    let m = lambdas.len();
    let lam: Vec<Vec<f64>> = lambdas.iter().enumerate().map(|(j, l)| diagonal_of(l, d, &format!("lambda {}", j + 1))).collect::<Result<_>>()?;
    let alp: Vec<Vec<f64>> = alphas.iter().enumerate().map(|(j, a)| diagonal_of(a, d, &format!("alpha {}", j + 1))).collect::<Result<_>>()?;
    if let Some(k) = &kernel {
        if k.dim != d {
            return config(format!("kernel dimension {} must equal the block dimension {d}", k.dim));
        }
    }
    let dim = (2 + m) * d;
    let lam_l = lam.clone();
    let local: VectorFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
        let (q, p) = (&x[..d], &x[d..2 * d]);
        out[..d].copy_from_slice(p);
        force(q, &mut out[d..2 * d]);
        for i in 0..d {
            out[d + i] = -out[d + i];
        }
        for (j, l) in lam_l.iter().enumerate() {
            let z = &x[(2 + j) * d..(3 + j) * d];
            for i in 0..d {
                out[d + i] += l[i] * z[i];
                out[(2 + j) * d + i] = -l[i] * p[i];
            }
        }
    });
    let mut diag = vec![0.0; dim];
    diag[2 * d..].iter_mut().for_each(|v| *v = 1.0);
    let alp_f = alp.clone();
    Model::new(
        "gen_langevin",
        DriftField { local, kernel: kernel.map(|k| k.placed(d, -1.0)) },
        DiffusionMatrix::diagonal(&diag),
        Arc::new(move |x: &[f64]| {
            let mut s = 0.0;
            for (j, a) in alp_f.iter().enumerate() {
                for i in 0..d {
                    s += 0.5 * (a[i] * x[(2 + j) * d + i]).powi(2);
                }
            }
            s
        }),
        Arc::new(move |x: &[f64], out: &mut [f64]| {
            out[..2 * d].iter_mut().for_each(|v| *v = 0.0);
            for (j, a) in alp.iter().enumerate() {
                for i in 0..d {
                    let k = (2 + j) * d + i;
                    out[k] = a[i] * a[i] * x[k];
                }
            }
        }),
    )
}

/// Linear restoring force `𝒜(q) = k q` for the generalized Langevin preset.
pub fn linear_force(k: f64) -> VectorFn {
    Arc::new(move |q: &[f64], out: &mut [f64]| {
        for (o, q) in out.iter_mut().zip(q) {
            *o = k * q;
        }
    })
}

/// Tolerance on the divergence check appropriate for a model's drift.
pub fn default_divergence_tol(model: &Model) -> f64 {
    if model.drift.kernel.is_some() {
        1e-4
    } else {
        1e-8
    }
}

pub(crate) fn nonnegative_potential(model: &Model, grid: &Grid) -> std::result::Result<(), (usize, f64)> {
    let mut x = vec![0.0; grid.dim()];
    for c in 0..grid.len() {
        grid.center_into(c, &mut x);
        let v = model.potential(&x);
        if !(v >= 0.0) {
            return Err((c, v));
        }
    }
    Ok(())
}

/// Largest relative deviation between `∇f` and centered differences of `f`.
pub fn potential_gradient_error(model: &Model, grid: &Grid) -> f64 {
    let d = grid.dim();
    let mut x = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut worst: f64 = 0.0;
    for c in 0..grid.len() {
        grid.center_into(c, &mut x);
        model.potential_gradient(&x, &mut g);
        for k in 0..d {
            let hk = grid.spacing(k);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += hk;
            xm[k] -= hk;
            let fd = (model.potential(&xp) - model.potential(&xm)) / (2.0 * hk);
            worst = worst.max((fd - g[k]).abs() / (1.0 + g[k].abs()));
        }
    }
    worst
}

impl From<(usize, f64)> for Error {
    fn from((cell, v): (usize, f64)) -> Self {
        Error::Config(format!("potential is negative ({v:.3e}) at cell {cell}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Axis;

    fn square(n: usize, l: f64) -> Arc<Grid> {
        Arc::new(Grid::cube(2, -l, l, n).unwrap())
    }

    fn uniform(g: &Arc<Grid>) -> Density {
        Density::new(g.clone(), vec![1.0; g.len()]).unwrap()
    }

    fn local_model(d: usize, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static, kernel: Option<InteractionKernel>) -> Model {
        Model::new(
            "test",
            DriftField { local: Arc::new(f), kernel },
            DiffusionMatrix::identity(d),
            Arc::new(|_| 0.0),
            zero_field(),
        )
        .unwrap()
    }

    #[test]
    fn diffusion_matrix_invariants() {
        assert!(DiffusionMatrix::new(2, vec![1.0, 0.5, 0.4, 1.0]).is_err());
        assert!(DiffusionMatrix::new(2, vec![1.0, 2.0, 2.0, 1.0]).is_err());
        let m = DiffusionMatrix::new(2, vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        assert!(m.lambda_min() > 0.0);
        let ev = m.eigenvalues();
        let tr: f64 = 3.0;
        let det = 2.0 - 0.25;
        let disc = (tr * tr / 4.0 - det).sqrt();
        assert!((ev[0] - (tr / 2.0 - disc)).abs() < 1e-12);
        assert!((ev[1] - (tr / 2.0 + disc)).abs() < 1e-12);
    }

    #[test]
    fn drift_without_kernel_is_local() {
        let g = square(5, 1.0);
        let m = local_model(2, |x, o| {
            o[0] = x[1];
            o[1] = 0.0;
        }, None);
        let b = eval_drift(&m, &uniform(&g), &g).unwrap();
        for c in 0..g.len() {
            let x = g.center(c);
            assert_eq!(b[2 * c], x[1]);
            assert_eq!(b[2 * c + 1], 0.0);
        }
    }

    #[test]
    fn zero_kernel_leaves_local_drift() {
        let g = square(6, 2.0);
        let rho = Density::gaussian(g.clone(), &[0.3, -0.2], &[0.5, 0.5]).unwrap();
        let k = InteractionKernel::zero(1).placed(1, -1.0);
        let m = local_model(2, |x, o| {
            o[0] = x[1];
            o[1] = -x[0];
        }, Some(k));
        let b = eval_drift(&m, &rho, &g).unwrap();
        for c in 0..g.len() {
            let x = g.center(c);
            assert_eq!(b[2 * c], x[1]);
            assert_eq!(b[2 * c + 1], -x[0]);
        }
    }

    #[test]
    fn linear_kernel_matches_brute_force_double_sum() {
        let g = Arc::new(Grid::new(vec![Axis::new(-1.0, 1.0, 8).unwrap()]).unwrap());
        let rho = uniform(&g);
        let m = local_model(1, |_, o| o[0] = 0.0, Some(InteractionKernel::linear(1, 1.0)));
        let b = eval_drift(&m, &rho, &g).unwrap();
        let w = g.cell_volume();
        let xs = g.axis(0).centers();
        for (i, xi) in xs.iter().enumerate() {
            let brute: f64 = xs.iter().zip(rho.values()).map(|(xj, r)| (xi - xj) * r * w).sum();
            assert!((b[i] - brute).abs() < 1e-14);
            assert!((b[i] - xi).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let g = square(4, 1.0);
        let m = local_model(1, |_, o| o[0] = 0.0, None);
        assert!(matches!(eval_drift(&m, &uniform(&g), &g), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_examples() {
        let g = square(9, 1.0);
        let rho = uniform(&g);
        let rot = local_model(2, |x, o| {
            o[0] = -x[1];
            o[1] = x[0];
        }, None);
        let r = check_divergence_free(&rot, &rho, &g, 1e-12).unwrap();
        assert!(r.pass && r.max_divergence < 1e-14);

        let g1 = Arc::new(Grid::new(vec![Axis::new(-1.0, 1.0, 9).unwrap()]).unwrap());
        let expand = local_model(1, |x, o| o[0] = x[0], None);
        let r = check_divergence_free(&expand, &uniform(&g1), &g1, 1e-6).unwrap();
        assert!(!r.pass && (r.max_divergence - 1.0).abs() < 1e-12);

        let vl = preset_vlasov_fpe(1, BlockPotential::quadratic(1.0), None, BlockPotential::quadratic(1.0)).unwrap();
        assert!(check_divergence_free(&vl, &rho, &g, 1e-8).unwrap().pass);
    }

    fn all_presets() -> Vec<Model> {
        vec![
            preset_vlasov_fpe(1, BlockPotential::quadratic(1.0), Some(InteractionKernel::gaussian(1, 0.5, 1.0)), BlockPotential::quadratic(1.0)).unwrap(),
            preset_wigner_fpe(1, 2.0, 1.0, 1.0, 0.5).unwrap(),
            preset_vpfp_regularized(2, BlockPotential::quadratic(1.0), 0.1, 1.0, 1.0).unwrap(),
            preset_kolmogorov_chain(3, 1, BlockPotential::quadratic(1.0)).unwrap(),
            preset_generalized_langevin(1, linear_force(1.0), Some(InteractionKernel::linear(1, 0.3)), &[vec![1.0]], &[vec![1.0]]).unwrap(),
        ]
    }

    #[test]
    fn every_preset_is_divergence_free_on_three_points() {
        for m in all_presets() {
            let g = Arc::new(Grid::cube(m.dim(), -1.5, 1.5, 3).unwrap());
            let rho = Density::gaussian(g.clone(), &vec![0.2; m.dim()], &vec![0.7; m.dim()]).unwrap();
            let r = check_divergence_free(&m, &rho, &g, 1e-8).unwrap();
            assert!(r.pass, "{} divergence {}", m.name(), r.max_divergence);
            assert!(m.diffusion().lambda_min() >= -PSD_TOL);
            assert!(nonnegative_potential(&m, &g).is_ok());
        }
    }

    #[test]
    fn preset_potential_gradients_match_finite_differences() {
        for m in all_presets() {
            let g = Grid::cube(m.dim(), -1.5, 1.5, 4).unwrap();
            assert!(potential_gradient_error(&m, &g) < 1e-6, "{}", m.name());
        }
    }

    #[test]
    fn vlasov_examples() {
        let free = preset_vlasov_fpe(1, BlockPotential::zero(), None, BlockPotential::zero()).unwrap();
        let mut o = [0.0; 2];
        free.local_drift(&[0.3, -0.7], &mut o);
        assert_eq!(o, [-0.7, 0.0]);
        let harm = preset_vlasov_fpe(1, BlockPotential::quadratic(1.0), None, BlockPotential::zero()).unwrap();
        harm.local_drift(&[0.3, -0.7], &mut o);
        assert_eq!(o, [-0.7, -0.3]);
        assert_eq!(harm.diffusion().eigenvalues(), vec![0.0, 1.0]);
    }

    #[test]
    fn wigner_examples() {
        let m = preset_wigner_fpe(1, 1.0, 1.0, 1.0, 0.0).unwrap();
        let mut o = [0.0; 2];
        // With λ = 0 the coefficient (βλ/σ + 1) is 1.
        m.local_drift(&[0.4, 0.5], &mut o);
        assert_eq!(o, [0.5, 0.0]);
        let m2 = preset_wigner_fpe(1, 2.0, 1.0, 1.0, 1.5);
        assert!(m2.is_err());
        let tilted = preset_wigner_fpe(1, 2.0, 2.0, 1.0, 0.5).unwrap();
        tilted.local_drift(&[0.4, 0.5], &mut o);
        assert_eq!(o, [1.0, 0.0]);
        assert_eq!(m.diffusion(), &DiffusionMatrix::identity(2));
        assert!((m.potential(&[3.0, 2.0]) - 2.0).abs() < 1e-15);
        assert!(m.unperturbed());
        assert!(preset_wigner_fpe(1, 1.0, 1.0, 1.0, 1.0).is_err());
        let m = preset_wigner_fpe(1, 2.0, 1.0, 1.0, 0.5).unwrap();
        let ev = m.diffusion().eigenvalues();
        let disc = (0.25f64 + 0.25).sqrt();
        assert!((ev[0] - (1.5 - disc)).abs() < 1e-12 && ev[0] > 0.0);
        assert!(m.unperturbed());
    }

    #[test]
    fn sphere_area_values() {
        assert!((unit_sphere_area(2) - 2.0 * std::f64::consts::PI).abs() < 1e-12);
        assert!((unit_sphere_area(3) - 4.0 * std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn coulomb_gradient_vanishes_at_origin_and_is_bounded() {
        let mut gr = [1.0; 2];
        coulomb_grad(&[0.0, 0.0], 0.1, &mut gr);
        assert_eq!(gr, [0.0, 0.0]);
        let eps = 0.05;
        let bound = coulomb_grad_bound(3, eps);
        // closed-form maximizer r² = ε/(d−1)
        let r = (eps / 2.0).sqrt();
        let exact = unit_sphere_area(3) * r / (r * r + eps).powf(1.5);
        assert!((bound - exact).abs() < 1e-8 * exact);
        let g = Grid::cube(3, -1.0, 1.0, 9).unwrap();
        let mut v = [0.0; 3];
        for c in 0..g.len() {
            coulomb_grad(&g.center(c), eps, &mut v);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(n <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn coulomb_hessian_matches_finite_differences() {
        for (d, eps) in [(2usize, 0.1), (3, 0.2), (4, 0.05)] {
            let x: Vec<f64> = (0..d).map(|i| 0.3 - 0.17 * i as f64).collect();
            let mut h = vec![0.0; d * d];
            coulomb_hessian(&x, eps, &mut h);
            let step = 1e-5;
            for j in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += step;
                xm[j] -= step;
                let mut gp = vec![0.0; d];
                let mut gm = vec![0.0; d];
                coulomb_grad(&xp, eps, &mut gp);
                coulomb_grad(&xm, eps, &mut gm);
                for i in 0..d {
                    let fd = (gp[i] - gm[i]) / (2.0 * step);
                    assert!((fd - h[i * d + j]).abs() < 1e-5 * (1.0 + fd.abs()), "d={d} ({i},{j})");
                }
                // gradient against the potential itself
                let fd = (coulomb_potential(&xp, eps) - coulomb_potential(&xm, eps)) / (2.0 * step);
                let mut g0 = vec![0.0; d];
                coulomb_grad(&x, eps, &mut g0);
                assert!((fd - g0[j]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn vpfp_rejects_singular_kernel() {
        assert!(preset_vpfp_regularized(2, BlockPotential::zero(), 0.0, 1.0, 1.0).is_err());
        assert!(preset_vpfp_regularized(1, BlockPotential::zero(), 0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn kolmogorov_examples() {
        let heat = preset_kolmogorov_chain(1, 1, BlockPotential::zero()).unwrap();
        let mut o = [1.0];
        heat.local_drift(&[0.5], &mut o);
        assert_eq!(o, [0.0]);
        assert_eq!(heat.diffusion(), &DiffusionMatrix::identity(1));
        let kr = preset_kolmogorov_chain(2, 1, BlockPotential::zero()).unwrap();
        let mut o = [0.0; 2];
        kr.local_drift(&[0.5, -0.25], &mut o);
        assert_eq!(o, [-0.25, 0.0]);
        let k3 = preset_kolmogorov_chain(3, 1, BlockPotential::zero()).unwrap();
        assert_eq!(k3.diffusion(), &DiffusionMatrix::diagonal(&[0.0, 0.0, 1.0]));
    }

    #[test]
    fn generalized_langevin_examples() {
        let m = preset_generalized_langevin(1, linear_force(0.0), None, &[vec![1.0]], &[vec![1.0]]).unwrap();
        let mut o = [0.0; 3];
        m.local_drift(&[0.1, 0.2, 0.3], &mut o);
        assert_eq!(o, [0.2, 0.3, -0.2]);
        let dec = preset_generalized_langevin(1, linear_force(1.0), None, &[vec![0.0]], &[vec![1.0]]).unwrap();
        dec.local_drift(&[0.1, 0.2, 0.3], &mut o);
        assert_eq!(o, [0.2, -0.1, 0.0]);
        let mut g = [0.0; 3];
        m.potential_gradient(&[0.1, 0.2, 0.3], &mut g);
        assert_eq!(g, [0.0, 0.0, 0.3]);
        assert!(preset_generalized_langevin(2, linear_force(1.0), None, &[vec![1.0, 0.5, 0.0, 1.0]], &[vec![1.0, 0.0, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn convolution_ignores_non_convolved_coordinates() {
        let g = square(10, 2.0);
        let k = InteractionKernel::gaussian(1, 1.0, 0.7);
        let m = preset_vlasov_fpe(1, BlockPotential::zero(), Some(k), BlockPotential::zero()).unwrap();
        let a = Density::gaussian(g.clone(), &[0.2, 0.0], &[0.4, 0.3]).unwrap();
        // Same x-marginal, different v-profile: reweight each x-row within itself.
        let n = g.axis(1).n;
        let mut vals = a.values().to_vec();
        for row in vals.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            let tilt: Vec<f64> = (0..n).map(|j| 1.0 + 0.5 * (j as f64 / n as f64)).collect();
            let total: f64 = row.iter().zip(&tilt).map(|(r, t)| r * t).sum();
            for (r, w) in row.iter_mut().zip(&tilt) {
                *r *= w * s / total;
            }
        }
        let b = Density::new(g.clone(), vals).unwrap();
        let ba = eval_drift(&m, &a, &g).unwrap();
        let bb = eval_drift(&m, &b, &g).unwrap();
        for (x, y) in ba.iter().zip(&bb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn measure_lipschitz_trivial_cases() {
        let g = square(8, 2.0);
        let mu = Density::gaussian(g.clone(), &[0.0, 0.0], &[0.5, 0.5]).unwrap();
        let nu = Density::gaussian(g.clone(), &[0.5, 0.0], &[0.5, 0.5]).unwrap();
        let m = preset_vlasov_fpe(1, BlockPotential::zero(), Some(InteractionKernel::linear(1, 1.0)), BlockPotential::zero()).unwrap();
        assert_eq!(check_measure_lipschitz(&m, &[(mu.clone(), mu.clone())], &g).unwrap(), 0.0);
        let free = preset_vlasov_fpe(1, BlockPotential::zero(), None, BlockPotential::zero()).unwrap();
        assert_eq!(check_measure_lipschitz(&free, &[(nu, mu)], &g).unwrap(), 0.0);
    }
}
