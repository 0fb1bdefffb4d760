//! Truncated tensor grids, densities on them, and the free-energy functionals.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{config, Error, Result};
use crate::model::Model;

/// One coordinate axis: `n` uniform cells covering `[lo, hi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() {
            return config(format!("axis bounds must be finite, got [{lo}, {hi}]"));
        }
        if hi <= lo {
            return config(format!("axis spacing must be positive, got [{lo}, {hi}]"));
        }
        if n < 2 {
            return config(format!("axis needs at least 2 points, got {n}"));
        }
        Ok(Self { lo, hi, n })
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / self.n as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.spacing()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.center(i)).collect()
    }

    /// Axis with each cell split into `r` equal subcells.
    pub fn refined(&self, r: usize) -> Axis {
        Axis { lo: self.lo, hi: self.hi, n: self.n * r.max(1) }
    }
}

/// Row-major tensor grid (last axis fastest) with midpoint quadrature.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    axes: Vec<Axis>,
    strides: Vec<usize>,
    len: usize,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return config("grid needs at least one axis");
        }
        for (k, a) in axes.iter().enumerate() {
            Axis::new(a.lo, a.hi, a.n).map_err(|e| Error::Config(format!("axis {k}: {e}")))?;
        }
        let d = axes.len();
        let mut strides = vec![1usize; d];
        for k in (0..d - 1).rev() {
            strides[k] = strides[k + 1] * axes[k + 1].n;
        }
        let len = strides[0] * axes[0].n;
        Ok(Self { axes, strides, len })
    }

    /// Cube `[lo, hi]^d` with `n` cells per axis.
    pub fn cube(d: usize, lo: f64, hi: f64, n: usize) -> Result<Self> {
        Grid::new(vec![Axis::new(lo, hi, n)?; d])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn axis(&self, k: usize) -> &Axis {
        &self.axes[k]
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.n).collect()
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn spacing(&self, k: usize) -> f64 {
        self.axes[k].spacing()
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Axis::spacing).product()
    }

    pub fn flat(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn multi_index(&self, mut flat: usize, out: &mut [usize]) {
        for k in 0..self.dim() {
            out[k] = flat / self.strides[k];
            flat %= self.strides[k];
        }
    }

    pub fn center_into(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for k in 0..self.dim() {
            let i = rem / self.strides[k];
            rem %= self.strides[k];
            out[k] = self.axes[k].center(i);
        }
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.center_into(flat, &mut x);
        x
    }

    /// All cell centers, flattened `len × d`.
    pub fn centers(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; self.len * d];
        for c in 0..self.len {
            self.center_into(c, &mut out[c * d..(c + 1) * d]);
        }
        out
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.axes).all(|(&v, a)| v >= a.lo && v <= a.hi)
    }

    /// Whether the cell lies in the outermost layer along some axis.
    pub fn is_boundary(&self, flat: usize) -> bool {
        let mut rem = flat;
        for k in 0..self.dim() {
            let i = rem / self.strides[k];
            rem %= self.strides[k];
            if i == 0 || i + 1 == self.axes[k].n {
                return true;
            }
        }
        false
    }

    pub fn refined(&self, factors: &[usize]) -> Grid {
        let axes = self.axes.iter().zip(factors).map(|(a, &r)| a.refined(r)).collect();
        Grid::new(axes).expect("refining a valid grid")
    }

    /// Header token list used by the snapshot formats.
    pub fn header(&self) -> String {
        let mut s = format!("{}", self.dim());
        for a in &self.axes {
            let _ = write!(s, " {:e},{:e},{}", a.lo, a.hi, a.n);
        }
        s
    }

    pub fn parse_header(line: &str) -> Result<Grid> {
        let mut it = line.split_whitespace();
        let d: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Config(format!("bad snapshot header: {line}")))?;
        let mut axes = Vec::with_capacity(d);
        for k in 0..d {
            let tok = it
                .next()
                .ok_or_else(|| Error::Config(format!("snapshot header lacks axis {k}")))?;
            let parts: Vec<&str> = tok.split(',').collect();
            if parts.len() != 3 {
                return config(format!("snapshot axis {k} must read lo,hi,n: {tok}"));
            }
            let lo = parts[0].parse::<f64>();
            let hi = parts[1].parse::<f64>();
            let n = parts[2].parse::<usize>();
            match (lo, hi, n) {
                (Ok(lo), Ok(hi), Ok(n)) => axes.push(Axis::new(lo, hi, n)?),
                _ => return config(format!("snapshot axis {k} does not parse: {tok}")),
            }
        }
        Grid::new(axes)
    }
}

/// Nonnegative grid function of unit mass.
#[derive(Clone, Debug)]
pub struct Density {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl Density {
    /// Validates values and rescales to unit mass.
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return config(format!(
                "density has {} values but the grid has {} cells",
                values.len(),
                grid.len()
            ));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Degenerate(format!("density value {v} is negative or not finite")));
        }
        normalize_values(&grid, values).map(|values| Self { grid, values })
    }

    /// Wraps values already known to be valid and of unit mass.
    #[cfg(test)]
    pub(crate) fn from_normalized(grid: Arc<Grid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len(), values.len());
        Self { grid, values }
    }

    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut x = vec![0.0; grid.dim()];
        let values = (0..grid.len())
            .map(|c| {
                grid.center_into(c, &mut x);
                f(&x).max(0.0)
            })
            .collect();
        Density::new(grid, values)
    }

    /// Gaussian with diagonal covariance sampled at cell centers.
    pub fn gaussian(grid: Arc<Grid>, mean: &[f64], var: &[f64]) -> Result<Self> {
        if mean.len() != grid.dim() || var.len() != grid.dim() {
            return config("gaussian mean/variance length must equal the grid dimension");
        }
        if var.iter().any(|v| !(*v > 0.0)) {
            return config("gaussian variances must be positive");
        }
        Density::from_fn(grid, |x| {
            let q: f64 = x.iter().zip(mean).zip(var).map(|((x, m), v)| (x - m).powi(2) / v).sum();
            (-0.5 * q).exp()
        })
    }

    /// Uniform on the cells whose centers fall in the box.
    pub fn uniform(grid: Arc<Grid>, lo: &[f64], hi: &[f64]) -> Result<Self> {
        Density::from_fn(grid, |x| {
            let inside = x.iter().zip(lo).zip(hi).all(|((x, l), h)| *x >= *l && *x <= *h);
            if inside {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mass(&self) -> f64 {
        mass_of(&self.grid, &self.values)
    }

    pub fn l1_distance(&self, other: &Density) -> f64 {
        let w = self.grid.cell_volume();
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).sum::<f64>() * w
    }

    /// Mean vector under midpoint quadrature.
    pub fn mean(&self) -> Vec<f64> {
        let d = self.grid.dim();
        let w = self.grid.cell_volume();
        let mut x = vec![0.0; d];
        let mut m = vec![0.0; d];
        for (c, &r) in self.values.iter().enumerate() {
            self.grid.center_into(c, &mut x);
            for k in 0..d {
                m[k] += x[k] * r * w;
            }
        }
        m
    }

    /// Covariance matrix (row-major `d × d`).
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.grid.dim();
        let w = self.grid.cell_volume();
        let m = self.mean();
        let mut x = vec![0.0; d];
        let mut p = vec![0.0; d * d];
        for (c, &r) in self.values.iter().enumerate() {
            self.grid.center_into(c, &mut x);
            for i in 0..d {
                for j in 0..d {
                    p[i * d + j] += (x[i] - m[i]) * (x[j] - m[j]) * r * w;
                }
            }
        }
        p
    }

    /// Mass sitting in the outermost cell layer.
    pub fn boundary_mass(&self) -> f64 {
        let w = self.grid.cell_volume();
        (0..self.grid.len())
            .filter(|&c| self.grid.is_boundary(c))
            .map(|c| self.values[c])
            .sum::<f64>()
            * w
    }

    /// Writes the plain-text snapshot: header line, then one value per line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{}", self.grid.header())?;
        for v in &self.values {
            writeln!(out, "{v:e}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Density> {
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Config(format!("{}: empty snapshot", path.display())))??;
        let grid = Arc::new(Grid::parse_header(&header)?);
        let mut values = Vec::with_capacity(grid.len());
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            for tok in line.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
                let v = tok.parse::<f64>().map_err(|_| {
                    Error::Config(format!("{}:{}: bad value {tok}", path.display(), lineno + 2))
                })?;
                values.push(v);
            }
        }
        Density::new(grid, values)
    }

    /// Writes raw little-endian doubles plus a `.hdr` sidecar with the header line.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes)?;
        std::fs::write(sidecar(path), format!("{}\n", self.grid.header()))?;
        Ok(())
    }

    pub fn read_raw(path: &Path) -> Result<Density> {
        let header = std::fs::read_to_string(sidecar(path))?;
        let grid = Arc::new(Grid::parse_header(header.trim())?);
        let bytes = std::fs::read(path)?;
        if bytes.len() != grid.len() * 8 {
            return config(format!(
                "{}: expected {} bytes, found {}",
                path.display(),
                grid.len() * 8,
                bytes.len()
            ));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Density::new(grid, values)
    }
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    s.into()
}

pub(crate) fn mass_of(grid: &Grid, values: &[f64]) -> f64 {
    values.iter().sum::<f64>() * grid.cell_volume()
}

fn normalize_values(grid: &Grid, mut values: Vec<f64>) -> Result<Vec<f64>> {
    let m = mass_of(grid, &values);
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::Degenerate(format!("cannot normalize a density of mass {m}")));
    }
    // Masses already at unit up to round-off are kept bitwise.
    if (m - 1.0).abs() > 1e-14 {
        let s = 1.0 / m;
        values.iter_mut().for_each(|v| *v *= s);
    }
    Ok(values)
}

/// Rescales to unit mass; all-zero input is rejected.
pub fn normalize(rho: &Density) -> Result<Density> {
    normalize_values(&rho.grid, rho.values.clone()).map(|values| Density { grid: rho.grid.clone(), values })
}

/// `Σ ‖x‖² ρ · cell_volume`.
pub fn second_moment(rho: &Density) -> f64 {
    let g = rho.grid();
    let w = g.cell_volume();
    let mut x = vec![0.0; g.dim()];
    let mut s = 0.0;
    for (c, &r) in rho.values().iter().enumerate() {
        if r == 0.0 {
            continue;
        }
        g.center_into(c, &mut x);
        s += x.iter().map(|v| v * v).sum::<f64>() * r;
    }
    s * w
}

/// Entropy `∫ρ log ρ` with its positive and negative parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entropy {
    pub h: f64,
    pub h_plus: f64,
    pub h_minus: f64,
}

pub(crate) fn xlogx(r: f64) -> f64 {
    if r > 0.0 {
        r * r.ln()
    } else {
        0.0
    }
}

pub fn entropy(rho: &Density) -> Entropy {
    let w = rho.grid().cell_volume();
    let (mut hp, mut hm) = (0.0, 0.0);
    for &r in rho.values() {
        let e = xlogx(r);
        if e > 0.0 {
            hp += e;
        } else {
            hm -= e;
        }
    }
    let (h_plus, h_minus) = (hp * w, hm * w);
    Entropy { h: h_plus - h_minus, h_plus, h_minus }
}

/// Second moment, entropy parts, potential energy and free energy of one density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Functionals {
    pub m: f64,
    pub h: f64,
    pub h_plus: f64,
    pub h_minus: f64,
    pub f_pot: f64,
    pub f_free: f64,
}

pub fn free_energy(rho: &Density, model: &Model) -> Functionals {
    let g = rho.grid();
    let w = g.cell_volume();
    let mut x = vec![0.0; g.dim()];
    let (mut m, mut fp, mut hp, mut hm) = (0.0, 0.0, 0.0, 0.0);
    for (c, &r) in rho.values().iter().enumerate() {
        if r == 0.0 {
            continue;
        }
        g.center_into(c, &mut x);
        m += x.iter().map(|v| v * v).sum::<f64>() * r;
        fp += model.potential(&x) * r;
        let e = xlogx(r);
        if e > 0.0 {
            hp += e;
        } else {
            hm -= e;
        }
    }
    let (h_plus, h_minus) = (hp * w, hm * w);
    let h = h_plus - h_minus;
    let f_pot = fp * w;
    Functionals { m: m * w, h, h_plus, h_minus, f_pot, f_free: f_pot + h }
}
