//! Interpolation of cell-centered grid data at arbitrary points.

use crate::grid::Grid;

/// How foot-point values are reconstructed from cell-centered data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Interpolation {
    /// Tensor-product linear interpolation; positivity preserving.
    #[default]
    Multilinear,
    /// Tensor-product Catmull-Rom cubic, clipped at zero for densities.
    Cubic,
}

impl std::str::FromStr for Interpolation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "multilinear" | "linear" => Ok(Interpolation::Multilinear),
            "cubic" => Ok(Interpolation::Cubic),
            _ => Err(format!("unknown interpolation '{s}' (expected multilinear or cubic)")),
        }
    }
}

impl std::fmt::Display for Interpolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Interpolation::Multilinear => "multilinear",
            Interpolation::Cubic => "cubic",
        })
    }
}

const MAX_DIM: usize = 8;

/// Interpolates `ncomp` interleaved components at `x`.
///
/// Inside the box, coordinates between the outermost centers and the walls are
/// clamped to the nearest center. Returns `false` (and zeros) outside the box.
pub(crate) fn sample(
    grid: &Grid,
    data: &[f64],
    ncomp: usize,
    x: &[f64],
    method: Interpolation,
    out: &mut [f64],
) -> bool {
    out[..ncomp].iter_mut().for_each(|o| *o = 0.0);
    if !grid.contains(x) {
        return false;
    }
    let d = grid.dim();
    assert!(d <= MAX_DIM, "grids above {MAX_DIM} dimensions are not supported");
    match method {
        Interpolation::Multilinear => multilinear(grid, data, ncomp, x, out),
        Interpolation::Cubic => cubic(grid, data, ncomp, x, out),
    }
    true
}

fn locate(grid: &Grid, k: usize, x: f64) -> (usize, f64) {
    let a = grid.axis(k);
    let s = ((x - a.lo) / a.spacing() - 0.5).clamp(0.0, (a.n - 1) as f64);
    let i = (s.floor() as usize).min(a.n - 2);
    (i, s - i as f64)
}

fn multilinear(grid: &Grid, data: &[f64], ncomp: usize, x: &[f64], out: &mut [f64]) {
    let d = grid.dim();
    let strides = grid.strides();
    let mut base = 0;
    let mut frac = [0.0; MAX_DIM];
    for k in 0..d {
        let (i, t) = locate(grid, k, x[k]);
        base += i * strides[k];
        frac[k] = t;
    }
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut off = base;
        for k in 0..d {
            if corner >> k & 1 == 1 {
                w *= frac[k];
                off += strides[k];
            } else {
                w *= 1.0 - frac[k];
            }
        }
        if w == 0.0 {
            continue;
        }
        for c in 0..ncomp {
            out[c] += w * data[off * ncomp + c];
        }
    }
}

fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

fn cubic(grid: &Grid, data: &[f64], ncomp: usize, x: &[f64], out: &mut [f64]) {
    let d = grid.dim();
    let strides = grid.strides();
    let mut idx = [[0usize; 4]; MAX_DIM];
    let mut wts = [[0.0; 4]; MAX_DIM];
    for k in 0..d {
        let n = grid.axis(k).n as isize;
        let (i, t) = locate(grid, k, x[k]);
        wts[k] = catmull_rom(t);
        for m in 0..4 {
            // Clamped stencil at the ends.
            idx[k][m] = (i as isize + m as isize - 1).clamp(0, n - 1) as usize;
        }
    }
    let total = 4usize.pow(d as u32);
    for corner in 0..total {
        let mut w = 1.0;
        let mut off = 0;
        let mut rem = corner;
        for k in 0..d {
            let m = rem % 4;
            rem /= 4;
            w *= wts[k][m];
            off += idx[k][m] * strides[k];
        }
        if w == 0.0 {
            continue;
        }
        for c in 0..ncomp {
            out[c] += w * data[off * ncomp + c];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Axis, Grid};

    #[test]
    fn reproduces_affine_data() {
        let g = Grid::new(vec![Axis::new(-1.0, 1.0, 5).unwrap(), Axis::new(0.0, 2.0, 4).unwrap()]).unwrap();
        let data: Vec<f64> = (0..g.len())
            .map(|c| {
                let x = g.center(c);
                1.0 + 2.0 * x[0] - 0.5 * x[1]
            })
            .collect();
        let mut out = [0.0];
        for method in [Interpolation::Multilinear, Interpolation::Cubic] {
            for p in [[0.1, 0.8], [-0.3, 1.2], [0.25, 0.9]] {
                assert!(sample(&g, &data, 1, &p, method, &mut out));
                assert!((out[0] - (1.0 + 2.0 * p[0] - 0.5 * p[1])).abs() < 1e-12, "{method}");
            }
        }
    }

    #[test]
    fn outside_box_reads_zero() {
        let g = Grid::new(vec![Axis::new(0.0, 1.0, 4).unwrap()]).unwrap();
        let mut out = [7.0];
        assert!(!sample(&g, &[1.0; 4], 1, &[1.5], Interpolation::Multilinear, &mut out));
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn exact_at_centers() {
        let g = Grid::new(vec![Axis::new(0.0, 1.0, 6).unwrap()]).unwrap();
        let data: Vec<f64> = (0..6).map(|i| (i * i) as f64).collect();
        let mut out = [0.0];
        for i in 0..6 {
            sample(&g, &data, 1, &[g.axis(0).center(i)], Interpolation::Cubic, &mut out);
            assert!((out[0] - data[i]).abs() < 1e-12);
        }
    }
}
