//! Log-domain Gibbs kernels `exp(−c/ε)`: separable and banded per axis when
//! `A_h` is diagonal, dense otherwise.

/// Terms below `exp(−CUT)` relative to the running maximum are dropped.
pub(crate) const CUT: f64 = 40.0;

/// Optional factor multiplying the kernel along one axis; `δ = summed − output` in index units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Weight {
    /// `coef δ²`, the dimensionless cost `c/ε` along the axis.
    Cost,
    /// `max(δ, 0) Δx`.
    Pos,
    /// `max(−δ, 0) Δx`.
    Neg,
}

/// One axis of a separable kernel: `C(δ) = coef δ²` for `|δ| ≤ band`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct AxisKernel {
    pub n: usize,
    pub dx: f64,
    pub coef: f64,
    pub band: usize,
}

impl AxisKernel {
    pub fn new(n: usize, dx: f64, coef: f64, band: usize) -> Self {
        Self { n, dx, coef, band: band.min(n.saturating_sub(1)) }
    }

    fn log_weight(&self, delta: isize, weight: Option<Weight>) -> f64 {
        match weight {
            None => 0.0,
            Some(Weight::Cost) => {
                if delta == 0 {
                    f64::NEG_INFINITY
                } else {
                    (self.coef * (delta * delta) as f64).ln()
                }
            }
            Some(Weight::Pos) => {
                if delta > 0 {
                    (delta as f64 * self.dx).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Some(Weight::Neg) => {
                if delta < 0 {
                    (-delta as f64 * self.dx).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// `out_i = log Σ_{|j−i| ≤ band} W(j−i) exp(x_j − coef (i−j)²)`.
    pub fn lse_line(&self, x: &[f64], out: &mut [f64], weight: Option<Weight>) {
        let n = self.n;
        let b = self.band;
        let table: Vec<f64> = (0..=b).map(|k| self.coef * (k * k) as f64).collect();
        let lw: Option<Vec<f64>> = weight.map(|w| (-(b as isize)..=b as isize).map(|d| self.log_weight(d, Some(w))).collect());
        for i in 0..n {
            let lo = i.saturating_sub(b);
            let hi = (i + b).min(n - 1);
            let term = |j: usize| -> f64 {
                let k = i.abs_diff(j);
                let t = x[j] - table[k];
                match &lw {
                    None => t,
                    Some(lw) => t + lw[(j as isize - i as isize + b as isize) as usize],
                }
            };
            let mut m = f64::NEG_INFINITY;
            for j in lo..=hi {
                let t = term(j);
                if t > m {
                    m = t;
                }
            }
            if m == f64::NEG_INFINITY {
                out[i] = m;
                continue;
            }
            let floor = m - CUT;
            let mut s = 0.0;
            for j in lo..=hi {
                let t = term(j);
                if t > floor {
                    s += (t - m).exp();
                }
            }
            out[i] = m + s.ln();
        }
    }
}

/// `C_ij = c(x_i, x_j)/ε` in log-domain form.
#[derive(Clone, Debug)]
pub(crate) enum LogKernel {
    /// Tensor grid of `shape` (row-major, last axis fastest), one factor per axis.
    Separable { shape: Vec<usize>, axes: Vec<AxisKernel> },
    /// Explicit `n × n` matrix of `c/ε`.
    Dense { n: usize, c: Vec<f64> },
}

impl LogKernel {
    pub fn len(&self) -> usize {
        match self {
            LogKernel::Separable { shape, .. } => shape.iter().product(),
            LogKernel::Dense { n, .. } => *n,
        }
    }

    /// `out_i = log Σ_j W exp(x_j − C_ij)`, the weight applied along `weighted.0`.
    pub fn lse(&self, x: &[f64], out: &mut [f64], weighted: Option<(usize, Weight)>) {
        match self {
            LogKernel::Dense { n, c } => {
                let n = *n;
                for i in 0..n {
                    let row = &c[i * n..(i + 1) * n];
                    let wt = |j: usize| -> f64 {
                        match weighted {
                            None => 0.0,
                            Some((_, Weight::Cost)) => {
                                if row[j] > 0.0 {
                                    row[j].ln()
                                } else {
                                    f64::NEG_INFINITY
                                }
                            }
                            Some(_) => unreachable!("displacement weights need a separable kernel"),
                        }
                    };
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..n {
                        let t = x[j] - row[j] + wt(j);
                        if t > m {
                            m = t;
                        }
                    }
                    if m == f64::NEG_INFINITY {
                        out[i] = m;
                        continue;
                    }
                    let mut s = 0.0;
                    for j in 0..n {
                        let t = x[j] - row[j] + wt(j);
                        if t > m - CUT {
                            s += (t - m).exp();
                        }
                    }
                    out[i] = m + s.ln();
                }
            }
            LogKernel::Separable { shape, axes } => {
                let total: usize = shape.iter().product();
                let mut cur = x.to_vec();
                let mut next = vec![0.0; total];
                let mut strides = vec![1usize; shape.len()];
                for k in (0..shape.len().saturating_sub(1)).rev() {
                    strides[k] = strides[k + 1] * shape[k + 1];
                }
                for (k, ax) in axes.iter().enumerate() {
                    let n = shape[k];
                    let s = strides[k];
                    let wk = weighted.and_then(|(a, w)| (a == k).then_some(w));
                    if n == 1 {
                        if wk.is_some() {
                            // Displacement and cost vanish on a single cell.
                            cur.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
                        }
                        continue;
                    }
                    let mut line_in = vec![0.0; n];
                    let mut line_out = vec![0.0; n];
                    let outer = total / (n * s);
                    for o in 0..outer {
                        for inner in 0..s {
                            let base = o * n * s + inner;
                            for i in 0..n {
                                line_in[i] = cur[base + i * s];
                            }
                            ax.lse_line(&line_in, &mut line_out, wk);
                            for i in 0..n {
                                next[base + i * s] = line_out[i];
                            }
                        }
                    }
                    std::mem::swap(&mut cur, &mut next);
                }
                out.copy_from_slice(&cur);
            }
        }
    }

    /// `C_ij` for a single pair (tests and small dense paths).
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match self {
            LogKernel::Dense { n, c } => c[i * n + j],
            LogKernel::Separable { shape, axes } => {
                let mut s = 0.0;
                let (mut a, mut b) = (i, j);
                for k in (0..shape.len()).rev() {
                    let (ia, ib) = (a % shape[k], b % shape[k]);
                    a /= shape[k];
                    b /= shape[k];
                    let d = ia.abs_diff(ib);
                    if d > axes[k].band {
                        return f64::INFINITY;
                    }
                    s += axes[k].coef * (d * d) as f64;
                }
                s
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(k: &LogKernel, x: &[f64], weighted: Option<(usize, Weight)>, shape: &[usize], dx: &[f64]) -> Vec<f64> {
        let n = k.len();
        let idx = |mut c: usize| -> Vec<usize> {
            let mut v = vec![0; shape.len()];
            for a in (0..shape.len()).rev() {
                v[a] = c % shape[a];
                c /= shape[a];
            }
            v
        };
        (0..n)
            .map(|i| {
                let s: f64 = (0..n)
                    .map(|j| {
                        let c = k.entry(i, j);
                        if !c.is_finite() {
                            return 0.0;
                        }
                        let w = match weighted {
                            None => 1.0,
                            Some((a, wt)) => {
                                let d = idx(j)[a] as f64 - idx(i)[a] as f64;
                                match wt {
                                    Weight::Cost => {
                                        if let LogKernel::Separable { axes, .. } = k {
                                            axes[a].coef * d * d
                                        } else {
                                            c
                                        }
                                    }
                                    Weight::Pos => d.max(0.0) * dx[a],
                                    Weight::Neg => (-d).max(0.0) * dx[a],
                                }
                            }
                        };
                        w * (x[j] - c).exp()
                    })
                    .sum();
                s.ln()
            })
            .collect()
    }

    #[test]
    fn separable_matches_brute_force() {
        let shape = vec![4, 5];
        let axes = vec![AxisKernel::new(4, 0.5, 0.7, 2), AxisKernel::new(5, 0.25, 0.3, 4)];
        let k = LogKernel::Separable { shape: shape.clone(), axes };
        let x: Vec<f64> = (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.4).collect();
        for weighted in [None, Some((0, Weight::Cost)), Some((1, Weight::Cost)), Some((1, Weight::Pos)), Some((0, Weight::Neg))] {
            let mut out = vec![0.0; 20];
            k.lse(&x, &mut out, weighted);
            let b = brute(&k, &x, weighted, &shape, &[0.5, 0.25]);
            for (a, b) in out.iter().zip(&b) {
                if b.is_finite() {
                    assert!((a - b).abs() < 1e-12, "{weighted:?}: {a} vs {b}");
                } else {
                    assert_eq!(*a, f64::NEG_INFINITY);
                }
            }
        }
    }

    #[test]
    fn dense_matches_separable_on_full_band() {
        let shape = vec![3, 4];
        let axes = vec![AxisKernel::new(3, 1.0, 0.5, 2), AxisKernel::new(4, 1.0, 1.5, 3)];
        let sep = LogKernel::Separable { shape, axes };
        let n = 12;
        let c: Vec<f64> = (0..n * n).map(|e| sep.entry(e / n, e % n)).collect();
        let dense = LogKernel::Dense { n, c };
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let (mut a, mut b) = (vec![0.0; n], vec![0.0; n]);
        sep.lse(&x, &mut a, None);
        dense.lse(&x, &mut b, None);
        for (a, b) in a.iter().zip(&b) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn minus_infinity_inputs_are_ignored() {
        let k = LogKernel::Separable { shape: vec![3], axes: vec![AxisKernel::new(3, 1.0, 1.0, 2)] };
        let x = [f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY];
        let mut out = [0.0; 3];
        k.lse(&x, &mut out, None);
        assert!((out[0] + 1.0).abs() < 1e-15 && out[1].abs() < 1e-15);
    }
}
