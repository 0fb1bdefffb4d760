//! Symmetric positive-definite band matrices and their Cholesky factorization.

/// Lower band of a symmetric matrix: `lower(i, i−k)` for `0 ≤ k ≤ b`.
#[derive(Clone, Debug)]
pub(crate) struct BandMatrix {
    n: usize,
    b: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, b: usize) -> Self {
        let b = b.min(n.saturating_sub(1));
        Self { n, b, data: vec![0.0; n * (b + 1)] }
    }

    /// Entry `(i, j)` with `j ≤ i ≤ j + b`.
    pub fn at(&mut self, i: usize, j: usize) -> &mut f64 {
        debug_assert!(j <= i && i - j <= self.b);
        &mut self.data[i * (self.b + 1) + (i - j)]
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * (self.b + 1) + (i - j)]
    }

    /// In-place `M = L Lᵀ`; returns `false` on a non-positive pivot.
    pub fn cholesky(&mut self) -> bool {
        let (n, b) = (self.n, self.b);
        for j in 0..n {
            let k0 = j.saturating_sub(b);
            let mut d = self.get(j, j);
            for k in k0..j {
                let l = self.get(j, k);
                d -= l * l;
            }
            if !(d > 0.0) || !d.is_finite() {
                return false;
            }
            let d = d.sqrt();
            *self.at(j, j) = d;
            for i in j + 1..=(j + b).min(n - 1) {
                let k0 = i.saturating_sub(b);
                let mut s = self.get(i, j);
                for k in k0..j {
                    s -= self.get(i, k) * self.get(j, k);
                }
                *self.at(i, j) = s / d;
            }
        }
        true
    }

    /// Solves `L Lᵀ x = rhs` in place after [`cholesky`](Self::cholesky).
    pub fn solve(&self, x: &mut [f64]) {
        let (n, b) = (self.n, self.b);
        for i in 0..n {
            let mut s = x[i];
            for k in i.saturating_sub(b)..i {
                s -= self.get(i, k) * x[k];
            }
            x[i] = s / self.get(i, i);
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..=(i + b).min(n - 1) {
                s -= self.get(k, i) * x[k];
            }
            x[i] = s / self.get(i, i);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_a_tridiagonal_system() {
        let n = 6;
        let mut m = BandMatrix::zeros(n, 1);
        for i in 0..n {
            *m.at(i, i) = 2.0;
            if i > 0 {
                *m.at(i, i - 1) = -1.0;
            }
        }
        let x_true: Vec<f64> = (0..n).map(|i| i as f64 - 1.5).collect();
        let mut rhs: Vec<f64> = (0..n)
            .map(|i| {
                let mut s = 2.0 * x_true[i];
                if i > 0 {
                    s -= x_true[i - 1];
                }
                if i + 1 < n {
                    s -= x_true[i + 1];
                }
                s
            })
            .collect();
        assert!(m.cholesky());
        m.solve(&mut rhs);
        for (a, b) in rhs.iter().zip(&x_true) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indefinite() {
        let mut m = BandMatrix::zeros(2, 1);
        *m.at(0, 0) = 1.0;
        *m.at(1, 1) = 1.0;
        *m.at(1, 0) = 2.0;
        assert!(!m.cholesky());
    }
}
