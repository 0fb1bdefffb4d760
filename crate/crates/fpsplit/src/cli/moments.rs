//! Moment-ODE reference for models whose drift and potential gradient are linear.
//!
//! For `b(x) = Bx`, `∇f(x) = Kx` and constant `A`, the law stays Gaussian with
//! `m' = Mm`, `P' = MP + PMᵀ + 2A`, where `M = B − AK`.

use nalgebra::{DMatrix, DVector};

use crate::model::Model;

/// `M = B − AK` and `A` of a linear model.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCoefficients {
    pub m: DMatrix<f64>,
    pub a: DMatrix<f64>,
}

/// Probes the model; `None` unless the drift is local and both fields are linear.
pub fn linear_coefficients(model: &Model) -> Option<LinearCoefficients> {
    if model.drift().kernel.is_some() {
        return None;
    }
    let d = model.dim();
    let mut b = DMatrix::zeros(d, d);
    let mut k = DMatrix::zeros(d, d);
    let mut out = vec![0.0; d];
    let mut e = vec![0.0; d];
    for j in 0..d {
        e.fill(0.0);
        e[j] = 1.0;
        model.local_drift(&e, &mut out);
        b.set_column(j, &DVector::from_column_slice(&out));
        model.potential_gradient(&e, &mut out);
        k.set_column(j, &DVector::from_column_slice(&out));
    }
    // Linearity at a few fixed points, including the origin.
    let probes: [f64; 3] = [0.0, 0.37, -1.9];
    for (t, &s) in probes.iter().enumerate() {
        let x: Vec<f64> = (0..d).map(|i| s * (1.0 + 0.3 * ((i + t) % 3) as f64)).collect();
        let xv = DVector::from_column_slice(&x);
        for (field, mat) in [(0, &b), (1, &k)] {
            if field == 0 {
                model.local_drift(&x, &mut out);
            } else {
                model.potential_gradient(&x, &mut out);
            }
            let want = mat * &xv;
            if (0..d).any(|i| (out[i] - want[i]).abs() > 1e-9 * (1.0 + want[i].abs())) {
                return None;
            }
        }
    }
    let a = model.diffusion().to_matrix();
    Some(LinearCoefficients { m: &b - &a * &k, a })
}

/// Mean and covariance at `t` by classical RK4 with `steps` steps.
pub fn moment_ode(c: &LinearCoefficients, mean0: &[f64], cov0: &DMatrix<f64>, t: f64, steps: usize) -> (DVector<f64>, DMatrix<f64>) {
    let mut m = DVector::from_column_slice(mean0);
    let mut p = cov0.clone();
    let dt = t / steps as f64;
    let fm = |m: &DVector<f64>| &c.m * m;
    let fp = |p: &DMatrix<f64>| &c.m * p + p * c.m.transpose() + &c.a * 2.0;
    for _ in 0..steps {
        let k1 = fm(&m);
        let k2 = fm(&(&m + &k1 * (dt / 2.0)));
        let k3 = fm(&(&m + &k2 * (dt / 2.0)));
        let k4 = fm(&(&m + &k3 * dt));
        m += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        let q1 = fp(&p);
        let q2 = fp(&(&p + &q1 * (dt / 2.0)));
        let q3 = fp(&(&p + &q2 * (dt / 2.0)));
        let q4 = fp(&(&p + &q3 * dt));
        p += (q1 + q2 * 2.0 + q3 * 2.0 + q4) * (dt / 6.0);
    }
    (m, p)
}
