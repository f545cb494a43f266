//! Central finite-difference oracle for hand-derived gradients.

use crate::params::Parameters;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_REL_TOL: f64 = 1e-4;
/// Components whose analytic and numeric values differ by less than this are
/// accepted outright; relative error is meaningless near zero.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff < ABS_FLOOR {
        return 0.0;
    }
    diff / a.abs().max(b.abs())
}

/// `(f(x + h) − f(x − h)) / 2h` for every coordinate of `params`.
pub fn numeric_gradient<P, F>(params: &P, step: f64, mut loss: F) -> Vec<f64>
where
    P: Parameters + Clone,
    F: FnMut(&P) -> f64,
{
    let mut probe = params.clone();
    (0..params.num_params())
        .map(|i| {
            let x = params.get_flat(i);
            probe.set_flat(i, x + step);
            let up = loss(&probe);
            probe.set_flat(i, x - step);
            let down = loss(&probe);
            probe.set_flat(i, x);
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Compares `analytic` against central differences of `loss` around `params`.
pub fn check<P, F>(params: &P, analytic: &P, step: f64, rel_tol: f64, loss: F) -> GradReport
where
    P: Parameters + Clone,
    F: FnMut(&P) -> f64,
{
    let numeric = numeric_gradient(params, step, loss);
    compare(&analytic.flat(), &numeric, rel_tol)
}

/// Compares two flat gradient vectors.
pub fn compare(analytic: &[f64], numeric: &[f64], rel_tol: f64) -> GradReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut report = GradReport {
        checked: analytic.len(),
        ..GradReport::default()
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_error(a, n);
        report.max_rel_error = report.max_rel_error.max(e);
        if e > rel_tol || !a.is_finite() {
            report.mismatches.push(GradMismatch {
                index: i,
                analytic: a,
                numeric: n,
                rel_error: e,
            });
        }
    }
    report
}

/// Central differences of a loss over a plain vector input.
pub fn numeric_gradient_vec<F>(x: &[f64], step: f64, mut loss: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = loss(&probe);
            probe[i] = x[i] - step;
            let down = loss(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = [1.0, -2.0, 0.5];
        let g = numeric_gradient_vec(&x, DEFAULT_STEP, |v| v.iter().map(|a| a * a * a).sum());
        let exact: Vec<f64> = x.iter().map(|a| 3.0 * a * a).collect();
        assert!(compare(&exact, &g, DEFAULT_REL_TOL).passed());
        let wrong: Vec<f64> = exact.iter().map(|a| a * 1.01).collect();
        assert!(!compare(&wrong, &g, DEFAULT_REL_TOL).passed());
    }
}
