//! Central-difference verification of analytic gradients.

/// Outcome of probing one gradient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate where the worst relative error occurred.
    pub worst_index: usize,
    /// Set when any probe or analytic entry was NaN or infinite; the check
    /// must be treated as failed regardless of the error figure.
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        !self.non_finite && self.max_rel_err < tolerance
    }
}

/// Compares an analytic gradient against central differences
/// `(f(x+e) - f(x-e)) / 2e` per coordinate. The relative error is
/// normalised by `max(|analytic| + |numeric|, 1e-6)` so near-zero
/// gradients do not blow up the ratio.
pub fn check_gradient<F>(f: F, x: &[f64], analytic: &[f64], eps: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len());
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    let mut non_finite = false;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe);
        probe[i] = x[i] - eps;
        let minus = f(&probe);
        probe[i] = x[i];

        let numeric = (plus - minus) / (2.0 * eps);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            non_finite = true;
            continue;
        }
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-6);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_index,
        non_finite,
    }
}
