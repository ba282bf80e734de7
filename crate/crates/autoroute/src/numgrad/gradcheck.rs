//! Central finite-difference checking of analytic gradients.

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error symmetric in both arguments, with an absolute floor so that
/// near-zero gradient pairs do not blow up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Compare analytic gradients against central differences of `loss` at
/// `point`. `loss` must be a pure function of the flattened parameters.
pub fn grad_check(
    mut loss: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    point: &[f64],
    eps: f64,
) -> GradCheckReport {
    assert_eq!(analytic.len(), point.len());
    let mut p = point.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let up = loss(&p);
        p[i] = orig - eps;
        let down = loss(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        max_rel = max_rel.max(rel_err(analytic[i], numeric));
    }
    GradCheckReport {
        max_rel_err: max_rel,
        checked: p.len(),
    }
}
