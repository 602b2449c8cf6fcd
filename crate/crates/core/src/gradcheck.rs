//! Finite-difference helpers for gradient checks.

/// Step sizes tried by [`stable_difference`], largest first.
pub const STEPS: [f64; 4] = [1e-5, 1e-6, 1e-7, 1e-8];
/// Successive estimates closer than this (relative) count as converged.
pub const AGREEMENT: f64 = 1e-5;

pub fn central_difference<T: Clone>(f: &dyn Fn(&T) -> f64, x: &T, h: f64, edit: &dyn Fn(&mut T, f64)) -> f64 {
    let (mut p, mut m) = (x.clone(), x.clone());
    edit(&mut p, h);
    edit(&mut m, -h);
    (f(&p) - f(&m)) / (2.0 * h)
}

/// Central difference with the step shrunk until two successive estimates
/// agree, so a stencil straddling a render cutoff is not mistaken for the
/// derivative. Falls back to the smallest step.
pub fn stable_difference<T: Clone>(f: &dyn Fn(&T) -> f64, x: &T, edit: &dyn Fn(&mut T, f64)) -> f64 {
    let mut prev = central_difference(f, x, STEPS[0], edit);
    for &h in &STEPS[1..] {
        let d = central_difference(f, x, h, edit);
        if (d - prev).abs() <= AGREEMENT * d.abs().max(prev.abs()).max(1e-8) {
            return d;
        }
        prev = d;
    }
    prev
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / n(a).max(n(b)).max(floor)
}
