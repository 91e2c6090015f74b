//! Adaptive Simpson quadrature and the zero-order-hold integrals computed
//! with it.

fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn refine(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(fa, flm, fm, a, m);
    let right = simpson(fm, frm, fb, m, b);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol {
        return left + right + diff / 15.0;
    }
    refine(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + refine(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// `∫_a^b f` to absolute tolerance `tol` (Richardson-corrected Simpson).
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    refine(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, 48)
}

/// Discrete transition and input gain of `h' = a h + b x` held over `dt`:
/// `(exp(a·dt), b·∫₀^dt exp(a·τ) dτ)`, the integral done numerically.
pub fn zoh_by_quadrature(a: f64, b: f64, dt: f64) -> (f64, f64) {
    let integrand = |tau: f64| (a * tau).exp();
    // The integral is at most dt; ask for well under 1e-10 relative.
    let scale = dt.max(f64::MIN_POSITIVE);
    let integral = adaptive_simpson(&integrand, 0.0, dt, 1e-14 * scale);
    ((a * dt).exp(), b * integral)
}
