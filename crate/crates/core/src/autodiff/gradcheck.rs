use rand::seq::index::sample;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng;

/// Comparison of tape gradients against central differences for one
/// parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
    /// Number of coordinates compared.
    pub coords: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_err))
    }
}

/// How many coordinates of each parameter to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many coordinates per tensor, drawn without replacement
    /// from a stream seeded by the given value.
    Sample { per_param: usize, seed: u64 },
}

/// Finite-difference formula used as the reference derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, truncation error `O(h²)`.
    Central2,
    /// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, truncation
    /// error `O(h⁴)`. Tolerates a larger `h`, which shrinks the rounding
    /// error `~ε·|f|/h` when gradients are far smaller than the loss.
    Central4,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares tape gradients of `f` with two-point central differences.
///
/// Each probed coordinate `x` is perturbed by `±step·max(1, |x|)`. `f` must
/// be deterministic: it is re-run on a fresh tape for every perturbation.
pub fn gradcheck<F>(
    store: &ParamStore,
    params: &[ParamId],
    step: f64,
    tolerance: f64,
    coverage: Coverage,
    f: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    gradcheck_with(store, params, step, Stencil::Central2, tolerance, coverage, f)
}

/// [`gradcheck`] with a choice of difference stencil.
pub fn gradcheck_with<F>(
    store: &ParamStore,
    params: &[ParamId],
    step: f64,
    stencil: Stencil,
    tolerance: f64,
    coverage: Coverage,
    f: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s);
        let out = f(&mut tape)?;
        let v = tape.value_of(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "gradcheck",
                detail: format!("forward value {v}"),
            });
        }
        Ok(v)
    };

    let grads = {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        let v = tape.value_of(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "gradcheck",
                detail: format!("forward value {v}"),
            });
        }
        tape.backward(out)?
    };

    let mut work = store.clone();
    let mut report = GradcheckReport {
        tolerance,
        params: Vec::with_capacity(params.len()),
    };
    for (pi, &id) in params.iter().enumerate() {
        let n = store.get(id).len();
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sample { per_param, seed } if per_param < n => {
                let mut r = rng::stream(seed, &[rng::tag::NOISE, pi as u64]);
                let mut v = sample(&mut r, n, per_param).into_vec();
                v.sort_unstable();
                v
            }
            Coverage::Sample { .. } => (0..n).collect(),
        };
        let analytic = grads.param(id);
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            worst_index: 0,
            coords: coords.len(),
        };
        for &i in &coords {
            let x0 = store.get(id).data()[i];
            let h = step * x0.abs().max(1.0);
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[i] = x0 + offset;
                let v = eval(&work);
                work.get_mut(id).data_mut()[i] = x0;
                v
            };
            let d1 = at(h)? - at(-h)?;
            let numeric = match stencil {
                Stencil::Central2 => d1 / (2.0 * h),
                Stencil::Central4 => {
                    let d2 = at(2.0 * h)? - at(-2.0 * h)?;
                    (8.0 * d1 - d2) / (12.0 * h)
                }
            };
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            let abs = (a - numeric).abs();
            let rel = rel_err(a, numeric);
            check.max_abs_err = check.max_abs_err.max(abs);
            if rel > check.max_rel_err || check.max_rel_err == 0.0 && rel == 0.0 {
                check.max_rel_err = rel;
                check.worst_index = i;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
