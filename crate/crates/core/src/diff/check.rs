use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Differences at or below this are treated as agreement.
pub const ABS_FLOOR: f64 = 1e-8;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_component: usize,
}

/// Relative disagreement of two derivative estimates, zero when the
/// absolute gap is within [`ABS_FLOOR`].
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Compares `tape.grad` of `f` at `point` with central finite differences
/// of step `step`, component by component. `f` receives the input as a
/// leaf on a fresh tape and must return a single-element value.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    grad_check_report(f, point, step).map(|r| r.max_rel_error)
}

pub fn grad_check_report<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    check(f, point, step, false)
}

/// Like [`grad_check`], but the numeric side is the Richardson combination
/// `(4 D(h/2) - D(h)) / 3` of two central differences, which is accurate
/// to `O(h⁴)`. Useful where no single step balances truncation against
/// rounding, such as near-saturated softmaxes.
pub fn grad_check_extrapolated<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    check(f, point, step, true)
}

fn check<F>(f: F, point: &Tensor, step: f64, extrapolate: bool) -> Result<GradCheck>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    if step <= 0.0 {
        return Err(Error::Contract("grad_check step must be positive".into()));
    }
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(point.clone());
        let y = f(x)?;
        probe_value(y.item(), None)?;
        tape.grad(y, &[x])?.get(0).eval()
    };
    let eval_at = |p: Tensor, k: usize| -> Result<f64> {
        let tape = Tape::new();
        let y = f(tape.leaf(p))?;
        probe_value(y.item(), Some(k))
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_component: 0,
    };
    let central = |k: usize, h: f64| -> Result<f64> {
        let mut plus = point.clone();
        plus.data_mut()[k] += h;
        let mut minus = point.clone();
        minus.data_mut()[k] -= h;
        Ok((eval_at(plus, k)? - eval_at(minus, k)?) / (2.0 * h))
    };
    for k in 0..point.numel() {
        let numeric = if extrapolate {
            (4.0 * central(k, step / 2.0)? - central(k, step)?) / 3.0
        } else {
            central(k, step)?
        };
        let e = rel_error(analytic.data()[k], numeric);
        if e > report.max_rel_error {
            report = GradCheck {
                max_rel_error: e,
                worst_component: k,
            };
        }
    }
    Ok(report)
}

fn probe_value(v: f64, component: Option<usize>) -> Result<f64> {
    if v.is_finite() {
        return Ok(v);
    }
    Err(Error::Numeric(match component {
        Some(k) => format!("non-finite function value while probing component {k}"),
        None => "non-finite function value at the base point".into(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let p = Tensor::vector(vec![0.3, -1.7, 2.5, 0.0]);
        let e = grad_check(|x| x.square()?.sum(), &p, 1e-5).unwrap();
        assert!(e <= 1e-9, "{e}");
    }

    #[test]
    fn non_finite_probe_names_component() {
        // exp(800 * x1) sits just below f64 overflow; stepping x1 up overflows.
        let p = Tensor::vector(vec![1.0, 709.775 / 800.0]);
        fn f(x: Var<'_>) -> Result<Var<'_>> {
            let a = x.slice(0, 0, 1)?;
            let b = x.slice(0, 1, 1)?.scale(800.0)?.exp()?;
            a.add(b)?.sum()
        }
        let err = grad_check(f, &p, 1e-5).unwrap_err();
        assert!(err.to_string().contains("component 1"), "{err}");
    }

    #[test]
    fn extrapolation_beats_plain_step_on_quartic() {
        // Central differences of x⁵ at x = 1 are off by 10h²; the
        // extrapolated combination cancels that term.
        fn f(x: Var<'_>) -> Result<Var<'_>> {
            x.square()?.square()?.mul(x)?.sum()
        }
        let p = Tensor::vector(vec![1.0]);
        let plain = grad_check(f, &p, 1e-2).unwrap();
        let rich = grad_check_extrapolated(f, &p, 1e-2).unwrap().max_rel_error;
        assert!(plain > 1e-4, "{plain}");
        assert!(rich < 1e-6, "{rich}");
    }

    #[test]
    fn nonpositive_step_rejected() {
        let p = Tensor::scalar(1.0);
        assert!(grad_check(|x| x.square(), &p, 0.0).is_err());
    }
}
