use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of `f` at `point` against central
/// differences with step `step`.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / (|analytic| + 1e-8)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>,
{
    if !(step > 0.0) {
        return Err(Error::contract(
            "finite_diff_check",
            format!("step {step} must be > 0"),
        ));
    }
    let analytic = {
        let g = Graph::new();
        let x = g.leaf(point.clone());
        let y = f(&g, x);
        g.gradient(y, &[x], false)?[0].value()
    };
    let eval_at = |p: Tensor| -> Result<f64> {
        let g = Graph::new();
        let x = g.leaf(p);
        let y = f(&g, x);
        g.check()?;
        Ok(y.item())
    };
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval_at(plus)? - eval_at(minus)?) / (2.0 * step);
        if !numeric.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_check".into(),
            });
        }
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let err = finite_diff_check(|_, x| (x * x).sum(), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        assert!(finite_diff_check(|_, x| x.sum(), &Tensor::scalar(1.0), 0.0).is_err());
    }

    #[test]
    fn reports_non_finite_neighbourhood() {
        let err = finite_diff_check(|_, x| x.ln().sum(), &Tensor::scalar(0.0), 1e-5);
        assert!(err.is_err());
    }
}
