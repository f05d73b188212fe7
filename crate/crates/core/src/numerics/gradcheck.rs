use serde::Serialize;

use super::Matrix;
use crate::error::{Error, Result};

/// A trainable value with its gradient buffer.
#[derive(Clone, Debug)]
pub struct DifferentiableParam {
    pub value: Matrix,
    pub grad: Matrix,
    pub requires_grad: bool,
}

impl DifferentiableParam {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        DifferentiableParam {
            value,
            grad,
            requires_grad: true,
        }
    }

    pub fn frozen(value: Matrix) -> Self {
        DifferentiableParam {
            requires_grad: false,
            ..DifferentiableParam::new(value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares `param.grad` (filled by the caller) against central differences
/// of `loss_fn` for every entry of every parameter with `requires_grad`.
///
/// Parameter values are restored after each probe.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &mut [DifferentiableParam],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[DifferentiableParam]) -> Result<f64>,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::Config(format!(
            "finite-difference step {} outside [1e-6, 1e-3]",
            step
        )));
    }
    let mut entries = Vec::new();
    let mut max_rel_error: f64 = 0.0;
    for p in 0..params.len() {
        if !params[p].requires_grad {
            continue;
        }
        for k in 0..params[p].value.len() {
            let original = params[p].value.data()[k];
            params[p].value.data_mut()[k] = original + step;
            let up = loss_fn(params)?;
            params[p].value.data_mut()[k] = original - step;
            let down = loss_fn(params)?;
            params[p].value.data_mut()[k] = original;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss while probing parameter {} entry {}",
                    p, k
                )));
            }
            let numeric = (up - down) / (2.0 * step);
            let analytic = params[p].grad.data()[k];
            let rel_error = relative_error(analytic, numeric);
            max_rel_error = max_rel_error.max(rel_error);
            entries.push(GradCheckEntry {
                param: p,
                index: k,
                analytic,
                numeric,
                rel_error,
            });
        }
    }
    Ok(GradCheckReport {
        entries,
        max_rel_error,
        tolerance: tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn sum_of_squares_is_exact() {
        let mut rng = Rng::new(4);
        let mut params = vec![
            DifferentiableParam::new(rng.normal_matrix(3, 2, 1.0)),
            DifferentiableParam::new(rng.normal_matrix(1, 4, 2.0)),
        ];
        for p in &mut params {
            p.grad = p.value.scale(2.0);
        }
        let loss = |ps: &[DifferentiableParam]| {
            Ok(ps
                .iter()
                .flat_map(|p| p.value.data())
                .map(|v| v * v)
                .sum())
        };
        let report = finite_diff_check(loss, &mut params, 1e-4, 1e-8).unwrap();
        assert!(report.passed(), "max rel {}", report.max_rel_error);
        assert_eq!(report.entries.len(), 10);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut params = vec![DifferentiableParam::new(Matrix::filled(2, 2, 0.5))];
        let report = finite_diff_check(|_| Ok(3.0), &mut params, 1e-5, 1e-12).unwrap();
        for e in &report.entries {
            assert_eq!(e.analytic, 0.0);
            assert_eq!(e.numeric, 0.0);
        }
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut params = vec![DifferentiableParam::new(Matrix::zeros(1, 1))];
        let r = finite_diff_check(|_| Ok(f64::NAN), &mut params, 1e-5, 1e-4);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn step_outside_range_rejected() {
        let mut params = vec![DifferentiableParam::new(Matrix::zeros(1, 1))];
        assert!(finite_diff_check(|_| Ok(0.0), &mut params, 1e-2, 1e-4).is_err());
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut params = vec![DifferentiableParam::frozen(Matrix::zeros(2, 2))];
        let report = finite_diff_check(|_| Ok(0.0), &mut params, 1e-5, 1e-4).unwrap();
        assert!(report.entries.is_empty());
    }
}
