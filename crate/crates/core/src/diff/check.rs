use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{LsrError, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Max over checked coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose `±step` evaluations took different relu/max-pool branches.
    pub skipped: usize,
}

/// Central-difference gradient check of a scalar function of `leaves`.
///
/// `f` must rebuild the same expression on whatever graph it is handed. A
/// coordinate is skipped when the two perturbed evaluations disagree on the
/// branch fingerprint, i.e. the difference quotient straddles a kink.
pub fn grad_check<F>(f: F, leaves: &[Tensor], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(LsrError::config("step", "must be a positive finite number"));
    }
    let eval = |values: &[Tensor]| -> Result<(f64, u64)> {
        let mut g = Graph::with_branch_tracking();
        let vars = values.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok((g.value(out).item()?, g.branch_fingerprint().unwrap_or(0)))
    };

    let mut g = Graph::with_branch_tracking();
    let vars = leaves.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let first = g.value(out).item()?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|t| t.data().to_vec()).unwrap_or_default())
        .collect();

    let (second, _) = eval(leaves)?;
    if first.to_bits() != second.to_bits() {
        return Err(LsrError::NonDeterministic { first, second });
    }

    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = leaves.to_vec();
    for (li, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let orig = leaves[li].data()[k];
            probe[li].data_mut()[k] = orig + step;
            let (plus, fp_plus) = eval(&probe)?;
            probe[li].data_mut()[k] = orig - step;
            let (minus, fp_minus) = eval(&probe)?;
            probe[li].data_mut()[k] = orig;
            if fp_plus != fp_minus {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_two() {
        let r = grad_check(|g, v| g.square(v[0]), &[Tensor::scalar(2.0)], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn relu_kink_is_skipped() {
        let r = grad_check(|g, v| g.relu(v[0]), &[Tensor::scalar(0.0)], 1e-5).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 0);
    }

    #[test]
    fn nondeterminism_is_detected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let res = grad_check(
            |g, v| {
                calls.set(calls.get() + 1.0);
                let a = g.affine(v[0], 1.0, calls.get())?;
                Ok(a)
            },
            &[Tensor::scalar(1.0)],
            1e-5,
        );
        assert!(matches!(res, Err(LsrError::NonDeterministic { .. })));
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(grad_check(|g, v| g.square(v[0]), &[Tensor::scalar(1.0)], 0.0).is_err());
    }
}
