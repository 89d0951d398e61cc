//! Central finite-difference verification of reverse-mode gradients.

use serde::Serialize;

use super::{Graph, ParamSet, Var};
use crate::error::{Error, Result};

/// Floor applied to the relative-error denominator.
pub const ABS_FLOOR: f64 = 1e-8;

/// Worst entry of one parameter tensor.
#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub id: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub rel_tolerance: f64,
    pub loss: f64,
    pub params: Vec<ParamCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// Max relative error per group, where `group_of` maps a parameter id to
    /// its group name. Groups keep first-seen order.
    pub fn by_group(&self, group_of: impl Fn(&str) -> String) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for p in &self.params {
            let g = group_of(&p.id);
            match out.iter_mut().find(|(name, _)| *name == g) {
                Some((_, e)) => *e = e.max(p.max_rel_error),
                None => out.push((g, p.max_rel_error)),
            }
        }
        out
    }
}

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares the reverse-mode gradient of `loss_fn` against the central
/// difference `(f(p+h) - f(p-h)) / 2h` for every trainable scalar entry.
///
/// `loss_fn` builds a fresh graph from the given parameters and returns it
/// together with its scalar output.
pub fn finite_difference_check<F>(
    loss_fn: F,
    params: &ParamSet,
    step: f64,
    rel_tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(Graph, Var)>,
{
    if !(step > 0.0) {
        return Err(Error::Usage(format!("finite_difference_check: step must be positive, got {step}")));
    }
    let eval = |p: &ParamSet| -> Result<f64> {
        let (g, out) = loss_fn(p)?;
        Ok(g.value(out).item())
    };

    let (graph, out) = loss_fn(params)?;
    let loss = graph.value(out).item();
    let grads = graph.gradients(out, params)?;
    drop(graph);
    let again = eval(params)?;
    if loss.to_bits() != again.to_bits() {
        return Err(Error::Usage(format!(
            "finite_difference_check: loss function is not deterministic ({loss} vs {again})"
        )));
    }

    let mut work = params.clone();
    let mut checks = Vec::new();
    let ids: Vec<String> = params.trainable().map(|p| p.id.clone()).collect();
    for id in ids {
        let analytic = grads.get(&id).expect("gradient for every trainable parameter").data().to_vec();
        let mut check = ParamCheck {
            id: id.clone(),
            entries: analytic.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: analytic.first().copied().unwrap_or(0.0),
            numeric: f64::NAN,
        };
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work.tensor(&id)?.data()[i];
            work.tensor_mut(&id)?.data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work.tensor_mut(&id)?.data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work.tensor_mut(&id)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || check.numeric.is_nan() {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        checks.push(check);
    }
    let passed = checks.iter().all(|c| c.max_rel_error <= rel_tolerance);
    Ok(GradCheckReport {
        step,
        rel_tolerance,
        loss,
        params: checks,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;
    use std::cell::Cell;

    #[test]
    fn sum_of_squares_passes() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::vector([1.0, 2.0]), true).unwrap();
        let report = finite_difference_check(
            |p| {
                let mut g = Graph::new();
                let w = g.param(p, "w")?;
                let sq = g.mul(w, w)?;
                let s = g.sum(sq)?;
                Ok((g, s))
            },
            &ps,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_error() < 1e-8);
    }

    #[test]
    fn constant_loss_passes_with_zero_gradients() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::vector([1.0, -3.0]), true).unwrap();
        let report = finite_difference_check(
            |p| {
                let mut g = Graph::new();
                let _ = g.param(p, "w")?;
                let c = g.scalar(4.2);
                Ok((g, c))
            },
            &ps,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.params[0].analytic, 0.0);
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::scalar(1.0), true).unwrap();
        let calls = Cell::new(0.0);
        let res = finite_difference_check(
            |p| {
                calls.set(calls.get() + 1.0);
                let mut g = Graph::new();
                let w = g.param(p, "w")?;
                let c = g.scale(w, calls.get())?;
                Ok((g, c))
            },
            &ps,
            1e-4,
            1e-4,
        );
        assert!(matches!(res, Err(Error::Usage(_))));
    }

    #[test]
    fn bad_step_is_rejected() {
        let ps = ParamSet::new();
        let res = finite_difference_check(|_| Ok((Graph::new(), Graph::new().scalar(0.0))), &ps, 0.0, 1e-4);
        assert!(matches!(res, Err(Error::Usage(_))));
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::vector([1.0, 2.0]), true).unwrap();
        let report = finite_difference_check(
            |p| {
                let mut g = Graph::new();
                g.inject_gradient_fault("w", 1.5);
                let w = g.param(p, "w")?;
                let sq = g.mul(w, w)?;
                let s = g.sum(sq)?;
                Ok((g, s))
            },
            &ps,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst().unwrap().id, "w");
    }
}
