//! Central finite-difference verification of tape gradients.

use crate::autodiff::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over all checked entries.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the largest error occurred.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Relative error with the floor used throughout the checks.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares analytic gradients of `f` against central differences for every
/// entry of every parameter.
///
/// `f` evaluates the scalar objective for a given parameter set and
/// `analytic` returns its tape gradients. Entries are perturbed one at a
/// time by `±eps`.
pub fn grad_check<F, G>(f: F, analytic: G, params: &ParamStore<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<f64>,
    G: Fn(&ParamStore<f64>) -> Result<Gradients<f64>>,
{
    grad_check_subset(f, analytic, params, eps, |_, _| true)
}

/// Like [`grad_check`] but only checks entries for which `select(name, index)`
/// holds.
pub fn grad_check_subset<F, G, S>(
    f: F,
    analytic: G,
    params: &ParamStore<f64>,
    eps: f64,
    select: S,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<f64>,
    G: Fn(&ParamStore<f64>) -> Result<Gradients<f64>>,
    S: Fn(&str, usize) -> bool,
{
    let base = f(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            context: "grad_check objective".into(),
        });
    }
    let grads = analytic(params)?;
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let ids: Vec<_> = params.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let n = params.tensor(id).numel();
        for i in 0..n {
            if !select(&name, i) {
                continue;
            }
            let orig = params.tensor(id).data()[i];
            work.tensor_mut(id).data_mut()[i] = orig + eps;
            let plus = f(&work)?;
            work.tensor_mut(id).data_mut()[i] = orig - eps;
            let minus = f(&work)?;
            work.tensor_mut(id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("grad_check objective at {name}[{i}]"),
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_error(grads.by_id(id).data()[i], numeric);
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap()).unwrap();
        s
    }

    fn sum_sq(params: &ParamStore<f64>) -> Result<(Tape<f64>, crate::autodiff::Var)> {
        let mut t = Tape::new();
        let p = t.param(params, params.id("p").unwrap());
        let sq = t.mul(p, p)?;
        let l = t.sum(sq);
        Ok((t, l))
    }

    #[test]
    fn quadratic_passes() {
        let params = store();
        let report = grad_check(
            |ps| sum_sq(ps).map(|(t, l)| t.value(l).item()),
            |ps| sum_sq(ps).and_then(|(t, l)| t.param_grads(l, ps)),
            &params,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.entries_checked, 4);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let params = store();
        let report = grad_check(
            |ps| sum_sq(ps).map(|(t, l)| t.value(l).item()),
            |ps| {
                let mut g = sum_sq(ps).and_then(|(t, l)| t.param_grads(l, ps))?;
                g.scale(0.5);
                Ok(g)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error > 0.4);
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let params = store();
        let res = grad_check(|_| Ok(f64::NAN), |ps| Ok(Gradients::zeros_like(ps)), &params, 1e-5);
        assert!(matches!(res, Err(Error::NonFinite { .. })));
    }
}
