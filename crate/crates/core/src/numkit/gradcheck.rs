//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// A deterministic scalar function of the parameters in a [`ParamStore`].
pub trait ScalarFunction {
    fn value(&mut self, params: &ParamStore) -> Result<f64>;

    /// Value and analytic gradient for every parameter.
    fn value_and_grad(&mut self, params: &ParamStore) -> Result<(f64, BTreeMap<String, Tensor>)>;
}

/// Adapts a graph-building closure into a [`ScalarFunction`]; gradients come
/// from the tape.
pub struct GraphFn<F>(pub F);

impl<F> ScalarFunction for GraphFn<F>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    fn value(&mut self, params: &ParamStore) -> Result<f64> {
        let mut g = Graph::new();
        let out = (self.0)(&mut g, params)?;
        Ok(g.value(out).item())
    }

    fn value_and_grad(&mut self, params: &ParamStore) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut g = Graph::new();
        let out = (self.0)(&mut g, params)?;
        g.backward(out)?;
        Ok((g.value(out).item(), g.param_grads()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares analytic gradients of `f` against central differences with step
/// [`FD_STEP`] for every entry of every parameter. `params` is restored
/// before returning.
pub fn grad_check<F: ScalarFunction>(f: &mut F, params: &mut ParamStore, tol: f64) -> Result<GradReport> {
    let (loss, analytic) = f.value_and_grad(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = GradReport { tol, params: Vec::new() };
    for name in names {
        let len = params.value(&name)?.len();
        let zeros = Tensor::zeros(params.value(&name)?.shape());
        let grad = analytic.get(&name).unwrap_or(&zeros);
        let mut check = ParamCheck { name: name.clone(), max_rel_error: 0.0, worst_index: 0 };
        for i in 0..len {
            let orig = params.value(&name)?.data()[i];
            params.value_mut(&name)?.data_mut()[i] = orig + FD_STEP;
            let plus = f.value(params);
            params.value_mut(&name)?.data_mut()[i] = orig - FD_STEP;
            let minus = f.value(params);
            params.value_mut(&name)?.data_mut()[i] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("loss while perturbing {name}[{i}]")));
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(grad.data()[i], numeric);
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store3() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        s
    }

    /// Sum of squares with a hand-written gradient, optionally corrupted.
    struct SumSquares {
        corrupt: bool,
    }

    impl ScalarFunction for SumSquares {
        fn value(&mut self, params: &ParamStore) -> Result<f64> {
            Ok(params.value("p")?.data().iter().map(|v| v * v).sum())
        }

        fn value_and_grad(&mut self, params: &ParamStore) -> Result<(f64, BTreeMap<String, Tensor>)> {
            let p = params.value("p")?;
            let mut g = p.map(|v| 2.0 * v);
            if self.corrupt {
                g.data_mut()[1] *= 1.1;
            }
            Ok((self.value(params)?, BTreeMap::from([("p".to_string(), g)])))
        }
    }

    #[test]
    fn sum_of_squares_matches_closed_form() {
        let mut s = store3();
        let mut f = GraphFn(|g: &mut Graph, ps: &ParamStore| {
            let p = g.param(ps, "p")?;
            let sq = g.mul(p, p)?;
            Ok(g.sum(sq))
        });
        let (_, grads) = f.value_and_grad(&s).unwrap();
        assert_eq!(grads["p"].data(), &[2.0, 4.0, 6.0]);
        let report = grad_check(&mut f, &mut s, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(s.value("p").unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn constant_function_passes() {
        let mut s = store3();
        let mut f = GraphFn(|g: &mut Graph, _: &ParamStore| Ok(g.input(Tensor::scalar(4.0))));
        let report = grad_check(&mut f, &mut s, 1e-6).unwrap();
        assert!(report.passed());
        assert_eq!(report.max_rel_error(), 0.0);
    }

    #[test]
    fn corrupted_backward_fails() {
        let mut s = store3();
        assert!(grad_check(&mut SumSquares { corrupt: false }, &mut s, 1e-6).unwrap().passed());
        let report = grad_check(&mut SumSquares { corrupt: true }, &mut s, 1e-4).unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst().unwrap().worst_index, 1);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut s = store3();
        let mut f = GraphFn(|g: &mut Graph, _: &ParamStore| Ok(g.input(Tensor::scalar(f64::NAN))));
        assert!(matches!(grad_check(&mut f, &mut s, 1e-4), Err(Error::NonFinite(_))));
    }
}
