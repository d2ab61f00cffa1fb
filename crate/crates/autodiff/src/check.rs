//! Central-difference gradient checking.

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Floor on the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn validate_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps <= 1e-2 {
        Ok(())
    } else {
        Err(AutodiffError::InvalidArgument(format!(
            "finite-difference step {eps} outside (0, 1e-2]"
        )))
    }
}

fn scalar_of(g: &Graph<'_>, v: Var) -> Result<f64> {
    g.value(v)
        .item()
        .ok_or(AutodiffError::NotScalar(g.shape(v)))
}

/// Largest relative error between the reverse-mode gradient of `f` at `x`
/// and central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    validate_eps(eps)?;
    let mut g = Graph::new();
    let input = g.input(x.clone())?;
    let out = f(&mut g, input)?;
    let analytic = match g.backward(out) {
        Ok(grads) => grads
            .input(input)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols())),
        Err(AutodiffError::DisconnectedGraph) => Tensor::zeros(x.rows(), x.cols()),
        Err(e) => return Err(e),
    };

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(t)?;
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Per-parameter outcome of [`grad_check_params`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub scalars: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

/// Checks the gradient of `loss` with respect to every parameter in `store`.
///
/// `loss` builds a scalar on a fresh graph bound to the store. Parameter
/// values are perturbed in place and restored afterwards.
pub fn grad_check_params<F>(store: &mut ParamStore, loss: F, eps: f64) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    validate_eps(eps)?;
    let grads = {
        let mut g = Graph::with_params(store);
        let out = loss(&mut g)?;
        g.backward(out)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let out = loss(&mut g)?;
        scalar_of(&g, out)
    };

    let ids: Vec<ParamId> = store.ids().collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).len();
        let analytic = grads
            .param(id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let up = eval(store);
            store.value_mut(id).data_mut()[i] = orig - eps;
            let down = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up? - down?) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        report.push(ParamCheck {
            name: store.name(id).to_string(),
            scalars: n,
            max_rel_error: worst,
            max_abs_grad: analytic.iter().fold(0.0, |m, v| m.max(v.abs())),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::row(vec![0.3, -1.2, 2.0]);
        let err = grad_check(
            |g, _x| g.constant(Tensor::scalar(4.0)),
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|g, x| g.sum(x), &x, 0.0).is_err());
        assert!(grad_check(|g, x| g.sum(x), &x, 0.1).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
