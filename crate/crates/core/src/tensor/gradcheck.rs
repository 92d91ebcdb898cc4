//! Central-difference verification of reverse-mode gradients.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of a scalar `f` over every component of `theta`.
pub fn grad_check<F>(f: F, theta: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vars)?;
        scalar_of(&out)
    };

    let g = Graph::new();
    let vars: Vec<Var<'_>> = theta.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars)?;
    scalar_of(&out)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = theta.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(theta[ti].shape()));
        for k in 0..theta[ti].numel() {
            let orig = theta[ti].data()[k];
            work[ti].data_mut()[k] = orig + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[k] = orig - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[k], numeric));
        }
    }
    Ok(worst)
}

/// Same check over the parameters of a store; `f` builds the loss from it.
pub fn grad_check_params<F>(f: F, store: &ParamStore, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let out = f(&g, store)?;
    scalar_of(&out)?;
    let grads = g.backward(out)?;
    let mut analytic: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    for (pid, grad) in grads.iter() {
        analytic[*pid] = grad.clone();
    }

    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for pid in 0..store.len() {
        for k in 0..store.get(pid).value.numel() {
            let orig = store.get(pid).value.data()[k];
            work.value_mut(pid).data_mut()[k] = orig + h;
            let fp = {
                let g = Graph::new();
                scalar_of(&f(&g, &work)?)?
            };
            work.value_mut(pid).data_mut()[k] = orig - h;
            let fm = {
                let g = Graph::new();
                scalar_of(&f(&g, &work)?)?
            };
            work.value_mut(pid).data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(analytic[pid].data()[k], numeric));
        }
    }
    Ok(worst)
}

fn scalar_of(v: &Var<'_>) -> Result<f64> {
    let t = v.value();
    if t.numel() != 1 {
        return Err(Error::usage(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let err = grad_check(
            |_, x| Ok(x[0].mul(&x[0])?.sum()),
            &[Tensor::vector(vec![1.0, 2.0])],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_scalar_output_is_usage_error() {
        let r = grad_check(|_, x| Ok(x[0]), &[Tensor::vector(vec![1.0, 2.0])], 1e-5);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 2e-9) - 1e-6).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
