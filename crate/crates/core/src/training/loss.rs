//! Label-smoothed losses as graph nodes with exact local gradients.

use crate::ctc::{ctc_loss, ctc_loss_var};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};
use crate::vocab::TokenId;

fn check_rows(lp: &Tensor, n: usize, op: &'static str) -> Result<()> {
    if lp.ndim() != 2 || lp.rows() != n {
        return Err(Error::dim(op, lp.shape(), &[n]));
    }
    if lp.cols() == 0 {
        return Err(Error::usage(format!("{op}: empty distribution")));
    }
    Ok(())
}

/// `Σ_t −lp[t, y_t]` over rows of log-probabilities.
pub fn nll<'g>(log_probs: Var<'g>, targets: &[TokenId]) -> Result<Var<'g>> {
    let lp = log_probs.value();
    check_rows(&lp, targets.len(), "nll")?;
    let v = lp.cols();
    let mut value = 0.0;
    let mut grad = Tensor::zeros(lp.shape());
    for (t, &y) in targets.iter().enumerate() {
        if y >= v {
            return Err(Error::usage(format!("nll: target {y} outside {v} classes")));
        }
        value -= lp.get(t, y);
        grad.data_mut()[t * v + y] = -1.0;
    }
    log_probs.graph().scalar_fn(&[log_probs], value, vec![grad], "nll")
}

/// Label-smoothed cross-entropy summed over rows:
/// `Σ_t (1−ε)(−lp[t, y_t]) + ε(−mean_v lp[t, v])`. At `ε = 0` this is [`nll`].
pub fn smoothed_nll<'g>(log_probs: Var<'g>, targets: &[TokenId], eps: f64) -> Result<Var<'g>> {
    if eps == 0.0 {
        return nll(log_probs, targets);
    }
    let lp = log_probs.value();
    check_rows(&lp, targets.len(), "smoothed_nll")?;
    let v = lp.cols();
    let spread = eps / v as f64;
    let mut value = 0.0;
    let mut grad = Tensor::full(lp.shape(), -spread);
    for (t, &y) in targets.iter().enumerate() {
        if y >= v {
            return Err(Error::usage(format!("smoothed_nll: target {y} outside {v} classes")));
        }
        let row = lp.row(t);
        value += (1.0 - eps) * -row[y] - spread * row.iter().sum::<f64>();
        grad.data_mut()[t * v + y] -= 1.0 - eps;
    }
    log_probs.graph().scalar_fn(&[log_probs], value, vec![grad], "smoothed_nll")
}

/// `(1−ε)·CTC(lp, target) + ε·mean_t KL(uniform ‖ p_t)`.
///
/// The smoothing term pulls every position's distribution toward uniform
/// rather than smoothing inside the alignment sum. At `ε = 0` this is the plain
/// CTC loss.
pub fn smoothed_ctc<'g>(log_probs: Var<'g>, target: &[TokenId], blank: TokenId, eps: f64) -> Result<Var<'g>> {
    if eps == 0.0 {
        return ctc_loss_var(log_probs, target, blank);
    }
    let lp = log_probs.value();
    let r = ctc_loss(&lp, target, blank)?;
    let (l, v) = (lp.rows(), lp.cols());
    let kl_mean = lp
        .data()
        .chunks_exact(v)
        .map(|row| -(v as f64).ln() - row.iter().sum::<f64>() / v as f64)
        .sum::<f64>()
        / l as f64;
    let value = (1.0 - eps) * r.nll + eps * kl_mean;
    let spread = eps / (l * v) as f64;
    let grad: Vec<f64> = r.per_position_grad.data().iter().map(|g| (1.0 - eps) * g - spread).collect();
    let grad = Tensor::new(lp.shape().to_vec(), grad)?;
    log_probs.graph().scalar_fn(&[log_probs], value, vec![grad], "smoothed_ctc")
}

/// `label + λ·length`
pub fn joint_loss(label: f64, length: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        label
    } else {
        label + lambda * length
    }
}
