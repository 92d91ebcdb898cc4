//! Connectionist temporal classification: loss, greedy decoding and the
//! collapse rule (merge adjacent repeats, then drop blanks).
//!
//! All dynamic programming runs in log space.

use crate::error::{Error, Result};
use crate::tensor::kernels::log_add;
use crate::tensor::{Tensor, Var};
use crate::vocab::TokenId;

/// Raw per-position distribution plus its greedy reading.
#[derive(Clone, Debug)]
pub struct CtcOutput {
    pub logits: Tensor,
    pub raw_tokens: Vec<TokenId>,
    pub collapsed: Vec<TokenId>,
}

#[derive(Clone, Debug)]
pub struct CtcLossResult {
    /// `-log p(target | log_probs)`
    pub nll: f64,
    /// `d nll / d log_probs`, shape `l×V`.
    pub per_position_grad: Tensor,
}

/// Merges adjacent duplicates, then removes blanks.
pub fn collapse(raw: &[TokenId], blank: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(raw.len());
    let mut prev = None;
    for &t in raw {
        if Some(t) != prev && t != blank {
            out.push(t);
        }
        prev = Some(t);
    }
    out
}

/// Shortest raw sequence that collapses to `target`: one slot per token plus
/// a separating blank for every adjacent repeat.
pub fn required_min_length(target: &[TokenId]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Per-position argmax (lowest id on ties) followed by [`collapse`].
pub fn greedy_decode(logits: &Tensor, blank: TokenId) -> Result<CtcOutput> {
    if logits.ndim() != 2 || logits.rows() == 0 {
        return Err(Error::usage(format!(
            "greedy_decode needs l×V logits with l ≥ 1, got {:?}",
            logits.shape()
        )));
    }
    let raw_tokens = logits.argmax_rows();
    let collapsed = collapse(&raw_tokens, blank);
    Ok(CtcOutput {
        logits: logits.clone(),
        raw_tokens,
        collapsed,
    })
}

fn validate(log_probs: &Tensor, target: &[TokenId], blank: TokenId) -> Result<()> {
    if log_probs.ndim() != 2 {
        return Err(Error::dim("ctc_loss", log_probs.shape(), &[]));
    }
    let v = log_probs.cols();
    if blank >= v {
        return Err(Error::usage(format!("blank id {blank} outside vocabulary of {v}")));
    }
    if let Some(pos) = target.iter().position(|&t| t == blank) {
        return Err(Error::usage(format!("CTC target contains blank at position {pos}")));
    }
    if let Some(&t) = target.iter().find(|&&t| t >= v) {
        return Err(Error::usage(format!("CTC target id {t} outside vocabulary of {v}")));
    }
    let required = required_min_length(target);
    if log_probs.rows() < required {
        return Err(Error::Infeasible {
            required,
            available: log_probs.rows(),
        });
    }
    Ok(())
}

/// Negative log-likelihood of `target` summed over all alignments, with its
/// exact gradient with respect to `log_probs`.
///
/// `log_probs` are usually log-softmax outputs but need not be normalized;
/// the gradient is exact either way.
pub fn ctc_loss(log_probs: &Tensor, target: &[TokenId], blank: TokenId) -> Result<CtcLossResult> {
    validate(log_probs, target, blank)?;
    let (l, v) = (log_probs.rows(), log_probs.cols());
    let ext: Vec<TokenId> = std::iter::once(blank)
        .chain(target.iter().flat_map(|&t| [t, blank]))
        .collect();
    let s_len = ext.len();
    let lp = |t: usize, s: usize| log_probs.data()[t * v + ext[s]];
    // Skip transition s-2 → s allowed only onto a label differing from the previous label.
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; l * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..l {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = if a == neg { neg } else { a + lp(t, s) };
        }
    }

    let mut beta = vec![neg; l * s_len];
    let last = (l - 1) * s_len;
    beta[last + s_len - 1] = lp(l - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(l - 1, s_len - 2);
    }
    for t in (0..l - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            cur[s] = if b == neg { neg } else { b + lp(t, s) };
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::NonFinite { op: "ctc_loss" });
    }

    let mut grad = Tensor::zeros(&[l, v]);
    let gd = grad.data_mut();
    for t in 0..l {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s];
            if occ == neg {
                continue;
            }
            gd[t * v + ext[s]] -= (occ - lp(t, s) - log_p).exp();
        }
    }
    Ok(CtcLossResult {
        nll: -log_p,
        per_position_grad: grad,
    })
}

/// [`ctc_loss`] as a differentiable graph node over `log_probs`.
pub fn ctc_loss_var<'g>(log_probs: Var<'g>, target: &[TokenId], blank: TokenId) -> Result<Var<'g>> {
    let r = ctc_loss(&log_probs.value(), target, blank)?;
    log_probs
        .graph()
        .scalar_fn(&[log_probs], r.nll, vec![r.per_position_grad], "ctc_loss")
}
