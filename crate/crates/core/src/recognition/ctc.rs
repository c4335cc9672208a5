use crate::error::{contract, Error, Result};
use crate::frontends::ModalitySequence;
use crate::nn::{Ctx, Init, Linear};
use crate::tensor::{Tape, Tensor, Var};

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Frames needed to emit `target`: one per label plus a blank between
/// each adjacent repeat.
pub fn ctc_required_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn validate(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<(usize, usize)> {
    let s = log_probs.shape();
    if s.len() != 2 || s[0] == 0 {
        return contract(format!("CTC expects a non-empty T×V matrix, got {s:?}"));
    }
    let (t, v) = (s[0], s[1]);
    if blank >= v {
        return contract(format!("blank id {blank} outside vocabulary of {v}"));
    }
    if let Some(&bad) = target.iter().find(|&&y| y >= v || y == blank) {
        return contract(format!(
            "target label {bad} is blank or outside vocabulary of {v}"
        ));
    }
    let required = ctc_required_frames(target);
    if t < required {
        return Err(Error::InfeasibleTarget {
            target_len: target.len(),
            required,
            frames: t,
        });
    }
    Ok((t, v))
}

/// Negative log-likelihood of `target` under per-frame log-probabilities,
/// and its gradient with respect to those log-probabilities.
pub fn ctc_nll_and_grad(
    log_probs: &Tensor,
    target: &[usize],
    blank: usize,
) -> Result<(f64, Tensor)> {
    let (t_len, v) = validate(log_probs, target, blank)?;
    let lp = |t: usize, k: usize| log_probs.data()[t * v + k];
    // Extended label sequence with blanks around every label.
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.iter().flat_map(|&y| [y, blank]))
        .collect();
    let s_len = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, ext[s]) };
        }
    }
    let last = (t_len - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if log_p == ninf {
        return Err(Error::InfeasibleTarget {
            target_len: target.len(),
            required: ctc_required_frames(target),
            frames: t_len,
        });
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = lp(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp(t, ext[s]) };
        }
    }

    let mut grad = Tensor::zeros(&[t_len, v]);
    for t in 0..t_len {
        for (s, &k) in ext.iter().enumerate() {
            let i = t * s_len + s;
            let occ = alpha[i] + beta[i] - lp(t, k) - log_p;
            if occ > ninf {
                grad.data_mut()[t * v + k] -= occ.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// CTC loss on the tape. `log_probs` rows must be log-softmax normalised.
pub fn ctc_loss(tape: &mut Tape, log_probs: Var, target: &[usize], blank: usize) -> Result<Var> {
    let (nll, grad) = ctc_nll_and_grad(tape.value(log_probs), target, blank)?;
    tape.fixed_grad(log_probs, nll, grad)
}

/// Reference CTC negative log-likelihood by enumerating all `V^T` paths.
pub fn ctc_bruteforce(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<f64> {
    let s = log_probs.shape();
    if s.len() != 2 || s[0] == 0 {
        return contract(format!("CTC expects a non-empty T×V matrix, got {s:?}"));
    }
    let (t_len, v) = (s[0], s[1]);
    let paths = (v as f64).powi(t_len as i32);
    if paths > 1e6 {
        return contract(format!("{v}^{t_len} paths is too many to enumerate"));
    }
    let mut path = vec![0usize; t_len];
    let mut total = 0.0;
    let mut collapsed = Vec::with_capacity(t_len);
    loop {
        collapsed.clear();
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k != blank {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == target {
            let lp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &k)| log_probs.data()[t * v + k])
                .sum();
            total += lp.exp();
        }
        // Odometer increment.
        let mut i = 0;
        loop {
            if i == t_len {
                return if total > 0.0 {
                    Ok(-total.ln())
                } else {
                    Err(Error::InfeasibleTarget {
                        target_len: target.len(),
                        required: ctc_required_frames(target),
                        frames: t_len,
                    })
                };
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// One projection to vocabulary log-probabilities, applied to both
/// modalities.
#[derive(Clone, Debug)]
pub struct CtcProjection {
    pub linear: Linear,
}

impl CtcProjection {
    pub fn new(init: &mut Init, d_model: usize, vocab: usize) -> Self {
        Self {
            linear: Linear::new(init, d_model, vocab, true),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, f: &ModalitySequence) -> Result<Var> {
        let logits = self.linear.forward(cx, f.tokens)?;
        cx.tape.log_softmax(logits)
    }
}
