use std::cmp::Ordering;

use super::decoder::TransformerDecoder;
use super::vocab::{BLANK, EOS};
use crate::error::{contract, Result};
use crate::nn::Ctx;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// A decoded token sequence (without the start token, ending in eos once
/// finalised) and its total log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
}

impl Hypothesis {
    /// Log-probability per emitted token, eos included.
    pub fn normalized_score(&self) -> f64 {
        self.score / self.tokens.len().max(1) as f64
    }

    /// Tokens with the trailing eos removed.
    pub fn text_tokens(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

/// Adds an external score (for instance a language model) to each finished
/// hypothesis before the final choice.
pub trait Rescorer {
    fn bonus(&self, _hyp: &Hypothesis) -> f64 {
        0.0
    }
}

/// Leaves beam scores untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoRescoring;

impl Rescorer for NoRescoring {}

/// Higher score first; equal scores fall back to ascending token ids.
fn rank(a: &Hypothesis, b: &Hypothesis, key: impl Fn(&Hypothesis) -> f64) -> Ordering {
    key(b)
        .total_cmp(&key(a))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Incremental scorer: one tape, parameters and memory bound once.
struct Scorer<'a> {
    tape: Tape,
    params: crate::tensor::ParamVars,
    memory: Var,
    dec: &'a TransformerDecoder,
}

impl<'a> Scorer<'a> {
    fn new(store: &ParamStore, dec: &'a TransformerDecoder, memory: &Tensor) -> Self {
        let mut tape = Tape::new();
        let params = store.bind_frozen(&mut tape);
        let memory = tape.constant(memory.clone());
        Self {
            tape,
            params,
            memory,
            dec,
        }
    }

    /// Log-probabilities of the token following `tokens`.
    fn next(&mut self, tokens: &[usize]) -> Result<Vec<f64>> {
        let prefix: Vec<usize> = std::iter::once(EOS).chain(tokens.iter().copied()).collect();
        let mark = self.tape.len();
        let lp = {
            let mut cx = Ctx::new(&mut self.tape, &self.params);
            self.dec.forward(&mut cx, &prefix, self.memory)?
        };
        let row = self.tape.value(lp).row(prefix.len() - 1).to_vec();
        self.tape.truncate(mark);
        Ok(row)
    }
}

/// Candidate next tokens: everything but blank, or only eos once the
/// hypothesis has reached `max_len` tokens including the closing eos.
fn allowed(len: usize, max_len: usize, vocab: usize) -> Vec<usize> {
    if len + 1 >= max_len {
        vec![EOS]
    } else {
        (0..vocab).filter(|&k| k != BLANK).collect()
    }
}

/// Greedy argmax decoding; ties go to the lower id.
pub fn greedy_decode(
    store: &ParamStore,
    dec: &TransformerDecoder,
    memory: &Tensor,
    max_len: usize,
) -> Result<Hypothesis> {
    if max_len == 0 {
        return contract("max_len must be at least 1");
    }
    let mut scorer = Scorer::new(store, dec, memory);
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
    };
    loop {
        let lp = scorer.next(&hyp.tokens)?;
        let mut best = None::<(usize, f64)>;
        for k in allowed(hyp.tokens.len(), max_len, dec.vocab) {
            if best.is_none_or(|(_, s)| lp[k] > s) {
                best = Some((k, lp[k]));
            }
        }
        let (k, s) = best.expect("eos is always allowed");
        hyp.tokens.push(k);
        hyp.score += s;
        if k == EOS {
            return Ok(hyp);
        }
    }
}

/// Left-to-right beam search. Each step keeps the `width` best expansions
/// by total log-probability; expansions ending in eos leave the beam. The
/// result is the finished hypothesis with the best length-normalised score.
pub fn beam_search(
    store: &ParamStore,
    dec: &TransformerDecoder,
    memory: &Tensor,
    width: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    beam_search_rescored(store, dec, memory, width, max_len, &NoRescoring)
}

/// [`beam_search`] with the final choice by normalised score plus
/// `rescorer`'s bonus.
pub fn beam_search_rescored(
    store: &ParamStore,
    dec: &TransformerDecoder,
    memory: &Tensor,
    width: usize,
    max_len: usize,
    rescorer: &dyn Rescorer,
) -> Result<Hypothesis> {
    if width == 0 || max_len == 0 {
        return contract(format!(
            "beam width ({width}) and max_len ({max_len}) must be positive"
        ));
    }
    let mut scorer = Scorer::new(store, dec, memory);
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut finished = Vec::new();
    while !live.is_empty() {
        let mut candidates = Vec::new();
        for h in &live {
            let lp = scorer.next(&h.tokens)?;
            for k in allowed(h.tokens.len(), max_len, dec.vocab) {
                let mut tokens = h.tokens.clone();
                tokens.push(k);
                candidates.push(Hypothesis {
                    tokens,
                    score: h.score + lp[k],
                });
            }
        }
        candidates.sort_by(|a, b| rank(a, b, |h| h.score));
        candidates.truncate(width);
        live.clear();
        for c in candidates {
            if c.tokens.last() == Some(&EOS) {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
    }
    finished.sort_by(|a, b| rank(a, b, |h| h.normalized_score() + rescorer.bonus(h)));
    Ok(finished.swap_remove(0))
}
