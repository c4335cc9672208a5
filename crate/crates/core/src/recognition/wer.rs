use crate::error::{contract, Result};

/// Edit operations of a minimal alignment from reference to hypothesis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn distance(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Levenshtein alignment; among minimal alignments, prefers substitutions.
pub fn edit_counts<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = sub.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut c = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hyp[j - 1]);
            if here == d[(i - 1) * w + j - 1] + diff {
                c.substitutions += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

/// Word error rate of `hyp` against a non-empty `reference`.
pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return contract("WER needs a non-empty reference");
    }
    Ok(edit_counts(reference, hyp).distance() as f64 / reference.len() as f64)
}

/// [`wer`] on whitespace-separated words.
pub fn wer_str(reference: &str, hyp: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hyp.split_whitespace().collect();
    wer(&r, &h)
}
