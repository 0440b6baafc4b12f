use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

pub const ROUGE_BETA: f64 = 1.2;

/// Column headers, in order.
pub const NLG_COLUMNS: [&str; 6] = ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE-L"];

/// BLEU-1..4, exact-match METEOR and ROUGE-L. METEOR here has no stemming or
/// synonym stages; it is reported under the name `meteor_exact`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NlgScore {
    pub bleu: [f64; 4],
    pub meteor_exact: f64,
    pub rouge_l: f64,
}

impl NlgScore {
    /// Values in [`NLG_COLUMNS`] order.
    pub fn as_row(&self) -> [f64; 6] {
        [
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3],
            self.meteor_exact,
            self.rouge_l,
        ]
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU-1..4 against a single reference: clipped n-gram precision,
/// geometric mean up to each order, brevity penalty `exp(1 - r/c)` when the
/// candidate is shorter. No smoothing: a zero precision at any order up to
/// `n` makes BLEU-`n` zero.
pub fn bleu_n<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> [f64; 4] {
    let mut out = [0.0; 4];
    if candidate.is_empty() || reference.is_empty() {
        return out;
    }
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        if total == 0 {
            break;
        }
        let refs = ngram_counts(reference, n);
        let clipped: usize = cand
            .iter()
            .map(|(g, &k)| k.min(refs.get(g).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            break;
        }
        log_sum += (clipped as f64 / total as f64).ln();
        out[n - 1] = bp * (log_sum / n as f64).exp();
    }
    out
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with the default recall weight.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    rouge_l_beta(candidate, reference, ROUGE_BETA)
}

/// `F = (1 + β²)PR / (R + β²P)` over the longest common subsequence.
pub fn rouge_l_beta<T: Eq>(candidate: &[T], reference: &[T], beta: f64) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Exact-match unigram alignment as `(candidate index, reference index)`
/// pairs. A candidate token continues the previous run when the next
/// reference token matches; otherwise it takes the unused equal reference
/// token that starts the longest run of further matches (earliest on ties).
fn align_exact<T: Eq>(candidate: &[T], reference: &[T]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut out: Vec<(usize, usize)> = Vec::new();
    let run_len = |i: usize, j: usize, used: &[bool]| {
        let mut k = 0;
        while i + k < candidate.len()
            && j + k < reference.len()
            && !used[j + k]
            && candidate[i + k] == reference[j + k]
        {
            k += 1;
        }
        k
    };
    for (i, tok) in candidate.iter().enumerate() {
        let follow = out
            .last()
            .filter(|&&(pi, _)| pi + 1 == i)
            .map(|&(_, pj)| pj + 1)
            .filter(|&j| j < reference.len() && !used[j] && reference[j] == *tok);
        let j = follow.or_else(|| {
            (0..reference.len())
                .filter(|&j| !used[j] && reference[j] == *tok)
                .map(|j| (run_len(i, j, &used), j))
                .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
                .map(|(_, j)| j)
        });
        if let Some(j) = j {
            used[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// METEOR restricted to exact matches: `F_mean = 10PR / (R + 9P)`,
/// fragmentation penalty `0.5·(chunks/matches)³`, score
/// `F_mean·(1 - penalty)`.
pub fn meteor_exact<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    let alignment = align_exact(candidate, reference);
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let mut chunks = 1;
    for w in alignment.windows(2) {
        let ((i0, j0), (i1, j1)) = (w[0], w[1]);
        if i1 != i0 + 1 || j1 != j0 + 1 {
            chunks += 1;
        }
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

/// Arithmetic mean of per-pair scores over `(candidate, reference)` pairs.
pub fn corpus_scores<T: Eq + Hash + Sync>(pairs: &[(Vec<T>, Vec<T>)]) -> NlgScore {
    if pairs.is_empty() {
        return NlgScore::default();
    }
    let mut acc = NlgScore::default();
    for (c, r) in pairs {
        let b = bleu_n(c, r);
        for k in 0..4 {
            acc.bleu[k] += b[k];
        }
        acc.meteor_exact += meteor_exact(c, r);
        acc.rouge_l += rouge_l(c, r);
    }
    let n = pairs.len() as f64;
    acc.bleu.iter_mut().for_each(|v| *v /= n);
    acc.meteor_exact /= n;
    acc.rouge_l /= n;
    acc
}
