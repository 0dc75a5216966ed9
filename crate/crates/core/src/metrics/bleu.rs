use std::collections::HashMap;

/// Count given to zero-match n-gram precisions.
pub const SMOOTHING_EPSILON: f64 = 0.1;

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Length of the reference closest to `cand_len`; ties go to the shorter.
fn closest_ref_len(cand_len: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(cand_len), r))
        .unwrap_or(0)
}

/// Smoothed sentence BLEU-4 over pre-tokenized text. Candidates shorter
/// than four tokens use the orders they have, equally weighted.
pub fn bleu4_tokens(cand: &[String], refs: &[Vec<String>]) -> f64 {
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let orders = cand.len().min(4);
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let counts = ngrams(cand, n);
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngrams(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = counts
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let total = (cand.len() + 1 - n) as f64;
        let num = if matched == 0 { SMOOTHING_EPSILON } else { matched as f64 };
        log_sum += (num / total).ln();
    }
    let c = cand.len() as f64;
    let r = closest_ref_len(cand.len(), refs) as f64;
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * (log_sum / orders as f64).exp()
}

pub fn bleu4(candidate: &str, references: &[&str]) -> f64 {
    let refs: Vec<Vec<String>> = references.iter().map(|r| crate::corpus::tokenize(r)).collect();
    bleu4_tokens(&crate::corpus::tokenize(candidate), &refs)
}
