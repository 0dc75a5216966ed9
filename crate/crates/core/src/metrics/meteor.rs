use std::collections::HashMap;

const SEARCH_BUDGET: usize = 200_000;

/// Matched unigram count and chunk count of the exact-match alignment with
/// the most matches and, among those, the fewest chunks.
pub fn align<S: AsRef<str>>(cand: &[S], reference: &[S]) -> (usize, usize) {
    let mut ref_pos: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, w) in reference.iter().enumerate() {
        ref_pos.entry(w.as_ref()).or_default().push(j);
    }
    let mut cand_count: HashMap<&str, usize> = HashMap::new();
    for w in cand {
        *cand_count.entry(w.as_ref()).or_default() += 1;
    }
    // matches each word type must contribute for a maximum alignment
    let mut need: HashMap<&str, usize> = HashMap::new();
    for (w, &c) in &cand_count {
        let r = ref_pos.get(w).map_or(0, Vec::len);
        if r > 0 {
            need.insert(w, c.min(r));
        }
    }
    let m: usize = need.values().sum();
    if m == 0 {
        return (0, 0);
    }
    let mut search = Search {
        cand: cand.iter().map(AsRef::as_ref).collect(),
        ref_pos,
        used: vec![false; reference.len()],
        need,
        remaining: cand_count,
        best: usize::MAX,
        nodes: 0,
    };
    search.dfs(0, None, 0);
    (m, search.best)
}

struct Search<'a> {
    cand: Vec<&'a str>,
    ref_pos: HashMap<&'a str, Vec<usize>>,
    used: Vec<bool>,
    need: HashMap<&'a str, usize>,
    remaining: HashMap<&'a str, usize>,
    best: usize,
    nodes: usize,
}

impl Search<'_> {
    /// `prev` is the reference position aligned to candidate `i - 1`.
    fn dfs(&mut self, i: usize, prev: Option<usize>, chunks: usize) {
        self.nodes += 1;
        if chunks >= self.best || (self.nodes > SEARCH_BUDGET && self.best != usize::MAX) {
            return;
        }
        if i == self.cand.len() {
            self.best = chunks;
            return;
        }
        let w = self.cand[i];
        *self.remaining.get_mut(w).unwrap() -= 1;
        let need = self.need.get(w).copied().unwrap_or(0);
        if need > 0 {
            let mut options: Vec<usize> = self.ref_pos[w].iter().copied().filter(|&j| !self.used[j]).collect();
            // continuing the current chunk first gives a tight early bound
            if let Some(p) = prev {
                if let Some(k) = options.iter().position(|&j| j == p + 1) {
                    options[..=k].rotate_right(1);
                }
            }
            for j in options {
                let extra = usize::from(prev.map_or(true, |p| j != p + 1));
                self.used[j] = true;
                *self.need.get_mut(w).unwrap() -= 1;
                self.dfs(i + 1, Some(j), chunks + extra);
                *self.need.get_mut(w).unwrap() += 1;
                self.used[j] = false;
            }
        }
        // leave this occurrence unaligned only if later ones can still cover the need
        if need <= self.remaining[w] {
            self.dfs(i + 1, None, chunks);
        }
        *self.remaining.get_mut(w).unwrap() += 1;
    }
}

/// Meteor from match and chunk counts.
pub fn meteor_from_counts(m: usize, chunks: usize, cand_len: usize, ref_len: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / cand_len as f64;
    let r = m as f64 / ref_len as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

pub fn meteor_tokens<S: AsRef<str>>(cand: &[S], reference: &[S]) -> f64 {
    let (m, ch) = align(cand, reference);
    meteor_from_counts(m, ch, cand.len(), reference.len())
}

pub fn meteor(candidate: &str, reference: &str) -> f64 {
    meteor_tokens(&crate::corpus::tokenize(candidate), &crate::corpus::tokenize(reference))
}
