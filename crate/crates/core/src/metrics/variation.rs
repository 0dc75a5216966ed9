use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationSize {
    /// Mean distinct generations per act over all act groups.
    pub full: f64,
    /// Same mean over groups with at least two instances.
    pub filtered: f64,
    /// False when no act repeats; `filtered` is then reported as 1.0.
    pub filtered_defined: bool,
}

/// Distinct whitespace-normalised generations per canonical act.
pub fn variation_size<A: AsRef<str>, T: AsRef<str>>(items: &[(A, T)]) -> VariationSize {
    let mut groups: BTreeMap<&str, (usize, BTreeSet<String>)> = BTreeMap::new();
    for (da, text) in items {
        let norm = text.as_ref().split_whitespace().collect::<Vec<_>>().join(" ");
        let e = groups.entry(da.as_ref()).or_default();
        e.0 += 1;
        e.1.insert(norm);
    }
    let mean = |it: &mut dyn Iterator<Item = usize>| {
        let (s, n) = it.fold((0usize, 0usize), |(s, n), x| (s + x, n + 1));
        (n > 0).then(|| s as f64 / n as f64)
    };
    let full = mean(&mut groups.values().map(|g| g.1.len())).unwrap_or(1.0);
    let filtered = mean(&mut groups.values().filter(|g| g.0 >= 2).map(|g| g.1.len()));
    VariationSize {
        full,
        filtered: filtered.unwrap_or(1.0),
        filtered_defined: filtered.is_some(),
    }
}
