use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Speaker};
use crate::ctxencoder::ContextEncoder;
use crate::error::{Error, Result};
use crate::gens::GenItem;
use crate::metrics::{bleu4, context_fit, embed_score, meteor};
use crate::reranker::NUM_TARGETS;

pub const TARGET_NAMES: [&str; NUM_TARGETS] = ["bleu4", "meteor", "embed_p", "embed_r", "embed_f1", "context_fit"];

/// Regression targets in `TARGET_NAMES` order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Targets(pub [f64; NUM_TARGETS]);

impl Targets {
    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Five similarity scores of `r` against `gold`, and the context fit of `r`
/// to `u`.
pub fn compute_targets(u: &str, r: &str, gold: &str, enc: &ContextEncoder) -> Result<Targets> {
    let e = embed_score(r, gold, enc)?;
    Ok(Targets([
        bleu4(r, &[gold]),
        meteor(r, gold),
        e.precision,
        e.recall,
        e.f1,
        context_fit(u, r, enc)?,
    ]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankExample {
    pub dialogue_id: String,
    pub turn: usize,
    pub u: String,
    pub r: String,
    pub targets: Targets,
    pub is_gold: bool,
}

fn norm(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Training examples from generated candidates: duplicates removed, the
/// last system turn of each dialogue dropped, candidates equal to the gold
/// response removed and the gold response appended.
pub fn clean_candidates(dialogues: &[Dialogue], gens: &[GenItem], enc: &ContextEncoder) -> Result<Vec<RerankExample>> {
    let by_id: HashMap<&str, &Dialogue> = dialogues.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut out = Vec::new();
    for item in gens {
        let missing = || Error::Data(format!("cannot resolve {} turn {}", item.dialogue_id, item.turn));
        let d = by_id.get(item.dialogue_id.as_str()).ok_or_else(missing)?;
        let gold = d.turns.get(item.turn).filter(|t| t.speaker == Speaker::System).ok_or_else(missing)?;
        let last_system = d.turns.iter().rposition(|t| t.speaker == Speaker::System);
        if Some(item.turn) == last_system {
            continue;
        }
        let u = &d.turns[item.turn - 1].text;
        let gold_norm = norm(&gold.text);
        let mut seen = HashSet::new();
        for c in &item.candidates {
            let n = norm(&c.text);
            if n == gold_norm || !seen.insert(n) {
                continue;
            }
            out.push(RerankExample {
                dialogue_id: d.id.clone(),
                turn: item.turn,
                u: u.clone(),
                r: c.text.clone(),
                targets: compute_targets(u, &c.text, &gold.text, enc)?,
                is_gold: false,
            });
        }
        out.push(RerankExample {
            dialogue_id: d.id.clone(),
            turn: item.turn,
            u: u.clone(),
            r: gold.text.clone(),
            targets: compute_targets(u, &gold.text, &gold.text, enc)?,
            is_gold: true,
        });
    }
    Ok(out)
}
