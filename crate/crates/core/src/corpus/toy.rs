//! Synthetic corpus generator.
//!
//! A grammar lists dialogue acts with one system template each and question
//! and statement variants of the user turn that precedes it. When the user
//! asks a question, the system answer starts with the prefix registered for
//! the act's intent ("Yes," / "Sure,"), so the response depends on the user
//! utterance and not on the act alone.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::da::DialogueAct;
use crate::corpus::dialogue::{Dialogue, Turn};
use crate::corpus::io::Corpus;
use crate::error::{Error, Result};

pub const DEFAULT_GRAMMAR: &str = include_str!("toy_default.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserTemplates {
    #[serde(default)]
    pub question: Vec<String>,
    #[serde(default)]
    pub statement: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    /// Test dialogues come in pairs sharing acts and values.
    pub test_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyGrammar {
    pub domains: Vec<String>,
    pub intents: Vec<String>,
    pub slot_values: BTreeMap<String, BTreeMap<String, Vec<String>>>,
    /// Act keys in delexicalised canonical form, e.g. `hotel{inform(stars=*)}`.
    pub acts: Vec<String>,
    #[serde(default)]
    pub closing_act: Option<String>,
    pub system_templates: BTreeMap<String, String>,
    pub user_templates: BTreeMap<String, UserTemplates>,
    pub question_ratio: f64,
    #[serde(default)]
    pub question_prefix: BTreeMap<String, String>,
    /// Inclusive range of non-closing exchanges per dialogue.
    pub exchanges: [usize; 2],
    pub dialogues: SplitSizes,
}

impl ToyGrammar {
    pub fn default_grammar() -> Self {
        serde_json::from_str(DEFAULT_GRAMMAR).expect("built-in grammar is valid JSON")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let g: ToyGrammar = serde_json::from_str(json)
            .map_err(|e| Error::Config(format!("toy grammar: {e}")))?;
        g.compile()?;
        Ok(g)
    }

    fn compile(&self) -> Result<Compiled> {
        let bad = |m: String| Err(Error::Config(format!("toy grammar: {m}")));
        if self.domains.is_empty() {
            return bad("no domains declared".into());
        }
        if self.intents.len() < 2 {
            return bad("at least two intents are required".into());
        }
        if !(0.0..=1.0).contains(&self.question_ratio) {
            return bad(format!("question_ratio {} outside [0, 1]", self.question_ratio));
        }
        if self.exchanges[0] == 0 || self.exchanges[0] > self.exchanges[1] {
            return bad(format!("bad exchanges range {:?}", self.exchanges));
        }
        let mut acts = Vec::new();
        for key in &self.acts {
            let da: DialogueAct = key.parse()?;
            if da.delex_key() != *key {
                return bad(format!("act {key:?} is not in canonical delexicalised form"));
            }
            if !self.domains.iter().any(|d| d == da.domain()) {
                return bad(format!("act {key:?} uses undeclared domain"));
            }
            if !self.intents.iter().any(|i| i == da.intent()) {
                return bad(format!("act {key:?} uses undeclared intent"));
            }
            let slots = self.slot_values.get(da.domain());
            for s in da.slots() {
                if !slots.is_some_and(|m| m.get(&s.name).is_some_and(|v| !v.is_empty())) {
                    return bad(format!("act {key:?}: slot {} has no values", s.name));
                }
            }
            let Some(system) = self.system_templates.get(key) else {
                return bad(format!("no system template for act {key}"));
            };
            let Some(user) = self.user_templates.get(key) else {
                return bad(format!("no user templates for act {key}"));
            };
            if user.question.is_empty() && user.statement.is_empty() {
                return bad(format!("no user templates for act {key}"));
            }
            for t in std::iter::once(system).chain(&user.question).chain(&user.statement) {
                for p in placeholders(t) {
                    if !slots.is_some_and(|m| m.contains_key(p)) {
                        return bad(format!("template {t:?} refers to unknown slot {p}"));
                    }
                }
            }
            acts.push(da);
        }
        let closing = match &self.closing_act {
            Some(k) => match self.acts.iter().position(|a| a == k) {
                Some(i) => Some(i),
                None => return bad(format!("closing act {k} is not declared")),
            },
            None => None,
        };
        let mut by_domain: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, a) in acts.iter().enumerate() {
            if Some(i) != closing {
                by_domain.entry(a.domain().to_string()).or_default().push(i);
            }
        }
        if by_domain.is_empty() {
            return bad("no acts besides the closing act".into());
        }
        Ok(Compiled {
            acts,
            closing,
            by_domain,
        })
    }
}

fn placeholders(t: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = t;
    while let Some(s) = rest.find('{') {
        match rest[s..].find('}') {
            Some(e) => {
                out.push(&rest[s + 1..s + e]);
                rest = &rest[s + e + 1..];
            }
            None => break,
        }
    }
    out
}

fn fill(template: &str, entity: &BTreeMap<String, String>) -> String {
    let mut out = template.to_string();
    for (slot, value) in entity {
        out = out.replace(&format!("{{{slot}}}"), value);
    }
    out
}

fn with_prefix(prefix: &str, text: &str) -> String {
    let mut chars = text.chars();
    let rest = match chars.next() {
        Some(c) if c.is_uppercase() && chars.clone().next().is_some_and(|n| n.is_lowercase()) => {
            c.to_lowercase().chain(chars).collect()
        }
        _ => text.to_string(),
    };
    format!("{prefix} {rest}")
}

struct Compiled {
    acts: Vec<DialogueAct>,
    closing: Option<usize>,
    by_domain: BTreeMap<String, Vec<usize>>,
}

/// Acts and slot values of one dialogue, before surface realisation.
struct Skeleton {
    entity: BTreeMap<String, String>,
    acts: Vec<usize>,
}

struct Generator<'a> {
    grammar: &'a ToyGrammar,
    compiled: Compiled,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn skeleton(&mut self, forced: Option<usize>) -> Skeleton {
        let domain = match forced {
            Some(a) => self.compiled.acts[a].domain().to_string(),
            None => {
                let domains: Vec<&String> = self.compiled.by_domain.keys().collect();
                domains.choose(&mut self.rng).unwrap().to_string()
            }
        };
        let mut entity = BTreeMap::new();
        if let Some(slots) = self.grammar.slot_values.get(&domain) {
            for (slot, values) in slots {
                if let Some(v) = values.choose(&mut self.rng) {
                    entity.insert(slot.clone(), v.clone());
                }
            }
        }
        let pool = &self.compiled.by_domain[&domain];
        let [lo, hi] = self.grammar.exchanges;
        let n = self.rng.gen_range(lo..=hi).min(pool.len());
        let mut acts: Vec<usize> = pool.choose_multiple(&mut self.rng, n).copied().collect();
        if let Some(a) = forced {
            if !acts.contains(&a) {
                acts[0] = a;
            }
        }
        acts.extend(self.compiled.closing);
        Skeleton { entity, acts }
    }

    fn realise(&mut self, id: String, sk: &Skeleton) -> Result<Dialogue> {
        let mut turns = Vec::with_capacity(sk.acts.len() * 2);
        for &a in &sk.acts {
            let key = &self.grammar.acts[a];
            let shape = &self.compiled.acts[a];
            let user = &self.grammar.user_templates[key];
            let ask = !user.question.is_empty()
                && (user.statement.is_empty() || self.rng.gen_bool(self.grammar.question_ratio));
            let pool = if ask { &user.question } else { &user.statement };
            let user_text = fill(pool.choose(&mut self.rng).unwrap(), &sk.entity);
            let mut template = self.grammar.system_templates[key].clone();
            if ask {
                if let Some(p) = self.grammar.question_prefix.get(shape.intent()) {
                    template = with_prefix(p, &template);
                }
            }
            let system_text = fill(&template, &sk.entity);
            let slots: Vec<(String, String)> = shape
                .slots()
                .iter()
                .map(|s| {
                    let v = if s.is_request() { s.value.clone() } else { sk.entity[&s.name].clone() };
                    (s.name.clone(), v)
                })
                .collect();
            let da = DialogueAct::new(shape.domain(), shape.intent(), slots)?;
            turns.push(Turn::user(user_text));
            turns.push(Turn::system(system_text, Some(da)));
        }
        let d = Dialogue { id, turns };
        d.validate()?;
        Ok(d)
    }
}

/// Generate train/dev/test splits. Deterministic in `(grammar, seed)`.
/// Every declared act occurs in train, and every test act occurs at least
/// twice because test dialogues are realised in pairs.
pub fn synthesize_toy_corpus(grammar: &ToyGrammar, seed: u64) -> Result<Corpus> {
    let compiled = grammar.compile()?;
    let mut g = Generator {
        grammar,
        compiled,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let sizes = &grammar.dialogues;
    let mut corpus = Corpus::default();

    let mut seen = BTreeSet::new();
    for i in 0..sizes.train {
        let sk = g.skeleton(None);
        seen.extend(sk.acts.iter().copied());
        corpus.train.push(g.realise(format!("train-{:04}", i + 1), &sk)?);
    }
    let missing: Vec<usize> = (0..g.compiled.acts.len())
        .filter(|a| !seen.contains(a) && Some(*a) != g.compiled.closing)
        .collect();
    for a in missing {
        let sk = g.skeleton(Some(a));
        let id = format!("train-{:04}", corpus.train.len() + 1);
        corpus.train.push(g.realise(id, &sk)?);
    }
    for i in 0..sizes.dev {
        let sk = g.skeleton(None);
        corpus.dev.push(g.realise(format!("dev-{:04}", i + 1), &sk)?);
    }
    for i in 0..sizes.test_pairs {
        let sk = g.skeleton(None);
        for half in 0..2 {
            let id = format!("test-{:04}", 2 * i + half + 1);
            corpus.test.push(g.realise(id, &sk)?);
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::io::corpus_to_json;

    #[test]
    fn default_grammar_compiles() {
        ToyGrammar::default_grammar().compile().unwrap();
    }

    #[test]
    fn deterministic_per_seed() {
        let g = ToyGrammar::default_grammar();
        let a = synthesize_toy_corpus(&g, 7).unwrap();
        let b = synthesize_toy_corpus(&g, 7).unwrap();
        assert_eq!(corpus_to_json(&a.train).unwrap(), corpus_to_json(&b.train).unwrap());
        assert_eq!(corpus_to_json(&a.test).unwrap(), corpus_to_json(&b.test).unwrap());
        let c = synthesize_toy_corpus(&g, 8).unwrap();
        assert_ne!(corpus_to_json(&a.train).unwrap(), corpus_to_json(&c.train).unwrap());
    }

    #[test]
    fn missing_template_is_a_spec_error() {
        let mut g = ToyGrammar::default_grammar();
        g.system_templates.remove("hotel{inform(stars=*)}");
        assert!(matches!(g.compile(), Err(Error::Config(_))));
        let mut g = ToyGrammar::default_grammar();
        g.user_templates.remove("general{bye()}");
        assert!(matches!(synthesize_toy_corpus(&g, 1), Err(Error::Config(_))));
    }

    #[test]
    fn prefix_lowercases_leading_word_only() {
        assert_eq!(with_prefix("Yes,", "It is free."), "Yes, it is free.");
        assert_eq!(with_prefix("Sure,", "What area?"), "Sure, what area?");
        assert_eq!(with_prefix("Yes,", "{name} x"), "Yes, {name} x");
    }

    #[test]
    fn placeholders_are_found() {
        assert_eq!(placeholders("a {x} b {yy}."), vec!["x", "yy"]);
    }
}
