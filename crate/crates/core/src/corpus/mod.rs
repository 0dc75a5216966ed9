//! Dialogue data: acts, turns, context windows, ingestion, delexicalisation,
//! vocabulary and the synthetic toy corpus.

pub mod context;
pub mod da;
pub mod dialogue;
pub mod io;
pub mod toy;
pub mod vocab;

use std::collections::HashMap;

pub use context::{extract_context, ContextSpec, ContextWindow};
pub use da::{DaInventory, DialogueAct, Slot};
pub use dialogue::{
    delexicalize, relexicalize, relexicalize_lenient, slot_map_from_da, Dialogue, SlotFill,
    Speaker, Turn,
};
pub use io::{load_corpus, load_data_dir, save_data_dir, Corpus, CorpusFormat, LoadedCorpus, Split};
pub use toy::{synthesize_toy_corpus, ToyGrammar};
pub use vocab::{detokenize, tokenize, Vocab};

use crate::error::{Error, Result};

/// Every string a model may need to tokenize from a dialogue: user and
/// system text, delexicalised system text and canonical act strings.
pub fn vocab_texts(dialogues: &[Dialogue]) -> Vec<String> {
    let mut out = Vec::new();
    for d in dialogues {
        for t in &d.turns {
            out.push(t.text.clone());
            if let Some(x) = &t.delex_text {
                out.push(x.clone());
            }
            if let Some(da) = &t.da {
                out.push(da.to_string());
            }
        }
    }
    out
}

pub fn build_vocab(dialogues: &[Dialogue], min_freq: usize) -> Result<Vocab> {
    if dialogues.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in vocab_texts(dialogues) {
        for tok in tokenize(&text) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    Vocab::from_counts(&counts, min_freq)
}

/// Act inventory over the delexicalised keys of all annotated system turns.
pub fn da_inventory(dialogues: &[Dialogue]) -> DaInventory {
    DaInventory::from_keys(
        dialogues
            .iter()
            .flat_map(|d| d.turns.iter())
            .filter_map(|t| t.da.as_ref().map(|da| da.delex_key())),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_from_one_turn() {
        let d = Dialogue { id: "x".into(), turns: vec![Turn::user("Hello hello.")] };
        let v = build_vocab(&[d.clone()], 1).unwrap();
        assert_eq!(v.len(), vocab::RESERVED.len() + 2);
        assert!(v.contains("hello") && v.contains("."));
        let v3 = build_vocab(&[d], 3).unwrap();
        assert_eq!(v3.id("hello"), vocab::UNK);
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(build_vocab(&[], 1).is_err());
    }
}
