use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;
pub const SEP_DA: usize = 5;
pub const SEP_RESP: usize = 6;
pub const CLS: usize = 7;
pub const USR: usize = 8;
pub const SYS: usize = 9;

/// Reserved tokens, in id order.
pub const RESERVED: [&str; 10] = [
    "<pad>",
    "<bos>",
    "<eos>",
    "<unk>",
    "<mask>",
    "<sep_da>",
    "<sep_resp>",
    "<cls>",
    "<usr>",
    "<sys>",
];

pub fn is_reserved(id: usize) -> bool {
    id < RESERVED.len()
}

/// Lowercase, split on whitespace and punctuation. Bracketed slot tokens
/// such as `[hotel_stars]` and angle-bracket tags such as `<usr>` stay whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<String>| {
        if !word.is_empty() {
            out.push(std::mem::take(word));
        }
    };
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
            i += 1;
            continue;
        }
        flush(&mut word, &mut out);
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if let Some(end) = bracketed_end(&chars, i) {
            let tok: String = chars[i..=end].iter().flat_map(|c| c.to_lowercase()).collect();
            out.push(tok);
            i = end + 1;
            continue;
        }
        out.push(c.to_lowercase().collect());
        i += 1;
    }
    flush(&mut word, &mut out);
    out
}

fn bracketed_end(chars: &[char], start: usize) -> Option<usize> {
    let close = match chars[start] {
        '[' => ']',
        '<' => '>',
        _ => return None,
    };
    let mut j = start + 1;
    while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_') {
        j += 1;
    }
    let inner = j - start - 1;
    let ok = j < chars.len() && chars[j] == close && inner > 0;
    // slot tokens need a domain_slot underscore; tags must be known
    let ok = ok
        && match close {
            ']' => chars[start + 1..j].contains(&'_'),
            _ => {
                let tok: String = chars[start..=j].iter().collect();
                RESERVED.contains(&tok.to_lowercase().as_str())
            }
        };
    ok.then_some(j)
}

/// Join tokens into display text; no space before closing punctuation.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        let attach = matches!(t, "." | "," | "?" | "!" | ":" | ";" | ")" | "'");
        let prev_joins = i > 0 && matches!(tokens[i - 1].as_ref(), "(" | "'");
        if i > 0 && !attach && !prev_joins {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

/// Token ↔ id bijection with reserved tokens at the lowest ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED).any(|(a, b)| a != b)
        {
            return Err(Error::Data("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Build from token counts: tokens with `count >= min_freq`, ordered by
    /// descending count then lexicographically.
    pub fn from_counts(counts: &HashMap<String, usize>, min_freq: usize) -> Result<Self> {
        if min_freq < 1 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        let mut kept: Vec<(&String, &usize)> = counts
            .iter()
            .filter(|(t, c)| **c >= min_freq && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.clone()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Hex SHA-256 over the newline-joined token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;
    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation_and_keeps_slot_tokens() {
        assert_eq!(
            tokenize("It is a [hotel_stars] star [hotel_type]."),
            ["it", "is", "a", "[hotel_stars]", "star", "[hotel_type]", "."]
        );
        assert_eq!(tokenize("Yes, 15:29!"), ["yes", ",", "15", ":", "29", "!"]);
        assert_eq!(tokenize("<usr> hi [not a slot]"), ["<usr>", "hi", "[", "not", "a", "slot", "]"]);
        assert_eq!(tokenize("hotel{inform(stars=4)}"), ["hotel", "{", "inform", "(", "stars", "=", "4", ")", "}"]);
    }

    #[test]
    fn detokenize_round_trips_through_tokenizer() {
        let toks = tokenize("Yes, it is 5 pounds to get in. Is that ok?");
        let text = detokenize(&toks);
        assert_eq!(text, "yes, it is 5 pounds to get in. is that ok?");
        assert_eq!(tokenize(&text), toks);
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocab::from_counts(&HashMap::new(), 1).unwrap();
        assert_eq!(v.len(), RESERVED.len());
        assert_eq!(v.id("<eos>"), EOS);
        assert_eq!(v.id("<cls>"), CLS);
        assert_eq!(v.id("never-seen"), UNK);
    }

    #[test]
    fn bad_token_lists_are_rejected() {
        assert!(Vocab::from_tokens(vec!["a".into()]).is_err());
        let mut toks: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        toks.push("x".into());
        toks.push("x".into());
        assert!(Vocab::from_tokens(toks).is_err());
    }
}
