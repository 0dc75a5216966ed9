use serde::{Deserialize, Serialize};

use crate::corpus::da::DialogueAct;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::User => "<usr>",
            Speaker::System => "<sys>",
        }
    }
}

/// One substitution made by [`delexicalize`]: the slot token and the exact
/// surface string it replaced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotFill {
    pub token: String,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub da: Option<DialogueAct>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delex_text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slot_map: Vec<SlotFill>,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::User,
            text: text.into(),
            da: None,
            delex_text: None,
            slot_map: Vec::new(),
        }
    }

    /// System turn; delexicalised when a dialogue act is given.
    pub fn system(text: impl Into<String>, da: Option<DialogueAct>) -> Self {
        let text = text.into();
        let (delex_text, slot_map) = match &da {
            Some(da) => {
                let (d, m) = delexicalize(&text, da);
                (Some(d), m)
            }
            None => (None, Vec::new()),
        };
        Self {
            speaker: Speaker::System,
            text,
            da,
            delex_text,
            slot_map,
        }
    }

    /// A system turn usable as a generation target.
    pub fn is_annotated_system(&self) -> bool {
        self.speaker == Speaker::System && self.da.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// Checks non-emptiness and strict user/system alternation.
    pub fn validate(&self) -> Result<()> {
        let err = |message: String| Error::Schema {
            dialogue_id: self.id.clone(),
            message,
        };
        if self.turns.is_empty() {
            return Err(err("dialogue has no turns".into()));
        }
        for (i, t) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::User } else { Speaker::System };
            if t.speaker != expected {
                return Err(err(format!(
                    "turn {i} is spoken by {:?}, expected {:?}",
                    t.speaker, expected
                )));
            }
        }
        Ok(())
    }

    /// Indices of system turns that carry a dialogue act.
    pub fn target_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is_annotated_system())
            .map(|(i, _)| i)
    }
}

fn char_eq_ci(a: char, b: char) -> bool {
    a == b || a.to_lowercase().eq(b.to_lowercase())
}

fn find_matches(text: &[char], value: &[char], taken: &[bool]) -> Vec<usize> {
    let n = value.len();
    if n == 0 || n > text.len() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= text.len() {
        let boundary_before = i == 0 || !text[i - 1].is_alphanumeric();
        let boundary_after = i + n == text.len() || !text[i + n].is_alphanumeric();
        if boundary_before
            && boundary_after
            && !taken[i..i + n].iter().any(|&t| t)
            && text[i..i + n].iter().zip(value).all(|(a, b)| char_eq_ci(*a, *b))
        {
            out.push(i);
            i += n;
        } else {
            i += 1;
        }
    }
    out
}

/// Replace every informed slot value of `da` found in `text` with its slot
/// token. Values are matched case-insensitively on word boundaries, longest
/// value first, so a value never matches inside a longer one already taken.
pub fn delexicalize(text: &str, da: &DialogueAct) -> (String, Vec<SlotFill>) {
    let chars: Vec<char> = text.chars().collect();
    let mut values: Vec<(Vec<char>, String)> = da
        .slots()
        .iter()
        .filter(|s| !s.is_request())
        .map(|s| (s.value.chars().collect(), da.slot_token(&s.name)))
        .collect();
    values.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.1.cmp(&b.1)));
    values.dedup();

    let mut taken = vec![false; chars.len()];
    let mut spans: Vec<(usize, usize, String)> = Vec::new();
    for (value, token) in &values {
        for start in find_matches(&chars, value, &taken) {
            taken[start..start + value.len()].iter_mut().for_each(|t| *t = true);
            spans.push((start, start + value.len(), token.clone()));
        }
    }
    spans.sort_by_key(|s| s.0);

    let mut out = String::with_capacity(text.len());
    let mut map = Vec::with_capacity(spans.len());
    let mut pos = 0;
    for (start, end, token) in spans {
        out.extend(&chars[pos..start]);
        out.push_str(&token);
        map.push(SlotFill {
            token,
            value: chars[start..end].iter().collect(),
        });
        pos = end;
    }
    out.extend(&chars[pos..]);
    (out, map)
}

/// Byte spans of `[x_y]` slot tokens in `text`.
fn slot_token_spans(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == b']' && bytes[i + 1..j].contains(&b'_') {
                out.push((i, j + 1));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

fn relex(delex_text: &str, slot_map: &[SlotFill], strict: bool) -> Result<String> {
    let mut used = vec![false; slot_map.len()];
    let mut missing = Vec::new();
    let mut out = String::with_capacity(delex_text.len());
    let mut pos = 0;
    for (start, end) in slot_token_spans(delex_text) {
        out.push_str(&delex_text[pos..start]);
        let token = &delex_text[start..end];
        let hit = (0..slot_map.len()).find(|&k| !used[k] && slot_map[k].token == token);
        match hit {
            Some(k) => {
                used[k] = true;
                out.push_str(&slot_map[k].value);
            }
            None => {
                // a token seen once already can reuse its last value
                let reuse = slot_map.iter().rev().find(|f| f.token == token);
                match reuse {
                    Some(f) if !strict => out.push_str(&f.value),
                    _ => {
                        if strict {
                            missing.push(token.to_string());
                        }
                        out.push_str(token);
                    }
                }
            }
        }
        pos = end;
    }
    out.push_str(&delex_text[pos..]);
    if !missing.is_empty() {
        return Err(Error::UnresolvedToken(missing));
    }
    Ok(out)
}

/// Inverse of [`delexicalize`]; tokens consume slot-map entries in order.
pub fn relexicalize(delex_text: &str, slot_map: &[SlotFill]) -> Result<String> {
    relex(delex_text, slot_map, true)
}

/// Like [`relexicalize`], but unresolved tokens are left in place and a
/// repeated token reuses its value. Used for generated text.
pub fn relexicalize_lenient(delex_text: &str, slot_map: &[SlotFill]) -> String {
    relex(delex_text, slot_map, false).expect("lenient relexicalisation cannot fail")
}

/// Slot map built straight from a dialogue act, for relexicalising generated
/// text when no gold surface form exists.
pub fn slot_map_from_da(da: &DialogueAct) -> Vec<SlotFill> {
    da.slots()
        .iter()
        .filter(|s| !s.is_request())
        .map(|s| SlotFill {
            token: da.slot_token(&s.name),
            value: s.value.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn da(s: &str) -> DialogueAct {
        s.parse().unwrap()
    }

    #[test]
    fn delexicalizes_figure_example() {
        let d = da("hotel{inform(stars=4; type=guesthouse)}");
        let (text, map) = delexicalize("It is a 4 star guesthouse.", &d);
        assert_eq!(text, "It is a [hotel_stars] star [hotel_type].");
        assert_eq!(
            map,
            vec![
                SlotFill { token: "[hotel_stars]".into(), value: "4".into() },
                SlotFill { token: "[hotel_type]".into(), value: "guesthouse".into() },
            ]
        );
        assert_eq!(relexicalize(&text, &map).unwrap(), "It is a 4 star guesthouse.");
    }

    #[test]
    fn request_slots_never_substitute() {
        let (text, map) = delexicalize("Sure.", &da("hotel{request(area=?)}"));
        assert_eq!(text, "Sure.");
        assert!(map.is_empty());
    }

    #[test]
    fn longest_value_wins() {
        let d = da("hotel{inform(name=house; type=guest house)}");
        let (text, map) = delexicalize("a guest house", &d);
        assert_eq!(text, "a [hotel_type]");
        assert_eq!(map.len(), 1);
    }

    #[test]
    fn matching_is_case_insensitive_and_keeps_surface() {
        let d = da("attraction{inform(name=ballare)}");
        let (text, map) = delexicalize("Ballare is great, ballare!", &d);
        assert_eq!(text, "[attraction_name] is great, [attraction_name]!");
        assert_eq!(map[0].value, "Ballare");
        assert_eq!(map[1].value, "ballare");
        assert_eq!(relexicalize(&text, &map).unwrap(), "Ballare is great, ballare!");
    }

    #[test]
    fn values_only_match_whole_words() {
        let (text, _) = delexicalize("It has 14 rooms.", &da("hotel{inform(stars=4)}"));
        assert_eq!(text, "It has 14 rooms.");
    }

    #[test]
    fn relexicalize_edge_cases() {
        assert_eq!(relexicalize("Yes!", &[]).unwrap(), "Yes!");
        match relexicalize("Take [train_id] now.", &[]) {
            Err(Error::UnresolvedToken(t)) => assert_eq!(t, vec!["[train_id]".to_string()]),
            other => panic!("{other:?}"),
        }
        assert_eq!(relexicalize_lenient("Take [train_id].", &[]), "Take [train_id].");
    }

    #[test]
    fn alternation_is_checked() {
        let d = Dialogue {
            id: "bad-1".into(),
            turns: vec![Turn::user("a"), Turn::user("b"), Turn::system("c", None)],
        };
        match d.validate() {
            Err(Error::Schema { dialogue_id, .. }) => assert_eq!(dialogue_id, "bad-1"),
            other => panic!("{other:?}"),
        }
    }
}
