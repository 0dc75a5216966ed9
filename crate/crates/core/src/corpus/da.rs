use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value used for requested slots, e.g. `hotel{request(area=?)}`.
pub const REQUEST_MARKER: &str = "?";

const FORBIDDEN_VALUE_CHARS: &[char] = &[';', '(', ')', '{', '}', '='];

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub value: String,
}

impl Slot {
    pub fn is_request(&self) -> bool {
        self.value == REQUEST_MARKER
    }
}

/// Domain, intent and slot-value pairs. Slots are kept sorted by
/// `(name, value)` so the canonical string is deterministic.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDialogueAct", into = "RawDialogueAct")]
pub struct DialogueAct {
    domain: String,
    intent: String,
    slots: Vec<Slot>,
}

fn check_identifier(kind: &str, s: &str) -> Result<()> {
    let ok = !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(Error::DialogueAct(format!("invalid {kind} identifier {s:?}")))
    }
}

fn normalize_value(v: &str) -> Result<String> {
    let v = v.split_whitespace().collect::<Vec<_>>().join(" ");
    if v.is_empty() {
        return Err(Error::DialogueAct("empty slot value".into()));
    }
    if v.contains(FORBIDDEN_VALUE_CHARS) {
        return Err(Error::DialogueAct(format!(
            "slot value {v:?} contains a reserved character"
        )));
    }
    Ok(v)
}

impl DialogueAct {
    pub fn new<I, N, V>(domain: &str, intent: &str, slots: I) -> Result<Self>
    where
        I: IntoIterator<Item = (N, V)>,
        N: AsRef<str>,
        V: AsRef<str>,
    {
        let domain = domain.trim().to_lowercase();
        let intent = intent.trim().to_lowercase();
        check_identifier("domain", &domain)?;
        check_identifier("intent", &intent)?;
        let mut out = Vec::new();
        for (n, v) in slots {
            let name = n.as_ref().trim().to_lowercase();
            check_identifier("slot", &name)?;
            out.push(Slot {
                name,
                value: normalize_value(v.as_ref())?,
            });
        }
        out.sort();
        Ok(Self {
            domain,
            intent,
            slots: out,
        })
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn intent(&self) -> &str {
        &self.intent
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Canonical form with informed values replaced by `*`; identifies the
    /// act for generators that produce delexicalised text.
    pub fn delex_key(&self) -> String {
        let mut slots: Vec<(String, String)> = self
            .slots
            .iter()
            .map(|s| {
                let v = if s.is_request() { REQUEST_MARKER } else { "*" };
                (s.name.clone(), v.to_string())
            })
            .collect();
        slots.sort();
        format_parts(&self.domain, &self.intent, &slots)
    }

    /// Slot token used in delexicalised text, e.g. `[hotel_stars]`.
    pub fn slot_token(&self, slot: &str) -> String {
        slot_token(&self.domain, slot)
    }
}

pub fn slot_token(domain: &str, slot: &str) -> String {
    format!("[{domain}_{slot}]")
}

fn format_parts(domain: &str, intent: &str, slots: &[(String, String)]) -> String {
    let body: Vec<String> = slots.iter().map(|(n, v)| format!("{n}={v}")).collect();
    format!("{domain}{{{intent}({})}}", body.join("; "))
}

impl fmt::Display for DialogueAct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let slots: Vec<(String, String)> = self
            .slots
            .iter()
            .map(|s| (s.name.clone(), s.value.clone()))
            .collect();
        f.write_str(&format_parts(&self.domain, &self.intent, &slots))
    }
}

impl FromStr for DialogueAct {
    type Err = Error;

    /// Parses `domain{intent(name=value; name=value)}`; whitespace around
    /// delimiters is ignored.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: &str| Error::DialogueAct(format!("{msg} in {s:?}"));
        let s_trim = s.trim();
        let open = s_trim.find('{').ok_or_else(|| bad("missing '{'"))?;
        let domain = &s_trim[..open];
        let rest = s_trim[open + 1..].trim_end();
        let rest = rest.strip_suffix('}').ok_or_else(|| bad("missing '}'"))?.trim();
        let paren = rest.find('(').ok_or_else(|| bad("missing '('"))?;
        let intent = &rest[..paren];
        let inner = rest[paren + 1..]
            .trim_end()
            .strip_suffix(')')
            .ok_or_else(|| bad("missing ')'"))?;
        let mut slots = Vec::new();
        for part in inner.split(';') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (n, v) = part
                .split_once('=')
                .ok_or_else(|| bad(&format!("slot {part:?} lacks '='")))?;
            slots.push((n.trim().to_string(), v.trim().to_string()));
        }
        DialogueAct::new(domain, intent, slots)
    }
}

/// JSON shape: `{"domain":..,"intent":..,"slots":[[name,value],..]}`.
#[derive(Serialize, Deserialize)]
struct RawDialogueAct {
    domain: String,
    intent: String,
    #[serde(default)]
    slots: Vec<(String, String)>,
}

impl TryFrom<RawDialogueAct> for DialogueAct {
    type Error = Error;
    fn try_from(r: RawDialogueAct) -> Result<Self> {
        DialogueAct::new(&r.domain, &r.intent, r.slots)
    }
}

impl From<DialogueAct> for RawDialogueAct {
    fn from(d: DialogueAct) -> Self {
        RawDialogueAct {
            domain: d.domain,
            intent: d.intent,
            slots: d.slots.into_iter().map(|s| (s.name, s.value)).collect(),
        }
    }
}

/// Fixed ordering of dialogue-act keys; index `i` is the one-hot position.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaInventory {
    keys: Vec<String>,
}

impl DaInventory {
    /// Build from delex keys; sorted and deduplicated.
    pub fn from_keys<I: IntoIterator<Item = String>>(keys: I) -> Self {
        let mut keys: Vec<String> = keys.into_iter().collect();
        keys.sort();
        keys.dedup();
        Self { keys }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn index_of(&self, da: &DialogueAct) -> Result<usize> {
        let key = da.delex_key();
        self.keys
            .binary_search(&key)
            .map_err(|_| Error::UnknownDialogueAct(da.to_string()))
    }

    pub fn one_hot(&self, da: &DialogueAct) -> Result<Vec<f64>> {
        let i = self.index_of(da)?;
        let mut v = vec![0.0; self.keys.len()];
        v[i] = 1.0;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_form_sorts_slots() {
        let da = DialogueAct::new("hotel", "inform", [("type", "guesthouse"), ("stars", "4")]).unwrap();
        assert_eq!(da.to_string(), "hotel{inform(stars=4; type=guesthouse)}");
        assert_eq!(da.delex_key(), "hotel{inform(stars=*; type=*)}");
    }

    #[test]
    fn parses_loose_whitespace_form() {
        let da: DialogueAct = "hotel {inform (internet=yes; parking=yes)}".parse().unwrap();
        assert_eq!(da.to_string(), "hotel{inform(internet=yes; parking=yes)}");
        let req: DialogueAct = "hotel{request(area=?)}".parse().unwrap();
        assert!(req.slots()[0].is_request());
        let bye: DialogueAct = "general{bye()}".parse().unwrap();
        assert!(bye.slots().is_empty());
    }

    #[test]
    fn malformed_strings_are_errors() {
        for s in ["hotel", "hotel{inform", "hotel{inform(stars)}", "Ho tel{x()}", "hotel{inform(a=)}"] {
            assert!(s.parse::<DialogueAct>().is_err(), "{s}");
        }
    }

    #[test]
    fn inventory_one_hot_is_stable() {
        let a: DialogueAct = "hotel{request(area=?)}".parse().unwrap();
        let b: DialogueAct = "hotel{inform(stars=4)}".parse().unwrap();
        let c: DialogueAct = "hotel{inform(stars=5)}".parse().unwrap();
        let inv = DaInventory::from_keys([a.delex_key(), b.delex_key(), a.delex_key()]);
        assert_eq!(inv.len(), 2);
        assert_eq!(inv.index_of(&b).unwrap(), inv.index_of(&c).unwrap());
        let other: DialogueAct = "taxi{inform(leave=9)}".parse().unwrap();
        assert!(matches!(inv.index_of(&other), Err(Error::UnknownDialogueAct(_))));
    }

    fn ident() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9_]{0,6}"
    }

    fn value() -> impl Strategy<Value = String> {
        prop_oneof![
            Just("?".to_string()),
            "[a-z0-9][a-z0-9 ]{0,8}[a-z0-9]",
        ]
    }

    proptest! {
        #[test]
        fn parse_format_round_trip(
            domain in ident(),
            intent in ident(),
            slots in proptest::collection::vec((ident(), value()), 0..5),
        ) {
            let da = DialogueAct::new(&domain, &intent, slots).unwrap();
            let s = da.to_string();
            let back: DialogueAct = s.parse().unwrap();
            prop_assert_eq!(&back, &da);
            prop_assert_eq!(back.to_string(), s);
        }
    }
}
