use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::dialogue::{Dialogue, Speaker};
use crate::error::{Error, Result};

/// How much history beyond the immediate user utterance to keep, written
/// `NuMs` (e.g. `5u5s`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ContextSpec {
    pub users: usize,
    pub systems: usize,
}

impl ContextSpec {
    pub const fn new(users: usize, systems: usize) -> Self {
        Self { users, systems }
    }

    /// The sweep grid `0u0s` through `5u5s`.
    pub fn sweep() -> Vec<ContextSpec> {
        (0..=5).map(|n| ContextSpec::new(n, n)).collect()
    }
}

impl fmt::Display for ContextSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}u{}s", self.users, self.systems)
    }
}

impl FromStr for ContextSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Usage(format!("invalid context spec {s:?}, expected e.g. 5u5s"));
        let t = s.trim().to_ascii_lowercase();
        let (u, rest) = t.split_once('u').ok_or_else(bad)?;
        let sys = rest.strip_suffix('s').ok_or_else(bad)?;
        Ok(Self {
            users: u.parse().map_err(|_| bad())?,
            systems: sys.parse().map_err(|_| bad())?,
        })
    }
}

impl TryFrom<String> for ContextSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ContextSpec> for String {
    fn from(c: ContextSpec) -> Self {
        c.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub immediate_user: String,
    /// Earlier turns, oldest first.
    pub extra: Vec<(Speaker, String)>,
    pub spec: ContextSpec,
}

impl ContextWindow {
    /// A window holding a single utterance and no history.
    pub fn single(text: impl Into<String>) -> Self {
        Self {
            immediate_user: text.into(),
            extra: Vec::new(),
            spec: ContextSpec::new(0, 0),
        }
    }

    /// All turns oldest first, the immediate user utterance last.
    pub fn turns(&self) -> impl Iterator<Item = (Speaker, &str)> {
        self.extra
            .iter()
            .map(|(s, t)| (*s, t.as_str()))
            .chain(std::iter::once((Speaker::User, self.immediate_user.as_str())))
    }
}

/// Window for the system turn at `index`: the user turn just before it plus
/// up to `spec.users` earlier user turns and `spec.systems` earlier system
/// turns.
pub fn extract_context(dialogue: &Dialogue, index: usize, spec: ContextSpec) -> Result<ContextWindow> {
    let turn = dialogue.turns.get(index).ok_or_else(|| {
        Error::Usage(format!("dialogue {} has no turn {index}", dialogue.id))
    })?;
    if turn.speaker != Speaker::System || index == 0 {
        return Err(Error::Usage(format!(
            "turn {index} of dialogue {} is not a system turn",
            dialogue.id
        )));
    }
    let immediate = &dialogue.turns[index - 1];
    if immediate.speaker != Speaker::User {
        return Err(Error::Schema {
            dialogue_id: dialogue.id.clone(),
            message: format!("turn {} should be a user turn", index - 1),
        });
    }
    let (mut users, mut systems) = (0, 0);
    let mut extra = Vec::new();
    for t in dialogue.turns[..index - 1].iter().rev() {
        if users >= spec.users && systems >= spec.systems {
            break;
        }
        let take = match t.speaker {
            Speaker::User => users < spec.users && {
                users += 1;
                true
            },
            Speaker::System => systems < spec.systems && {
                systems += 1;
                true
            },
        };
        if take {
            extra.push((t.speaker, t.text.clone()));
        }
    }
    extra.reverse();
    Ok(ContextWindow {
        immediate_user: immediate.text.clone(),
        extra,
        spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::dialogue::Turn;

    fn six_turns() -> Dialogue {
        Dialogue {
            id: "d".into(),
            turns: (0..6)
                .map(|i| {
                    if i % 2 == 0 {
                        Turn::user(format!("t{i}"))
                    } else {
                        Turn::system(format!("t{i}"), None)
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn spec_round_trips() {
        let s: ContextSpec = "5u5s".parse().unwrap();
        assert_eq!(s, ContextSpec::new(5, 5));
        assert_eq!(s.to_string(), "5u5s");
        assert!("5u".parse::<ContextSpec>().is_err());
        assert!("xu1s".parse::<ContextSpec>().is_err());
    }

    #[test]
    fn first_system_turn_has_no_history() {
        let w = extract_context(&six_turns(), 1, ContextSpec::new(5, 5)).unwrap();
        assert_eq!(w.immediate_user, "t0");
        assert!(w.extra.is_empty());
    }

    #[test]
    fn one_user_one_system() {
        let w = extract_context(&six_turns(), 5, ContextSpec::new(1, 1)).unwrap();
        assert_eq!(w.immediate_user, "t4");
        assert_eq!(
            w.extra,
            vec![(Speaker::User, "t2".to_string()), (Speaker::System, "t3".to_string())]
        );
    }

    #[test]
    fn zero_spec_is_empty() {
        let w = extract_context(&six_turns(), 5, ContextSpec::new(0, 0)).unwrap();
        assert!(w.extra.is_empty());
    }

    #[test]
    fn user_turn_index_is_usage_error() {
        assert!(matches!(
            extract_context(&six_turns(), 2, ContextSpec::new(1, 1)),
            Err(Error::Usage(_))
        ));
    }
}
