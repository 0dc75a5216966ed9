//! Generation files: ranked candidates per test turn, shared by the
//! generators, the evaluator and the re-ranker.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub delex_text: String,
    pub logprob: f64,
    /// Re-ranker selection score, when re-ranked.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenItem {
    pub dialogue_id: String,
    pub turn: usize,
    /// Canonical act string of the gold turn.
    pub da: String,
    pub candidates: Vec<Candidate>,
    /// The user utterance the turn answers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    /// Producing model kind, e.g. `sclstm` or `condlm`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

pub fn write_gens(path: &Path, items: &[GenItem]) -> Result<()> {
    let json = serde_json::to_string_pretty(items)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_gens(path: &Path) -> Result<Vec<GenItem>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        source_name: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_optional_fields_absent() {
        let items = vec![GenItem {
            dialogue_id: "d1".into(),
            turn: 1,
            da: "hotel{request(area=?)}".into(),
            candidates: vec![Candidate {
                text: "Which area?".into(),
                delex_text: "Which area?".into(),
                logprob: -1.5,
                score: None,
            }],
            user: None,
            model: None,
        }];
        let json = serde_json::to_string(&items).unwrap();
        assert!(!json.contains("score") && !json.contains("model") && !json.contains("user"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.json");
        write_gens(&p, &items).unwrap();
        assert_eq!(read_gens(&p).unwrap(), items);
    }
}
