use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::da::DialogueAct;
use crate::corpus::dialogue::{Dialogue, Speaker, Turn};
use crate::corpus::vocab::Vocab;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusFormat {
    /// Normalised MultiWOZ export; system turns may lack a dialogue act.
    MultiwozJson,
    /// Synthetic corpus; every system turn must be annotated.
    ToyJson,
}

impl FromStr for CorpusFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiwoz-json" => Ok(Self::MultiwozJson),
            "toy-json" => Ok(Self::ToyJson),
            _ => Err(Error::Usage(format!(
                "unknown corpus format {s:?} (expected multiwoz-json or toy-json)"
            ))),
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MultiwozJson => "multiwoz-json",
            Self::ToyJson => "toy-json",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawCorpus {
    dialogues: Vec<RawDialogue>,
}

#[derive(Serialize, Deserialize)]
struct RawDialogue {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    turns: Vec<RawTurn>,
}

#[derive(Serialize, Deserialize)]
struct RawTurn {
    speaker: Speaker,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    da: Option<DialogueAct>,
}

#[derive(Clone, Debug)]
pub struct LoadedCorpus {
    pub dialogues: Vec<Dialogue>,
    /// Split named in the file, if any, parallel to `dialogues`.
    pub splits: Vec<Option<Split>>,
    /// System turns without a dialogue act. They stay in the dialogue as
    /// history but are never used as generation targets.
    pub warnings: usize,
}

pub fn parse_corpus(source_name: &str, json: &str, format: CorpusFormat) -> Result<LoadedCorpus> {
    let raw: RawCorpus = serde_json::from_str(json).map_err(|e| Error::Parse {
        source_name: source_name.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut out = LoadedCorpus {
        dialogues: Vec::with_capacity(raw.dialogues.len()),
        splits: Vec::with_capacity(raw.dialogues.len()),
        warnings: 0,
    };
    for d in raw.dialogues {
        let mut turns = Vec::with_capacity(d.turns.len());
        for (i, t) in d.turns.into_iter().enumerate() {
            let turn = match t.speaker {
                Speaker::User => Turn::user(t.text),
                Speaker::System => {
                    if t.da.is_none() {
                        if format == CorpusFormat::ToyJson {
                            return Err(Error::Schema {
                                dialogue_id: d.id,
                                message: format!("system turn {i} has no dialogue act"),
                            });
                        }
                        out.warnings += 1;
                    }
                    Turn::system(t.text, t.da)
                }
            };
            turns.push(turn);
        }
        let dialogue = Dialogue { id: d.id, turns };
        dialogue.validate()?;
        out.dialogues.push(dialogue);
        out.splits.push(d.split);
    }
    if out.warnings > 0 {
        log::warn!(
            "{source_name}: {} system turn(s) without a dialogue act kept as history only",
            out.warnings
        );
    }
    Ok(out)
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<LoadedCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&path.display().to_string(), &text, format)
}

pub fn corpus_to_json(dialogues: &[Dialogue]) -> Result<String> {
    let raw = RawCorpus {
        dialogues: dialogues
            .iter()
            .map(|d| RawDialogue {
                id: d.id.clone(),
                split: None,
                turns: d
                    .turns
                    .iter()
                    .map(|t| RawTurn {
                        speaker: t.speaker,
                        text: t.text.clone(),
                        da: t.da.clone(),
                    })
                    .collect(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&raw)?)
}

/// Train/dev/test dialogues.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<Dialogue>,
    pub dev: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[Dialogue] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<Dialogue> {
        match s {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &Dialogue> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    /// Distribute loaded dialogues by their declared split. Undeclared ones
    /// go by a hash of the id: 10% test, 10% dev, the rest train.
    pub fn from_loaded(loaded: LoadedCorpus) -> Self {
        let mut c = Corpus::default();
        for (d, s) in loaded.dialogues.into_iter().zip(loaded.splits) {
            let s = s.unwrap_or_else(|| hashed_split(&d.id));
            c.split_mut(s).push(d);
        }
        c
    }
}

fn hashed_split(id: &str) -> Split {
    let digest = Sha256::digest(id.as_bytes());
    match digest[0] % 10 {
        0 => Split::Test,
        1 => Split::Dev,
        _ => Split::Train,
    }
}

pub const VOCAB_FILE: &str = "vocab.json";

/// Write `train.json`, `dev.json`, `test.json` and `vocab.json` into `dir`.
pub fn save_data_dir(dir: &Path, corpus: &Corpus, vocab: &Vocab) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in Split::ALL {
        let path = dir.join(format!("{}.json", s.name()));
        fs::write(&path, corpus_to_json(corpus.split(s))?).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(VOCAB_FILE);
    fs::write(&path, serde_json::to_string_pretty(vocab)?).map_err(|e| Error::io(&path, e))
}

pub fn load_data_dir(dir: &Path) -> Result<(Corpus, Vocab)> {
    let mut corpus = Corpus::default();
    for s in Split::ALL {
        let loaded = load_corpus(&dir.join(format!("{}.json", s.name())), CorpusFormat::MultiwozJson)?;
        *corpus.split_mut(s) = loaded.dialogues;
    }
    let path = dir.join(VOCAB_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let vocab: Vocab = serde_json::from_str(&text)?;
    Ok((corpus, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = r#"{"dialogues":[
      {"id":"a","turns":[{"speaker":"user","text":"hi"},
        {"speaker":"system","text":"It is 4 stars.","da":{"domain":"hotel","intent":"inform","slots":[["stars","4"]]}}]},
      {"id":"b","turns":[{"speaker":"user","text":"bye"},
        {"speaker":"system","text":"Bye.","da":{"domain":"general","intent":"bye","slots":[]}}]}
    ]}"#;

    #[test]
    fn toy_fixture_loads() {
        let c = parse_corpus("two", TWO, CorpusFormat::ToyJson).unwrap();
        assert_eq!(c.dialogues.len(), 2);
        assert_eq!(c.warnings, 0);
        assert_eq!(c.dialogues[0].turns[1].delex_text.as_deref(), Some("It is [hotel_stars] stars."));
    }

    #[test]
    fn parse_error_has_position() {
        match parse_corpus("broken", "{\"dialogues\": [\n  {\"id\": }", CorpusFormat::ToyJson) {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!(line, 2);
                assert!(column > 0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_act_is_strict_for_toy_and_counted_for_multiwoz() {
        let json = r#"{"dialogues":[{"id":"x","turns":[{"speaker":"user","text":"a"},{"speaker":"system","text":"b"}]}]}"#;
        assert!(matches!(
            parse_corpus("x", json, CorpusFormat::ToyJson),
            Err(Error::Schema { .. })
        ));
        assert_eq!(parse_corpus("x", json, CorpusFormat::MultiwozJson).unwrap().warnings, 1);
    }

    #[test]
    fn json_round_trip() {
        let c = parse_corpus("two", TWO, CorpusFormat::ToyJson).unwrap();
        let back = parse_corpus("again", &corpus_to_json(&c.dialogues).unwrap(), CorpusFormat::ToyJson).unwrap();
        assert_eq!(back.dialogues, c.dialogues);
    }
}
