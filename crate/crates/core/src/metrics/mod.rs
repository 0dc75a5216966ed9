//! Automatic metrics: smoothed BLEU-4, exact-match Meteor, embedding
//! precision/recall/F1 over encoder token states, context fit and variation
//! size.

mod bleu;
mod embed;
mod meteor;
mod variation;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Dialogue, Speaker};
use crate::ctxencoder::ContextEncoder;
use crate::error::{Error, Result};
use crate::gens::GenItem;

pub use bleu::{bleu4, bleu4_tokens, SMOOTHING_EPSILON};
pub use embed::{context_fit, embed_score, embed_score_vectors, EmbedScore};
pub use meteor::{align, meteor, meteor_from_counts, meteor_tokens};
pub use variation::{variation_size, VariationSize};

/// Which surface form is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextMode {
    Delex,
    Lex,
}

impl TextMode {
    /// Each model is scored on the form it was trained to produce.
    pub fn for_model(model: Option<&str>) -> Self {
        match model {
            Some("sclstm") => TextMode::Delex,
            _ => TextMode::Lex,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Overrides the per-model default.
    pub mode: Option<TextMode>,
    /// Label echoed in the report, e.g. the encoder checkpoint path.
    pub encoder_label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceScores {
    pub dialogue_id: String,
    pub turn: usize,
    pub bleu4: f64,
    pub meteor: f64,
    pub embed_p: f64,
    pub embed_r: f64,
    pub embed_f1: f64,
    pub context_fit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub bleu4: f64,
    pub meteor: f64,
    pub embed_p: f64,
    pub embed_r: f64,
    pub embed_f1: f64,
    pub context_fit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: Option<String>,
    pub mode: TextMode,
    pub count: usize,
    pub means: MetricMeans,
    pub variation: VariationSize,
    pub instances: Vec<InstanceScores>,
    pub config: BTreeMap<String, serde_json::Value>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl MetricReport {
    fn from_instances(
        model: Option<String>,
        mode: TextMode,
        instances: Vec<InstanceScores>,
        variation: VariationSize,
        config: BTreeMap<String, serde_json::Value>,
    ) -> Self {
        let means = MetricMeans {
            bleu4: mean(instances.iter().map(|i| i.bleu4)),
            meteor: mean(instances.iter().map(|i| i.meteor)),
            embed_p: mean(instances.iter().map(|i| i.embed_p)),
            embed_r: mean(instances.iter().map(|i| i.embed_r)),
            embed_f1: mean(instances.iter().map(|i| i.embed_f1)),
            context_fit: mean(instances.iter().map(|i| i.context_fit)),
        };
        Self { model, mode, count: instances.len(), means, variation, instances, config }
    }

    pub const TSV_HEADER: &'static str =
        "model\tBLEU-4 (%)\tMeteor (%)\tembed-F1 (%)\tVariation size\tcontext-fit (%)";

    /// One row in the column order of the header; percentages at two decimals.
    pub fn tsv_row(&self) -> String {
        let m = &self.means;
        format!(
            "{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}/{:.2}{}\t{:.2}",
            self.model.as_deref().unwrap_or("-"),
            100.0 * m.bleu4,
            100.0 * m.meteor,
            100.0 * m.embed_f1,
            self.variation.full,
            self.variation.filtered,
            if self.variation.filtered_defined { "" } else { "*" },
            100.0 * m.context_fit,
        )
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", Self::TSV_HEADER);
        let _ = writeln!(s, "{}", self.tsv_row());
        s
    }

    /// Writes JSON, or TSV when the path ends in `.tsv`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = if path.extension().is_some_and(|e| e == "tsv") {
            self.to_tsv()
        } else {
            serde_json::to_string_pretty(self)?
        };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Thread pool honouring `CTXGEN_THREADS`.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("CTXGEN_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

struct Reference<'a> {
    user: &'a str,
    text: &'a str,
    delex: &'a str,
    da: String,
}

/// Scores the top candidate of every item against the gold turn it names.
pub fn evaluate(
    gens: &[GenItem],
    references: &[Dialogue],
    enc: &ContextEncoder,
    config: &EvalConfig,
) -> Result<MetricReport> {
    if gens.is_empty() {
        return Err(Error::Data("no generations to evaluate".into()));
    }
    let by_id: HashMap<&str, &Dialogue> = references.iter().map(|d| (d.id.as_str(), d)).collect();
    let model = gens[0].model.clone();
    let mode = config.mode.unwrap_or_else(|| TextMode::for_model(model.as_deref()));
    let mut refs = Vec::with_capacity(gens.len());
    for item in gens {
        let missing = || Error::Data(format!("no reference for {} turn {}", item.dialogue_id, item.turn));
        let d = by_id.get(item.dialogue_id.as_str()).ok_or_else(missing)?;
        let t = d.turns.get(item.turn).filter(|t| t.is_annotated_system()).ok_or_else(missing)?;
        let user = d.turns[..item.turn]
            .iter()
            .rev()
            .find(|u| u.speaker == Speaker::User)
            .ok_or_else(missing)?;
        if item.candidates.is_empty() {
            return Err(Error::Data(format!("{} turn {} has no candidates", item.dialogue_id, item.turn)));
        }
        refs.push(Reference {
            user: &user.text,
            text: &t.text,
            delex: t.delex_text.as_deref().unwrap_or(&t.text),
            da: t.da.as_ref().map(ToString::to_string).unwrap_or_default(),
        });
    }

    let pool = thread_pool()?;
    let instances: Vec<InstanceScores> = pool.install(|| {
        gens.par_iter()
            .zip(refs.par_iter())
            .map(|(item, r)| {
                let top = &item.candidates[0];
                let (cand, gold) = match mode {
                    TextMode::Delex => (top.delex_text.as_str(), r.delex),
                    TextMode::Lex => (top.text.as_str(), r.text),
                };
                let ct = tokenize(cand);
                let gt = tokenize(gold);
                let e = embed_score(cand, gold, enc)?;
                Ok(InstanceScores {
                    dialogue_id: item.dialogue_id.clone(),
                    turn: item.turn,
                    bleu4: bleu4_tokens(&ct, std::slice::from_ref(&gt)),
                    meteor: meteor_tokens(&ct, &gt),
                    embed_p: e.precision,
                    embed_r: e.recall,
                    embed_f1: e.f1,
                    context_fit: context_fit(r.user, &top.text, enc)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let pairs: Vec<(&str, &str)> = gens
        .iter()
        .zip(&refs)
        .map(|(item, r)| {
            let top = &item.candidates[0];
            let text = match mode {
                TextMode::Delex => top.delex_text.as_str(),
                TextMode::Lex => top.text.as_str(),
            };
            (r.da.as_str(), text)
        })
        .collect();
    let variation = variation_size(&pairs);

    let mut echo = BTreeMap::new();
    echo.insert("mode".into(), serde_json::to_value(mode)?);
    echo.insert("bleu_smoothing_epsilon".into(), SMOOTHING_EPSILON.into());
    echo.insert("meteor".into(), "exact-match".into());
    echo.insert("embed".into(), "embed-F1 (encoder token states)".into());
    echo.insert("encoder".into(), config.encoder_label.clone().unwrap_or_else(|| enc.vocab.hash()).into());
    Ok(MetricReport::from_instances(model, mode, instances, variation, echo))
}
