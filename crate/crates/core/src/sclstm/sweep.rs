use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, extract_context, relexicalize_lenient, slot_map_from_da, ContextSpec, Corpus, Dialogue};
use crate::ctxencoder::ContextEncoder;
use crate::error::{Error, Result};
use crate::gens::{Candidate, GenItem};
use crate::metrics::{evaluate, thread_pool, EvalConfig, TextMode};
use crate::sclstm::{beam_decode, build_examples, train, DecodeOptions, Sclstm, SclstmConfig, TrainConfig};

/// Beam-decodes every annotated system turn of `dialogues`.
pub fn decode_dialogues(
    model: &Sclstm,
    encoder: Option<&ContextEncoder>,
    dialogues: &[Dialogue],
    opts: &DecodeOptions,
) -> Result<Vec<GenItem>> {
    let spec = model.config.context;
    if spec.is_some() != encoder.is_some() {
        return Err(Error::Usage("a context encoder is required exactly when the model uses context".into()));
    }
    let jobs: Vec<(&Dialogue, usize)> = dialogues.iter().flat_map(|d| d.target_indices().map(move |i| (d, i))).collect();
    let pool = thread_pool()?;
    pool.install(|| {
        jobs.par_iter()
            .map(|&(d, i)| {
                let da = d.turns[i].da.as_ref().expect("target turns carry an act");
                let ctx = match (encoder, spec) {
                    (Some(enc), Some(spec)) => Some(enc.encode(&extract_context(d, i, spec)?)?),
                    _ => None,
                };
                let hyps = beam_decode(model, model.da_index(da)?, ctx.as_deref(), opts)?;
                let slots = slot_map_from_da(da);
                let candidates = hyps
                    .iter()
                    .map(|h| {
                        let delex = detokenize(&model.vocab.decode(&h.tokens));
                        Candidate {
                            text: relexicalize_lenient(&delex, &slots),
                            delex_text: delex,
                            logprob: h.logprob,
                            score: None,
                        }
                    })
                    .collect();
                Ok(GenItem {
                    dialogue_id: d.id.clone(),
                    turn: i,
                    da: da.to_string(),
                    candidates,
                    user: Some(d.turns[i - 1].text.clone()),
                    model: Some(super::CHECKPOINT_KIND.into()),
                })
            })
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub specs: Vec<ContextSpec>,
    /// Also train the zero-initialised baseline.
    pub baseline: bool,
    pub d_w: usize,
    pub d_g: usize,
    pub alpha: f64,
    pub train: TrainConfig,
    pub decode: DecodeOptions,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            specs: ContextSpec::sweep(),
            baseline: true,
            d_w: 64,
            d_g: 64,
            alpha: 1.0,
            train: TrainConfig::default(),
            decode: DecodeOptions::default(),
            seed: 0,
        }
    }
}

pub const SWEEP_ROWS: [&str; 4] = ["BLEU-4", "Meteor", "embed-F1", "Variation size"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// Column labels: context specs, then `none` for the baseline if run.
    pub columns: Vec<String>,
    /// Metric name to one value per column.
    pub rows: BTreeMap<String, Vec<f64>>,
    pub dev_loss: Vec<f64>,
    /// Published full-scale values, for reference only.
    pub annotations: BTreeMap<String, String>,
}

impl SweepReport {
    pub fn value(&self, metric: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.get(metric).map(|r| r[c])
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("metric\t{}\n", self.columns.join("\t"));
        for name in SWEEP_ROWS {
            let vals: Vec<String> = self.rows[name]
                .iter()
                .map(|v| if name == "Variation size" { format!("{v:.2}") } else { format!("{:.2}", 100.0 * v) })
                .collect();
            s.push_str(&format!("{name}\t{}\n", vals.join("\t")));
        }
        s
    }
}

/// Trains and evaluates one generator per context size on the test split,
/// all sharing the same initialisation seed.
pub fn context_sweep(
    corpus: &Corpus,
    vocab: &crate::corpus::Vocab,
    encoder: &ContextEncoder,
    cfg: &SweepConfig,
) -> Result<SweepReport> {
    let inventory = crate::corpus::da_inventory(&corpus.train);
    let mut columns: Vec<Option<ContextSpec>> = cfg.specs.iter().copied().map(Some).collect();
    if cfg.baseline {
        columns.push(None);
    }
    let mut report = SweepReport {
        columns: columns.iter().map(|c| super::train::spec_label(*c)).collect(),
        rows: SWEEP_ROWS.iter().map(|r| (r.to_string(), Vec::new())).collect(),
        dev_loss: Vec::new(),
        annotations: BTreeMap::from([
            ("reference 5u5s BLEU-4 (full scale)".into(), "29.79".into()),
            ("reference 5u5s variation size (full scale)".into(), "2.11".into()),
        ]),
    };
    for spec in columns {
        let enc = spec.map(|_| encoder);
        let config = SclstmConfig {
            d_w: cfg.d_w,
            d_g: cfg.d_g,
            d_c: spec.map(|_| encoder.d_c()),
            alpha: cfg.alpha,
            context: spec,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Sclstm::new(config, vocab.clone(), inventory.clone(), &mut rng)?;
        let tr = build_examples(&model, &corpus.train, enc, cfg.train.max_target_len)?;
        let dv = build_examples(&model, &corpus.dev, enc, cfg.train.max_target_len)?;
        let (model, log) = train(model, &tr, &dv, &cfg.train, cfg.seed)?;
        let gens = decode_dialogues(&model, enc, &corpus.test, &cfg.decode)?;
        let rep = evaluate(&gens, &corpus.test, encoder, &EvalConfig { mode: Some(TextMode::Delex), encoder_label: None })?;
        log::info!("sweep {}: bleu {:.4}", super::train::spec_label(spec), rep.means.bleu4);
        let best = log.dev_loss.iter().copied().fold(log.initial_dev_loss, f64::min);
        report.dev_loss.push(best);
        let push = |rows: &mut BTreeMap<String, Vec<f64>>, k: &str, v: f64| rows.get_mut(k).unwrap().push(v);
        push(&mut report.rows, "BLEU-4", rep.means.bleu4);
        push(&mut report.rows, "Meteor", rep.means.meteor);
        push(&mut report.rows, "embed-F1", rep.means.embed_f1);
        push(&mut report.rows, "Variation size", rep.variation.filtered);
    }
    Ok(report)
}
