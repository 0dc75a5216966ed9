use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    finetune_reranker, pretrain_reranker, rerank_gens, save_checkpoint, synth_data, train_condlm, train_encoder,
    train_sclstm, write_json, write_report, Profile,
};
use crate::condlm::{self, CondContext, CondTrainConfig, SampleOptions};
use crate::corpus::{build_vocab, load_corpus, save_data_dir, ContextSpec, Corpus, CorpusFormat, Dialogue, Vocab};
use crate::ctxencoder::{ContextEncoder, PretrainConfig};
use crate::error::{Error, Result};
use crate::gens::{write_gens, GenItem};
use crate::metrics::{evaluate, EvalConfig, MetricMeans, MetricReport, TextMode, VariationSize};
use crate::reranker::{compute_targets, FinetuneConfig, MlmConfig};
use crate::sclstm::{self, DecodeOptions, SweepConfig, TrainConfig};
use crate::seeds::stream_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DataSource {
    Synth {
        #[serde(default)]
        spec: Option<PathBuf>,
        #[serde(default = "one")]
        seed: u64,
    },
    Prepare {
        input: PathBuf,
        #[serde(default = "multiwoz")]
        format: String,
        #[serde(default = "one_usize")]
        min_freq: usize,
    },
}

fn one() -> u64 {
    1
}

fn one_usize() -> usize {
    1
}

fn multiwoz() -> String {
    "multiwoz-json".into()
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth { spec: None, seed: 1 }
    }
}

/// Everything a pipeline run depends on. The run writes this back, fully
/// resolved, as `config.json` in its output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSource,
    /// Context window of the contextual generator.
    pub sclstm_context: ContextSpec,
    pub condlm_context: CondContext,
    /// Also train one generator per sweep context size.
    pub sweep: bool,
    pub encoder: PretrainConfig,
    pub sclstm: TrainConfig,
    pub decode: DecodeOptions,
    pub condlm: CondTrainConfig,
    pub sample: SampleOptions,
    pub mlm: MlmConfig,
    pub finetune: FinetuneConfig,
    /// Standardise head outputs before summing at selection time.
    pub zscore: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Desk,
            seed: 1,
            out_dir: PathBuf::from("run"),
            data: DataSource::default(),
            sclstm_context: "5u5s".parse().expect("valid spec"),
            condlm_context: CondContext::Utterance,
            sweep: true,
            encoder: PretrainConfig::default(),
            sclstm: TrainConfig::default(),
            decode: DecodeOptions::default(),
            condlm: CondTrainConfig::default(),
            sample: SampleOptions::default(),
            mlm: MlmConfig::default(),
            finetune: FinetuneConfig::default(),
            zscore: false,
        }
    }
}

/// One line of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub mode: TextMode,
    pub means: MetricMeans,
    pub variation: VariationSize,
}

impl SummaryRow {
    fn from_report(name: &str, r: &MetricReport) -> Self {
        Self { name: name.into(), mode: r.mode, means: r.means.clone(), variation: r.variation.clone() }
    }

    pub fn tsv(&self) -> String {
        let mut r = MetricReport {
            model: Some(self.name.clone()),
            mode: self.mode,
            count: 0,
            means: self.means.clone(),
            variation: self.variation.clone(),
            instances: Vec::new(),
            config: Default::default(),
        };
        r.model = Some(self.name.clone());
        r.tsv_row()
    }
}

/// Mean over items of the six summed targets of the first candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionComparison {
    pub top1_summed_target: f64,
    pub reranked_summed_target: f64,
    pub items: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub selection: SelectionComparison,
    /// Published full-scale values, for reference only.
    pub annotations: BTreeMap<String, String>,
}

fn reference_annotations() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("reference SC-LSTM variation size (full scale)".into(), "1.00/1.00".into()),
        ("reference CSC-LSTM variation size (full scale)".into(), "1.35/2.11".into()),
        ("reference CSC-GPT to re-ranked BLEU-4 (full scale)".into(), "33.41 -> 34.70".into()),
    ])
}

impl Summary {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\n", MetricReport::TSV_HEADER);
        for r in &self.rows {
            s.push_str(&r.tsv());
            s.push('\n');
        }
        s.push_str(&format!(
            "# summed target over {} items: top-1 {:.4}, reranked {:.4}\n",
            self.selection.items, self.selection.top1_summed_target, self.selection.reranked_summed_target
        ));
        s
    }
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    f().map_err(|e| Error::Stage { stage: name.into(), source: Box::new(e) })
}

/// Mean summed target of each item's first candidate against its gold turn.
pub fn mean_summed_target(gens: &[GenItem], refs: &[Dialogue], enc: &ContextEncoder) -> Result<f64> {
    let by_id: HashMap<&str, &Dialogue> = refs.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut total = 0.0;
    for g in gens {
        let d = by_id
            .get(g.dialogue_id.as_str())
            .ok_or_else(|| Error::Data(format!("no reference for {}", g.dialogue_id)))?;
        let c = g.candidates.first().ok_or_else(|| Error::Data(format!("{} turn {} has no candidates", g.dialogue_id, g.turn)))?;
        total += compute_targets(&d.turns[g.turn - 1].text, &c.text, &d.turns[g.turn].text, enc)?.sum();
    }
    Ok(total / gens.len().max(1) as f64)
}

fn load_data(cfg: &RunConfig) -> Result<(Corpus, Vocab)> {
    match &cfg.data {
        DataSource::Synth { spec, seed } => synth_data(spec.as_deref(), *seed),
        DataSource::Prepare { input, format, min_freq } => {
            let fmt: CorpusFormat = format.parse()?;
            let corpus = Corpus::from_loaded(load_corpus(input, fmt)?);
            let vocab = build_vocab(&corpus.train, *min_freq)?;
            Ok((corpus, vocab))
        }
    }
}

fn eval_and_save(dir: &Path, name: &str, gens: &[GenItem], test: &[Dialogue], enc: &ContextEncoder) -> Result<MetricReport> {
    write_gens(&dir.join("gens").join(format!("{name}.json")), gens)?;
    let report = evaluate(gens, test, enc, &EvalConfig::default())?;
    let mut named = report.clone();
    named.model = Some(name.into());
    write_report(&dir.join("reports").join(name), &named, &named.to_tsv())?;
    Ok(report)
}

/// Runs every stage and returns the comparison rows.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Vec<SummaryRow>> {
    let dir = cfg.out_dir.as_path();
    for sub in ["", "gens", "reports", "checkpoints"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    write_json(&dir.join("config.json"), cfg)?;
    let seed = cfg.seed;

    let (corpus, vocab) = stage("data", || {
        let (c, v) = load_data(cfg)?;
        save_data_dir(&dir.join("data"), &c, &v)?;
        Ok((c, v))
    })?;
    let ck = |name: &str| dir.join("checkpoints").join(format!("{name}.ckpt"));

    let enc = stage("encoder", || {
        let e = train_encoder(&corpus, &vocab, cfg.profile, &cfg.encoder, seed)?;
        save_checkpoint(&e.to_checkpoint()?, &ck("encoder"))?;
        Ok(e)
    })?;

    let mut rows = Vec::new();
    let spec = cfg.sclstm_context;
    for (name, context, row) in [("sclstm-none", None, "SC-LSTM"), ("sclstm-ctx", Some(spec), "CSC-LSTM")] {
        let report = stage(name, || {
            let e = context.map(|_| &enc);
            let m = train_sclstm(&corpus, &vocab, Some(&enc), context, cfg.profile, &cfg.sclstm, seed)?;
            save_checkpoint(&m.to_checkpoint()?, &ck(name))?;
            let gens = sclstm::decode_dialogues(&m, e, &corpus.test, &cfg.decode)?;
            eval_and_save(dir, name, &gens, &corpus.test, &enc)
        })?;
        rows.push(SummaryRow::from_report(row, &report));
    }

    let mut ctx_model = None;
    for (name, context, row) in [("condlm-none", CondContext::None, "SC-GPT-analogue"), ("condlm-ctx", cfg.condlm_context, "CSC-GPT-analogue")] {
        let (report, model, gens) = stage(name, || {
            let m = train_condlm(&corpus, &vocab, context, cfg.profile, &cfg.condlm, seed)?;
            save_checkpoint(&m.to_checkpoint()?, &ck(name))?;
            let gens = condlm::generate_dialogues(&m, &corpus.test, &cfg.sample, stream_seed(seed, "sample-test"))?;
            Ok((eval_and_save(dir, name, &gens, &corpus.test, &enc)?, m, gens))
        })?;
        rows.push(SummaryRow::from_report(row, &report));
        ctx_model = Some((model, gens));
    }
    let (ctx_lm, ctx_gens) = ctx_model.expect("two condlm stages ran");

    let (reranked, selection) = stage("reranker", || {
        let m = pretrain_reranker(&corpus, &vocab, cfg.profile, &cfg.mlm, seed)?;
        let mut pool: Vec<Dialogue> = corpus.train.clone();
        pool.extend(corpus.dev.iter().cloned());
        let train_gens = condlm::generate_dialogues(&ctx_lm, &pool, &cfg.sample, stream_seed(seed, "sample-rerank"))?;
        let m = finetune_reranker(m, &corpus, &train_gens, &enc, &cfg.finetune, seed)?;
        save_checkpoint(&m.to_checkpoint()?, &ck("reranker"))?;
        let gens = rerank_gens(&m, &ctx_gens, &corpus.test, cfg.zscore)?;
        let report = eval_and_save(dir, "reranked", &gens, &corpus.test, &enc)?;
        let selection = SelectionComparison {
            top1_summed_target: mean_summed_target(&ctx_gens, &corpus.test, &enc)?,
            reranked_summed_target: mean_summed_target(&gens, &corpus.test, &enc)?,
            items: gens.len(),
        };
        Ok((report, selection))
    })?;
    rows.push(SummaryRow::from_report("reranked", &reranked));

    if cfg.sweep {
        stage("sweep", || {
            let base = cfg.profile.sclstm(None, 0);
            let sweep = SweepConfig {
                d_w: base.d_w,
                d_g: base.d_g,
                alpha: base.alpha,
                train: cfg.sclstm.clone(),
                decode: cfg.decode.clone(),
                seed: stream_seed(seed, "sclstm"),
                ..Default::default()
            };
            let report = sclstm::context_sweep(&corpus, &vocab, &enc, &sweep)?;
            write_report(&dir.join("sweep"), &report, &report.to_tsv())
        })?;
    }

    let summary = Summary { rows: rows.clone(), selection, annotations: reference_annotations() };
    write_report(&dir.join("summary"), &summary, &summary.to_tsv())?;
    Ok(rows)
}
