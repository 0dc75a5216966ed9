//! Command-line front end.

mod demo;
mod pipeline;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condlm::{self, CondContext, CondLm, CondLmConfig, CondTrainConfig, SampleOptions};
use crate::corpus::{
    build_vocab, da_inventory, load_corpus, load_data_dir, save_data_dir, synthesize_toy_corpus, ContextSpec, Corpus,
    CorpusFormat, Dialogue, ToyGrammar,
};
use crate::ctxencoder::{pretrain_ranker, ContextEncoder, EncoderConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::gens::{read_gens, write_gens, GenItem};
use crate::metrics::{evaluate, EvalConfig, TextMode};
use crate::numkernel::Checkpoint;
use crate::reranker::{self, FinetuneConfig, MlmConfig, Reranker, RerankerConfig};
use crate::sclstm::{self, DecodeOptions, Sclstm, SclstmConfig, TrainConfig};
use crate::seeds::stream_seed;

pub use demo::{run_demo, DemoModels, DemoSession, TurnOutput};
pub use pipeline::{run_pipeline, RunConfig, SummaryRow};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl Profile {
    pub fn encoder(self) -> EncoderConfig {
        match self {
            Profile::Desk => EncoderConfig::desk(),
            Profile::Paper => EncoderConfig::paper(),
        }
    }

    pub fn sclstm(self, context: Option<ContextSpec>, d_c: usize) -> SclstmConfig {
        match self {
            Profile::Desk => SclstmConfig::desk(context, d_c),
            Profile::Paper => SclstmConfig::paper(context, d_c),
        }
    }

    pub fn condlm(self, context: CondContext) -> CondLmConfig {
        match self {
            Profile::Desk => CondLmConfig::desk(context),
            Profile::Paper => CondLmConfig::paper(context),
        }
    }

    pub fn reranker(self) -> RerankerConfig {
        match self {
            Profile::Desk => RerankerConfig::desk(),
            Profile::Paper => RerankerConfig::paper(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ctxgen", version, about = "Contextual response generation for task-oriented dialogue")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corpus ingestion and synthesis.
    #[command(subcommand)]
    Data(DataCmd),
    /// Context encoder.
    #[command(subcommand)]
    Encoder(EncoderCmd),
    /// Semantically conditioned LSTM generator.
    #[command(subcommand)]
    Sclstm(SclstmCmd),
    /// Conditional transformer LM.
    #[command(subcommand)]
    Condlm(CondlmCmd),
    /// Score a generation file against gold references.
    Eval(EvalArgs),
    /// Candidate re-ranker.
    #[command(subcommand)]
    Rerank(RerankCmd),
    /// Run every stage from one config file.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
    /// Interactive side-by-side comparison.
    Demo(DemoArgs),
}

#[derive(Debug, Subcommand)]
pub enum DataCmd {
    Prepare {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "multiwoz-json")]
        format: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
    },
    Synth {
        /// Grammar file; the built-in grammar when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum EncoderCmd {
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Profile::Desk)]
        profile: Profile,
    },
}

#[derive(Debug, Subcommand)]
pub enum SclstmCmd {
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `NuNs` or `none`.
        #[arg(long, default_value = "none")]
        context: String,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Profile::Desk)]
        profile: Profile,
    },
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        #[arg(long, default_value_t = 60)]
        max_len: usize,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Profile::Desk)]
        profile: Profile,
    },
}

#[derive(Debug, Subcommand)]
pub enum CondlmCmd {
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "0u0s")]
        context: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Profile::Desk)]
        profile: Profile,
    },
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        #[arg(long, default_value_t = 0.9)]
        top_p: f64,
        #[arg(long, default_value_t = 60)]
        max_len: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    gens: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    encoder: PathBuf,
    /// `.tsv` for a table row, JSON otherwise.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the form chosen from the generating model.
    #[arg(long, value_parser = ["delex", "lex"])]
    mode: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum RerankCmd {
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Profile::Desk)]
        profile: Profile,
    },
    Finetune {
        #[arg(long)]
        gens: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        /// Pretrained re-ranker to start from; fresh weights when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Profile::Desk)]
        profile: Profile,
    },
    Select {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        gens: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Standardise each head by its training statistics before summing.
        #[arg(long)]
        zscore: bool,
        /// Data directory to resolve user turns for items that do not
        /// record them.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long)]
    sclstm: PathBuf,
    /// Zero-context generator shown alongside; optional.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    condlm: PathBuf,
    #[arg(long)]
    reranker: PathBuf,
    #[arg(long)]
    encoder: PathBuf,
}

pub fn load_encoder(path: &Path) -> Result<ContextEncoder> {
    ContextEncoder::from_checkpoint(Checkpoint::load(path)?)
}

fn parse_spec(s: &str) -> Result<Option<ContextSpec>> {
    if s == "none" {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `stem.json` and `stem.tsv` next to `path`, or only the named form
/// when `path` already has a `.json` or `.tsv` extension.
fn write_report<T: Serialize>(path: &Path, value: &T, tsv: &str) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str());
    if ext != Some("tsv") {
        write_json(&path.with_extension("json"), value)?;
    }
    if ext != Some("json") {
        let p = path.with_extension("tsv");
        std::fs::write(&p, tsv).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    ck.save(path)
}

pub fn synth_data(spec: Option<&Path>, seed: u64) -> Result<(Corpus, crate::corpus::Vocab)> {
    let grammar = match spec {
        Some(p) => ToyGrammar::from_json(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => ToyGrammar::default_grammar(),
    };
    let corpus = synthesize_toy_corpus(&grammar, seed)?;
    let vocab = build_vocab(&corpus.train, 1)?;
    Ok((corpus, vocab))
}

pub fn train_encoder(corpus: &Corpus, vocab: &crate::corpus::Vocab, profile: Profile, pcfg: &PretrainConfig, seed: u64) -> Result<ContextEncoder> {
    let (enc, log) = pretrain_ranker(&corpus.train, &corpus.dev, vocab, &profile.encoder(), pcfg, stream_seed(seed, "encoder"))?;
    log::info!("encoder dev MRR {:.4} -> best epoch {}", log.initial_dev_mrr, log.best_epoch);
    Ok(enc)
}

pub fn train_sclstm(
    corpus: &Corpus,
    vocab: &crate::corpus::Vocab,
    encoder: Option<&ContextEncoder>,
    context: Option<ContextSpec>,
    profile: Profile,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<Sclstm> {
    let enc = match (context, encoder) {
        (Some(_), None) => return Err(Error::Usage("a contextual generator needs --encoder".into())),
        (Some(_), e) => e,
        (None, _) => None,
    };
    let d_c = enc.map_or(0, ContextEncoder::d_c);
    let s = stream_seed(seed, "sclstm");
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let model = Sclstm::new(profile.sclstm(context, d_c), vocab.clone(), da_inventory(&corpus.train), &mut rng)?;
    let tr = sclstm::build_examples(&model, &corpus.train, enc, tcfg.max_target_len)?;
    let dv = sclstm::build_examples(&model, &corpus.dev, enc, tcfg.max_target_len)?;
    let (model, log) = sclstm::train(model, &tr, &dv, tcfg, s)?;
    log::info!("sclstm {}: best epoch {}", sclstm::spec_label(context), log.best_epoch);
    Ok(model)
}

pub fn train_condlm(
    corpus: &Corpus,
    vocab: &crate::corpus::Vocab,
    context: CondContext,
    profile: Profile,
    tcfg: &CondTrainConfig,
    seed: u64,
) -> Result<CondLm> {
    let s = stream_seed(seed, "condlm");
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let model = CondLm::new(profile.condlm(context), vocab.clone(), &mut rng)?;
    let tr = condlm::triplets(vocab, &corpus.train, context)?;
    let dv = condlm::triplets(vocab, &corpus.dev, context)?;
    let (model, log) = condlm::train(model, &tr, &dv, tcfg, s)?;
    log::info!("condlm: best epoch {}", log.best_epoch);
    Ok(model)
}

pub fn pretrain_reranker(corpus: &Corpus, vocab: &crate::corpus::Vocab, profile: Profile, cfg: &MlmConfig, seed: u64) -> Result<Reranker> {
    let s = stream_seed(seed, "rerank-mlm");
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let model = Reranker::new(profile.reranker(), vocab.clone(), &mut rng)?;
    let tr = model.pair_sequences(&corpus.train);
    let dv = model.pair_sequences(&corpus.dev);
    let (model, log) = reranker::mlm_pretrain(model, &tr, &dv, cfg, s)?;
    log::info!(
        "mlm dev accuracy {:.4} (unigram baseline {:.4})",
        log.dev_accuracy.get(log.best_epoch.wrapping_sub(1)).copied().unwrap_or(log.initial_dev_accuracy),
        log.unigram_baseline
    );
    Ok(model)
}

/// Fine-tunes on candidates for train dialogues, early-stopping on dev
/// dialogues; items for other dialogues are ignored.
pub fn finetune_reranker(
    model: Reranker,
    corpus: &Corpus,
    gens: &[GenItem],
    encoder: &ContextEncoder,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Reranker> {
    let ids = |ds: &[Dialogue]| ds.iter().map(|d| d.id.clone()).collect::<std::collections::HashSet<_>>();
    let (train_ids, dev_ids) = (ids(&corpus.train), ids(&corpus.dev));
    let pick = |keep: &std::collections::HashSet<String>| -> Vec<GenItem> {
        gens.iter().filter(|g| keep.contains(&g.dialogue_id)).cloned().collect()
    };
    let tr = reranker::clean_candidates(&corpus.train, &pick(&train_ids), encoder)?;
    let dv = reranker::clean_candidates(&corpus.dev, &pick(&dev_ids), encoder)?;
    let (tr, dv) = (model.encode_examples(&tr), model.encode_examples(&dv));
    let (model, log) = reranker::finetune_regression(model, &tr, &dv, cfg, stream_seed(seed, "rerank-finetune"))?;
    log::info!("rerank fine-tune: dev loss {:.4} -> best epoch {}", log.initial_dev_loss, log.best_epoch);
    Ok(model)
}

/// Reorders each item's candidates by summed head score, best first, and
/// attaches the scores. The user turn comes from the item or, failing
/// that, from `references`.
pub fn rerank_gens(model: &Reranker, gens: &[GenItem], references: &[Dialogue], zscore: bool) -> Result<Vec<GenItem>> {
    let by_id: std::collections::HashMap<&str, &Dialogue> = references.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut out = Vec::with_capacity(gens.len());
    for item in gens {
        let u = match (&item.user, by_id.get(item.dialogue_id.as_str())) {
            (Some(u), _) => u.clone(),
            (None, Some(d)) if item.turn > 0 && item.turn < d.turns.len() => d.turns[item.turn - 1].text.clone(),
            _ => return Err(Error::Data(format!("no user turn for {} turn {}", item.dialogue_id, item.turn))),
        };
        let texts: Vec<&str> = item.candidates.iter().map(|c| c.text.as_str()).collect();
        let (_, scores) = model.rerank(&u, &texts, zscore)?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let mut next = item.clone();
        next.candidates = order
            .iter()
            .map(|&i| {
                let mut c = item.candidates[i].clone();
                c.score = Some(scores[i]);
                c
            })
            .collect();
        out.push(next);
    }
    Ok(out)
}

fn load_dialogues(path: &Path) -> Result<Vec<Dialogue>> {
    Ok(load_corpus(path, CorpusFormat::MultiwozJson)?.dialogues)
}

fn eval_mode(s: Option<&str>) -> Option<TextMode> {
    match s {
        Some("delex") => Some(TextMode::Delex),
        Some("lex") => Some(TextMode::Lex),
        _ => None,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Data(DataCmd::Prepare { input, format, out, min_freq }) => {
            let loaded = load_corpus(&input, format.parse()?)?;
            if loaded.warnings > 0 {
                log::warn!("{} system turns without a dialogue act kept as history only", loaded.warnings);
            }
            let corpus = Corpus::from_loaded(loaded);
            let vocab = build_vocab(&corpus.train, min_freq)?;
            save_data_dir(&out, &corpus, &vocab)
        }
        Command::Data(DataCmd::Synth { spec, seed, out }) => {
            let (corpus, vocab) = synth_data(spec.as_deref(), seed)?;
            save_data_dir(&out, &corpus, &vocab)
        }
        Command::Encoder(EncoderCmd::Pretrain { data, out, seed, profile }) => {
            let (corpus, vocab) = load_data_dir(&data)?;
            let enc = train_encoder(&corpus, &vocab, profile, &PretrainConfig::default(), seed)?;
            save_checkpoint(&enc.to_checkpoint()?, &out)
        }
        Command::Sclstm(SclstmCmd::Train { data, context, encoder, out, seed, profile }) => {
            let (corpus, vocab) = load_data_dir(&data)?;
            let enc = encoder.as_deref().map(load_encoder).transpose()?;
            let model = train_sclstm(&corpus, &vocab, enc.as_ref(), parse_spec(&context)?, profile, &TrainConfig::default(), seed)?;
            save_checkpoint(&model.to_checkpoint()?, &out)
        }
        Command::Sclstm(SclstmCmd::Decode { model, encoder, beam, max_len, input, out }) => {
            let model = Sclstm::from_checkpoint(Checkpoint::load(&model)?)?;
            let enc = if model.is_contextual() {
                let p = encoder.ok_or_else(|| Error::Usage("this generator uses context; pass --encoder".into()))?;
                Some(load_encoder(&p)?)
            } else {
                None
            };
            let opts = DecodeOptions { beam, max_len, ..Default::default() };
            let gens = sclstm::decode_dialogues(&model, enc.as_ref(), &load_dialogues(&input)?, &opts)?;
            write_gens(&out, &gens)
        }
        Command::Sclstm(SclstmCmd::Sweep { data, encoder, out, seed, profile }) => {
            let (corpus, vocab) = load_data_dir(&data)?;
            let enc = load_encoder(&encoder)?;
            let base = profile.sclstm(None, 0);
            let cfg = sclstm::SweepConfig {
                d_w: base.d_w,
                d_g: base.d_g,
                alpha: base.alpha,
                seed: stream_seed(seed, "sclstm"),
                ..Default::default()
            };
            let report = sclstm::context_sweep(&corpus, &vocab, &enc, &cfg)?;
            write_report(&out, &report, &report.to_tsv())
        }
        Command::Condlm(CondlmCmd::Train { data, context, out, seed, profile }) => {
            let (corpus, vocab) = load_data_dir(&data)?;
            let model = train_condlm(&corpus, &vocab, context.parse()?, profile, &CondTrainConfig::default(), seed)?;
            save_checkpoint(&model.to_checkpoint()?, &out)
        }
        Command::Condlm(CondlmCmd::Generate { model, n, top_k, top_p, max_len, seed, input, out }) => {
            let model = CondLm::from_checkpoint(Checkpoint::load(&model)?)?;
            let opts = SampleOptions { n, top_k, top_p, max_len, ..Default::default() };
            let gens = condlm::generate_dialogues(&model, &load_dialogues(&input)?, &opts, seed)?;
            write_gens(&out, &gens)
        }
        Command::Eval(a) => {
            let (corpus, _) = load_data_dir(&a.data)?;
            let enc = load_encoder(&a.encoder)?;
            let refs: Vec<Dialogue> = corpus.all().cloned().collect();
            let cfg = EvalConfig { mode: eval_mode(a.mode.as_deref()), encoder_label: Some(a.encoder.display().to_string()) };
            let report = evaluate(&read_gens(&a.gens)?, &refs, &enc, &cfg)?;
            report.save(&a.out)
        }
        Command::Rerank(RerankCmd::Pretrain { data, out, seed, profile }) => {
            let (corpus, vocab) = load_data_dir(&data)?;
            let model = pretrain_reranker(&corpus, &vocab, profile, &MlmConfig::default(), seed)?;
            save_checkpoint(&model.to_checkpoint()?, &out)
        }
        Command::Rerank(RerankCmd::Finetune { gens, data, encoder, init, out, seed, profile }) => {
            let (corpus, vocab) = load_data_dir(&data)?;
            let enc = load_encoder(&encoder)?;
            let model = match init {
                Some(p) => Reranker::from_checkpoint(Checkpoint::load(&p)?)?,
                None => Reranker::new(profile.reranker(), vocab, &mut ChaCha8Rng::seed_from_u64(stream_seed(seed, "rerank-mlm")))?,
            };
            let model = finetune_reranker(model, &corpus, &read_gens(&gens)?, &enc, &FinetuneConfig::default(), seed)?;
            save_checkpoint(&model.to_checkpoint()?, &out)
        }
        Command::Rerank(RerankCmd::Select { model, gens, out, zscore, data }) => {
            let model = Reranker::from_checkpoint(Checkpoint::load(&model)?)?;
            let refs = match data {
                Some(d) => load_data_dir(&d)?.0.all().cloned().collect(),
                None => Vec::new(),
            };
            write_gens(&out, &rerank_gens(&model, &read_gens(&gens)?, &refs, zscore)?)
        }
        Command::Pipeline { config } => {
            let text = std::fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
            let summary = run_pipeline(&cfg)?;
            for row in summary {
                println!("{}", row.tsv());
            }
            Ok(())
        }
        Command::Demo(a) => {
            let models = DemoModels {
                sclstm: Sclstm::from_checkpoint(Checkpoint::load(&a.sclstm)?)?,
                baseline: a.baseline.as_deref().map(|p| Checkpoint::load(p).and_then(Sclstm::from_checkpoint)).transpose()?,
                condlm: CondLm::from_checkpoint(Checkpoint::load(&a.condlm)?)?,
                reranker: Reranker::from_checkpoint(Checkpoint::load(&a.reranker)?)?,
                encoder: load_encoder(&a.encoder)?,
            };
            let stdin = std::io::stdin();
            let mut input = stdin.lock();
            let mut output = std::io::stdout();
            run_demo(&models, &mut input as &mut dyn BufRead, &mut output as &mut dyn Write, 1)
        }
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests;
