use std::io::{BufRead, Write};

use crate::condlm::{context_ids, generate, CondLm, SampleOptions};
use crate::corpus::{
    detokenize, extract_context, relexicalize_lenient, slot_map_from_da, ContextSpec, Dialogue, DialogueAct, Turn,
};
use crate::ctxencoder::ContextEncoder;
use crate::error::{Error, Result};
use crate::reranker::Reranker;
use crate::sclstm::{beam_decode, DecodeOptions, Sclstm};
use crate::seeds::stream_seed;

pub struct DemoModels {
    pub sclstm: Sclstm,
    pub baseline: Option<Sclstm>,
    pub condlm: CondLm,
    pub reranker: Reranker,
    pub encoder: ContextEncoder,
}

/// Responses of every model for one turn.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnOutput {
    pub baseline: Option<Result<String, String>>,
    pub contextual: Result<String, String>,
    pub condlm: Result<String, String>,
    pub reranked: Result<String, String>,
    /// Earlier turns the contextual generator saw.
    pub context_turns: usize,
}

/// Rolling dialogue state of the REPL.
pub struct DemoSession<'a> {
    models: &'a DemoModels,
    history: Vec<Turn>,
    spec: ContextSpec,
    seed: u64,
}

fn sclstm_response(m: &Sclstm, da: &DialogueAct, ctx: Option<&[f64]>) -> Result<String> {
    let hyps = beam_decode(m, m.da_index(da)?, ctx, &DecodeOptions::default())?;
    let best = hyps.first().ok_or_else(|| Error::Data("empty beam".into()))?;
    Ok(relexicalize_lenient(&detokenize(&m.vocab.decode(&best.tokens)), &slot_map_from_da(da)))
}

impl<'a> DemoSession<'a> {
    pub fn new(models: &'a DemoModels, seed: u64) -> Self {
        let spec = models.sclstm.config.context.unwrap_or(ContextSpec::new(0, 0));
        Self { models, history: Vec::new(), spec, seed }
    }

    pub fn spec(&self) -> ContextSpec {
        self.spec
    }

    pub fn history(&self) -> &[Turn] {
        &self.history
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    pub fn set_context(&mut self, spec: ContextSpec) {
        self.spec = spec;
    }

    /// Generates with every model and appends the exchange to the history,
    /// using the reranked response (or the contextual one) as the system turn.
    pub fn respond(&mut self, user: &str, da: &DialogueAct) -> TurnOutput {
        let m = self.models;
        let mut turns = self.history.clone();
        turns.push(Turn::user(user));
        turns.push(Turn::system("", Some(da.clone())));
        let d = Dialogue { id: "demo".into(), turns };
        let index = d.turns.len() - 1;
        let window = extract_context(&d, index, self.spec);
        let context_turns = window.as_ref().map_or(0, |w| w.extra.len());
        let err = |e: Error| e.to_string();

        let baseline = m.baseline.as_ref().map(|b| sclstm_response(b, da, None).map_err(err));
        let contextual = window
            .and_then(|w| m.encoder.encode(&w))
            .and_then(|c| sclstm_response(&m.sclstm, da, m.sclstm.is_contextual().then_some(c.as_slice())))
            .map_err(err);
        let samples = context_ids(&m.condlm.vocab, &d, index, m.condlm.config.context).and_then(|u| {
            let dids = m.condlm.vocab.encode(&da.to_string());
            generate(&m.condlm, &u, &dids, &SampleOptions::default(), stream_seed(self.seed, &format!("demo/{index}")))
        });
        let texts: Result<Vec<String>> =
            samples.map(|s| s.iter().map(|x| detokenize(&m.condlm.vocab.decode(&x.tokens))).collect());
        let (condlm, reranked) = match texts {
            Ok(t) if !t.is_empty() => {
                let refs: Vec<&str> = t.iter().map(String::as_str).collect();
                let r = m.reranker.rerank(user, &refs, false).map(|(b, _)| t[b].clone()).map_err(err);
                (Ok(t[0].clone()), r)
            }
            Ok(_) => (Err("no samples".to_string()), Err("no samples".to_string())),
            Err(e) => (Err(e.to_string()), Err(e.to_string())),
        };

        let reply = reranked.clone().or_else(|_| contextual.clone()).unwrap_or_default();
        self.history.push(Turn::user(user));
        self.history.push(Turn::system(reply, Some(da.clone())));
        TurnOutput { baseline, contextual, condlm, reranked, context_turns }
    }
}

fn show(r: &Result<String, String>) -> String {
    match r {
        Ok(s) => s.clone(),
        Err(e) => format!("({e})"),
    }
}

const HELP: &str = "enter a user utterance, then a dialogue act such as hotel{inform(stars=4)}; \
commands: :reset, :context NuNs, :quit";

/// Reads utterance/act pairs from `input` until `:quit` or end of input.
pub fn run_demo(models: &DemoModels, input: &mut dyn BufRead, out: &mut dyn Write, seed: u64) -> Result<()> {
    let io = |e: std::io::Error| Error::io("<terminal>", e);
    let mut session = DemoSession::new(models, seed);
    writeln!(out, "{HELP}").map_err(io)?;
    let mut line = String::new();
    loop {
        write!(out, "[{}] user> ", session.spec()).map_err(io)?;
        out.flush().map_err(io)?;
        line.clear();
        if input.read_line(&mut line).map_err(io)? == 0 {
            return Ok(());
        }
        let text = line.trim().to_string();
        if text.is_empty() {
            continue;
        }
        if let Some(cmd) = text.strip_prefix(':') {
            let mut parts = cmd.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some("quit"), _) => return Ok(()),
                (Some("reset"), _) => {
                    session.reset();
                    writeln!(out, "history cleared").map_err(io)?;
                }
                (Some("context"), Some(s)) => match s.parse::<ContextSpec>() {
                    Ok(spec) => {
                        session.set_context(spec);
                        writeln!(out, "sclstm context set to {spec}").map_err(io)?;
                    }
                    Err(e) => writeln!(out, "{e}").map_err(io)?,
                },
                _ => writeln!(out, "{HELP}").map_err(io)?,
            }
            continue;
        }
        let da = loop {
            write!(out, "act> ").map_err(io)?;
            out.flush().map_err(io)?;
            line.clear();
            if input.read_line(&mut line).map_err(io)? == 0 {
                return Ok(());
            }
            match line.trim().parse::<DialogueAct>() {
                Ok(da) => break da,
                Err(e) => writeln!(out, "{e}").map_err(io)?,
            }
        };
        let r = session.respond(&text, &da);
        if let Some(b) = &r.baseline {
            writeln!(out, "  baseline   : {}", show(b)).map_err(io)?;
        }
        writeln!(out, "  contextual : {}", show(&r.contextual)).map_err(io)?;
        writeln!(out, "  condlm     : {}", show(&r.condlm)).map_err(io)?;
        writeln!(out, "  reranked   : {}", show(&r.reranked)).map_err(io)?;
    }
}
