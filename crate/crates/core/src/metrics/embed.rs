use serde::{Deserialize, Serialize};

use crate::ctxencoder::ContextEncoder;
use crate::error::Result;
use crate::nn::cosine;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbedScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Greedy max-cosine matching between two sets of token vectors.
pub fn embed_score_vectors(cand: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<EmbedScore> {
    if cand.is_empty() || reference.is_empty() {
        return Ok(EmbedScore::default());
    }
    let side = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Result<f64> {
        let mut total = 0.0;
        for x in a {
            let mut best = f64::NEG_INFINITY;
            for y in b {
                best = best.max(cosine(x, y)?);
            }
            total += best;
        }
        Ok(total / a.len() as f64)
    };
    // cosine can be negative; scores are clamped into [0, 1]
    let precision = side(cand, reference)?.max(0.0);
    let recall = side(reference, cand)?.max(0.0);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(EmbedScore { precision, recall, f1 })
}

pub fn embed_score(candidate: &str, reference: &str, enc: &ContextEncoder) -> Result<EmbedScore> {
    embed_score_vectors(&enc.token_vectors(candidate)?, &enc.token_vectors(reference)?)
}

/// Cosine between the encodings of a user utterance and a response.
pub fn context_fit(user: &str, response: &str, enc: &ContextEncoder) -> Result<f64> {
    cosine(&enc.encode_text(user)?, &enc.encode_text(response)?)
}
