//! Encoder-decoder transformer over joint graph + instruction sequences.
//!
//! The encoder sees graph nodes followed by instruction tokens, with the
//! distance-aware bias from [`crate::bias`] added to every layer's attention
//! logits. The decoder generates the label as text, cross-attending only to the
//! encoder's instruction positions. Gradients are hand-derived and checked
//! against central finite differences in the tests.

pub mod checkpoint;
mod decoder;
mod encoder;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tensor;

use rayon::prelude::*;
use thiserror::Error;

pub use encoder::EncoderOutput;
pub use params::{AttnParams, DecoderLayer, EncoderLayer, ModelConfig, ModelParams};
pub use tensor::Mat;

use crate::structure::GraphStructure;
use crate::tokenizer::{EOS, PAD};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("non-finite activation")]
    NonFiniteActivation,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("sequence of length {len} exceeds the configured maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("label sequence is empty")]
    EmptyTarget,
}

impl ModelError {
    pub fn code(&self) -> &'static str {
        match self {
            ModelError::NonFiniteActivation => "NonFiniteActivation",
            ModelError::NonFiniteGradient => "NonFiniteGradient",
            ModelError::SequenceTooLong { .. } => "SequenceTooLong",
            ModelError::EmptyTarget => "EmptyTarget",
        }
    }
}

pub fn encode(p: &ModelParams, s: &GraphStructure, instruction: &[u32]) -> Result<EncoderOutput, ModelError> {
    encoder::forward(p, s, instruction).map(|(out, _)| out)
}

/// Encoder output plus every layer's attention weights, `[head][query][key]`.
pub fn encode_with_attention(
    p: &ModelParams,
    s: &GraphStructure,
    instruction: &[u32],
) -> Result<(EncoderOutput, Vec<Vec<f64>>), ModelError> {
    let (out, cache) = encoder::forward(p, s, instruction)?;
    let maps = cache.attention_maps().into_iter().map(<[f64]>::to_vec).collect();
    Ok((out, maps))
}

/// Decoder input for a label: a PAD start token followed by all but the last
/// target token.
fn shift_right(target: &[u32]) -> Vec<u32> {
    std::iter::once(PAD)
        .chain(target[..target.len().saturating_sub(1)].iter().copied())
        .collect()
}

/// Next-token logits after `prefix` (which excludes the PAD start token).
pub fn decode_step(p: &ModelParams, enc: &EncoderOutput, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
    let inputs: Vec<u32> = std::iter::once(PAD).chain(prefix.iter().copied()).collect();
    let text = enc.text_states();
    let cache = decoder::forward_features(p, &text, &inputs)?;
    let last = cache.features.slice_rows(inputs.len() - 1, inputs.len());
    Ok(decoder::project(p, &last).into_data())
}

/// First-step logits at the `Yes` and `No` token ids.
pub fn score_yes_no(p: &ModelParams, enc: &EncoderOutput, yes: u32, no: u32) -> Result<(f64, f64), ModelError> {
    let logits = decode_step(p, enc, &[])?;
    Ok((logits[yes as usize], logits[no as usize]))
}

/// Softmax over the `{Yes, No}` pair: probability of `Yes`.
pub fn yes_probability(s_yes: f64, s_no: f64) -> f64 {
    1.0 / (1.0 + (s_no - s_yes).exp())
}

/// Greedy decoding until EOS (not included) or `max_new_tokens`.
pub fn generate_greedy(p: &ModelParams, enc: &EncoderOutput, max_new_tokens: usize) -> Result<Vec<u32>, ModelError> {
    let mut out = Vec::new();
    while out.len() < max_new_tokens {
        let logits = decode_step(p, enc, &out)?;
        let next = argmax(&logits) as u32;
        if next == EOS {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// One supervised example: molecule, instruction ids, label ids ending in EOS.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub structure: &'a GraphStructure,
    pub instruction: &'a [u32],
    pub target: &'a [u32],
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Summed negative log-likelihood of the label and its token count.
pub fn sequence_nll(p: &ModelParams, ex: &Example<'_>) -> Result<(f64, usize), ModelError> {
    if ex.target.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    let enc = encode(p, ex.structure, ex.instruction)?;
    let cache = decoder::forward_features(p, &enc.text_states(), &shift_right(ex.target))?;
    let logits = decoder::project(p, &cache.features);
    let nll = ex
        .target
        .iter()
        .enumerate()
        .map(|(t, &y)| -log_softmax_row(logits.row(t))[y as usize])
        .sum();
    Ok((nll, ex.target.len()))
}

/// Length-normalized NLL averaged over the batch:
/// `1/B * sum_i (1/|y_i|) * sum_t -log P(y_it | prefix)`.
pub fn batch_loss(p: &ModelParams, batch: &[Example<'_>]) -> Result<f64, ModelError> {
    let per: Vec<f64> = batch
        .iter()
        .map(|ex| sequence_nll(p, ex).map(|(nll, len)| nll / len as f64))
        .collect::<Result<_, _>>()?;
    Ok(per.iter().sum::<f64>() / batch.len() as f64)
}

fn example_loss_and_grad(p: &ModelParams, ex: &Example<'_>, weight: f64) -> Result<(f64, ModelParams), ModelError> {
    if ex.target.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    let (enc, enc_cache) = encoder::forward(p, ex.structure, ex.instruction)?;
    let text = enc.text_states();
    let dec_cache = decoder::forward_features(p, &text, &shift_right(ex.target))?;
    let logits = decoder::project(p, &dec_cache.features);

    let len = ex.target.len() as f64;
    let mut nll = 0.0;
    let mut dlogits = Mat::zeros(logits.rows(), logits.cols());
    for (t, &y) in ex.target.iter().enumerate() {
        let logp = log_softmax_row(logits.row(t));
        nll -= logp[y as usize];
        let g = dlogits.row_mut(t);
        for (gv, lp) in g.iter_mut().zip(&logp) {
            *gv = lp.exp() * weight / len;
        }
        g[y as usize] -= weight / len;
    }

    let mut grads = p.zeros_like();
    let d_text = decoder::backward(p, &dec_cache, text.rows(), &dlogits, &mut grads);
    let mut d_hidden = Mat::zeros(enc.hidden.rows(), enc.hidden.cols());
    for r in 0..d_text.rows() {
        d_hidden.row_mut(enc.n_graph + r).copy_from_slice(d_text.row(r));
    }
    encoder::backward(p, ex.structure, &enc_cache, &d_hidden, &mut grads);
    Ok((nll / len, grads))
}

/// Batch loss and its gradient with respect to every parameter.
///
/// Per-example gradients may be computed in parallel; they are summed in batch
/// order so the result does not depend on the thread count.
pub fn loss_and_grad(p: &ModelParams, batch: &[Example<'_>]) -> Result<(f64, ModelParams), ModelError> {
    assert!(!batch.is_empty(), "empty batch");
    let weight = 1.0 / batch.len() as f64;
    let parts: Vec<(f64, ModelParams)> = batch
        .par_iter()
        .map(|ex| example_loss_and_grad(p, ex, weight))
        .collect::<Result<_, _>>()?;
    let mut iter = parts.into_iter();
    let (first_loss, mut grads) = iter.next().expect("non-empty");
    let mut loss = first_loss;
    for (l, g) in iter {
        loss += l;
        grads.add_assign(&g);
    }
    if !grads.all_finite() {
        return Err(ModelError::NonFiniteGradient);
    }
    Ok((loss * weight, grads))
}

/// Decoder output features (before the output projection) under teacher
/// forcing, one row per target position.
pub fn decoder_features(p: &ModelParams, enc: &EncoderOutput, target: &[u32]) -> Result<Mat, ModelError> {
    let cache = decoder::forward_features(p, &enc.text_states(), &shift_right(target))?;
    Ok(cache.features)
}

/// Logit scale used by the output projection.
pub fn output_scale(p: &ModelParams) -> f64 {
    decoder::output_scale(p)
}
