//! Central finite-difference check of [`super::loss_and_grad`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::layers::trace_relu;
use super::params::{ModelConfig, ModelParams};
use super::{batch_loss, loss_and_grad, Example, ModelError};
use crate::molgraph::parse_smiles;
use crate::structure::GraphStructure;
use crate::tokenizer::EOS;

/// Parameter groups that are checked separately.
pub const FAMILIES: [&str; 5] = ["embedding", "bias", "attention", "feed_forward", "norm"];

pub fn family_of(name: &str) -> &'static str {
    if name.ends_with("embedding") || name == "lm_head" {
        "embedding"
    } else if name.ends_with("_bias") {
        "bias"
    } else if name.contains("attn.") {
        "attention"
    } else if name.contains(".ff_") {
        "feed_forward"
    } else {
        "norm"
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoordinateCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub step: f64,
    pub max_rel_error: f64,
    /// Sampled coordinates dropped because the stencil crossed a ReLU kink.
    pub skipped_kinks: usize,
    pub checks: Vec<CoordinateCheck>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Config used by the gradient-fidelity check: 2 encoder layers, `d_model = 16`,
/// two heads.
pub fn check_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model: 16,
        d_kv: 8,
        n_heads: 2,
        d_ff: 32,
        enc_layers: 2,
        dec_layers: 2,
        max_len: 64,
        buckets: Default::default(),
        init_std: 0.3,
    }
}

const CHECK_SMILES: [&str; 3] = ["CC(=O)Nc1ccc(Cl)cc1", "C1CC1C#N.[Na+]", "F/C=C/C(Br)O"];

/// Random batch over a small fixed molecule set.
pub fn check_batch_data(rng: &mut ChaCha8Rng, vocab_size: usize) -> Vec<(GraphStructure, Vec<u32>, Vec<u32>)> {
    CHECK_SMILES
        .iter()
        .map(|s| {
            let g = GraphStructure::new(parse_smiles(s).expect("valid"));
            let m = rng.random_range(3..7);
            let instr = (0..m).map(|_| rng.random_range(3..vocab_size as u32)).collect();
            let t = rng.random_range(1..4);
            let mut target: Vec<u32> = (0..t).map(|_| rng.random_range(3..vocab_size as u32)).collect();
            target.push(EOS);
            (g, instr, target)
        })
        .collect()
}

/// Compares analytic gradients with central differences at step `h` on
/// `per_family` random coordinates of every parameter family.
pub fn gradient_check(seed: u64, h: f64, per_family: usize) -> Result<GradCheckReport, ModelError> {
    let vocab_size = 24;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(check_config(vocab_size), &mut rng);
    params.randomize_bias_tables(0.5, &mut rng);
    let data = check_batch_data(&mut rng, vocab_size);
    let batch: Vec<Example<'_>> = data
        .iter()
        .map(|(s, i, t)| Example {
            structure: s,
            instruction: i,
            target: t,
        })
        .collect();

    let (_, grads) = loss_and_grad(&params, &batch)?;

    let mut checks = Vec::new();
    let mut skipped_kinks = 0;
    for family in FAMILIES {
        // Coordinates that the batch actually touches.
        let mut candidates: Vec<(String, usize)> = grads
            .named()
            .into_iter()
            .filter(|(name, _)| family_of(name) == family)
            .flat_map(|(name, g)| {
                g.data()
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(i, _)| (name.clone(), i))
                    .collect::<Vec<_>>()
            })
            .collect();
        candidates.shuffle(&mut rng);
        let mut taken = 0;
        for (name, index) in candidates {
            if taken == per_family {
                break;
            }
            let analytic = grads.get(&name).expect("known tensor").data()[index];
            let original = params.get(&name).expect("known tensor").data()[index];
            params.get_mut(&name).expect("known tensor").data_mut()[index] = original + h;
            let (plus, plus_pattern) = trace_relu(|| batch_loss(&params, &batch));
            params.get_mut(&name).expect("known tensor").data_mut()[index] = original - h;
            let (minus, minus_pattern) = trace_relu(|| batch_loss(&params, &batch));
            params.get_mut(&name).expect("known tensor").data_mut()[index] = original;
            let (plus, minus) = (plus?, minus?);
            // The loss is not differentiable across the stencil; a central
            // difference there measures the kink, not the gradient.
            if plus_pattern != minus_pattern {
                skipped_kinks += 1;
                continue;
            }
            taken += 1;
            let numeric = (plus - minus) / (2.0 * h);
            checks.push(CoordinateCheck {
                rel_error: relative_error(analytic, numeric, REL_ERROR_FLOOR),
                tensor: name,
                index,
                analytic,
                numeric,
            });
        }
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        seed,
        step: h,
        max_rel_error,
        skipped_kinks,
        checks,
    })
}
