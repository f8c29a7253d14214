//! Causal decoder over label tokens, cross-attending to encoder text states.

use super::layers::{
    attention, attention_backward, feed_forward, feed_forward_backward, rms_norm, rms_norm_backward, AttnCache,
    FfCache, NormCache,
};
use super::params::ModelParams;
use super::tensor::Mat;
use super::ModelError;
use crate::bias::NEG_LARGE;

struct LayerCache {
    norm_self: NormCache,
    self_attn: AttnCache,
    norm_cross: NormCache,
    cross_attn: AttnCache,
    norm_ff: NormCache,
    ff: FfCache,
}

pub(crate) struct DecoderCache {
    inputs: Vec<u32>,
    layers: Vec<LayerCache>,
    final_norm: NormCache,
    pub(crate) features: Mat,
}

/// Logit scale applied before the (tied) output projection.
pub(crate) fn output_scale(p: &ModelParams) -> f64 {
    1.0 / (p.config.d_model as f64).sqrt()
}

fn causal_bias(p: &ModelParams, len: usize) -> Vec<f64> {
    let heads = p.config.n_heads;
    let mut data = vec![NEG_LARGE; heads * len * len];
    for h in 0..heads {
        for i in 0..len {
            for j in 0..=i {
                let row = p.config.buckets.causal_index(i, j);
                data[(h * len + i) * len + j] = p.causal_bias.at(row, h);
            }
        }
    }
    data
}

/// Runs the decoder stack and returns the normalized features that feed the
/// output projection.
pub(crate) fn forward_features(p: &ModelParams, enc_text: &Mat, inputs: &[u32]) -> Result<DecoderCache, ModelError> {
    let c = &p.config;
    let len = inputs.len();
    let mut x = Mat::zeros(len, c.d_model);
    for (r, &t) in inputs.iter().enumerate() {
        x.row_mut(r).copy_from_slice(p.token_embedding.row(t as usize));
    }
    let bias = causal_bias(p, len);
    let mut layers = Vec::with_capacity(p.decoder.len());
    for layer in &p.decoder {
        let (s_in, norm_self) = rms_norm(&x, &layer.norm_self);
        let (s_out, self_attn) = attention(&layer.self_attn, &s_in, &s_in, Some(&bias), c.n_heads, c.d_kv)?;
        x.add_assign(&s_out);
        let (c_in, norm_cross) = rms_norm(&x, &layer.norm_cross);
        let (c_out, cross_attn) = attention(&layer.cross_attn, &c_in, enc_text, None, c.n_heads, c.d_kv)?;
        x.add_assign(&c_out);
        let (f_in, norm_ff) = rms_norm(&x, &layer.norm_ff);
        let (f_out, ff) = feed_forward(&f_in, &layer.ff_in, &layer.ff_out);
        x.add_assign(&f_out);
        layers.push(LayerCache {
            norm_self,
            self_attn,
            norm_cross,
            cross_attn,
            norm_ff,
            ff,
        });
    }
    let (features, final_norm) = rms_norm(&x, &p.decoder_norm);
    if !features.all_finite() {
        return Err(ModelError::NonFiniteActivation);
    }
    Ok(DecoderCache {
        inputs: inputs.to_vec(),
        layers,
        final_norm,
        features,
    })
}

/// `scale * features * W^T` for the active output projection.
pub(crate) fn project(p: &ModelParams, features: &Mat) -> Mat {
    let mut logits = features.matmul_nt(p.output_projection());
    logits.scale(output_scale(p));
    logits
}

/// Backpropagates `dlogits` and returns the gradient w.r.t. the encoder text
/// states that were cross-attended.
pub(crate) fn backward(
    p: &ModelParams,
    cache: &DecoderCache,
    enc_text_rows: usize,
    dlogits: &Mat,
    grads: &mut ModelParams,
) -> Mat {
    let c = &p.config;
    let scale = output_scale(p);
    let mut scaled = dlogits.clone();
    scaled.scale(scale);
    let head_grad = match grads.lm_head.as_mut() {
        Some(h) => h,
        None => &mut grads.token_embedding,
    };
    scaled.matmul_tn_acc(&cache.features, head_grad);
    let dfeat = scaled.matmul(p.output_projection());

    let mut dx = rms_norm_backward(&cache.final_norm, &p.decoder_norm, &dfeat, &mut grads.decoder_norm);
    let mut d_enc = Mat::zeros(enc_text_rows, c.d_model);
    let len = cache.inputs.len();
    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let layer = &p.decoder[l];
        let g = &mut grads.decoder[l];
        let df_in = feed_forward_backward(&lc.ff, &layer.ff_in, &layer.ff_out, &dx, &mut g.ff_in, &mut g.ff_out);
        dx.add_assign(&rms_norm_backward(&lc.norm_ff, &layer.norm_ff, &df_in, &mut g.norm_ff));

        let cg = attention_backward(
            &layer.cross_attn,
            &lc.cross_attn,
            &dx,
            &mut g.cross_attn,
            c.n_heads,
            c.d_kv,
        );
        d_enc.add_assign(&cg.dxkv);
        dx.add_assign(&rms_norm_backward(
            &lc.norm_cross,
            &layer.norm_cross,
            &cg.dxq,
            &mut g.norm_cross,
        ));

        let sg = attention_backward(
            &layer.self_attn,
            &lc.self_attn,
            &dx,
            &mut g.self_attn,
            c.n_heads,
            c.d_kv,
        );
        let mut ds_in = sg.dxq;
        ds_in.add_assign(&sg.dxkv);
        dx.add_assign(&rms_norm_backward(
            &lc.norm_self,
            &layer.norm_self,
            &ds_in,
            &mut g.norm_self,
        ));
        for h in 0..c.n_heads {
            for i in 0..len {
                for j in 0..=i {
                    let row = c.buckets.causal_index(i, j);
                    *grads.causal_bias.at_mut(row, h) += sg.dbias[(h * len + i) * len + j];
                }
            }
        }
    }
    for (r, &t) in cache.inputs.iter().enumerate() {
        for (g, &v) in grads.token_embedding.row_mut(t as usize).iter_mut().zip(dx.row(r)) {
            *g += v;
        }
    }
    d_enc
}
