//! Joint graph + instruction encoder.

use super::layers::{
    attention, attention_backward, feed_forward, feed_forward_backward, rms_norm, rms_norm_backward, AttnCache,
    FfCache, NormCache,
};
use super::params::ModelParams;
use super::tensor::Mat;
use super::ModelError;
use crate::bias::{accumulate_bias_grad, assemble_with_layout, BiasMatrix, BiasTables, JointLayout};
use crate::molgraph::atom_vocab_index;
use crate::structure::GraphStructure;

/// Final hidden states for all `n + m` positions; graph nodes come first.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub hidden: Mat,
    pub n_graph: usize,
}

impl EncoderOutput {
    pub fn n_text(&self) -> usize {
        self.hidden.rows() - self.n_graph
    }

    pub fn graph_states(&self) -> Mat {
        self.hidden.slice_rows(0, self.n_graph)
    }

    pub fn text_states(&self) -> Mat {
        self.hidden.slice_rows(self.n_graph, self.hidden.rows())
    }

    /// Mean over graph-node states; zeros for an empty graph.
    pub fn pooled_graph(&self) -> Vec<f64> {
        let d = self.hidden.cols();
        let mut out = vec![0.0; d];
        for r in 0..self.n_graph {
            for (o, &v) in out.iter_mut().zip(self.hidden.row(r)) {
                *o += v;
            }
        }
        if self.n_graph > 0 {
            out.iter_mut().for_each(|o| *o /= self.n_graph as f64);
        }
        out
    }
}

struct LayerCache {
    norm_attn: NormCache,
    attn: AttnCache,
    norm_ff: NormCache,
    ff: FfCache,
}

pub(crate) struct EncoderCache {
    layout: JointLayout,
    atom_rows: Vec<usize>,
    token_ids: Vec<u32>,
    layers: Vec<LayerCache>,
    final_norm: NormCache,
}

impl EncoderCache {
    /// Attention weights per layer, `[head][query][key]`.
    pub(crate) fn attention_maps(&self) -> Vec<&[f64]> {
        self.layers.iter().map(|l| l.attn.probs.as_slice()).collect()
    }
}

pub(crate) fn bias_for(p: &ModelParams, s: &GraphStructure, layout: &JointLayout) -> BiasMatrix {
    assemble_with_layout(
        s,
        layout,
        &BiasTables {
            position: &p.position_bias,
            edge: &p.edge_bias,
        },
    )
}

pub(crate) fn forward(
    p: &ModelParams,
    s: &GraphStructure,
    instruction: &[u32],
) -> Result<(EncoderOutput, EncoderCache), ModelError> {
    let c = &p.config;
    let n = s.n_nodes();
    let len = n + instruction.len();
    if len > c.max_len {
        return Err(ModelError::SequenceTooLong { len, max: c.max_len });
    }
    let layout = JointLayout::new(s, instruction.len(), &c.buckets);
    let bias = bias_for(p, s, &layout);

    let atom_rows: Vec<usize> = s.graph.nodes.iter().map(|&a| atom_vocab_index(a)).collect();
    let mut x = Mat::zeros(len, c.d_model);
    for (r, &a) in atom_rows.iter().enumerate() {
        x.row_mut(r).copy_from_slice(p.atom_embedding.row(a));
    }
    for (k, &t) in instruction.iter().enumerate() {
        x.row_mut(n + k).copy_from_slice(p.token_embedding.row(t as usize));
    }

    let mut layers = Vec::with_capacity(p.encoder.len());
    for layer in &p.encoder {
        let (a_in, norm_attn) = rms_norm(&x, &layer.norm_attn);
        let (a_out, attn) = attention(&layer.attn, &a_in, &a_in, Some(&bias.data), c.n_heads, c.d_kv)?;
        x.add_assign(&a_out);
        let (f_in, norm_ff) = rms_norm(&x, &layer.norm_ff);
        let (f_out, ff) = feed_forward(&f_in, &layer.ff_in, &layer.ff_out);
        x.add_assign(&f_out);
        layers.push(LayerCache {
            norm_attn,
            attn,
            norm_ff,
            ff,
        });
    }
    let (hidden, final_norm) = rms_norm(&x, &p.encoder_norm);
    if !hidden.all_finite() {
        return Err(ModelError::NonFiniteActivation);
    }
    Ok((
        EncoderOutput { hidden, n_graph: n },
        EncoderCache {
            layout,
            atom_rows,
            token_ids: instruction.to_vec(),
            layers,
            final_norm,
        },
    ))
}

pub(crate) fn backward(
    p: &ModelParams,
    s: &GraphStructure,
    cache: &EncoderCache,
    d_hidden: &Mat,
    grads: &mut ModelParams,
) {
    let c = &p.config;
    let mut dx = rms_norm_backward(&cache.final_norm, &p.encoder_norm, d_hidden, &mut grads.encoder_norm);
    let mut dbias_total: Option<Vec<f64>> = None;
    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let layer = &p.encoder[l];
        let g = &mut grads.encoder[l];
        let df_in = feed_forward_backward(&lc.ff, &layer.ff_in, &layer.ff_out, &dx, &mut g.ff_in, &mut g.ff_out);
        dx.add_assign(&rms_norm_backward(&lc.norm_ff, &layer.norm_ff, &df_in, &mut g.norm_ff));
        let ag = attention_backward(&layer.attn, &lc.attn, &dx, &mut g.attn, c.n_heads, c.d_kv);
        let mut da_in = ag.dxq;
        da_in.add_assign(&ag.dxkv);
        dx.add_assign(&rms_norm_backward(
            &lc.norm_attn,
            &layer.norm_attn,
            &da_in,
            &mut g.norm_attn,
        ));
        match &mut dbias_total {
            None => dbias_total = Some(ag.dbias),
            Some(t) => t.iter_mut().zip(&ag.dbias).for_each(|(a, b)| *a += b),
        }
    }
    if let Some(dbias) = dbias_total {
        accumulate_bias_grad(
            s,
            &cache.layout,
            &dbias,
            c.n_heads,
            &mut grads.position_bias,
            &mut grads.edge_bias,
        );
    }
    let n = cache.layout.n_graph;
    for (r, &a) in cache.atom_rows.iter().enumerate() {
        for (g, &v) in grads.atom_embedding.row_mut(a).iter_mut().zip(dx.row(r)) {
            *g += v;
        }
    }
    for (k, &t) in cache.token_ids.iter().enumerate() {
        for (g, &v) in grads.token_embedding.row_mut(t as usize).iter_mut().zip(dx.row(n + k)) {
            *g += v;
        }
    }
}
