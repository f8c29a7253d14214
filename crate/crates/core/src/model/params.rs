use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Mat;
use crate::bias::PositionBuckets;
use crate::molgraph::{ATOM_VOCAB_SIZE, BOND_VOCAB_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_kv: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Upper bound on graph nodes + instruction tokens.
    pub max_len: usize,
    pub buckets: PositionBuckets,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn small(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 32,
            d_kv: 8,
            n_heads: 4,
            d_ff: 64,
            enc_layers: 2,
            dec_layers: 1,
            max_len: 256,
            buckets: PositionBuckets::default(),
            init_std: 0.02,
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.n_heads * self.d_kv
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
}

impl AttnParams {
    fn init<R: Rng + ?Sized>(c: &ModelConfig, rng: &mut R) -> Self {
        let inner = c.inner_dim();
        Self {
            wq: Mat::randn(c.d_model, inner, c.init_std, rng),
            wk: Mat::randn(c.d_model, inner, c.init_std, rng),
            wv: Mat::randn(c.d_model, inner, c.init_std, rng),
            wo: Mat::randn(inner, c.d_model, c.init_std, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub norm_attn: Mat,
    pub attn: AttnParams,
    pub norm_ff: Mat,
    pub ff_in: Mat,
    pub ff_out: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub norm_self: Mat,
    pub self_attn: AttnParams,
    pub norm_cross: Mat,
    pub cross_attn: AttnParams,
    pub norm_ff: Mat,
    pub ff_in: Mat,
    pub ff_out: Mat,
}

/// All learnable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `ATOM_VOCAB_SIZE x d_model`
    pub atom_embedding: Mat,
    /// `vocab x d_model`; also the output projection unless `lm_head` is set.
    pub token_embedding: Mat,
    /// Encoder position bias, `n_classes x heads`.
    pub position_bias: Mat,
    /// Bond bias pooled along shortest paths, `BOND_VOCAB_SIZE x heads`.
    pub edge_bias: Mat,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: Mat,
    /// Decoder causal offset bias, `(text_clip + 1) x heads`.
    pub causal_bias: Mat,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: Mat,
    /// Untied output projection, created for head-only tuning.
    pub lm_head: Option<Mat>,
}

fn ones(d: usize) -> Mat {
    Mat::filled(1, d, 1.0)
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let c = &config;
        let d = c.d_model;
        let atom_embedding = Mat::randn(ATOM_VOCAB_SIZE, d, c.init_std, rng);
        let token_embedding = Mat::randn(c.vocab_size, d, c.init_std, rng);
        let encoder = (0..c.enc_layers)
            .map(|_| EncoderLayer {
                norm_attn: ones(d),
                attn: AttnParams::init(c, rng),
                norm_ff: ones(d),
                ff_in: Mat::randn(d, c.d_ff, c.init_std, rng),
                ff_out: Mat::randn(c.d_ff, d, c.init_std, rng),
            })
            .collect();
        let decoder = (0..c.dec_layers)
            .map(|_| DecoderLayer {
                norm_self: ones(d),
                self_attn: AttnParams::init(c, rng),
                norm_cross: ones(d),
                cross_attn: AttnParams::init(c, rng),
                norm_ff: ones(d),
                ff_in: Mat::randn(d, c.d_ff, c.init_std, rng),
                ff_out: Mat::randn(c.d_ff, d, c.init_std, rng),
            })
            .collect();
        Self {
            config,
            atom_embedding,
            token_embedding,
            position_bias: Mat::zeros(c.buckets.n_classes(), c.n_heads),
            edge_bias: Mat::zeros(BOND_VOCAB_SIZE, c.n_heads),
            encoder,
            encoder_norm: ones(d),
            causal_bias: Mat::zeros(c.buckets.n_causal(), c.n_heads),
            decoder,
            decoder_norm: ones(d),
            lm_head: None,
        }
    }

    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: ModelConfig) -> Self {
        use rand::SeedableRng;
        ModelParams::init(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).zeros_like()
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, m| m.data_mut().fill(0.0));
        z
    }

    /// Redraws the bias tables from `N(0, std^2)`; used to probe the model
    /// with generic (non-zero) position biases.
    pub fn randomize_bias_tables<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for m in [&mut self.position_bias, &mut self.edge_bias, &mut self.causal_bias] {
            *m = Mat::randn(m.rows(), m.cols(), std, rng);
        }
    }

    /// Output projection in use.
    pub fn output_projection(&self) -> &Mat {
        self.lm_head.as_ref().unwrap_or(&self.token_embedding)
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = vec![
            ("atom_embedding".into(), &self.atom_embedding),
            ("token_embedding".into(), &self.token_embedding),
            ("position_bias".into(), &self.position_bias),
            ("edge_bias".into(), &self.edge_bias),
        ];
        for (l, layer) in self.encoder.iter().enumerate() {
            let p = format!("encoder.{l}");
            out.push((format!("{p}.norm_attn"), &layer.norm_attn));
            push_attn(&mut out, &format!("{p}.attn"), &layer.attn);
            out.push((format!("{p}.norm_ff"), &layer.norm_ff));
            out.push((format!("{p}.ff_in"), &layer.ff_in));
            out.push((format!("{p}.ff_out"), &layer.ff_out));
        }
        out.push(("encoder_norm".into(), &self.encoder_norm));
        out.push(("causal_bias".into(), &self.causal_bias));
        for (l, layer) in self.decoder.iter().enumerate() {
            let p = format!("decoder.{l}");
            out.push((format!("{p}.norm_self"), &layer.norm_self));
            push_attn(&mut out, &format!("{p}.self_attn"), &layer.self_attn);
            out.push((format!("{p}.norm_cross"), &layer.norm_cross));
            push_attn(&mut out, &format!("{p}.cross_attn"), &layer.cross_attn);
            out.push((format!("{p}.norm_ff"), &layer.norm_ff));
            out.push((format!("{p}.ff_in"), &layer.ff_in));
            out.push((format!("{p}.ff_out"), &layer.ff_out));
        }
        out.push(("decoder_norm".into(), &self.decoder_norm));
        if let Some(head) = &self.lm_head {
            out.push(("lm_head".into(), head));
        }
        out
    }

    /// Mutable counterpart of [`ModelParams::named`], same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = vec![
            ("atom_embedding".into(), &mut self.atom_embedding),
            ("token_embedding".into(), &mut self.token_embedding),
            ("position_bias".into(), &mut self.position_bias),
            ("edge_bias".into(), &mut self.edge_bias),
        ];
        for (l, layer) in self.encoder.iter_mut().enumerate() {
            let p = format!("encoder.{l}");
            out.push((format!("{p}.norm_attn"), &mut layer.norm_attn));
            push_attn_mut(&mut out, &format!("{p}.attn"), &mut layer.attn);
            out.push((format!("{p}.norm_ff"), &mut layer.norm_ff));
            out.push((format!("{p}.ff_in"), &mut layer.ff_in));
            out.push((format!("{p}.ff_out"), &mut layer.ff_out));
        }
        out.push(("encoder_norm".into(), &mut self.encoder_norm));
        out.push(("causal_bias".into(), &mut self.causal_bias));
        for (l, layer) in self.decoder.iter_mut().enumerate() {
            let p = format!("decoder.{l}");
            out.push((format!("{p}.norm_self"), &mut layer.norm_self));
            push_attn_mut(&mut out, &format!("{p}.self_attn"), &mut layer.self_attn);
            out.push((format!("{p}.norm_cross"), &mut layer.norm_cross));
            push_attn_mut(&mut out, &format!("{p}.cross_attn"), &mut layer.cross_attn);
            out.push((format!("{p}.norm_ff"), &mut layer.norm_ff));
            out.push((format!("{p}.ff_in"), &mut layer.ff_in));
            out.push((format!("{p}.ff_out"), &mut layer.ff_out));
        }
        out.push(("decoder_norm".into(), &mut self.decoder_norm));
        if let Some(head) = &mut self.lm_head {
            out.push(("lm_head".into(), head));
        }
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Mat)) {
        for (name, m) in self.named_mut() {
            f(&name, m);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.named_mut().into_iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ModelParams) {
        let rhs = other.named();
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(rhs) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.for_each_mut(|_, m| m.scale(s));
    }

    pub fn global_norm(&self) -> f64 {
        self.named().iter().map(|(_, m)| m.sum_sq()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.all_finite())
    }

    pub fn n_parameters(&self) -> usize {
        self.named().iter().map(|(_, m)| m.data().len()).sum()
    }
}

fn push_attn<'a>(out: &mut Vec<(String, &'a Mat)>, prefix: &str, a: &'a AttnParams) {
    out.push((format!("{prefix}.wq"), &a.wq));
    out.push((format!("{prefix}.wk"), &a.wk));
    out.push((format!("{prefix}.wv"), &a.wv));
    out.push((format!("{prefix}.wo"), &a.wo));
}

fn push_attn_mut<'a>(out: &mut Vec<(String, &'a mut Mat)>, prefix: &str, a: &'a mut AttnParams) {
    out.push((format!("{prefix}.wq"), &mut a.wq));
    out.push((format!("{prefix}.wk"), &mut a.wk));
    out.push((format!("{prefix}.wv"), &mut a.wv));
    out.push((format!("{prefix}.wo"), &mut a.wo));
}
