//! Forward and reverse-mode passes for the building blocks: scale-only RMS
//! normalization, ReLU feed-forward, and multi-head attention with an additive
//! per-head bias.

use super::params::AttnParams;
use super::tensor::{dot, Mat};
use super::ModelError;

pub const NORM_EPS: f64 = 1e-6;

thread_local! {
    static RELU_TRACE: std::cell::RefCell<Option<Vec<bool>>> = const { std::cell::RefCell::new(None) };
}

/// Runs `f` on the current thread and returns, alongside its result, the sign
/// of every ReLU input it evaluated. Two runs whose patterns differ straddle a
/// kink of the loss.
pub fn trace_relu<T>(f: impl FnOnce() -> T) -> (T, Vec<bool>) {
    RELU_TRACE.with(|t| *t.borrow_mut() = Some(Vec::new()));
    let out = f();
    let pattern = RELU_TRACE.with(|t| t.borrow_mut().take()).unwrap_or_default();
    (out, pattern)
}

pub struct NormCache {
    x: Mat,
    inv_rms: Vec<f64>,
}

pub fn rms_norm(x: &Mat, gain: &Mat) -> (Mat, NormCache) {
    let d = x.cols();
    let mut y = x.clone();
    let mut inv_rms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = y.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        for (v, &g) in row.iter_mut().zip(gain.data()) {
            *v *= inv * g;
        }
        inv_rms.push(inv);
    }
    (y, NormCache { x: x.clone(), inv_rms })
}

pub fn rms_norm_backward(cache: &NormCache, gain: &Mat, dy: &Mat, dgain: &mut Mat) -> Mat {
    let d = dy.cols();
    let mut dx = Mat::zeros(dy.rows(), d);
    for r in 0..dy.rows() {
        let x = cache.x.row(r);
        let g = dy.row(r);
        let inv = cache.inv_rms[r];
        let mut s = 0.0;
        for k in 0..d {
            dgain.data_mut()[k] += g[k] * x[k] * inv;
            s += g[k] * gain.data()[k] * x[k];
        }
        let coef = inv * inv * inv * s / d as f64;
        let out = dx.row_mut(r);
        for k in 0..d {
            out[k] = inv * gain.data()[k] * g[k] - coef * x[k];
        }
    }
    dx
}

pub struct FfCache {
    x: Mat,
    hidden: Mat,
}

pub fn feed_forward(x: &Mat, w_in: &Mat, w_out: &Mat) -> (Mat, FfCache) {
    let mut hidden = x.matmul(w_in);
    RELU_TRACE.with(|t| {
        if let Some(trace) = t.borrow_mut().as_mut() {
            trace.extend(hidden.data().iter().map(|&v| v > 0.0));
        }
    });
    hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let y = hidden.matmul(w_out);
    (y, FfCache { x: x.clone(), hidden })
}

pub fn feed_forward_backward(
    cache: &FfCache,
    w_in: &Mat,
    w_out: &Mat,
    dy: &Mat,
    dw_in: &mut Mat,
    dw_out: &mut Mat,
) -> Mat {
    cache.hidden.matmul_tn_acc(dy, dw_out);
    let mut dh = dy.matmul_nt(w_out);
    for (g, &h) in dh.data_mut().iter_mut().zip(cache.hidden.data()) {
        if h <= 0.0 {
            *g = 0.0;
        }
    }
    cache.x.matmul_tn_acc(&dh, dw_in);
    dh.matmul_nt(w_in)
}

pub struct AttnCache {
    xq: Mat,
    xkv: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// `[head][query][key]`
    pub probs: Vec<f64>,
    ctx: Mat,
    pub n_query: usize,
    pub n_key: usize,
}

/// Softmax in place with row-max subtraction.
fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Multi-head attention of `xq` over `xkv`.
///
/// Logits are `q_i . k_j / sqrt(d_kv) + bias[h][i][j]`; `bias` is laid out
/// head-major and may be omitted.
pub fn attention(
    w: &AttnParams,
    xq: &Mat,
    xkv: &Mat,
    bias: Option<&[f64]>,
    heads: usize,
    d_kv: usize,
) -> Result<(Mat, AttnCache), ModelError> {
    let (tq, tk) = (xq.rows(), xkv.rows());
    let q = xq.matmul(&w.wq);
    let k = xkv.matmul(&w.wk);
    let v = xkv.matmul(&w.wv);
    let scale = 1.0 / (d_kv as f64).sqrt();
    let mut probs = vec![0.0; heads * tq * tk];
    let mut ctx = Mat::zeros(tq, heads * d_kv);
    if let Some(b) = bias {
        assert_eq!(b.len(), heads * tq * tk);
    }
    for h in 0..heads {
        let cols = h * d_kv..(h + 1) * d_kv;
        for i in 0..tq {
            let qi = &q.row(i)[cols.clone()];
            let base = (h * tq + i) * tk;
            let row = &mut probs[base..base + tk];
            for (j, out) in row.iter_mut().enumerate() {
                *out = dot(qi, &k.row(j)[cols.clone()]) * scale;
                if let Some(b) = bias {
                    *out += b[base + j];
                }
            }
            if tk == 0 {
                continue;
            }
            softmax_row(row);
            let c = &mut ctx.row_mut(i)[cols.clone()];
            for (j, &a) in row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (x, &y) in c.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *x += a * y;
                }
            }
        }
    }
    let out = ctx.matmul(&w.wo);
    if !out.all_finite() {
        return Err(ModelError::NonFiniteActivation);
    }
    Ok((
        out,
        AttnCache {
            xq: xq.clone(),
            xkv: xkv.clone(),
            q,
            k,
            v,
            probs,
            ctx,
            n_query: tq,
            n_key: tk,
        },
    ))
}

pub struct AttnGrads {
    pub dxq: Mat,
    pub dxkv: Mat,
    /// Same layout as the bias that was passed forward.
    pub dbias: Vec<f64>,
}

pub fn attention_backward(
    w: &AttnParams,
    cache: &AttnCache,
    dout: &Mat,
    grads: &mut AttnParams,
    heads: usize,
    d_kv: usize,
) -> AttnGrads {
    let (tq, tk) = (cache.n_query, cache.n_key);
    let scale = 1.0 / (d_kv as f64).sqrt();
    cache.ctx.matmul_tn_acc(dout, &mut grads.wo);
    let dctx = dout.matmul_nt(&w.wo);
    let mut dq = Mat::zeros(tq, heads * d_kv);
    let mut dk = Mat::zeros(tk, heads * d_kv);
    let mut dv = Mat::zeros(tk, heads * d_kv);
    let mut dbias = vec![0.0; heads * tq * tk];
    let mut da = vec![0.0; tk];
    for h in 0..heads {
        let cols = h * d_kv..(h + 1) * d_kv;
        for i in 0..tq {
            let base = (h * tq + i) * tk;
            let a = &cache.probs[base..base + tk];
            let dc = &dctx.row(i)[cols.clone()];
            for j in 0..tk {
                da[j] = dot(dc, &cache.v.row(j)[cols.clone()]);
                if a[j] != 0.0 {
                    for (x, &y) in dv.row_mut(j)[cols.clone()].iter_mut().zip(dc) {
                        *x += a[j] * y;
                    }
                }
            }
            let s: f64 = a.iter().zip(&da).map(|(p, g)| p * g).sum();
            let qi = cache.q.row(i)[cols.clone()].to_vec();
            for j in 0..tk {
                let dl = a[j] * (da[j] - s);
                dbias[base + j] = dl;
                if dl == 0.0 {
                    continue;
                }
                let kj = &cache.k.row(j)[cols.clone()];
                for (x, &y) in dq.row_mut(i)[cols.clone()].iter_mut().zip(kj) {
                    *x += dl * scale * y;
                }
                for (x, &y) in dk.row_mut(j)[cols.clone()].iter_mut().zip(&qi) {
                    *x += dl * scale * y;
                }
            }
        }
    }
    cache.xq.matmul_tn_acc(&dq, &mut grads.wq);
    cache.xkv.matmul_tn_acc(&dk, &mut grads.wk);
    cache.xkv.matmul_tn_acc(&dv, &mut grads.wv);
    let dxq = dq.matmul_nt(&w.wq);
    let mut dxkv = dk.matmul_nt(&w.wk);
    dxkv.add_assign(&dv.matmul_nt(&w.wv));
    AttnGrads { dxq, dxkv, dbias }
}
