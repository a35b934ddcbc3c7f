//! Tape-free inference for one sentence at a time, with cached decoder
//! self-attention keys/values and precomputed cross-attention keys/values.

use std::rc::Rc;

use super::config::LayerCombination;
use super::net::LayerTrace;
use super::params::{AttnSlots, FfnSlots, NormSlots, Parameters};
use crate::autodiff::LAYER_NORM_EPS;
use crate::error::{Error, Result};
use crate::tensor::{self, sinusoidal_row, Real};
use crate::vocab::EOS;

/// Normalised top encoder state `[len, d]` used as decoder memory.
#[derive(Clone, Debug)]
pub struct EncodedSource {
    pub memory: Vec<Real>,
    pub len: usize,
}

fn norm_rows(params: &Parameters, s: NormSlots, x: &[Real]) -> Vec<Real> {
    let d = params.config().d_model;
    let mut out = vec![0.0; x.len()];
    tensor::layer_norm_rows(
        x,
        d,
        params.tensor(s.gamma).data(),
        params.tensor(s.beta).data(),
        LAYER_NORM_EPS,
        &mut out,
    );
    out
}

fn proj(params: &Parameters, w: usize, b: usize, x: &[Real]) -> Vec<Real> {
    let d = params.config().d_model;
    tensor::linear(x, x.len() / d, params.tensor(w), params.tensor(b))
}

fn ffn(params: &Parameters, s: &FfnSlots, x: &[Real]) -> Vec<Real> {
    let d = params.config().d_model;
    let mut h = tensor::linear(x, x.len() / d, params.tensor(s.w1), params.tensor(s.b1));
    h.iter_mut().for_each(|v| *v = v.max(0.0));
    let ff = params.config().d_ff;
    tensor::linear(&h, h.len() / ff, params.tensor(s.w2), params.tensor(s.b2))
}

/// Attention of `q_rows` queries over `k_rows` keys; when `causal`, query `i`
/// (offset by `q_offset`) sees keys `0..=q_offset + i`.
fn attend(q: &[Real], k: &[Real], v: &[Real], d: usize, heads: usize, causal: bool, q_offset: usize) -> Vec<Real> {
    let dh = d / heads;
    let (q_rows, k_rows) = (q.len() / d, k.len() / d);
    let scale = 1.0 / (dh as Real).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut scores = vec![0.0; k_rows];
    for h in 0..heads {
        for i in 0..q_rows {
            let visible = if causal { (q_offset + i + 1).min(k_rows) } else { k_rows };
            let qi = &q[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..visible {
                let kj = &k[j * d + h * dh..j * d + (h + 1) * dh];
                scores[j] = tensor::dot(qi, kj) * scale;
            }
            tensor::softmax_in_place(&mut scores[..visible]);
            let oi = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..visible {
                let vj = &v[j * d + h * dh..j * d + (h + 1) * dh];
                for (o, &vv) in oi.iter_mut().zip(vj) {
                    *o += scores[j] * vv;
                }
            }
        }
    }
    out
}

fn self_attention_full(params: &Parameters, s: &AttnSlots, x: &[Real]) -> Vec<Real> {
    let cfg = params.config();
    let q = proj(params, s.wq, s.bq, x);
    let k = proj(params, s.wk, s.bk, x);
    let v = proj(params, s.wv, s.bv, x);
    let ctx = attend(&q, &k, &v, cfg.d_model, cfg.heads, false, 0);
    proj(params, s.wo, s.bo, &ctx)
}

fn add_into(x: &mut [Real], y: &[Real]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn embed_rows(params: &Parameters, ids: &[usize], start: usize) -> Result<Vec<Real>> {
    let cfg = params.config();
    let d = cfg.d_model;
    let table = params.tensor(params.embedding());
    let mut pos = vec![0.0; d];
    let scale = (d as Real).sqrt();
    let mut out = Vec::with_capacity(ids.len() * d);
    for (p, &id) in ids.iter().enumerate() {
        if id >= cfg.vocab {
            return Err(Error::TokenOutOfRange { token: id, vocab: cfg.vocab });
        }
        sinusoidal_row(start + p, &mut pos);
        out.extend(table.row(id).iter().zip(&pos).map(|(e, q)| e * scale + q));
    }
    Ok(out)
}

/// Runs encoder layers `1..=n` over `src` (end marker appended).
pub fn encode(params: &Parameters, src: &[usize], n: usize, trace: &mut LayerTrace) -> Result<EncodedSource> {
    let cfg = params.config();
    cfg.check(LayerCombination::new(n, 1))?;
    let mut ids = src.to_vec();
    ids.push(EOS);
    if ids.len() > cfg.max_len {
        return Err(Error::TooLong { len: ids.len(), max: cfg.max_len });
    }
    let mut x = embed_rows(params, &ids, 0)?;
    for i in 0..n {
        trace.encoder_call(i);
        let s = params.encoder_layer(i);
        let h = norm_rows(params, s.ln_attn, &x);
        add_into(&mut x, &self_attention_full(params, &s.attn, &h));
        let h = norm_rows(params, s.ln_ff, &x);
        add_into(&mut x, &ffn(params, &s.ff, &h));
    }
    Ok(EncodedSource { memory: norm_rows(params, params.encoder_norm(), &x), len: ids.len() })
}

#[derive(Debug)]
struct CrossKv {
    k: Vec<Real>,
    v: Vec<Real>,
}

/// Growing self-attention keys/values for one hypothesis.
#[derive(Clone, Debug)]
pub struct DecoderCache {
    keys: Vec<Vec<Real>>,
    values: Vec<Vec<Real>>,
    pos: usize,
}

impl DecoderCache {
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Decoder bound to one encoded source at depth `m`.
pub struct IncrementalDecoder<'p> {
    params: &'p Parameters,
    m: usize,
    cross: Rc<Vec<CrossKv>>,
}

impl<'p> IncrementalDecoder<'p> {
    pub fn new(params: &'p Parameters, source: &EncodedSource, m: usize) -> Result<Self> {
        params.config().check(LayerCombination::new(1, m))?;
        let cross = (0..m)
            .map(|j| {
                let s = &params.decoder_layer(j).cross_attn;
                CrossKv {
                    k: proj(params, s.wk, s.bk, &source.memory),
                    v: proj(params, s.wv, s.bv, &source.memory),
                }
            })
            .collect();
        Ok(IncrementalDecoder { params, m, cross: Rc::new(cross) })
    }

    pub fn start(&self) -> DecoderCache {
        DecoderCache { keys: vec![Vec::new(); self.m], values: vec![Vec::new(); self.m], pos: 0 }
    }

    /// Feeds `token` at the cache position and returns next-token logits.
    pub fn step(&self, cache: &mut DecoderCache, token: usize, trace: &mut LayerTrace) -> Result<Vec<Real>> {
        let params = self.params;
        let cfg = params.config();
        if cache.pos >= cfg.max_len {
            return Err(Error::TooLong { len: cache.pos + 1, max: cfg.max_len });
        }
        let (d, heads) = (cfg.d_model, cfg.heads);
        let mut x = embed_rows(params, &[token], cache.pos)?;
        for j in 0..self.m {
            trace.decoder_call(j);
            let s = params.decoder_layer(j);
            let h = norm_rows(params, s.ln_self, &x);
            let a = &s.self_attn;
            let q = proj(params, a.wq, a.bq, &h);
            cache.keys[j].extend(proj(params, a.wk, a.bk, &h));
            cache.values[j].extend(proj(params, a.wv, a.bv, &h));
            let ctx = attend(&q, &cache.keys[j], &cache.values[j], d, heads, false, 0);
            add_into(&mut x, &proj(params, a.wo, a.bo, &ctx));

            let h = norm_rows(params, s.ln_cross, &x);
            let c = &s.cross_attn;
            let q = proj(params, c.wq, c.bq, &h);
            let kv = &self.cross[j];
            let ctx = attend(&q, &kv.k, &kv.v, d, heads, false, 0);
            add_into(&mut x, &proj(params, c.wo, c.bo, &ctx));

            let h = norm_rows(params, s.ln_ff, &x);
            add_into(&mut x, &ffn(params, &s.ff, &h));
        }
        cache.pos += 1;
        let h = norm_rows(params, params.decoder_norm(), &x);
        let table = params.tensor(params.embedding());
        let mut logits = vec![0.0; cfg.vocab];
        tensor::matmul_nt(&h, table.data(), 1, d, cfg.vocab, &mut logits);
        Ok(logits)
    }
}

/// Teacher-forced logits for every position of `tgt_in` computed without a
/// cache: the decoder stack is re-run over the full prefix.
pub fn full_logits(params: &Parameters, source: &EncodedSource, tgt_in: &[usize], m: usize) -> Result<Vec<Vec<Real>>> {
    let cfg = params.config();
    cfg.check(LayerCombination::new(1, m))?;
    let (d, heads) = (cfg.d_model, cfg.heads);
    let mut x = embed_rows(params, tgt_in, 0)?;
    for j in 0..m {
        let s = params.decoder_layer(j);
        let h = norm_rows(params, s.ln_self, &x);
        let a = &s.self_attn;
        let q = proj(params, a.wq, a.bq, &h);
        let k = proj(params, a.wk, a.bk, &h);
        let v = proj(params, a.wv, a.bv, &h);
        let ctx = attend(&q, &k, &v, d, heads, true, 0);
        add_into(&mut x, &proj(params, a.wo, a.bo, &ctx));
        let h = norm_rows(params, s.ln_cross, &x);
        let c = &s.cross_attn;
        let q = proj(params, c.wq, c.bq, &h);
        let k = proj(params, c.wk, c.bk, &source.memory);
        let v = proj(params, c.wv, c.bv, &source.memory);
        let ctx = attend(&q, &k, &v, d, heads, false, 0);
        add_into(&mut x, &proj(params, c.wo, c.bo, &ctx));
        let h = norm_rows(params, s.ln_ff, &x);
        add_into(&mut x, &ffn(params, &s.ff, &h));
    }
    let h = norm_rows(params, params.decoder_norm(), &x);
    let table = params.tensor(params.embedding());
    let rows = tgt_in.len();
    let mut logits = vec![0.0; rows * cfg.vocab];
    tensor::matmul_nt(&h, table.data(), rows, d, cfg.vocab, &mut logits);
    Ok(logits.chunks(cfg.vocab).map(<[Real]>::to_vec).collect())
}
