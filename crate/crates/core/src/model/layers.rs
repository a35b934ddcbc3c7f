//! Pre-layer-norm Transformer blocks recorded on a [`Net`].

use super::net::Net;
use super::params::{AttnSlots, DecoderLayerSlots, EncoderLayerSlots, FfnSlots, NormSlots};
use crate::autodiff::Var;
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Additive score for masked attention positions.
pub const MASKED: Real = -1e9;

/// Additive mask `[batch*heads, q_len, k_len]` hiding padded keys and, when
/// `causal`, keys after the query position.
pub fn attention_mask(heads: usize, q_len: usize, key_lens: &[usize], k_len: usize, causal: bool) -> Tensor {
    let batch = key_lens.len();
    let mut data = vec![0.0; batch * heads * q_len * k_len];
    for (b, &len) in key_lens.iter().enumerate() {
        for h in 0..heads {
            let base = (b * heads + h) * q_len * k_len;
            for i in 0..q_len {
                for j in 0..k_len {
                    if j >= len || (causal && j > i) {
                        data[base + i * k_len + j] = MASKED;
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch * heads, q_len, k_len], data)
}

pub fn norm(net: &mut Net, s: NormSlots, x: Var) -> Var {
    let g = net.p(s.gamma);
    let b = net.p(s.beta);
    net.tape.layer_norm(x, g, b)
}

fn linear(net: &mut Net, w: usize, b: usize, x: Var) -> Var {
    let w = net.p(w);
    let b = net.p(b);
    net.tape.linear(x, w, b)
}

/// Multi-head scaled dot-product attention of `xq` over `xkv`.
pub fn attention(net: &mut Net, s: &AttnSlots, xq: Var, xkv: Var, mask: Var, batch: usize, heads: usize) -> Result<Var> {
    let d = net.tape.shape(xq)[1];
    let q = linear(net, s.wq, s.bq, xq);
    let k = linear(net, s.wk, s.bk, xkv);
    let v = linear(net, s.wv, s.bv, xkv);
    let t = &mut net.tape;
    let qh = t.split_heads(q, batch, heads);
    let kh = t.split_heads(k, batch, heads);
    let vh = t.split_heads(v, batch, heads);
    let scores = t.batch_matmul(qh, kh, true);
    let scores = t.scale(scores, 1.0 / ((d / heads) as Real).sqrt());
    let scores = t.add(scores, mask);
    let probs = t.softmax_rows(scores)?;
    let ctx = t.batch_matmul(probs, vh, false);
    let merged = t.merge_heads(ctx, batch, heads);
    Ok(linear(net, s.wo, s.bo, merged))
}

pub fn feed_forward(net: &mut Net, s: &FfnSlots, x: Var) -> Var {
    let h = linear(net, s.w1, s.b1, x);
    let h = net.tape.relu(h);
    linear(net, s.w2, s.b2, h)
}

fn residual(net: &mut Net, x: Var, branch: Var) -> Var {
    let branch = net.dropout(branch);
    net.tape.add(x, branch)
}

pub fn encoder_layer(net: &mut Net, s: &EncoderLayerSlots, x: Var, mask: Var, batch: usize, heads: usize) -> Result<Var> {
    let h = norm(net, s.ln_attn, x);
    let a = attention(net, &s.attn, h, h, mask, batch, heads)?;
    let x = residual(net, x, a);
    let h = norm(net, s.ln_ff, x);
    let f = feed_forward(net, &s.ff, h);
    Ok(residual(net, x, f))
}

#[allow(clippy::too_many_arguments)]
pub fn decoder_layer(
    net: &mut Net,
    s: &DecoderLayerSlots,
    x: Var,
    memory: Var,
    self_mask: Var,
    cross_mask: Var,
    batch: usize,
    heads: usize,
) -> Result<Var> {
    let h = norm(net, s.ln_self, x);
    let a = attention(net, &s.self_attn, h, h, self_mask, batch, heads)?;
    let x = residual(net, x, a);
    let h = norm(net, s.ln_cross, x);
    let c = attention(net, &s.cross_attn, h, memory, cross_mask, batch, heads)?;
    let x = residual(net, x, c);
    let h = norm(net, s.ln_ff, x);
    let f = feed_forward(net, &s.ff, h);
    Ok(residual(net, x, f))
}
