//! Differentiable forward passes of the tied-multi model.
//!
//! `enc_0` is the scaled embedding plus sinusoidal positions and
//! `enc_i = L^enc_i(enc_{i-1})`. The decoder attends to `norm(enc_i)`, the
//! shared encoder final norm, and each tapped decoder state goes through the
//! shared decoder final norm before the tied output projection.

use super::batch::Batch;
use super::config::LayerCombination;
use super::layers::{self, attention_mask};
use super::net::Net;
use super::params::Parameters;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{sinusoidal_positions, Real, Tensor};

/// `enc_0 ..= enc_n` for one batch.
#[derive(Clone, Debug)]
pub struct EncoderStates {
    pub states: Vec<Var>,
}

impl EncoderStates {
    pub fn depth(&self) -> usize {
        self.states.len() - 1
    }

    pub fn get(&self, i: usize) -> Var {
        self.states[i]
    }
}

/// Embedded decoder input and the masks shared by every decoder pass.
#[derive(Clone, Copy, Debug)]
pub struct TargetSide {
    pub dec0: Var,
    self_mask: Var,
    cross_mask: Var,
}

pub fn embed(net: &mut Net, params: &Parameters, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
    let cfg = params.config();
    if len > cfg.max_len {
        return Err(Error::TooLong { len, max: cfg.max_len });
    }
    let d = cfg.d_model;
    let table = net.p(params.embedding());
    let e = net.tape.embedding(table, ids)?;
    let e = net.tape.scale(e, (d as Real).sqrt());
    let pe = sinusoidal_positions(len, d);
    let mut tiled = Vec::with_capacity(batch * len * d);
    for _ in 0..batch {
        tiled.extend_from_slice(pe.data());
    }
    let pe = net.tape.constant(Tensor::new(vec![batch * len, d], tiled));
    let x = net.tape.add(e, pe);
    Ok(net.dropout(x))
}

/// Runs encoder layers `1..=depth` once each, keeping every intermediate state.
pub fn encode_all(net: &mut Net, params: &Parameters, batch: &Batch, depth: usize) -> Result<EncoderStates> {
    let cfg = params.config();
    if depth == 0 || depth > cfg.enc_layers {
        return Err(Error::InvalidCombination {
            combo: LayerCombination::new(depth, 1),
            n_max: cfg.enc_layers,
            m_max: cfg.dec_layers,
        });
    }
    let x0 = embed(net, params, &batch.src_ids, batch.size, batch.src_len)?;
    let mask = attention_mask(cfg.heads, batch.src_len, &batch.src_lens, batch.src_len, false);
    let mask = net.tape.constant(mask);
    let mut states = vec![x0];
    for i in 0..depth {
        net.trace.encoder_call(i);
        let slots = *params.encoder_layer(i);
        let next = layers::encoder_layer(net, &slots, states[i], mask, batch.size, cfg.heads)?;
        states.push(next);
    }
    Ok(EncoderStates { states })
}

/// The normalised encoder state the decoder attends to.
pub fn memory(net: &mut Net, params: &Parameters, enc: Var) -> Var {
    layers::norm(net, params.encoder_norm(), enc)
}

pub fn prepare_target(net: &mut Net, params: &Parameters, batch: &Batch) -> Result<TargetSide> {
    let cfg = params.config();
    let dec0 = embed(net, params, &batch.tgt_in, batch.size, batch.tgt_len)?;
    let self_mask = attention_mask(cfg.heads, batch.tgt_len, &batch.tgt_lens, batch.tgt_len, true);
    let cross_mask = attention_mask(cfg.heads, batch.tgt_len, &batch.src_lens, batch.src_len, false);
    Ok(TargetSide {
        dec0,
        self_mask: net.tape.constant(self_mask),
        cross_mask: net.tape.constant(cross_mask),
    })
}

/// `dec_1 ..= dec_m`, each attending to `memory`.
pub fn decoder_stack(
    net: &mut Net,
    params: &Parameters,
    batch: &Batch,
    side: &TargetSide,
    memory: Var,
    m: usize,
) -> Result<Vec<Var>> {
    let cfg = params.config();
    if m == 0 || m > cfg.dec_layers {
        return Err(Error::InvalidCombination {
            combo: LayerCombination::new(1, m),
            n_max: cfg.enc_layers,
            m_max: cfg.dec_layers,
        });
    }
    let mut x = side.dec0;
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        net.trace.decoder_call(j);
        let slots = *params.decoder_layer(j);
        x = layers::decoder_layer(net, &slots, x, memory, side.self_mask, side.cross_mask, batch.size, cfg.heads)?;
        out.push(x);
    }
    Ok(out)
}

pub fn decode_states(net: &mut Net, params: &Parameters, batch: &Batch, memory: Var, m: usize) -> Result<Vec<Var>> {
    let side = prepare_target(net, params, batch)?;
    decoder_stack(net, params, batch, &side, memory, m)
}

/// Shared final norm followed by the tied output projection: `[rows, vocab]`.
pub fn project(net: &mut Net, params: &Parameters, dec: Var) -> Var {
    let h = layers::norm(net, params.decoder_norm(), dec);
    let table = net.p(params.embedding());
    net.tape.matmul(h, table, true)
}

/// Logits `[batch*tgt_len, vocab]` of the `(n, m)` sub-model under teacher forcing.
pub fn combination_logits(net: &mut Net, params: &Parameters, batch: &Batch, combo: LayerCombination) -> Result<Var> {
    params.config().check(combo)?;
    let enc = encode_all(net, params, batch, combo.n)?;
    let mem = memory(net, params, enc.get(combo.n));
    let decs = decode_states(net, params, batch, mem, combo.m)?;
    Ok(project(net, params, decs[combo.m - 1]))
}

pub fn forward_combination(params: &Parameters, batch: &Batch, combo: LayerCombination) -> Result<Tensor> {
    let mut net = Net::new(params.set());
    let logits = combination_logits(&mut net, params, batch, combo)?;
    Ok(net.tape.value(logits).clone())
}
