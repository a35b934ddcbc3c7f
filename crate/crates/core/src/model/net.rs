use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Per-layer invocation counters (0-based logical layer index).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerTrace {
    pub encoder: Vec<usize>,
    pub decoder: Vec<usize>,
}

impl LayerTrace {
    pub fn encoder_call(&mut self, i: usize) {
        bump(&mut self.encoder, i);
    }

    pub fn decoder_call(&mut self, j: usize) {
        bump(&mut self.decoder, j);
    }

    pub fn encoder_calls(&self, i: usize) -> usize {
        self.encoder.get(i).copied().unwrap_or(0)
    }

    pub fn decoder_calls(&self, j: usize) -> usize {
        self.decoder.get(j).copied().unwrap_or(0)
    }

    /// Highest encoder / decoder layer (1-based) touched so far.
    pub fn depth_reached(&self) -> (usize, usize) {
        let top = |v: &[usize]| v.iter().rposition(|&c| c > 0).map_or(0, |i| i + 1);
        (top(&self.encoder), top(&self.decoder))
    }
}

fn bump(v: &mut Vec<usize>, i: usize) {
    if v.len() <= i {
        v.resize(i + 1, 0);
    }
    v[i] += 1;
}

/// A tape plus lazily bound parameters: a slot becomes a tape leaf the first
/// time a layer asks for it, so untouched layers never enter the graph.
pub struct Net<'p> {
    pub tape: Tape,
    set: &'p ParamSet,
    vars: Vec<Option<Var>>,
    dropout: Real,
    rng: ChaCha8Rng,
    pub trace: LayerTrace,
}

impl<'p> Net<'p> {
    pub fn new(set: &'p ParamSet) -> Self {
        Self::with_dropout(set, 0.0, 0)
    }

    pub fn with_dropout(set: &'p ParamSet, dropout: Real, seed: u64) -> Self {
        Net {
            tape: Tape::new(),
            set,
            vars: vec![None; set.len()],
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: LayerTrace::default(),
        }
    }

    pub fn p(&mut self, slot: usize) -> Var {
        if let Some(v) = self.vars[slot] {
            return v;
        }
        let v = self.tape.param(self.set.get(slot).clone());
        self.vars[slot] = Some(v);
        v
    }

    pub fn is_bound(&self, slot: usize) -> bool {
        self.vars[slot].is_some()
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        let p = self.dropout;
        self.tape.dropout(x, p, &mut self.rng)
    }

    /// Gradient per parameter slot; `None` for slots never bound.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| v.map(|v| grads.wrt(v))).collect()
    }
}
