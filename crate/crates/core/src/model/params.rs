//! Parameter storage and the slot layout of the tied-multi Transformer.
//!
//! Every learned tensor lives once in a [`ParamSet`]; layers refer to their
//! tensors by slot index. Under recurrent stacking all encoder layers resolve
//! to one physical slot group, and likewise all decoder layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Named, ordered tensor storage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Elementwise arithmetic mean of sets with identical names and shapes.
    pub fn mean_of(sets: &[&ParamSet]) -> Result<ParamSet> {
        let first = sets.first().ok_or(Error::Empty("parameter sets to average"))?;
        for s in &sets[1..] {
            if s.names != first.names {
                return Err(Error::ConfigMismatch("parameter names differ".into()));
            }
            for (a, b) in s.tensors.iter().zip(&first.tensors) {
                if a.shape() != b.shape() {
                    return Err(Error::ConfigMismatch("parameter shapes differ".into()));
                }
            }
        }
        let k = sets.len() as Real;
        let tensors = (0..first.len())
            .map(|slot| {
                let base = first.tensors[slot].data();
                let mut acc = vec![0.0; base.len()];
                for s in sets {
                    for (a, v) in acc.iter_mut().zip(s.tensors[slot].data()) {
                        *a += v;
                    }
                }
                for (i, a) in acc.iter_mut().enumerate() {
                    // identical inputs average to themselves exactly
                    *a = if sets.iter().all(|s| s.tensors[slot].data()[i] == base[i]) {
                        base[i]
                    } else {
                        *a / k
                    };
                }
                Tensor::new(first.tensors[slot].shape().to_vec(), acc)
            })
            .collect();
        Ok(ParamSet { names: first.names.clone(), tensors })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormSlots {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSlots {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnSlots {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderLayerSlots {
    pub ln_attn: NormSlots,
    pub attn: AttnSlots,
    pub ln_ff: NormSlots,
    pub ff: FfnSlots,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderLayerSlots {
    pub ln_self: NormSlots,
    pub self_attn: AttnSlots,
    pub ln_cross: NormSlots,
    pub cross_attn: AttnSlots,
    pub ln_ff: NormSlots,
    pub ff: FfnSlots,
}

/// Initialiser used when allocating a layout.
pub(crate) enum Init<'a> {
    Zeros,
    Random(&'a mut ChaCha8Rng),
}

impl Init<'_> {
    pub(crate) fn matrix(&mut self, rows: usize, cols: usize) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(&[rows, cols]),
            Init::Random(rng) => {
                let bound = (6.0 / (rows + cols) as Real).sqrt();
                Tensor::uniform(&[rows, cols], bound, *rng)
            }
        }
    }

    fn embedding(&mut self, vocab: usize, d: usize) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(&[vocab, d]),
            Init::Random(rng) => Tensor::normal(&[vocab, d], (d as Real).powf(-0.5), *rng),
        }
    }
}

pub(crate) fn add_norm(set: &mut ParamSet, prefix: &str, d: usize, init: &mut Init) -> NormSlots {
    let gamma = match init {
        Init::Zeros => Tensor::zeros(&[d]),
        Init::Random(_) => Tensor::full(&[d], 1.0),
    };
    NormSlots {
        gamma: set.add(format!("{prefix}.gamma"), gamma),
        beta: set.add(format!("{prefix}.beta"), Tensor::zeros(&[d])),
    }
}

pub(crate) fn add_attn(set: &mut ParamSet, prefix: &str, d: usize, init: &mut Init) -> AttnSlots {
    let mut pair = |name: &str, init: &mut Init| {
        let w = set.add(format!("{prefix}.w{name}"), init.matrix(d, d));
        let b = set.add(format!("{prefix}.b{name}"), Tensor::zeros(&[d]));
        (w, b)
    };
    let (wq, bq) = pair("q", init);
    let (wk, bk) = pair("k", init);
    let (wv, bv) = pair("v", init);
    let (wo, bo) = pair("o", init);
    AttnSlots { wq, bq, wk, bk, wv, bv, wo, bo }
}

pub(crate) fn add_ffn(set: &mut ParamSet, prefix: &str, d: usize, d_ff: usize, init: &mut Init) -> FfnSlots {
    FfnSlots {
        w1: set.add(format!("{prefix}.w1"), init.matrix(d, d_ff)),
        b1: set.add(format!("{prefix}.b1"), Tensor::zeros(&[d_ff])),
        w2: set.add(format!("{prefix}.w2"), init.matrix(d_ff, d)),
        b2: set.add(format!("{prefix}.b2"), Tensor::zeros(&[d])),
    }
}

pub(crate) fn add_encoder_layer(set: &mut ParamSet, prefix: &str, d: usize, d_ff: usize, init: &mut Init) -> EncoderLayerSlots {
    EncoderLayerSlots {
        ln_attn: add_norm(set, &format!("{prefix}.ln_attn"), d, init),
        attn: add_attn(set, &format!("{prefix}.self_attn"), d, init),
        ln_ff: add_norm(set, &format!("{prefix}.ln_ff"), d, init),
        ff: add_ffn(set, &format!("{prefix}.ff"), d, d_ff, init),
    }
}

fn add_decoder_layer(set: &mut ParamSet, prefix: &str, d: usize, d_ff: usize, init: &mut Init) -> DecoderLayerSlots {
    DecoderLayerSlots {
        ln_self: add_norm(set, &format!("{prefix}.ln_self"), d, init),
        self_attn: add_attn(set, &format!("{prefix}.self_attn"), d, init),
        ln_cross: add_norm(set, &format!("{prefix}.ln_cross"), d, init),
        cross_attn: add_attn(set, &format!("{prefix}.cross_attn"), d, init),
        ln_ff: add_norm(set, &format!("{prefix}.ln_ff"), d, init),
        ff: add_ffn(set, &format!("{prefix}.ff"), d, d_ff, init),
    }
}

/// Learned weights of a tied-multi Transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    config: ModelConfig,
    set: ParamSet,
    embedding: usize,
    encoder: Vec<EncoderLayerSlots>,
    decoder: Vec<DecoderLayerSlots>,
    enc_norm: NormSlots,
    dec_norm: NormSlots,
}

impl Parameters {
    /// Random initialisation: Xavier-uniform matrices, `N(0, 1/d)` embeddings,
    /// unit layer-norm scales, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, Init::Random(&mut rng))
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Self::build(config, Init::Zeros)
    }

    fn build(config: &ModelConfig, mut init: Init) -> Result<Self> {
        config.validate()?;
        let (d, ff) = (config.d_model, config.d_ff);
        let mut set = ParamSet::default();
        let embedding = set.add("embedding", init.embedding(config.vocab, d));
        let (enc_physical, dec_physical) = if config.recurrent_stacking {
            (1, 1)
        } else {
            (config.enc_layers, config.dec_layers)
        };
        let layer_name = |stack: &str, i: usize| {
            if config.recurrent_stacking {
                format!("{stack}.shared")
            } else {
                format!("{stack}.{i}")
            }
        };
        let encoder = (0..enc_physical)
            .map(|i| add_encoder_layer(&mut set, &layer_name("encoder", i), d, ff, &mut init))
            .collect();
        let decoder = (0..dec_physical)
            .map(|i| add_decoder_layer(&mut set, &layer_name("decoder", i), d, ff, &mut init))
            .collect();
        let enc_norm = add_norm(&mut set, "encoder.final_norm", d, &mut init);
        let dec_norm = add_norm(&mut set, "decoder.final_norm", d, &mut init);
        Ok(Parameters { config: config.clone(), set, embedding, encoder, decoder, enc_norm, dec_norm })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set(&self) -> &ParamSet {
        &self.set
    }

    pub fn set_mut(&mut self) -> &mut ParamSet {
        &mut self.set
    }

    pub fn embedding(&self) -> usize {
        self.embedding
    }

    /// Slots of encoder layer `i` (0-based).
    pub fn encoder_layer(&self, i: usize) -> &EncoderLayerSlots {
        assert!(i < self.config.enc_layers, "encoder layer {i} out of range");
        &self.encoder[if self.config.recurrent_stacking { 0 } else { i }]
    }

    /// Slots of decoder layer `j` (0-based).
    pub fn decoder_layer(&self, j: usize) -> &DecoderLayerSlots {
        assert!(j < self.config.dec_layers, "decoder layer {j} out of range");
        &self.decoder[if self.config.recurrent_stacking { 0 } else { j }]
    }

    pub fn encoder_norm(&self) -> NormSlots {
        self.enc_norm
    }

    pub fn decoder_norm(&self) -> NormSlots {
        self.dec_norm
    }

    pub fn tensor(&self, slot: usize) -> &Tensor {
        self.set.get(slot)
    }

    /// Standalone model holding copies of the first `n` encoder and first
    /// `m` decoder layers plus the shared embedding and final norms.
    pub fn extract(&self, n: usize, m: usize) -> Result<Parameters> {
        self.config.check(super::LayerCombination::new(n, m))?;
        let mut small = Parameters::zeros(&self.config.with_depth(n, m))?;
        for slot in 0..small.set.len() {
            let name = small.set.name(slot).to_string();
            let src = self
                .set
                .slot(&name)
                .ok_or_else(|| Error::format("parameters", format!("missing {name}")))?;
            *small.set.get_mut(slot) = self.set.get(src).clone();
        }
        Ok(small)
    }

    /// Replaces the weights with `set`, which must match names and shapes.
    pub fn with_set(&self, set: ParamSet) -> Result<Parameters> {
        if set.len() != self.set.len() {
            return Err(Error::ConfigMismatch("parameter count differs".into()));
        }
        for ((n1, t1), (n2, t2)) in set.iter().zip(self.set.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::ConfigMismatch(format!("{n1} does not match {n2}")));
            }
        }
        Ok(Parameters { set, ..self.clone() })
    }
}

/// Elementwise mean of checkpoints sharing one configuration.
pub fn average_checkpoints(ckpts: &[Parameters]) -> Result<Parameters> {
    let first = ckpts.first().ok_or(Error::Empty("checkpoints to average"))?;
    if let Some(other) = ckpts.iter().find(|c| c.config != first.config) {
        return Err(Error::ConfigMismatch(format!("{:?} vs {:?}", first.config, other.config)));
    }
    let sets: Vec<&ParamSet> = ckpts.iter().map(|c| &c.set).collect();
    first.with_set(ParamSet::mean_of(&sets)?)
}
