//! Sequence-level distillation: a parent's beam outputs become the targets.

use crate::data::Pair;
use crate::decode::{beam_decode, BeamConfig};
use crate::model::Parameters;
use crate::vocab::EOS;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PseudoParallelCorpus {
    /// Source sentences with the parent's translation, in input order.
    pub pairs: Vec<Pair>,
    /// Input positions whose decode failed; those sentences are skipped.
    pub failed: Vec<usize>,
}

impl PseudoParallelCorpus {
    pub fn failures(&self) -> usize {
        self.failed.len()
    }
}

/// Beam-decodes every source with the full-depth parent.
pub fn generate_distillation_corpus(parent: &Parameters, corpus: &[Pair], beam: &BeamConfig) -> PseudoParallelCorpus {
    let deepest = parent.config().deepest();
    let mut out = PseudoParallelCorpus::default();
    for (i, (src, _)) in corpus.iter().enumerate() {
        match beam_decode(parent, deepest, src, beam) {
            Ok(mut hyp) => {
                if hyp.last() == Some(&EOS) {
                    hyp.pop();
                }
                out.pairs.push((src.clone(), hyp));
            }
            Err(_) => out.failed.push(i),
        }
    }
    out
}
