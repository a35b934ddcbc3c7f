//! Synthetic translation tasks and the tab-separated corpus format.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::vocab::{Vocab, RESERVED};

pub type Pair = (Vec<usize>, Vec<usize>);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyTask {
    Copy,
    Reverse,
    /// Shift every symbol `k` places along the alphabet, wrapping around.
    Rot(usize),
    Sorted,
}

impl fmt::Display for ToyTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ToyTask::Copy => f.write_str("copy"),
            ToyTask::Reverse => f.write_str("reverse"),
            ToyTask::Rot(k) => write!(f, "rot-{k}"),
            ToyTask::Sorted => f.write_str("sorted"),
        }
    }
}

impl FromStr for ToyTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(ToyTask::Copy),
            "reverse" => Ok(ToyTask::Reverse),
            "sorted" => Ok(ToyTask::Sorted),
            _ => s
                .strip_prefix("rot-")
                .and_then(|k| k.parse().ok())
                .map(ToyTask::Rot)
                .ok_or_else(|| Error::Config(format!("unknown task '{s}'"))),
        }
    }
}

impl ToyTask {
    /// Target for `src`, where symbols are ids `RESERVED..RESERVED + symbols`.
    pub fn apply(self, src: &[usize], symbols: usize) -> Vec<usize> {
        match self {
            ToyTask::Copy => src.to_vec(),
            ToyTask::Reverse => src.iter().rev().copied().collect(),
            ToyTask::Rot(k) => src.iter().map(|&t| RESERVED + (t - RESERVED + k) % symbols).collect(),
            ToyTask::Sorted => {
                let mut t = src.to_vec();
                t.sort_unstable();
                t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTaskSpec {
    pub task: ToyTask,
    /// Number of non-reserved symbols.
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub size: usize,
    pub seed: u64,
    /// Probability of replacing each target token by a random symbol.
    pub noise: f64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        ToyTaskSpec { task: ToyTask::Reverse, vocab: 28, min_len: 4, max_len: 10, size: 10_000, seed: 1, noise: 0.0 }
    }
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab < 2 {
            return fail(format!("task {} needs at least 2 symbols, got {}", self.task, self.vocab));
        }
        if let ToyTask::Rot(k) = self.task {
            if k == 0 || k >= self.vocab {
                return fail(format!("rot-{k} needs a shift in 1..{}", self.vocab));
            }
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return fail(format!("noise {} outside [0, 1]", self.noise));
        }
        if self.size < 2 {
            return fail("corpus needs at least 2 sentences".into());
        }
        let distinct: f64 = (self.min_len..=self.max_len).map(|l| (self.vocab as f64).powi(l as i32)).sum();
        if (self.size as f64) > distinct {
            return fail(format!("only {distinct} distinct sources exist for {} requested", self.size));
        }
        Ok(())
    }

    /// Checks that sentences plus begin/end markers fit the model.
    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        if self.max_len + 2 > cfg.max_len {
            return Err(Error::Config(format!("sentences up to {} do not fit max_len {}", self.max_len, cfg.max_len)));
        }
        if self.vocab + RESERVED > cfg.vocab {
            return Err(Error::Config(format!("{} symbols do not fit vocabulary {}", self.vocab, cfg.vocab)));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocab> {
        Vocab::toy(self.vocab + RESERVED)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyCorpus {
    pub train: Vec<Pair>,
    pub test: Vec<Pair>,
}

/// Distinct random sources with their task targets, split 90/10.
pub fn generate_toy_corpus(spec: &ToyTaskSpec) -> Result<ToyCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::with_capacity(spec.size);
    let mut pairs = Vec::with_capacity(spec.size);
    while pairs.len() < spec.size {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let src: Vec<usize> = (0..len).map(|_| RESERVED + rng.gen_range(0..spec.vocab)).collect();
        if !seen.insert(src.clone()) {
            continue;
        }
        let mut tgt = spec.task.apply(&src, spec.vocab);
        if spec.noise > 0.0 {
            for t in tgt.iter_mut() {
                if rng.gen_bool(spec.noise) {
                    *t = RESERVED + rng.gen_range(0..spec.vocab);
                }
            }
        }
        pairs.push((src, tgt));
    }
    let test = pairs.split_off(spec.size - spec.size / 10);
    Ok(ToyCorpus { train: pairs, test })
}

pub fn write_corpus(pairs: &[Pair], vocab: &Vocab, out: &mut dyn Write) -> std::io::Result<()> {
    for (s, t) in pairs {
        writeln!(out, "{}\t{}", vocab.decode(s), vocab.decode(t))?;
    }
    Ok(())
}

pub fn read_corpus(input: impl BufRead, vocab: &Vocab) -> Result<Vec<Pair>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("corpus", e))?;
        if line.is_empty() {
            continue;
        }
        let (s, t) = line
            .split_once('\t')
            .ok_or_else(|| Error::format("corpus", format!("line {}: expected source<TAB>target", i + 1)))?;
        out.push((vocab.encode(s)?, vocab.encode(t)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &Vocab, s: &str) -> Vec<usize> {
        v.encode(s).unwrap()
    }

    #[test]
    fn task_examples() {
        let v = Vocab::toy(RESERVED + 3).unwrap();
        assert_eq!(ToyTask::Copy.apply(&ids(&v, "c a b"), 3), ids(&v, "c a b"));
        assert_eq!(ToyTask::Reverse.apply(&ids(&v, "a b c"), 3), ids(&v, "c b a"));
        assert_eq!(ToyTask::Rot(1).apply(&ids(&v, "a c"), 3), ids(&v, "b a"));
        assert_eq!(ToyTask::Sorted.apply(&ids(&v, "c a b a"), 3), ids(&v, "a a b c"));
    }

    #[test]
    fn task_names_round_trip() {
        for t in [ToyTask::Copy, ToyTask::Reverse, ToyTask::Rot(3), ToyTask::Sorted] {
            assert_eq!(t.to_string().parse::<ToyTask>().unwrap(), t);
        }
        assert!("rot-x".parse::<ToyTask>().is_err());
    }

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        let spec = ToyTaskSpec { size: 300, ..Default::default() };
        let a = generate_toy_corpus(&spec).unwrap();
        assert_eq!(a, generate_toy_corpus(&spec).unwrap());
        assert_eq!((a.train.len(), a.test.len()), (270, 30));
        let train: HashSet<_> = a.train.iter().collect();
        assert!(a.test.iter().all(|p| !train.contains(p)));
        for (s, t) in a.train.iter().chain(&a.test) {
            assert!((spec.min_len..=spec.max_len).contains(&s.len()));
            assert_eq!(t, &ToyTask::Reverse.apply(s, spec.vocab));
        }
        let other = generate_toy_corpus(&ToyTaskSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn invalid_specs() {
        assert!(ToyTaskSpec { vocab: 1, ..Default::default() }.validate().is_err());
        assert!(ToyTaskSpec { task: ToyTask::Rot(3), vocab: 3, ..Default::default() }.validate().is_err());
        assert!(ToyTaskSpec { min_len: 5, max_len: 4, ..Default::default() }.validate().is_err());
        assert!(ToyTaskSpec { vocab: 2, min_len: 1, max_len: 2, size: 7, ..Default::default() }.validate().is_err());
        let long = ToyTaskSpec { max_len: 31, ..Default::default() };
        assert!(long.check_model(&ModelConfig::default()).is_err());
        assert!(ToyTaskSpec::default().check_model(&ModelConfig::default()).is_ok());
    }

    #[test]
    fn noise_only_touches_targets() {
        let spec = ToyTaskSpec { size: 200, noise: 0.5, ..Default::default() };
        let c = generate_toy_corpus(&spec).unwrap();
        let changed = c.train.iter().filter(|(s, t)| *t != ToyTask::Reverse.apply(s, spec.vocab)).count();
        assert!(changed > 100);
        assert!(c.train.iter().all(|(s, t)| s.len() == t.len()));
    }

    #[test]
    fn corpus_file_round_trip() {
        let spec = ToyTaskSpec { size: 20, ..Default::default() };
        let c = generate_toy_corpus(&spec).unwrap();
        let v = spec.vocabulary().unwrap();
        let mut buf = Vec::new();
        write_corpus(&c.train, &v, &mut buf).unwrap();
        assert_eq!(read_corpus(&buf[..], &v).unwrap(), c.train);
        assert!(read_corpus(&b"a b c\n"[..], &v).is_err());
    }
}
