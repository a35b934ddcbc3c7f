//! Greedy and beam search at any layer combination, one sentence at a time.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::infer::{encode, IncrementalDecoder};
use crate::model::{LayerCombination, LayerTrace, Parameters};
use crate::tensor::Real;
use crate::vocab::{Vocab, BOS, CLS, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    pub alpha: Real,
    /// Maximum number of emitted tokens, end marker included.
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { beam: 4, alpha: 0.6, max_len: 30 }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be finite and non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecodeMode {
    Greedy,
    Beam,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Beam => "beam",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "beam" => Ok(DecodeMode::Beam),
            other => Err(Error::Config(format!("unknown decode mode '{other}'"))),
        }
    }
}

/// GNMT length penalty `((5 + len) / 6)^alpha`.
pub fn length_penalty(len: usize, alpha: Real) -> Real {
    ((5.0 + len as Real) / 6.0).powf(alpha)
}

fn emittable(token: usize) -> bool {
    token != PAD && token != BOS && token != CLS
}

fn log_softmax(logits: &[Real]) -> Vec<Real> {
    let max = logits.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<Real>().ln() + max;
    logits.iter().map(|&x| x - lse).collect()
}

fn decode_cap(params: &Parameters, cfg: &BeamConfig) -> usize {
    cfg.max_len.min(params.config().max_len)
}

/// Scored output of one search.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: Real,
    pub score: Real,
}

pub fn greedy_decode(params: &Parameters, combo: LayerCombination, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
    let cfg = BeamConfig { beam: 1, alpha: 0.0, max_len };
    Ok(greedy_traced(params, combo, src, &cfg, &mut LayerTrace::default())?.tokens)
}

pub fn beam_decode(params: &Parameters, combo: LayerCombination, src: &[usize], cfg: &BeamConfig) -> Result<Vec<usize>> {
    Ok(beam_search(params, combo, src, cfg, &mut LayerTrace::default())?.tokens)
}

/// Dispatches on `mode`, recording every layer invocation in `trace`.
pub fn decode_traced(
    params: &Parameters,
    combo: LayerCombination,
    src: &[usize],
    mode: DecodeMode,
    cfg: &BeamConfig,
    trace: &mut LayerTrace,
) -> Result<Hypothesis> {
    match mode {
        DecodeMode::Greedy => greedy_traced(params, combo, src, cfg, trace),
        DecodeMode::Beam => beam_search(params, combo, src, cfg, trace),
    }
}

pub fn decode(params: &Parameters, combo: LayerCombination, src: &[usize], mode: DecodeMode, cfg: &BeamConfig) -> Result<Vec<usize>> {
    Ok(decode_traced(params, combo, src, mode, cfg, &mut LayerTrace::default())?.tokens)
}

fn greedy_traced(
    params: &Parameters,
    combo: LayerCombination,
    src: &[usize],
    cfg: &BeamConfig,
    trace: &mut LayerTrace,
) -> Result<Hypothesis> {
    params.config().check(combo)?;
    cfg.validate()?;
    let source = encode(params, src, combo.n, trace)?;
    let dec = IncrementalDecoder::new(params, &source, combo.m)?;
    let mut cache = dec.start();
    let (mut tokens, mut log_prob, mut prev) = (Vec::new(), 0.0, BOS);
    for _ in 0..decode_cap(params, cfg) {
        let lp = log_softmax(&dec.step(&mut cache, prev, trace)?);
        let mut best = EOS;
        for t in (0..lp.len()).filter(|&t| emittable(t)) {
            if lp[t] > lp[best] || (lp[t] == lp[best] && t < best) {
                best = t;
            }
        }
        tokens.push(best);
        log_prob += lp[best];
        if best == EOS {
            break;
        }
        prev = best;
    }
    let score = log_prob / length_penalty(tokens.len(), cfg.alpha);
    Ok(Hypothesis { tokens, log_prob, score })
}

struct Live {
    tokens: Vec<usize>,
    log_prob: Real,
    cache: crate::model::infer::DecoderCache,
}

/// Expands every live hypothesis over all emittable tokens and keeps the
/// `beam` most probable candidates (stable on ties: earlier hypothesis, then
/// lower token id). Candidates ending in the end marker are frozen.
fn beam_search(
    params: &Parameters,
    combo: LayerCombination,
    src: &[usize],
    cfg: &BeamConfig,
    trace: &mut LayerTrace,
) -> Result<Hypothesis> {
    params.config().check(combo)?;
    cfg.validate()?;
    let cap = decode_cap(params, cfg);
    let source = encode(params, src, combo.n, trace)?;
    let dec = IncrementalDecoder::new(params, &source, combo.m)?;
    let mut live = vec![Live { tokens: Vec::new(), log_prob: 0.0, cache: dec.start() }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let bound_lp = length_penalty(cap, cfg.alpha);

    for step in 0..cap {
        let mut candidates: Vec<(usize, usize, Real)> = Vec::new();
        for (h, hyp) in live.iter_mut().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let lp = log_softmax(&dec.step(&mut hyp.cache, prev, trace)?);
            for t in (0..lp.len()).filter(|&t| emittable(t)) {
                candidates.push((h, t, hyp.log_prob + lp[t]));
            }
        }
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2));
        candidates.truncate(cfg.beam);

        let mut next = Vec::with_capacity(cfg.beam);
        for (h, t, log_prob) in candidates {
            let mut tokens = live[h].tokens.clone();
            tokens.push(t);
            if t == EOS || step + 1 == cap {
                let score = log_prob / length_penalty(tokens.len(), cfg.alpha);
                finished.push(Hypothesis { tokens, log_prob, score });
            } else {
                next.push(Live { tokens, log_prob, cache: live[h].cache.clone() });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        let best_done = finished.iter().map(|f| f.score).fold(Real::NEG_INFINITY, Real::max);
        let best_live = live.iter().map(|l| l.log_prob).fold(Real::NEG_INFINITY, Real::max);
        if best_done >= best_live / bound_lp {
            break;
        }
    }

    let mut best: Option<Hypothesis> = None;
    for f in finished {
        if best.as_ref().map_or(true, |b| f.score > b.score) {
            best = Some(f);
        }
    }
    best.ok_or(Error::Empty("beam search produced no hypothesis"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeRecord {
    pub sentence_id: usize,
    pub combination: LayerCombination,
    pub tokens: Vec<usize>,
    pub seconds: f64,
    pub mode: DecodeMode,
    pub error: Option<String>,
}

/// Decodes `sources` in order, timing each sentence from encoder start to
/// search end. Failures are kept in the record and the run continues.
pub fn decode_corpus_timed(
    params: &Parameters,
    combo: LayerCombination,
    sources: &[Vec<usize>],
    mode: DecodeMode,
    cfg: &BeamConfig,
) -> Vec<DecodeRecord> {
    sources
        .iter()
        .enumerate()
        .map(|(id, src)| {
            let start = Instant::now();
            let out = decode(params, combo, src, mode, cfg);
            let seconds = start.elapsed().as_secs_f64();
            let (tokens, error) = match out {
                Ok(t) => (t, None),
                Err(e) => (Vec::new(), Some(e.to_string())),
            };
            DecodeRecord { sentence_id: id, combination: combo, tokens, seconds, mode, error }
        })
        .collect()
}

pub fn total_seconds(records: &[DecodeRecord]) -> f64 {
    records.iter().map(|r| r.seconds).sum()
}

const ERROR_PREFIX: &str = "#error ";

/// One decoded line as persisted in a decode log.
#[derive(Clone, Debug, PartialEq)]
pub struct LoggedDecode {
    pub sentence_id: usize,
    pub combination: LayerCombination,
    pub mode: DecodeMode,
    pub seconds: f64,
    /// Detokenized output, or `Err` with the failure message.
    pub text: std::result::Result<String, String>,
}

pub fn write_decode_log(records: &[DecodeRecord], vocab: &Vocab, out: &mut dyn Write) -> std::io::Result<()> {
    for r in records {
        let text = match &r.error {
            Some(e) => format!("{ERROR_PREFIX}{}", e.replace(['\t', '\n'], " ")),
            None => vocab.decode(&r.tokens),
        };
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}\t{}",
            r.sentence_id, r.combination.n, r.combination.m, r.mode, r.seconds, text
        )?;
    }
    Ok(())
}

pub fn read_decode_log(input: impl BufRead) -> Result<Vec<LoggedDecode>> {
    let bad = |line: usize, detail: &str| Error::format("decode log", format!("line {}: {detail}", line + 1));
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("decode log", e))?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.splitn(6, '\t').collect();
        if f.len() != 6 {
            return Err(bad(i, "expected 6 tab-separated fields"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(i, "bad integer field"));
        let text = match f[5].strip_prefix(ERROR_PREFIX) {
            Some(e) => Err(e.to_string()),
            None => Ok(f[5].to_string()),
        };
        out.push(LoggedDecode {
            sentence_id: num(f[0])?,
            combination: LayerCombination::new(num(f[1])?, num(f[2])?),
            mode: f[3].parse()?,
            seconds: f[4].parse().map_err(|_| bad(i, "bad seconds field"))?,
            text,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(vocab: usize, seed: u64) -> Parameters {
        let cfg = ModelConfig { enc_layers: 2, dec_layers: 2, d_model: 8, heads: 2, d_ff: 16, vocab, max_len: 12, ..Default::default() };
        Parameters::init(&cfg, seed).unwrap()
    }

    #[test]
    fn length_penalty_values() {
        assert_eq!(length_penalty(1, 1.0), 1.0);
        assert!((length_penalty(7, 0.6) - 2.0f64.powf(0.6) as Real).abs() < 1e-12);
        for len in 0..20 {
            assert_eq!(length_penalty(len, 0.0), 1.0);
        }
    }

    #[test]
    fn beam_of_one_is_greedy() {
        for seed in 0..6 {
            let p = tiny(12, seed);
            let cfg = BeamConfig { beam: 1, alpha: 0.6, max_len: 10 };
            for src in [vec![4, 5, 6], vec![7], vec![11, 4, 9, 8, 5]] {
                for combo in p.config().combination_grid() {
                    let g = greedy_decode(&p, combo, &src, 10).unwrap();
                    assert_eq!(g, beam_decode(&p, combo, &src, &cfg).unwrap());
                }
            }
        }
    }

    #[test]
    fn max_len_one_emits_one_token() {
        let p = tiny(10, 3);
        let out = greedy_decode(&p, LayerCombination::new(1, 1), &[4, 5], 1).unwrap();
        assert_eq!(out.len(), 1);
        let cfg = BeamConfig { beam: 3, alpha: 0.6, max_len: 1 };
        assert_eq!(beam_decode(&p, LayerCombination::new(2, 2), &[4, 5], &cfg).unwrap().len(), 1);
    }

    #[test]
    fn outputs_end_with_eos_or_fill_the_cap() {
        let p = tiny(9, 4);
        for mode in [DecodeMode::Greedy, DecodeMode::Beam] {
            let cfg = BeamConfig { beam: 3, alpha: 0.6, max_len: 5 };
            let out = decode(&p, LayerCombination::new(2, 1), &[4, 6, 8], mode, &cfg).unwrap();
            assert!(out.last() == Some(&EOS) || out.len() == 5);
            assert!(out.iter().all(|&t| emittable(t)));
        }
    }

    #[test]
    fn invalid_combination_is_rejected() {
        let p = tiny(9, 1);
        assert!(greedy_decode(&p, LayerCombination::new(3, 1), &[4], 5).is_err());
        assert!(beam_decode(&p, LayerCombination::new(1, 0), &[4], &BeamConfig::default()).is_err());
    }

    #[test]
    fn depth_honesty() {
        let p = tiny(9, 2);
        for combo in p.config().combination_grid() {
            for mode in [DecodeMode::Greedy, DecodeMode::Beam] {
                let mut trace = LayerTrace::default();
                decode_traced(&p, combo, &[4, 5, 6], mode, &BeamConfig::default(), &mut trace).unwrap();
                assert_eq!(trace.depth_reached(), (combo.n, combo.m));
                assert!((0..combo.n).all(|i| trace.encoder_calls(i) == 1));
            }
        }
    }

    #[test]
    fn decoding_is_deterministic() {
        let p = tiny(14, 8);
        let cfg = BeamConfig::default();
        let a = beam_decode(&p, LayerCombination::new(2, 2), &[4, 9, 13], &cfg).unwrap();
        let b = beam_decode(&p, LayerCombination::new(2, 2), &[4, 9, 13], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corpus_records_are_ordered_and_sum() {
        let p = tiny(9, 5);
        let sources = vec![vec![4], vec![5, 6], vec![99], vec![7, 8]];
        let recs = decode_corpus_timed(&p, LayerCombination::new(1, 2), &sources, DecodeMode::Greedy, &BeamConfig::default());
        assert_eq!(recs.len(), 4);
        assert!(recs.iter().enumerate().all(|(i, r)| r.sentence_id == i && r.seconds >= 0.0));
        assert!(recs[2].error.is_some());
        let total: f64 = recs.iter().map(|r| r.seconds).sum();
        assert_eq!(total, total_seconds(&recs));
    }

    #[test]
    fn decode_log_round_trip() {
        let vocab = Vocab::toy(9).unwrap();
        let recs = vec![
            DecodeRecord {
                sentence_id: 0,
                combination: LayerCombination::new(2, 1),
                tokens: vec![4, 5, EOS],
                seconds: 0.00125,
                mode: DecodeMode::Beam,
                error: None,
            },
            DecodeRecord {
                sentence_id: 1,
                combination: LayerCombination::new(2, 1),
                tokens: vec![],
                seconds: 0.5,
                mode: DecodeMode::Beam,
                error: Some("token 99\tout".into()),
            },
        ];
        let mut buf = Vec::new();
        write_decode_log(&recs, &vocab, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("0\t2\t1\tbeam\t0.001250\ta b\n"));
        let back = read_decode_log(&buf[..]).unwrap();
        assert_eq!(back[0].text, Ok("a b".to_string()));
        assert_eq!(back[1].text, Err("token 99 out".to_string()));
        assert_eq!(back[1].combination, LayerCombination::new(2, 1));
    }
}
