//! Sentence chrF, corpus BLEU, the speed order over layer combinations and
//! oracle selection.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::model::LayerCombination;

pub const CHRF_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;
const BLEU_ORDER: usize = 4;

fn char_ngrams(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut counts = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Character n-gram F-score with whitespace removed. Precision and recall
/// are averaged over the orders for which both sides have n-grams; two empty
/// strings score 1.
pub fn sentence_chrf(hyp: &str, reference: &str, max_n: usize, beta: f64) -> f64 {
    let h: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    if h.is_empty() && r.is_empty() {
        return 1.0;
    }
    let (mut prec, mut rec, mut effective) = (0.0, 0.0, 0usize);
    for n in 1..=max_n {
        let hc = char_ngrams(&h, n);
        let rc = char_ngrams(&r, n);
        let h_total: usize = hc.values().sum();
        let r_total: usize = rc.values().sum();
        if h_total == 0 || r_total == 0 {
            continue;
        }
        let matches: usize = hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum();
        prec += matches as f64 / h_total as f64;
        rec += matches as f64 / r_total as f64;
        effective += 1;
    }
    if effective == 0 {
        return 0.0;
    }
    let (p, r) = (prec / effective as f64, rec / effective as f64);
    if p + r == 0.0 {
        return 0.0;
    }
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (b2 * p + r)
}

fn is_split_punct(c: char) -> bool {
    matches!(c, '{'..='~' | '['..='`' | ' '..='&' | '('..='+' | ':'..='@' | '/')
}

/// Punctuation-splitting tokenizer in the style of mteval 13a: symbols are
/// isolated, and periods/commas are split off unless between digits.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = String::with_capacity(line.len() * 2);
    for (i, &c) in chars.iter().enumerate() {
        let prev = if i > 0 { chars[i - 1] } else { ' ' };
        let next = chars.get(i + 1).copied().unwrap_or(' ');
        let period_comma = (c == '.' || c == ',') && !(prev.is_ascii_digit() && next.is_ascii_digit());
        let dash_after_digit = c == '-' && prev.is_ascii_digit();
        if (is_split_punct(c) && c != ' ') || period_comma || dash_after_digit {
            out.push(' ');
            out.push(c);
            out.push(' ');
        } else {
            out.push(c);
        }
    }
    out.split_whitespace().map(str::to_string).collect()
}

/// Sufficient statistics of corpus BLEU.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub correct: [usize; BLEU_ORDER],
    pub total: [usize; BLEU_ORDER],
    pub sys_len: usize,
    pub ref_len: usize,
}

fn word_ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn add_sentence(&mut self, hyp: &str, reference: &str) {
        let h = tokenize_13a(hyp);
        let r = tokenize_13a(reference);
        self.sys_len += h.len();
        self.ref_len += r.len();
        for n in 1..=BLEU_ORDER {
            let hc = word_ngrams(&h, n);
            let rc = word_ngrams(&r, n);
            self.total[n - 1] += hc.values().sum::<usize>();
            self.correct[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }

    /// Score on the 0..100 scale with exponential smoothing of zero counts.
    pub fn score(&self) -> f64 {
        if self.correct.iter().all(|&c| c == 0) {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut smooth = 1.0;
        for n in 0..BLEU_ORDER {
            if self.total[n] == 0 {
                return 0.0;
            }
            let p = if self.correct[n] == 0 {
                smooth *= 2.0;
                100.0 / (smooth * self.total[n] as f64)
            } else {
                100.0 * self.correct[n] as f64 / self.total[n] as f64
            };
            log_sum += p.ln();
        }
        let bp = if self.sys_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.sys_len as f64).exp()
        };
        bp * (log_sum / BLEU_ORDER as f64).exp()
    }
}

pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::LengthMismatch { left: hyps.len(), right: refs.len() });
    }
    let mut stats = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        stats.add_sentence(h.as_ref(), r.as_ref());
    }
    Ok(stats.score())
}

/// `c1` decodes faster than `c2`: fewer decoder layers, then fewer encoder layers.
pub fn is_faster(c1: LayerCombination, c2: LayerCombination) -> bool {
    c1.m < c2.m || (c1.m == c2.m && c1.n < c2.n)
}

/// Total order matching [`is_faster`]; `Less` means faster.
pub fn speed_order(c1: &LayerCombination, c2: &LayerCombination) -> Ordering {
    (c1.m, c1.n).cmp(&(c2.m, c2.n))
}

/// One value per layer combination, stored n-major with m varying fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinationGrid {
    enc_layers: usize,
    dec_layers: usize,
    values: Vec<f64>,
}

impl CombinationGrid {
    pub fn new(enc_layers: usize, dec_layers: usize, values: Vec<f64>) -> Result<Self> {
        if enc_layers == 0 || dec_layers == 0 {
            return Err(Error::Config("grid needs at least one layer on each side".into()));
        }
        if values.len() != enc_layers * dec_layers {
            return Err(Error::LengthMismatch { left: values.len(), right: enc_layers * dec_layers });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format("grid", format!("entry {k} is not finite")));
        }
        Ok(CombinationGrid { enc_layers, dec_layers, values })
    }

    pub fn enc_layers(&self) -> usize {
        self.enc_layers
    }

    pub fn dec_layers(&self) -> usize {
        self.dec_layers
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, combo: LayerCombination) -> f64 {
        self.values[combo.index(self.dec_layers)]
    }

    pub fn combinations(&self) -> impl Iterator<Item = LayerCombination> + '_ {
        (0..self.values.len()).map(|k| LayerCombination::from_index(k, self.dec_layers))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleLabel {
    /// Every combination reaching the maximum, in grid order.
    pub best: Vec<LayerCombination>,
    pub fastest_best: LayerCombination,
}

impl OracleLabel {
    /// Binary indicator over the grid, n-major.
    pub fn indicator(&self, enc_layers: usize, dec_layers: usize) -> Vec<bool> {
        let mut y = vec![false; enc_layers * dec_layers];
        for c in &self.best {
            y[c.index(dec_layers)] = true;
        }
        y
    }
}

pub fn oracle_label_set(grid: &CombinationGrid) -> OracleLabel {
    let max = grid.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let best: Vec<LayerCombination> = grid.combinations().filter(|&c| grid.get(c) == max).collect();
    let fastest_best = *best.iter().min_by(|a, b| speed_order(a, b)).expect("grid is non-empty");
    OracleLabel { best, fastest_best }
}

pub fn oracle_combination(grid: &CombinationGrid) -> LayerCombination {
    oracle_label_set(grid).fastest_best
}

/// Histogram of `fastest_best` over the `enc_layers × dec_layers` grid.
pub fn oracle_distribution(labels: &[OracleLabel], enc_layers: usize, dec_layers: usize) -> Vec<usize> {
    let mut bins = vec![0; enc_layers * dec_layers];
    for l in labels {
        bins[l.fastest_best.index(dec_layers)] += 1;
    }
    bins
}

pub fn grid_header(enc_layers: usize, dec_layers: usize) -> String {
    format!("#grid N={enc_layers} M={dec_layers} order=n-major,m-fastest")
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let bad = || Error::format("grid file", format!("bad header '{line}'"));
    let rest = line.strip_prefix("#grid ").ok_or_else(bad)?;
    let mut n = None;
    let mut m = None;
    for field in rest.split_whitespace() {
        match field.split_once('=') {
            Some(("N", v)) => n = v.parse().ok(),
            Some(("M", v)) => m = v.parse().ok(),
            Some(("order", "n-major,m-fastest")) => {}
            _ => return Err(bad()),
        }
    }
    Ok((n.ok_or_else(bad)?, m.ok_or_else(bad)?))
}

pub fn write_grid_file(rows: &[(usize, CombinationGrid)], enc_layers: usize, dec_layers: usize, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "{}", grid_header(enc_layers, dec_layers))?;
    for (id, grid) in rows {
        write!(out, "{id}")?;
        for v in grid.values() {
            write!(out, "\t{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_grid_file(input: impl BufRead) -> Result<(usize, usize, Vec<(usize, CombinationGrid)>)> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("grid file", "missing header"))?
        .map_err(|e| Error::io("grid file", e))?;
    let (n, m) = parse_header(&header)?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io("grid file", e))?;
        if line.is_empty() {
            continue;
        }
        let bad = || Error::format("grid file", format!("line {}", i + 2));
        let mut fields = line.split('\t');
        let id = fields.next().and_then(|f| f.parse().ok()).ok_or_else(bad)?;
        let values = fields.map(|f| f.parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
        rows.push((id, CombinationGrid::new(n, m, values)?));
    }
    Ok((n, m, rows))
}
