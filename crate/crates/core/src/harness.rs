//! Experiment stages: cost-benefit tables, oracle grids, model sizes, the
//! distillation comparison, and their text/CSV/JSON renderings.
//!
//! Every report is computed from decode logs, so it can be rebuilt from the
//! persisted logs without a model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde_json::{json, Value};

use crate::data::Pair;
use crate::decode::{decode, decode_corpus_timed, BeamConfig, DecodeMode, DecodeRecord, LoggedDecode};
use crate::distill::{generate_distillation_corpus, PseudoParallelCorpus};
use crate::error::{Error, Result};
use crate::metrics::{
    corpus_bleu, oracle_distribution, oracle_label_set, sentence_chrf, CombinationGrid, OracleLabel, CHRF_BETA, CHRF_ORDER,
};
use crate::model::{param_count, LayerCombination, ModelConfig, Parameters};
use crate::selector::{select_combination, selector_forward, SelectorParams};
use crate::train::{train, ModelKind, TrainingConfig};
use crate::vocab::Vocab;

/// Decodes `sources` at every layer combination, combination-major.
pub fn decode_all_combinations(params: &Parameters, sources: &[Vec<usize>], mode: DecodeMode, beam: &BeamConfig) -> Vec<DecodeRecord> {
    params
        .config()
        .combination_grid()
        .into_iter()
        .flat_map(|combo| decode_corpus_timed(params, combo, sources, mode, beam))
        .collect()
}

/// Converts in-memory records to the form a decode log reads back as.
pub fn logged(records: &[DecodeRecord], vocab: &Vocab) -> Vec<LoggedDecode> {
    records
        .iter()
        .map(|r| LoggedDecode {
            sentence_id: r.sentence_id,
            combination: r.combination,
            mode: r.mode,
            seconds: format!("{:.6}", r.seconds).parse().unwrap(),
            text: match &r.error {
                Some(e) => Err(e.replace(['\t', '\n'], " ")),
                None => Ok(vocab.decode(&r.tokens)),
            },
        })
        .collect()
}

/// Hypothesis text per sentence for one combination; failures become empty.
fn hypotheses(logs: &[LoggedDecode], combo: LayerCombination, sentences: usize) -> Result<(Vec<String>, usize, f64)> {
    let mut hyps: Vec<Option<String>> = vec![None; sentences];
    let (mut failures, mut seconds) = (0, 0.0);
    for l in logs.iter().filter(|l| l.combination == combo) {
        let slot = hyps
            .get_mut(l.sentence_id)
            .ok_or_else(|| Error::format("decode log", format!("sentence {} out of range", l.sentence_id)))?;
        if slot.is_some() {
            return Err(Error::format("decode log", format!("sentence {} logged twice at {combo}", l.sentence_id)));
        }
        seconds += l.seconds;
        *slot = Some(match &l.text {
            Ok(t) => t.clone(),
            Err(_) => {
                failures += 1;
                String::new()
            }
        });
    }
    if let Some(missing) = hyps.iter().position(Option::is_none) {
        return Err(Error::format("decode log", format!("sentence {missing} missing at {combo}")));
    }
    Ok((hyps.into_iter().map(Option::unwrap).collect(), failures, seconds))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostBenefitRow {
    pub combination: LayerCombination,
    pub bleu: f64,
    pub total_seconds: f64,
    pub mean_seconds: f64,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostBenefitReport {
    pub model_kind: String,
    pub checkpoint: String,
    pub mode: DecodeMode,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub sentences: usize,
    pub rows: Vec<CostBenefitRow>,
}

pub fn cost_benefit_from_logs(
    logs: &[LoggedDecode],
    references: &[String],
    enc_layers: usize,
    dec_layers: usize,
    mode: DecodeMode,
    model_kind: &str,
    checkpoint: &str,
) -> Result<CostBenefitReport> {
    let n = references.len();
    let mut rows = Vec::with_capacity(enc_layers * dec_layers);
    for k in 0..enc_layers * dec_layers {
        let combo = LayerCombination::from_index(k, dec_layers);
        let (hyps, failures, total) = hypotheses(logs, combo, n)?;
        rows.push(CostBenefitRow {
            combination: combo,
            bleu: corpus_bleu(&hyps, references)?,
            total_seconds: total,
            mean_seconds: if n > 0 { total / n as f64 } else { 0.0 },
            failures,
        });
    }
    Ok(CostBenefitReport {
        model_kind: model_kind.to_string(),
        checkpoint: checkpoint.to_string(),
        mode,
        enc_layers,
        dec_layers,
        sentences: n,
        rows,
    })
}

/// Decodes the test set at every combination and scores it.
pub fn run_cost_benefit(
    params: &Parameters,
    test: &[Pair],
    vocab: &Vocab,
    mode: DecodeMode,
    beam: &BeamConfig,
    model_kind: &str,
    checkpoint: &str,
) -> Result<(CostBenefitReport, Vec<DecodeRecord>)> {
    let sources: Vec<Vec<usize>> = test.iter().map(|(s, _)| s.clone()).collect();
    let refs: Vec<String> = test.iter().map(|(_, t)| vocab.decode(t)).collect();
    let records = decode_all_combinations(params, &sources, mode, beam);
    let cfg = params.config();
    let report = cost_benefit_from_logs(&logged(&records, vocab), &refs, cfg.enc_layers, cfg.dec_layers, mode, model_kind, checkpoint)?;
    Ok((report, records))
}

impl CostBenefitReport {
    pub fn row(&self, combo: LayerCombination) -> &CostBenefitRow {
        &self.rows[combo.index(self.dec_layers)]
    }

    /// Aligned table; timings only when `timing` is set.
    pub fn to_text(&self, timing: bool) -> String {
        let mut s = format!(
            "model={} checkpoint={} mode={} sentences={}\n",
            self.model_kind, self.checkpoint, self.mode, self.sentences
        );
        if timing {
            s.push_str(&format!("{:<8} {:>8} {:>12} {:>14} {:>8}\n", "(n,m)", "BLEU", "total_sec", "mean_sec", "failed"));
        } else {
            s.push_str(&format!("{:<8} {:>8} {:>8}\n", "(n,m)", "BLEU", "failed"));
        }
        for r in &self.rows {
            let c = r.combination.to_string();
            if timing {
                let _ = writeln!(s, "{c:<8} {:>8.2} {:>12.6} {:>14.6} {:>8}", r.bleu, r.total_seconds, r.mean_seconds, r.failures);
            } else {
                let _ = writeln!(s, "{c:<8} {:>8.2} {:>8}", r.bleu, r.failures);
            }
        }
        s
    }

    pub fn to_csv(&self, timing: bool) -> String {
        let mut s = String::from(if timing { "n,m,bleu,total_seconds,mean_seconds,failures\n" } else { "n,m,bleu,failures\n" });
        for r in &self.rows {
            let (n, m) = (r.combination.n, r.combination.m);
            if timing {
                let _ = writeln!(s, "{n},{m},{:.4},{:.6},{:.6},{}", r.bleu, r.total_seconds, r.mean_seconds, r.failures);
            } else {
                let _ = writeln!(s, "{n},{m},{:.4},{}", r.bleu, r.failures);
            }
        }
        s
    }

    /// JSON summary echoing `config` for provenance.
    pub fn to_json(&self, timing: bool, config: &BTreeMap<String, String>) -> String {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                let mut v = json!({
                    "n": r.combination.n,
                    "m": r.combination.m,
                    "bleu": round4(r.bleu),
                    "failures": r.failures,
                });
                if timing {
                    v["total_seconds"] = json!(r.total_seconds);
                    v["mean_seconds"] = json!(r.mean_seconds);
                }
                v
            })
            .collect();
        let doc = json!({
            "model_kind": self.model_kind,
            "checkpoint": self.checkpoint,
            "mode": self.mode.to_string(),
            "enc_layers": self.enc_layers,
            "dec_layers": self.dec_layers,
            "sentences": self.sentences,
            "config": config,
            "rows": rows,
        });
        serde_json::to_string_pretty(&doc).expect("JSON of plain values") + "\n"
    }
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// chrF grids and oracle labels computed from decode logs.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleRun {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub grids: Vec<(usize, CombinationGrid)>,
    pub labels: Vec<OracleLabel>,
    /// Sentences with a failed decode at any combination.
    pub skipped: Vec<usize>,
}

impl OracleRun {
    pub fn histogram(&self) -> Vec<usize> {
        oracle_distribution(&self.labels, self.enc_layers, self.dec_layers)
    }
}

pub fn oracle_from_logs(logs: &[LoggedDecode], references: &[String], enc_layers: usize, dec_layers: usize) -> Result<OracleRun> {
    let n = references.len();
    let k = enc_layers * dec_layers;
    let mut values = vec![vec![f64::NAN; k]; n];
    let mut failed = vec![false; n];
    for combo_index in 0..k {
        let combo = LayerCombination::from_index(combo_index, dec_layers);
        let (hyps, _, _) = hypotheses(logs, combo, n)?;
        for l in logs.iter().filter(|l| l.combination == combo && l.text.is_err()) {
            failed[l.sentence_id] = true;
        }
        for (i, h) in hyps.iter().enumerate() {
            values[i][combo_index] = sentence_chrf(h, &references[i], CHRF_ORDER, CHRF_BETA);
        }
    }
    let mut run = OracleRun { enc_layers, dec_layers, grids: Vec::new(), labels: Vec::new(), skipped: Vec::new() };
    for (i, v) in values.into_iter().enumerate() {
        if failed[i] {
            run.skipped.push(i);
            continue;
        }
        let grid = CombinationGrid::new(enc_layers, dec_layers, v)?;
        run.labels.push(oracle_label_set(&grid));
        run.grids.push((i, grid));
    }
    Ok(run)
}

/// Oracle labels recomputed from a grid file's rows.
pub fn oracle_from_grids(enc_layers: usize, dec_layers: usize, grids: Vec<(usize, CombinationGrid)>) -> OracleRun {
    let labels = grids.iter().map(|(_, g)| oracle_label_set(g)).collect();
    OracleRun { enc_layers, dec_layers, grids, labels, skipped: Vec::new() }
}

/// Histogram as an `N × M` table of counts.
pub fn distribution_text(hist: &[usize], enc_layers: usize, dec_layers: usize) -> String {
    let mut s = String::from("oracle distribution (rows n, columns m)\n     ");
    for m in 1..=dec_layers {
        let _ = write!(s, "{:>7}", format!("m={m}"));
    }
    s.push('\n');
    for n in 1..=enc_layers {
        let _ = write!(s, "{:<5}", format!("n={n}"));
        for m in 1..=dec_layers {
            let _ = write!(s, "{:>7}", hist[LayerCombination::new(n, m).index(dec_layers)]);
        }
        s.push('\n');
    }
    let _ = writeln!(s, "total {}", hist.iter().sum::<usize>());
    s
}

pub fn distribution_csv(hist: &[usize], dec_layers: usize) -> String {
    let mut s = String::from("n,m,count\n");
    for (k, c) in hist.iter().enumerate() {
        let combo = LayerCombination::from_index(k, dec_layers);
        let _ = writeln!(s, "{},{},{c}", combo.n, combo.m);
    }
    s
}

/// Weights plus the two Adam moment buffers saved alongside them.
pub const STORED_FLOATS_PER_PARAM: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SizeRow {
    pub label: String,
    pub learnable: u64,
    /// Floats in a training checkpoint: weights and optimizer moments.
    pub stored: u64,
    /// `learnable` relative to the tied-multi model.
    pub ratio: f64,
}

/// Sizes of the tied model, its recurrent-stacking variant, and the sums of
/// the separately trained vanilla models for every `(n, m)`.
pub fn report_model_sizes(cfg: &ModelConfig) -> Vec<SizeRow> {
    let tied = cfg.with_recurrent_stacking(false);
    let rs = cfg.with_recurrent_stacking(true);
    let base = param_count(&tied);
    let sum = |c: &ModelConfig| -> u64 { c.combination_grid().iter().map(|k| param_count(&c.with_depth(k.n, k.m))).sum() };
    let k = cfg.combinations();
    let row = |label: String, learnable: u64| SizeRow {
        label,
        learnable,
        stored: learnable * STORED_FLOATS_PER_PARAM,
        ratio: learnable as f64 / base as f64,
    };
    vec![
        row(format!("{k} vanilla models"), sum(&tied)),
        row(format!("{k} vanilla RS models"), sum(&rs)),
        row("tied-multi model".into(), base),
        row("tied-multi RS model".into(), param_count(&rs)),
    ]
}

pub fn sizes_text(rows: &[SizeRow]) -> String {
    let mut s = format!("{:<24} {:>14} {:>14} {:>9}\n", "model", "learnable", "stored", "relative");
    for r in rows {
        let _ = writeln!(s, "{:<24} {:>14} {:>14} {:>9.2}", r.label, r.learnable, r.stored, r.ratio);
    }
    s
}

pub fn sizes_csv(rows: &[SizeRow]) -> String {
    let mut s = String::from("model,learnable,stored,relative\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.4}", r.label, r.learnable, r.stored, r.ratio);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChildKind {
    Tied,
    TiedRs,
}

impl std::fmt::Display for ChildKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ChildKind::Tied => "tied",
            ChildKind::TiedRs => "tied-rs",
        })
    }
}

#[derive(Clone, Debug)]
pub struct ChildResult {
    pub kind: ChildKind,
    pub distilled: bool,
    /// Beam BLEU on the test set at every combination.
    pub bleu: CombinationGrid,
    pub greedy_bleu: f64,
    pub beam_bleu: f64,
    pub params: Parameters,
}

impl ChildResult {
    /// Distance between greedy and beam BLEU at full depth.
    pub fn greedy_beam_gap(&self) -> f64 {
        (self.beam_bleu - self.greedy_bleu).abs()
    }
}

#[derive(Clone, Debug)]
pub struct DistillationReport {
    pub pseudo: Option<PseudoParallelCorpus>,
    pub children: Vec<ChildResult>,
}

fn bleu_at(params: &Parameters, combo: LayerCombination, test: &[Pair], vocab: &Vocab, mode: DecodeMode, beam: &BeamConfig) -> Result<f64> {
    let hyps: Vec<String> = test
        .iter()
        .map(|(s, _)| decode(params, combo, s, mode, beam).map(|t| vocab.decode(&t)).unwrap_or_default())
        .collect();
    let refs: Vec<String> = test.iter().map(|(_, t)| vocab.decode(t)).collect();
    corpus_bleu(&hyps, &refs)
}

/// Trains tied-multi children of each `kind` on the original corpus and,
/// when `distill` is set, also on the parent's beam translations of it.
#[allow(clippy::too_many_arguments)]
pub fn run_distillation_pipeline(
    parent: &Parameters,
    train_corpus: &[Pair],
    test: &[Pair],
    vocab: &Vocab,
    kinds: &[ChildKind],
    distill: bool,
    training: &TrainingConfig,
    beam: &BeamConfig,
) -> Result<DistillationReport> {
    let pseudo = distill.then(|| generate_distillation_corpus(parent, train_corpus, beam));
    let mut children = Vec::new();
    let pcfg = parent.config();
    for &kind in kinds {
        let cfg = pcfg.with_recurrent_stacking(kind == ChildKind::TiedRs);
        let mut sources: Vec<(bool, &[Pair])> = vec![(false, train_corpus)];
        if let Some(p) = &pseudo {
            sources.push((true, &p.pairs));
        }
        for (distilled, corpus) in sources {
            let out = train(ModelKind::TiedMulti, corpus, training, &cfg, &mut std::io::sink())?;
            let params = out.final_params;
            let values = cfg
                .combination_grid()
                .into_iter()
                .map(|c| bleu_at(&params, c, test, vocab, DecodeMode::Beam, beam))
                .collect::<Result<Vec<_>>>()?;
            let bleu = CombinationGrid::new(cfg.enc_layers, cfg.dec_layers, values)?;
            let beam_bleu = bleu.get(cfg.deepest());
            let greedy_bleu = bleu_at(&params, cfg.deepest(), test, vocab, DecodeMode::Greedy, beam)?;
            children.push(ChildResult { kind, distilled, bleu, greedy_bleu, beam_bleu, params });
        }
    }
    Ok(DistillationReport { pseudo, children })
}

impl DistillationReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(p) = &self.pseudo {
            let _ = writeln!(s, "pseudo-parallel pairs={} failures={}", p.pairs.len(), p.failures());
        }
        for c in &self.children {
            let g = &c.bleu;
            let _ = writeln!(
                s,
                "child={} distilled={} greedy_bleu={:.2} beam_bleu={:.2} gap={:.2}",
                c.kind,
                c.distilled,
                c.greedy_bleu,
                c.beam_bleu,
                c.greedy_beam_gap()
            );
            for n in 1..=g.enc_layers() {
                let row: Vec<String> = (1..=g.dec_layers()).map(|m| format!("{:>7.2}", g.get(LayerCombination::new(n, m)))).collect();
                let _ = writeln!(s, "  n={n} {}", row.join(" "));
            }
        }
        s
    }
}

/// One sentence decoded at the selector's chosen combination.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedDecode {
    pub record: DecodeRecord,
    /// Time spent in the selector alone.
    pub select_seconds: f64,
}

/// Picks a combination per sentence with the selector, then decodes there.
/// The record's time covers selection and decoding.
pub fn select_and_decode(
    model: &Parameters,
    selector: &SelectorParams,
    sources: &[Vec<usize>],
    threshold: f64,
    mode: DecodeMode,
    beam: &BeamConfig,
) -> Vec<SelectedDecode> {
    let cfg = model.config();
    sources
        .iter()
        .enumerate()
        .map(|(id, src)| {
            let start = Instant::now();
            let chosen = selector_forward(selector, src).map(|p| select_combination(&p, threshold, cfg.enc_layers, cfg.dec_layers));
            let select_seconds = start.elapsed().as_secs_f64();
            let combo = *chosen.as_ref().unwrap_or(&cfg.deepest());
            let out = chosen.and_then(|c| decode(model, c, src, mode, beam));
            let seconds = start.elapsed().as_secs_f64();
            let (tokens, error) = match out {
                Ok(t) => (t, None),
                Err(e) => (Vec::new(), Some(e.to_string())),
            };
            SelectedDecode {
                record: DecodeRecord { sentence_id: id, combination: combo, tokens, seconds, mode, error },
                select_seconds,
            }
        })
        .collect()
}
