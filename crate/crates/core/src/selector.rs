//! A-priori layer-combination selector: a self-attention encoder over the
//! source with a classification token appended, read out into K independent
//! sigmoids, trained with interpolated weighted BCE and a soft F-beta loss.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::decode::{decode, BeamConfig, DecodeMode};
use crate::error::{Error, Result};
use crate::metrics::{is_faster, oracle_label_set, sentence_chrf, CombinationGrid, CHRF_BETA, CHRF_ORDER};
use crate::model::layers::{self, attention_mask};
use crate::model::{add_encoder_layer, add_norm, EncoderLayerSlots, Init, LayerCombination, Net, NormSlots, ParamSet, Parameters};
use crate::tensor::{sinusoidal_positions, Real, Tensor};
use crate::vocab::{Vocab, CLS};

/// Lower clamp for probabilities inside logarithms.
pub const PROB_FLOOR: Real = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SelectorConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub alpha: Real,
    pub beta: Real,
    pub lambda: Real,
    pub threshold: Real,
    pub lr: Real,
    pub momentum: Real,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            layers: 2,
            heads: 4,
            d_ff: 64,
            alpha: 1.0,
            beta: 2.0,
            lambda: 0.5,
            threshold: 0.5,
            lr: 0.05,
            momentum: 0.9,
            epochs: 20,
            batch_size: 16,
            seed: 1,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.layers == 0 || self.heads == 0 || self.d_ff == 0 {
            return fail("selector layers, heads and d_ff must be positive");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail("lambda must lie in [0, 1]");
        }
        if !(self.beta > 0.0) {
            return fail("beta must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail("threshold must lie in (0, 1)");
        }
        if !(self.alpha >= 0.0) || !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return fail("alpha and lr must be non-negative, momentum in [0, 1)");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive");
        }
        Ok(())
    }
}

/// Shape of a selector network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectorShape {
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
}

impl SelectorShape {
    pub fn classes(&self) -> usize {
        self.enc_layers * self.dec_layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model % self.heads != 0 || self.classes() == 0 {
            return Err(Error::Config(format!("invalid selector shape {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectorParams {
    shape: SelectorShape,
    set: ParamSet,
    embedding: usize,
    layers: Vec<EncoderLayerSlots>,
    norm: NormSlots,
    w_out: usize,
    b_out: usize,
}

impl SelectorParams {
    /// Random layers with the embedding table copied from `model`.
    pub fn from_model(model: &Parameters, cfg: &SelectorConfig) -> Result<Self> {
        let mc = model.config();
        let shape = SelectorShape {
            layers: cfg.layers,
            heads: cfg.heads,
            d_ff: cfg.d_ff,
            d_model: mc.d_model,
            vocab: mc.vocab,
            max_len: mc.max_len,
            enc_layers: mc.enc_layers,
            dec_layers: mc.dec_layers,
        };
        Self::with_embedding(shape, model.tensor(model.embedding()).clone(), cfg.seed)
    }

    pub fn with_embedding(shape: SelectorShape, table: Tensor, seed: u64) -> Result<Self> {
        shape.validate()?;
        if table.shape() != [shape.vocab, shape.d_model] {
            return Err(Error::ConfigMismatch(format!("embedding {:?} for shape {shape:?}", table.shape())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::layout(shape, Init::Random(&mut rng));
        *p.set.get_mut(p.embedding) = table;
        Ok(p)
    }

    pub fn zeros(shape: SelectorShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self::layout(shape, Init::Zeros))
    }

    fn layout(shape: SelectorShape, mut init: Init) -> Self {
        let d = shape.d_model;
        let mut set = ParamSet::default();
        let embedding = set.add("embedding", Tensor::zeros(&[shape.vocab, d]));
        let layers = (0..shape.layers)
            .map(|i| add_encoder_layer(&mut set, &format!("layer.{i}"), d, shape.d_ff, &mut init))
            .collect();
        let norm = add_norm(&mut set, "final_norm", d, &mut init);
        let w_out = set.add("out.w", init.matrix(d, shape.classes()));
        let b_out = set.add("out.b", Tensor::zeros(&[shape.classes()]));
        SelectorParams { shape, set, embedding, layers, norm, w_out, b_out }
    }

    pub fn shape(&self) -> &SelectorShape {
        &self.shape
    }

    pub fn set(&self) -> &ParamSet {
        &self.set
    }

    pub fn set_mut(&mut self) -> &mut ParamSet {
        &mut self.set
    }

    pub fn output_slots(&self) -> (usize, usize) {
        (self.w_out, self.b_out)
    }

    /// Replaces all weights, keeping the layout; names must line up.
    pub fn with_set(&self, set: ParamSet) -> Result<Self> {
        if set.len() != self.set.len() || (0..set.len()).any(|s| set.name(s) != self.set.name(s) || set.get(s).shape() != self.set.get(s).shape()) {
            return Err(Error::ConfigMismatch("selector weights do not match the layout".into()));
        }
        Ok(SelectorParams { set, ..self.clone() })
    }
}

/// Logits `[batch, K]` for a batch of token sequences.
fn selector_logits(net: &mut Net, p: &SelectorParams, inputs: &[&[usize]]) -> Result<Var> {
    let s = p.shape;
    let b = inputs.len();
    if b == 0 {
        return Err(Error::Empty("selector batch"));
    }
    let mut lens = Vec::with_capacity(b);
    for x in inputs {
        if x.is_empty() {
            return Err(Error::Empty("selector input"));
        }
        if x.len() + 1 > s.max_len {
            return Err(Error::TooLong { len: x.len() + 1, max: s.max_len });
        }
        lens.push(x.len() + 1);
    }
    let t = *lens.iter().max().unwrap();
    let mut ids = Vec::with_capacity(b * t);
    for x in inputs {
        ids.extend_from_slice(x);
        ids.push(CLS);
        ids.resize(ids.len() + t - x.len() - 1, crate::vocab::PAD);
    }
    let d = s.d_model;
    let table = net.p(p.embedding);
    let e = net.tape.embedding(table, &ids)?;
    let e = net.tape.scale(e, (d as Real).sqrt());
    let pe = sinusoidal_positions(t, d);
    let tiled: Vec<Real> = (0..b).flat_map(|_| pe.data().iter().copied()).collect();
    let pe = net.tape.constant(Tensor::new(vec![b * t, d], tiled));
    let mut x = net.tape.add(e, pe);
    let mask = net.tape.constant(attention_mask(s.heads, t, &lens, t, false));
    for slots in &p.layers {
        x = layers::encoder_layer(net, slots, x, mask, b, s.heads)?;
    }
    let x = layers::norm(net, p.norm, x);
    let readout: Vec<usize> = lens.iter().enumerate().map(|(i, &l)| i * t + l - 1).collect();
    let cls = net.tape.select_rows(x, &readout);
    let w = net.p(p.w_out);
    let bias = net.p(p.b_out);
    Ok(net.tape.linear(cls, w, bias))
}

/// K class probabilities for one source sentence.
pub fn selector_forward(p: &SelectorParams, tokens: &[usize]) -> Result<Vec<Real>> {
    let mut net = Net::new(&p.set);
    let logits = selector_logits(&mut net, p, &[tokens])?;
    let probs = net.tape.sigmoid(logits);
    Ok(net.tape.value(probs).data().to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub delta: Vec<Real>,
    pub sample_weight: Real,
}

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        ClassWeights { delta: vec![1.0; k], sample_weight: 1.0 }
    }
}

/// `δ_k = (1 − p_k)^α` with `p_k` the share of positive labels on class `k`.
pub fn class_weights(label_counts: &[usize], alpha: Real) -> Result<ClassWeights> {
    let total: usize = label_counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("label counts"));
    }
    let delta = label_counts.iter().map(|&c| (1.0 - c as Real / total as Real).powf(alpha)).collect();
    Ok(ClassWeights { delta, sample_weight: 1.0 })
}

fn clamp_prob(p: Real) -> Real {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Weighted binary cross-entropy of one example, averaged over the K classes.
pub fn weighted_bce(yhat: &[Real], y: &[bool], weights: &ClassWeights) -> Real {
    let k = yhat.len();
    let sum: Real = (0..k)
        .map(|i| {
            let p = clamp_prob(yhat[i]);
            if y[i] {
                weights.delta[i] * p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum();
    -weights.sample_weight * sum / k as Real
}

/// `1 − F_β` with soft counts; 1 when nothing overlaps.
pub fn f_beta_loss(yhat: &[Real], y: &[bool], beta: Real) -> Real {
    let mu: Real = yhat.iter().zip(y).filter(|(_, &t)| t).map(|(p, _)| p).sum();
    let pred: Real = yhat.iter().sum();
    let gold = y.iter().filter(|&&t| t).count() as Real;
    if mu <= 0.0 || pred <= 0.0 {
        return 1.0;
    }
    let (precision, recall) = (mu / pred, mu / gold);
    let b2 = beta * beta;
    1.0 - (1.0 + b2) * precision * recall / (b2 * precision + recall)
}

pub fn selector_loss(yhat: &[Real], y: &[bool], weights: &ClassWeights, cfg: &SelectorConfig) -> Real {
    cfg.lambda * weighted_bce(yhat, y, weights) + (1.0 - cfg.lambda) * f_beta_loss(yhat, y, cfg.beta)
}

/// Differentiable batch loss from logits `[B, K]`: each term is averaged over
/// classes and examples.
pub fn selector_loss_on_tape(
    tape: &mut crate::autodiff::Tape,
    logits: Var,
    y: &[Vec<bool>],
    weights: &ClassWeights,
    cfg: &SelectorConfig,
) -> Var {
    let (b, k) = tape.value(logits).as_matrix();
    let ind = |f: &dyn Fn(usize, usize) -> Real| Tensor::new(vec![b, k], (0..b * k).map(|i| f(i / k, i % k)).collect());
    let pos = ind(&|r, c| if y[r][c] { weights.delta[c] } else { 0.0 });
    let neg = ind(&|r, c| if y[r][c] { 0.0 } else { 1.0 });
    let gold = ind(&|r, c| if y[r][c] { 1.0 } else { 0.0 });
    let gold_counts: Vec<Real> = y.iter().map(|r| r.iter().filter(|&&t| t).count() as Real).collect();

    let probs = tape.sigmoid(logits);
    let clamped = tape.clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let log_p = tape.log(clamped);
    let one_minus = tape.scale(clamped, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let log_q = tape.log(one_minus);
    let pos = tape.constant(pos);
    let neg = tape.constant(neg);
    let a = tape.mul(log_p, pos);
    let c = tape.mul(log_q, neg);
    let both = tape.add(a, c);
    let bce = tape.mean(both);
    let bce = tape.scale(bce, -weights.sample_weight);

    // F = (1+β²)·μ / (β²·|y| + Σŷ), the closed form of the soft F-measure.
    let b2 = cfg.beta * cfg.beta;
    let gold = tape.constant(gold);
    let overlap = tape.mul(probs, gold);
    let mu = tape.sum_rows(overlap);
    let pred = tape.sum_rows(probs);
    let base = tape.constant(Tensor::new(vec![b], gold_counts.iter().map(|g| b2 * g).collect()));
    let denom = tape.add(pred, base);
    let f = tape.div(mu, denom);
    let f = tape.mean(f);
    let f_loss = tape.scale(f, -(1.0 + b2));
    let f_loss = tape.add_scalar(f_loss, 1.0);

    let l1 = tape.scale(bce, cfg.lambda);
    let l2 = tape.scale(f_loss, 1.0 - cfg.lambda);
    tape.add(l1, l2)
}

/// Highest-probability combination, ties to the fastest; `(N, M)` when no
/// probability reaches `threshold`.
pub fn select_combination(probs: &[Real], threshold: Real, enc_layers: usize, dec_layers: usize) -> LayerCombination {
    let max = probs.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    if !(max >= threshold) {
        return LayerCombination::new(enc_layers, dec_layers);
    }
    let mut best: Option<LayerCombination> = None;
    for (k, &p) in probs.iter().enumerate() {
        let c = LayerCombination::from_index(k, dec_layers);
        if p == max && best.map_or(true, |b| is_faster(c, b)) {
            best = Some(c);
        }
    }
    best.expect("maximum exists")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiLabelExample {
    pub tokens: Vec<usize>,
    pub y: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectorDataset {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub examples: Vec<MultiLabelExample>,
    /// chrF grid per kept sentence, keyed by corpus position.
    pub grids: Vec<(usize, CombinationGrid)>,
    pub failures: usize,
}

impl SelectorDataset {
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.enc_layers * self.dec_layers];
        for e in &self.examples {
            for (c, &y) in counts.iter_mut().zip(&e.y) {
                *c += y as usize;
            }
        }
        counts
    }
}

/// chrF of every layer combination's output against the reference.
pub fn score_grid(
    model: &Parameters,
    src: &[usize],
    reference: &str,
    vocab: &Vocab,
    mode: DecodeMode,
    beam: &BeamConfig,
) -> Result<CombinationGrid> {
    let cfg = model.config();
    let mut values = Vec::with_capacity(cfg.combinations());
    for combo in cfg.combination_grid() {
        let out = decode(model, combo, src, mode, beam)?;
        values.push(sentence_chrf(&vocab.decode(&out), reference, CHRF_ORDER, CHRF_BETA));
    }
    CombinationGrid::new(cfg.enc_layers, cfg.dec_layers, values)
}

/// Decodes every pair at all K combinations and labels each sentence with
/// the combinations tying for the best chrF.
pub fn build_selector_dataset(
    model: &Parameters,
    corpus: &[(Vec<usize>, Vec<usize>)],
    vocab: &Vocab,
    mode: DecodeMode,
    beam: &BeamConfig,
) -> SelectorDataset {
    let cfg = model.config();
    let mut ds = SelectorDataset {
        enc_layers: cfg.enc_layers,
        dec_layers: cfg.dec_layers,
        examples: Vec::new(),
        grids: Vec::new(),
        failures: 0,
    };
    for (id, (src, tgt)) in corpus.iter().enumerate() {
        match score_grid(model, src, &vocab.decode(tgt), vocab, mode, beam) {
            Ok(grid) => {
                let y = oracle_label_set(&grid).indicator(cfg.enc_layers, cfg.dec_layers);
                ds.examples.push(MultiLabelExample { tokens: src.clone(), y });
                ds.grids.push((id, grid));
            }
            Err(_) => ds.failures += 1,
        }
    }
    ds
}

/// Macro-averaged scores over classes seen in the gold labels or predictions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MacroScores {
    pub precision: Real,
    pub recall: Real,
    pub f: Real,
}

pub fn macro_scores(predicted: &[Vec<bool>], gold: &[Vec<bool>], beta: Real) -> MacroScores {
    let k = gold.first().map_or(0, Vec::len);
    let (mut p_sum, mut r_sum, mut f_sum, mut classes) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..k {
        let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
        for (p, g) in predicted.iter().zip(gold) {
            match (p[c], g[c]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                _ => {}
            }
        }
        if tp + fp + fnn == 0 {
            continue;
        }
        classes += 1;
        let prec = if tp + fp > 0 { tp as Real / (tp + fp) as Real } else { 0.0 };
        let rec = if tp + fnn > 0 { tp as Real / (tp + fnn) as Real } else { 0.0 };
        let b2 = beta * beta;
        let f = if prec + rec > 0.0 { (1.0 + b2) * prec * rec / (b2 * prec + rec) } else { 0.0 };
        p_sum += prec;
        r_sum += rec;
        f_sum += f;
    }
    if classes == 0 {
        return MacroScores { precision: 1.0, recall: 1.0, f: 1.0 };
    }
    let n = classes as Real;
    MacroScores { precision: p_sum / n, recall: r_sum / n, f: f_sum / n }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: Real,
    pub scores: MacroScores,
}

impl EpochReport {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.loss, self.scores.precision, self.scores.recall, self.scores.f
        )
    }
}

/// Nesterov momentum: `v ← μv + g`, `θ ← θ − lr·(g + μv)`.
pub struct NesterovSgd {
    velocity: Vec<Tensor>,
    pub momentum: Real,
}

impl NesterovSgd {
    pub fn new(set: &ParamSet, momentum: Real) -> Self {
        NesterovSgd { velocity: set.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(), momentum }
    }

    pub fn step(&mut self, set: &mut ParamSet, grads: &[Option<Tensor>], lr: Real) {
        let mu = self.momentum;
        for ((p, v), g) in set.tensors_mut().zip(&mut self.velocity).zip(grads) {
            let Some(g) = g else { continue };
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv;
                *pv -= lr * (gv + mu * *vv);
            }
        }
    }
}

pub fn predict(p: &SelectorParams, tokens: &[usize], threshold: Real) -> Result<Vec<bool>> {
    Ok(selector_forward(p, tokens)?.into_iter().map(|x| x >= threshold).collect())
}

fn batch_loss_and_grads(
    p: &SelectorParams,
    batch: &[&MultiLabelExample],
    weights: &ClassWeights,
    cfg: &SelectorConfig,
) -> Result<(Real, Vec<Option<Tensor>>)> {
    let mut net = Net::new(&p.set);
    let inputs: Vec<&[usize]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
    let logits = selector_logits(&mut net, p, &inputs)?;
    let y: Vec<Vec<bool>> = batch.iter().map(|e| e.y.clone()).collect();
    let loss = selector_loss_on_tape(&mut net.tape, logits, &y, weights, cfg);
    let value = net.tape.value(loss).item();
    let grads = net.tape.backward(loss)?;
    Ok((value, net.param_grads(&grads)))
}

/// Loss of the selector on `examples` with gradients per parameter slot.
pub fn selector_batch_loss(
    p: &SelectorParams,
    examples: &[MultiLabelExample],
    weights: &ClassWeights,
    cfg: &SelectorConfig,
) -> Result<(Real, Vec<Option<Tensor>>)> {
    let refs: Vec<&MultiLabelExample> = examples.iter().collect();
    batch_loss_and_grads(p, &refs, weights, cfg)
}

pub struct SelectorTraining {
    pub params: SelectorParams,
    pub epochs: Vec<EpochReport>,
}

/// Mini-batch SGD with Nesterov momentum over shuffled epochs. Class weights
/// come from the dataset's label distribution.
pub fn train_selector(
    init: SelectorParams,
    examples: &[MultiLabelExample],
    cfg: &SelectorConfig,
    log: &mut dyn Write,
) -> Result<SelectorTraining> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("selector dataset"));
    }
    let k = init.shape.classes();
    if let Some(e) = examples.iter().find(|e| e.y.len() != k) {
        return Err(Error::LengthMismatch { left: e.y.len(), right: k });
    }
    let mut counts = vec![0usize; k];
    for e in examples {
        for (c, &y) in counts.iter_mut().zip(&e.y) {
            *c += y as usize;
        }
    }
    let weights = class_weights(&counts, cfg.alpha)?;
    let mut params = init;
    let mut opt = NesterovSgd::new(&params.set, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut reports = Vec::with_capacity(cfg.epochs);
    let gold: Vec<Vec<bool>> = examples.iter().map(|e| e.y.clone()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&MultiLabelExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) = batch_loss_and_grads(&params, &batch, &weights, cfg)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: epoch });
            }
            opt.step(&mut params.set, &grads, cfg.lr);
            total += loss;
            batches += 1;
        }
        let predicted = examples.iter().map(|e| predict(&params, &e.tokens, cfg.threshold)).collect::<Result<Vec<_>>>()?;
        let report = EpochReport { epoch, loss: total / batches as Real, scores: macro_scores(&predicted, &gold, cfg.beta) };
        writeln!(log, "{}", report.log_line()).map_err(|e| Error::io("selector log", e))?;
        reports.push(report);
    }
    Ok(SelectorTraining { params, epochs: reports })
}

/// Candidate values of the small hyper-parameter grid.
pub const GRID_ALPHA: [Real; 3] = [0.5, 1.0, 2.0];
pub const GRID_BETA: [Real; 2] = [1.0, 2.0];
pub const GRID_LAMBDA: [Real; 3] = [0.25, 0.5, 0.75];

/// Trains one selector per grid point on the first 90% of `examples` and
/// keeps the one with the best held-out macro F1.
pub fn train_selector_grid(
    init: &SelectorParams,
    examples: &[MultiLabelExample],
    base: &SelectorConfig,
    log: &mut dyn Write,
) -> Result<(SelectorConfig, SelectorTraining)> {
    let split = (examples.len() * 9 / 10).max(1).min(examples.len());
    let (train, held) = examples.split_at(split);
    let held = if held.is_empty() { train } else { held };
    let gold: Vec<Vec<bool>> = held.iter().map(|e| e.y.clone()).collect();
    let mut best: Option<(Real, SelectorConfig)> = None;
    for &alpha in &GRID_ALPHA {
        for &beta in &GRID_BETA {
            for &lambda in &GRID_LAMBDA {
                let cfg = SelectorConfig { alpha, beta, lambda, ..base.clone() };
                let run = train_selector(init.clone(), train, &cfg, &mut std::io::sink())?;
                let pred = held.iter().map(|e| predict(&run.params, &e.tokens, cfg.threshold)).collect::<Result<Vec<_>>>()?;
                let f1 = macro_scores(&pred, &gold, 1.0).f;
                writeln!(log, "#grid alpha={alpha} beta={beta} lambda={lambda} heldout_f1={f1:.6}").map_err(|e| Error::io("selector log", e))?;
                if best.as_ref().map_or(true, |(b, _)| f1 > *b) {
                    best = Some((f1, cfg));
                }
            }
        }
    }
    let (_, cfg) = best.expect("grid is non-empty");
    let run = train_selector(init.clone(), examples, &cfg, log)?;
    Ok((cfg, run))
}

pub fn write_selector_dataset(ds: &SelectorDataset, vocab: &Vocab, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "#selector N={} M={} order=n-major,m-fastest", ds.enc_layers, ds.dec_layers)?;
    for e in &ds.examples {
        let labels: Vec<&str> = e.y.iter().map(|&y| if y { "1" } else { "0" }).collect();
        writeln!(out, "{}\t{}", vocab.decode(&e.tokens), labels.join(" "))?;
    }
    Ok(())
}

pub fn read_selector_dataset(input: impl BufRead, vocab: &Vocab) -> Result<SelectorDataset> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("selector dataset", "missing header"))?
        .map_err(|e| Error::io("selector dataset", e))?;
    let bad_header = || Error::format("selector dataset", format!("bad header '{header}'"));
    let mut n = None;
    let mut m = None;
    for field in header.strip_prefix("#selector ").ok_or_else(bad_header)?.split_whitespace() {
        match field.split_once('=') {
            Some(("N", v)) => n = v.parse::<usize>().ok(),
            Some(("M", v)) => m = v.parse::<usize>().ok(),
            _ => {}
        }
    }
    let (n, m) = (n.ok_or_else(bad_header)?, m.ok_or_else(bad_header)?);
    let mut examples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io("selector dataset", e))?;
        if line.is_empty() {
            continue;
        }
        let bad = |d: &str| Error::format("selector dataset", format!("line {}: {d}", i + 2));
        let (text, labels) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
        let y = labels
            .split(' ')
            .map(|l| match l {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(bad("labels must be 0 or 1")),
            })
            .collect::<Result<Vec<bool>>>()?;
        if y.len() != n * m {
            return Err(bad("wrong label count"));
        }
        if !y.iter().any(|&v| v) {
            return Err(bad("no positive label"));
        }
        examples.push(MultiLabelExample { tokens: vocab.encode(text)?, y });
    }
    Ok(SelectorDataset { enc_layers: n, dec_layers: m, examples, grids: Vec::new(), failures: 0 })
}
