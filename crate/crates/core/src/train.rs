//! Vanilla and tied-multi training, Adam with inverse-square-root warmup,
//! and checkpoint retention.

use std::collections::VecDeque;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::forward::{self, project};
use crate::model::{Batch, LayerCombination, ModelConfig, Net, ParamSet, Parameters};
use crate::tensor::{Real, Tensor};

/// How the `N × M` per-combination losses become one objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    #[default]
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    /// One loss on `dec_M` attending to `enc_N`.
    Vanilla,
    /// Every `(i, j)` combination contributes a loss.
    TiedMulti,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(ModelKind::Vanilla),
            "tied" | "tied-multi" => Ok(ModelKind::TiedMulti),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate, reached at the end of warmup.
    pub lr: Real,
    pub warmup: usize,
    pub label_smoothing: Real,
    pub aggregation: Aggregation,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub keep_last: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 5000,
            batch_size: 32,
            lr: 5e-4,
            warmup: 400,
            label_smoothing: 0.1,
            aggregation: Aggregation::Mean,
            seed: 1,
            checkpoint_every: 250,
            keep_last: 10,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if self.warmup > self.steps {
            return Err(Error::Config(format!("warmup {} exceeds steps {}", self.warmup, self.steps)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        if self.checkpoint_every == 0 || self.keep_last == 0 {
            return Err(Error::Config("checkpoint_every and keep_last must be positive".into()));
        }
        Ok(())
    }

    /// Linear warmup to `lr`, then decay with the inverse square root of the step.
    pub fn learning_rate(&self, step: usize) -> Real {
        let step = step.max(1) as Real;
        if self.warmup == 0 {
            return self.lr;
        }
        let w = self.warmup as Real;
        self.lr * (step / w).min((w / step).sqrt())
    }
}

/// Per-combination losses for one batch, row-major with `m` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrid {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub losses: Vec<Real>,
    pub overall: Real,
}

impl LossGrid {
    pub fn get(&self, combo: LayerCombination) -> Real {
        self.losses[combo.index(self.dec_layers)]
    }

    /// `step, overall, loss_{1,1} .. loss_{N,M}` tab-separated.
    pub fn log_line(&self, step: usize) -> String {
        let mut line = format!("{step}\t{:.6}", self.overall);
        for l in &self.losses {
            line.push_str(&format!("\t{l:.6}"));
        }
        line
    }
}

/// Records the tied-multi objective on `net`: every encoder layer runs once,
/// and for each `enc_i` the decoder stack runs once, tapping every `dec_j`.
/// Terms for which `include` is false are skipped (their grid entry is NaN).
pub fn tied_multi_objective(
    net: &mut Net,
    params: &Parameters,
    batch: &Batch,
    smoothing: Real,
    include: impl Fn(LayerCombination) -> bool,
) -> Result<(Var, LossGrid)> {
    let cfg = params.config();
    let (n_max, m_max) = (cfg.enc_layers, cfg.dec_layers);
    let enc = forward::encode_all(net, params, batch, n_max)?;
    let side = forward::prepare_target(net, params, batch)?;
    let mut terms = Vec::with_capacity(n_max * m_max);
    let mut losses = vec![Real::NAN; n_max * m_max];
    for i in 1..=n_max {
        if !(1..=m_max).any(|j| include(LayerCombination::new(i, j))) {
            continue;
        }
        let mem = forward::memory(net, params, enc.get(i));
        let decs = forward::decoder_stack(net, params, batch, &side, mem, m_max)?;
        for (j, &dec) in decs.iter().enumerate() {
            let combo = LayerCombination::new(i, j + 1);
            if !include(combo) {
                continue;
            }
            let logits = project(net, params, dec);
            let loss = net.tape.cross_entropy(logits, &batch.tgt_out, Some(crate::vocab::PAD), smoothing)?;
            losses[combo.index(m_max)] = net.tape.value(loss).item();
            terms.push(loss);
        }
    }
    if terms.is_empty() {
        return Err(Error::Empty("loss terms"));
    }
    let total = net.tape.add_n(&terms);
    let overall = net.tape.scale(total, 1.0 / terms.len() as Real);
    let grid = LossGrid { enc_layers: n_max, dec_layers: m_max, losses, overall: net.tape.value(overall).item() };
    Ok((overall, grid))
}

pub fn vanilla_objective(net: &mut Net, params: &Parameters, batch: &Batch, smoothing: Real) -> Result<Var> {
    let cfg = params.config();
    let logits = forward::combination_logits(net, params, batch, cfg.deepest())?;
    net.tape.cross_entropy(logits, &batch.tgt_out, Some(crate::vocab::PAD), smoothing)
}

pub fn tied_multi_loss(params: &Parameters, batch: &Batch, smoothing: Real) -> Result<LossGrid> {
    let mut net = Net::new(params.set());
    Ok(tied_multi_objective(&mut net, params, batch, smoothing, |_| true)?.1)
}

pub fn vanilla_loss(params: &Parameters, batch: &Batch, smoothing: Real) -> Result<Real> {
    let mut net = Net::new(params.set());
    let loss = vanilla_objective(&mut net, params, batch, smoothing)?;
    Ok(net.tape.value(loss).item())
}

/// Loss value and per-slot gradients for one batch.
pub fn loss_and_grads(
    kind: ModelKind,
    params: &Parameters,
    batch: &Batch,
    smoothing: Real,
    dropout_seed: u64,
) -> Result<(LossGrid, Vec<Option<Tensor>>)> {
    let mut net = Net::with_dropout(params.set(), params.config().dropout, dropout_seed);
    let (loss, grid) = match kind {
        ModelKind::TiedMulti => tied_multi_objective(&mut net, params, batch, smoothing, |_| true)?,
        ModelKind::Vanilla => {
            let loss = vanilla_objective(&mut net, params, batch, smoothing)?;
            let value = net.tape.value(loss).item();
            (loss, LossGrid { enc_layers: 1, dec_layers: 1, losses: vec![value], overall: value })
        }
    };
    let grads = net.tape.backward(loss)?;
    Ok((grid, net.param_grads(&grads)))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
    t: i32,
}

impl Adam {
    pub fn new(set: &ParamSet) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            m: set.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: set.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, set: &mut ParamSet, grads: &[Option<Tensor>], lr: Real) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (slot, (param, grad)) in set.tensors_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *p -= lr * update;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: usize,
    pub params: Parameters,
}

#[derive(Debug)]
pub struct TrainOutput {
    /// The last `keep_last` checkpoints, oldest first.
    pub checkpoints: Vec<Checkpoint>,
    pub final_params: Parameters,
    pub final_loss: Real,
}

/// Cycles through shuffled epochs of sentence indices.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        BatchSampler { order, cursor: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Trains from a seeded initialisation. One tab-separated line per step goes
/// to `log`.
pub fn train(
    kind: ModelKind,
    corpus: &[(Vec<usize>, Vec<usize>)],
    cfg: &TrainingConfig,
    model_cfg: &ModelConfig,
    log: &mut dyn Write,
) -> Result<TrainOutput> {
    let init = Parameters::init(model_cfg, cfg.seed)?;
    train_from(kind, init, corpus, cfg, log)
}

pub fn train_from(
    kind: ModelKind,
    mut params: Parameters,
    corpus: &[(Vec<usize>, Vec<usize>)],
    cfg: &TrainingConfig,
    log: &mut dyn Write,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let vocab = params.config().vocab;
    if let Some(&bad) = corpus.iter().flat_map(|(s, t)| s.iter().chain(t)).find(|&&id| id >= vocab) {
        return Err(Error::TokenOutOfRange { token: bad, vocab });
    }
    let mut sampler = BatchSampler::new(corpus.len(), cfg.seed ^ 0x5eed);
    let mut adam = Adam::new(params.set());
    let mut kept: VecDeque<Checkpoint> = VecDeque::new();
    let mut final_loss = Real::NAN;
    for step in 1..=cfg.steps {
        let pairs: Vec<_> = sampler.next(cfg.batch_size).into_iter().map(|i| corpus[i].clone()).collect();
        let batch = Batch::new(&pairs)?;
        let (grid, grads) = loss_and_grads(kind, &params, &batch, cfg.label_smoothing, cfg.seed.wrapping_add(step as u64))?;
        if !grid.overall.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        writeln!(log, "{}", grid.log_line(step)).map_err(|e| Error::io("training log", e))?;
        adam.step(params.set_mut(), &grads, cfg.learning_rate(step));
        final_loss = grid.overall;
        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            if kept.back().is_some_and(|c| c.step == step) {
                continue;
            }
            kept.push_back(Checkpoint { step, params: params.clone() });
            while kept.len() > cfg.keep_last {
                kept.pop_front();
            }
        }
    }
    Ok(TrainOutput { checkpoints: kept.into(), final_params: params, final_loss })
}
