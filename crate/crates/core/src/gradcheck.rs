//! Central finite-difference checks for the tape and the two training losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::{Batch, Net, Parameters};
use crate::selector::{selector_batch_loss, ClassWeights, MultiLabelExample, SelectorConfig, SelectorParams};
use crate::tensor::{Real, Tensor};
use crate::train::{loss_and_grads, tied_multi_loss, ModelKind};

pub const STEP: Real = 1e-5;
pub const TOLERANCE: Real = 1e-4;
/// Gradients below this magnitude are compared absolutely against it.
pub const ABS_FLOOR: Real = 1e-6;

pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: Real,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < TOLERANCE
    }
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Compares tape gradients of the scalar `build(inputs)` with central
/// differences over every input element.
pub fn check_function(name: &str, inputs: &[Tensor], build: &Build) -> Result<CheckResult> {
    let eval = |xs: &[Tensor]| -> Result<Real> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut result = CheckResult { name: name.to_string(), checked: 0, max_rel_error: 0.0 };
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let g = grads.wrt(*v);
        for e in 0..xs[i].len() {
            let orig = xs[i].data()[e];
            xs[i].data_mut()[e] = orig + STEP;
            let plus = eval(&xs)?;
            xs[i].data_mut()[e] = orig - STEP;
            let minus = eval(&xs)?;
            xs[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            result.max_rel_error = result.max_rel_error.max(relative_error(g.data()[e], numeric));
            result.checked += 1;
        }
    }
    Ok(result)
}

/// Reduces any tensor to a scalar through fixed random weights, so every
/// output element contributes a distinct coefficient.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::uniform(&shape, 1.0, &mut rng));
    let p = tape.mul(x, w);
    tape.sum(p)
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Values bounded away from zero, for ops with a kink or pole there.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.3..2.0)).collect())
}

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Box<Build>,
}

fn case(name: &'static str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase { name, inputs, build: Box::new(build) }
}

/// One case per differentiable tape operation.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let ws = move |t: &mut Tape, x: Var| weighted_sum(t, x, seed ^ 0x5eed);
    vec![
        case("add", vec![rand_t(&[2, 3], r), rand_t(&[2, 3], r)], move |t, v| {
            let y = t.add(v[0], v[1]);
            Ok(ws(t, y))
        }),
        case("sub", vec![rand_t(&[2, 3], r), rand_t(&[2, 3], r)], move |t, v| {
            let y = t.sub(v[0], v[1]);
            Ok(ws(t, y))
        }),
        case("mul", vec![rand_t(&[2, 3], r), rand_t(&[2, 3], r)], move |t, v| {
            let y = t.mul(v[0], v[1]);
            Ok(ws(t, y))
        }),
        case("div", vec![rand_t(&[2, 3], r), away_from_zero(&[2, 3], r)], move |t, v| {
            let y = t.div(v[0], v[1]);
            Ok(ws(t, y))
        }),
        case("scale", vec![rand_t(&[3, 2], r)], move |t, v| {
            let y = t.scale(v[0], -1.7);
            Ok(ws(t, y))
        }),
        case("add_scalar", vec![rand_t(&[3, 2], r)], move |t, v| {
            let y = t.add_scalar(v[0], 0.3);
            let y = t.mul(y, y);
            Ok(ws(t, y))
        }),
        case("exp", vec![rand_t(&[2, 3], r)], move |t, v| {
            let y = t.exp(v[0]);
            Ok(ws(t, y))
        }),
        case("log", vec![positive(&[2, 3], r)], move |t, v| {
            let y = t.log(v[0]);
            Ok(ws(t, y))
        }),
        case("sigmoid", vec![rand_t(&[2, 3], r)], move |t, v| {
            let y = t.sigmoid(v[0]);
            Ok(ws(t, y))
        }),
        case("relu", vec![away_from_zero(&[3, 3], r)], move |t, v| {
            let y = t.relu(v[0]);
            Ok(ws(t, y))
        }),
        case("clamp", vec![Tensor::new(vec![1, 4], vec![-0.9, -0.2, 0.3, 0.8])], move |t, v| {
            let y = t.clamp(v[0], -0.5, 0.5);
            Ok(ws(t, y))
        }),
        case("sum", vec![rand_t(&[2, 3], r)], move |t, v| {
            let y = t.mul(v[0], v[0]);
            Ok(t.sum(y))
        }),
        case("mean", vec![rand_t(&[2, 3], r)], move |t, v| {
            let y = t.mul(v[0], v[0]);
            Ok(t.mean(y))
        }),
        case("sum_rows", vec![rand_t(&[3, 4], r)], move |t, v| {
            let y = t.sum_rows(v[0]);
            Ok(ws(t, y))
        }),
        case("add_n", vec![rand_t(&[2, 2], r), rand_t(&[2, 2], r), rand_t(&[2, 2], r)], move |t, v| {
            let y = t.add_n(&[v[0], v[1], v[2], v[0]]);
            Ok(ws(t, y))
        }),
        case("matmul", vec![rand_t(&[2, 3], r), rand_t(&[3, 4], r)], move |t, v| {
            let y = t.matmul(v[0], v[1], false);
            Ok(ws(t, y))
        }),
        case("matmul_transposed", vec![rand_t(&[2, 3], r), rand_t(&[4, 3], r)], move |t, v| {
            let y = t.matmul(v[0], v[1], true);
            Ok(ws(t, y))
        }),
        case("batch_matmul", vec![rand_t(&[2, 2, 3], r), rand_t(&[2, 3, 2], r)], move |t, v| {
            let y = t.batch_matmul(v[0], v[1], false);
            Ok(ws(t, y))
        }),
        case("batch_matmul_transposed", vec![rand_t(&[2, 2, 3], r), rand_t(&[2, 4, 3], r)], move |t, v| {
            let y = t.batch_matmul(v[0], v[1], true);
            Ok(ws(t, y))
        }),
        case("add_bias", vec![rand_t(&[3, 2], r), rand_t(&[2], r)], move |t, v| {
            let y = t.add_bias(v[0], v[1]);
            Ok(ws(t, y))
        }),
        case("linear", vec![rand_t(&[2, 3], r), rand_t(&[3, 2], r), rand_t(&[2], r)], move |t, v| {
            let y = t.linear(v[0], v[1], v[2]);
            Ok(ws(t, y))
        }),
        case("split_heads", vec![rand_t(&[4, 4], r)], move |t, v| {
            let y = t.split_heads(v[0], 2, 2);
            Ok(ws(t, y))
        }),
        case("merge_heads", vec![rand_t(&[4, 2, 2], r)], move |t, v| {
            let y = t.merge_heads(v[0], 2, 2);
            Ok(ws(t, y))
        }),
        case("softmax_rows", vec![rand_t(&[3, 4], r)], move |t, v| {
            let y = t.softmax_rows(v[0])?;
            Ok(ws(t, y))
        }),
        case("layer_norm", vec![rand_t(&[3, 5], r), rand_t(&[5], r), rand_t(&[5], r)], move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            Ok(ws(t, y))
        }),
        case("embedding", vec![rand_t(&[5, 3], r)], move |t, v| {
            let y = t.embedding(v[0], &[4, 1, 4, 0])?;
            Ok(ws(t, y))
        }),
        case("select_rows", vec![rand_t(&[4, 3], r)], move |t, v| {
            let y = t.select_rows(v[0], &[3, 0, 3]);
            Ok(ws(t, y))
        }),
        case("cross_entropy", vec![rand_t(&[4, 5], r)], move |t, v| t.cross_entropy(v[0], &[1, 0, 4, 2], Some(0), 0.1)),
        case("dropout", vec![rand_t(&[4, 4], r)], move |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let y = t.dropout(v[0], 0.3, &mut rng);
            Ok(ws(t, y))
        }),
        case("reshape", vec![rand_t(&[2, 6], r)], move |t, v| {
            let y = t.reshape(v[0], vec![3, 4]);
            let y = t.softmax_rows(y)?;
            Ok(ws(t, y))
        }),
    ]
}

pub fn check_ops(seed: u64) -> Result<Vec<CheckResult>> {
    op_cases(seed).iter().map(|c| check_function(c.name, &c.inputs, &c.build)).collect()
}

/// Picks up to `per_tensor` element indices from every tensor.
fn sample_elements(sizes: &[usize], per_tensor: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (slot, &n) in sizes.iter().enumerate() {
        if n <= per_tensor {
            out.extend((0..n).map(|e| (slot, e)));
        } else {
            out.extend(rand::seq::index::sample(&mut rng, n, per_tensor).into_iter().map(|e| (slot, e)));
        }
    }
    out
}

/// Finite-difference check of the full tied-multi loss over sampled weights.
pub fn check_tied_multi_loss(params: &Parameters, batch: &Batch, smoothing: Real, per_tensor: usize, seed: u64) -> Result<CheckResult> {
    let (_, grads) = loss_and_grads(ModelKind::TiedMulti, params, batch, smoothing, 0)?;
    let sizes: Vec<usize> = params.set().iter().map(|(_, t)| t.len()).collect();
    let mut p = params.clone();
    let mut result = CheckResult { name: "tied-multi loss".into(), checked: 0, max_rel_error: 0.0 };
    for (slot, e) in sample_elements(&sizes, per_tensor, seed) {
        let orig = p.set().get(slot).data()[e];
        p.set_mut().get_mut(slot).data_mut()[e] = orig + STEP;
        let plus = tied_multi_loss(&p, batch, smoothing)?.overall;
        p.set_mut().get_mut(slot).data_mut()[e] = orig - STEP;
        let minus = tied_multi_loss(&p, batch, smoothing)?.overall;
        p.set_mut().get_mut(slot).data_mut()[e] = orig;
        let analytic = grads[slot].as_ref().map_or(0.0, |g| g.data()[e]);
        result.max_rel_error = result.max_rel_error.max(relative_error(analytic, (plus - minus) / (2.0 * STEP)));
        result.checked += 1;
    }
    Ok(result)
}

/// Finite-difference check of the selector loss over sampled weights.
pub fn check_selector_loss(
    params: &SelectorParams,
    examples: &[MultiLabelExample],
    weights: &ClassWeights,
    cfg: &SelectorConfig,
    per_tensor: usize,
    seed: u64,
) -> Result<CheckResult> {
    let (_, grads) = selector_batch_loss(params, examples, weights, cfg)?;
    let sizes: Vec<usize> = params.set().iter().map(|(_, t)| t.len()).collect();
    let mut p = params.clone();
    let mut result = CheckResult { name: "selector loss".into(), checked: 0, max_rel_error: 0.0 };
    for (slot, e) in sample_elements(&sizes, per_tensor, seed) {
        let orig = p.set().get(slot).data()[e];
        p.set_mut().get_mut(slot).data_mut()[e] = orig + STEP;
        let plus = selector_batch_loss(&p, examples, weights, cfg)?.0;
        p.set_mut().get_mut(slot).data_mut()[e] = orig - STEP;
        let minus = selector_batch_loss(&p, examples, weights, cfg)?.0;
        p.set_mut().get_mut(slot).data_mut()[e] = orig;
        let analytic = grads[slot].as_ref().map_or(0.0, |g| g.data()[e]);
        result.max_rel_error = result.max_rel_error.max(relative_error(analytic, (plus - minus) / (2.0 * STEP)));
        result.checked += 1;
    }
    Ok(result)
}

/// Slot gradients of the tied-multi objective restricted to the terms
/// accepted by `include`.
pub fn partial_objective_grads(
    params: &Parameters,
    batch: &Batch,
    include: impl Fn(crate::model::LayerCombination) -> bool,
) -> Result<Vec<Option<Tensor>>> {
    let mut net = Net::new(params.set());
    let (loss, _) = crate::train::tied_multi_objective(&mut net, params, batch, 0.0, include)?;
    let grads = net.tape.backward(loss)?;
    Ok(net.param_grads(&grads))
}
