//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tiedmulti::data::{generate_toy_corpus, Pair, ToyTaskSpec};
use tiedmulti::decode::{decode, decode_corpus_timed, BeamConfig, DecodeMode};
use tiedmulti::gradcheck::{check_ops, check_selector_loss, check_tied_multi_loss, CheckResult};
use tiedmulti::harness::{report_model_sizes, run_distillation_pipeline, ChildKind, STORED_FLOATS_PER_PARAM};
use tiedmulti::metrics::{corpus_bleu, is_faster, oracle_combination, oracle_label_set, sentence_chrf, CombinationGrid};
use tiedmulti::model::{average_checkpoints, forward_combination, param_count, Batch, ModelConfig, Parameters};
use tiedmulti::selector::{
    class_weights, f_beta_loss, macro_scores, predict, select_combination, selector_loss, train_selector, weighted_bce,
    ClassWeights, MultiLabelExample, SelectorConfig, SelectorParams, SelectorShape,
};
use tiedmulti::train::{tied_multi_loss, train, vanilla_loss, ModelKind, TrainingConfig};
use tiedmulti::vocab::Vocab;
use tiedmulti::{LayerCombination, Tensor};

use tiedmulti_cli::Settings;

struct Suite {
    failed: usize,
}

impl Suite {
    fn report(&mut self, id: u32, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn c(n: usize, m: usize) -> LayerCombination {
    LayerCombination::new(n, m)
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn random_pairs(n: usize, vocab: usize, seed: u64) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let sl = rng.gen_range(2..9);
            let tl = rng.gen_range(1..9);
            let src = (0..sl).map(|_| rng.gen_range(4..vocab)).collect();
            let tgt = (0..tl).map(|_| rng.gen_range(4..vocab)).collect();
            (src, tgt)
        })
        .collect()
}

fn loss_aggregation(s: &mut Suite) {
    let start = Instant::now();
    let p = Parameters::init(&ModelConfig::default(), 101).unwrap();
    let batch = Batch::new(&random_pairs(8, 32, 5)).unwrap();
    let grid = tied_multi_loss(&p, &batch, 0.0).unwrap();
    let oracle: f64 = p
        .config()
        .combination_grid()
        .into_iter()
        .map(|k| vanilla_loss(&p.extract(k.n, k.m).unwrap(), &batch, 0.0).unwrap())
        .sum::<f64>()
        / 9.0;
    let rel = ((grid.overall - oracle) / oracle).abs();
    let t = secs(start.elapsed());
    s.report(1, "loss aggregation", rel < 1e-9 && t < 10.0, format!("relative error {rel:.2e} (< 1e-9), {t:.2} s (< 10 s)"));
}

fn submodel_equivalence(s: &mut Suite) {
    let start = Instant::now();
    let p = Parameters::init(&ModelConfig::default(), 102).unwrap();
    let batch = Batch::new(&random_pairs(6, 32, 6)).unwrap();
    let mut identical = 0;
    for k in p.config().combination_grid() {
        let sub = p.extract(k.n, k.m).unwrap();
        let a = forward_combination(&p, &batch, k).unwrap();
        let b = forward_combination(&sub, &batch, sub.config().deepest()).unwrap();
        let same = a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        identical += same as usize;
    }
    let t = secs(start.elapsed());
    s.report(2, "sub-model equivalence", identical == 9 && t < 10.0, format!("{identical}/9 combinations bit-identical, {t:.2} s (< 10 s)"));
}

fn gradient_suite(s: &mut Suite) {
    let start = Instant::now();
    let mut results: Vec<CheckResult> = check_ops(1).unwrap();
    let tiny = ModelConfig { d_model: 8, heads: 2, d_ff: 12, vocab: 12, max_len: 16, ..Default::default() };
    let batch = Batch::new(&random_pairs(3, 12, 9)).unwrap();
    for rs in [false, true] {
        let p = Parameters::init(&tiny.with_recurrent_stacking(rs), 7).unwrap();
        let mut r = check_tied_multi_loss(&p, &batch, 0.1, 12, 4).unwrap();
        r.name = format!("{} (rs={rs})", r.name);
        results.push(r);
    }
    let model = Parameters::init(&tiny, 8).unwrap();
    let cfg = SelectorConfig { layers: 1, heads: 2, d_ff: 8, ..Default::default() };
    let sel = SelectorParams::from_model(&model, &cfg).unwrap();
    let examples: Vec<MultiLabelExample> = random_pairs(4, 12, 10)
        .into_iter()
        .enumerate()
        .map(|(i, (tokens, _))| MultiLabelExample { tokens, y: (0..9).map(|k| k % 4 == i || k == 8).collect() })
        .collect();
    let weights = class_weights(&[1, 1, 1, 2, 1, 1, 1, 2, 4], cfg.alpha).unwrap();
    results.push(check_selector_loss(&sel, &examples, &weights, &cfg, 12, 5).unwrap());
    let t = secs(start.elapsed());
    let failing: Vec<String> = results.iter().filter(|r| !r.passed()).map(|r| format!("{} {:.2e}", r.name, r.max_rel_error)).collect();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let checked: usize = results.iter().map(|r| r.checked).sum();
    let detail = format!(
        "{} checks over {checked} coordinates, worst relative error {worst:.2e} (< 1e-4), {t:.1} s (< 60 s){}",
        results.len(),
        if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
    );
    s.report(3, "finite-difference gradients", failing.is_empty() && t < 60.0, detail);
}

fn size_ratios(s: &mut Suite) {
    let start = Instant::now();
    let rows = report_model_sizes(&ModelConfig::paper_base());
    let (vanilla_sum, rs_sum, tied, tied_rs) = (&rows[0], &rows[1], &rows[2], &rows[3]);
    let within = |v: f64, target: f64, tol: f64| ((v - target) / target).abs() <= tol;
    let tied_m = tied.stored as f64 / 1e6;
    let rs_m = tied_rs.stored as f64 / 1e6;
    let checks = [
        within(tied_m, 183.0, 0.05),
        within(rs_m, 73.0, 0.05),
        within(vanilla_sum.ratio, 25.16, 0.03),
        within(rs_sum.ratio, 14.33, 0.03),
        within(tied_rs.ratio, 0.40, 0.05),
    ];
    let t = secs(start.elapsed());
    s.report(
        4,
        "model sizes",
        checks.iter().all(|&b| b) && t < 1.0 && tied.stored == STORED_FLOATS_PER_PARAM * param_count(&ModelConfig::paper_base()),
        format!(
            "tied {tied_m:.1}M (183M ±5%), tied-RS {rs_m:.1}M (73M ±5%), vanilla sum {:.2} (25.16 ±3%), RS sum {:.2} (14.33 ±3%), tied-RS {:.3} (0.40 ±5%), {t:.3} s (< 1 s)",
            vanilla_sum.ratio, rs_sum.ratio, tied_rs.ratio
        ),
    );
}

fn bleu_at(p: &Parameters, combo: LayerCombination, test: &[Pair], vocab: &Vocab, mode: DecodeMode, beam: &BeamConfig) -> f64 {
    let hyps: Vec<String> = test.iter().map(|(src, _)| decode(p, combo, src, mode, beam).map(|t| vocab.decode(&t)).unwrap_or_default()).collect();
    let refs: Vec<String> = test.iter().map(|(_, t)| vocab.decode(t)).collect();
    corpus_bleu(&hyps, &refs).unwrap()
}

struct Trained {
    model: Parameters,
    test: Vec<Pair>,
    vocab: Vocab,
    settings: Settings,
}

fn toy_training(s: &mut Suite) -> Trained {
    let settings = Settings::default();
    let corpus = generate_toy_corpus(&settings.task).unwrap();
    let vocab = settings.task.vocabulary().unwrap();
    let start = Instant::now();
    let out = train(ModelKind::TiedMulti, &corpus.train, &settings.training, &settings.model, &mut std::io::sink()).unwrap();
    let t = secs(start.elapsed());
    let model = if settings.average {
        let kept: Vec<Parameters> = out.checkpoints.iter().map(|c| c.params.clone()).collect();
        average_checkpoints(&kept).unwrap()
    } else {
        out.final_params
    };
    let test: Vec<Pair> = corpus.test[..200].to_vec();
    let grid: Vec<f64> = model
        .config()
        .combination_grid()
        .into_iter()
        .map(|k| bleu_at(&model, k, &test, &vocab, DecodeMode::Beam, &settings.beam))
        .collect();
    let (low, high) = (grid[0], grid[8]);
    let row: Vec<String> = grid.iter().map(|b| format!("{b:.1}")).collect();
    s.report(
        5,
        "toy training",
        high >= 90.0 && low < high && t <= 900.0 && settings.training.steps == 5000 && settings.training.batch_size == 32,
        format!(
            "{} steps in {t:.0} s (<= 900 s), beam BLEU (3,3) {high:.2} (>= 90), (1,1) {low:.2} (< (3,3)); grid {}",
            settings.training.steps,
            row.join(" ")
        ),
    );
    Trained { model, test, vocab, settings }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn decode_time_trend(s: &mut Suite, t: &Trained) {
    let sources: Vec<Vec<usize>> = t.test.iter().map(|(src, _)| src.clone()).collect();
    let cfg = t.model.config();
    let mut times = vec![0.0; 9];
    for k in cfg.combination_grid() {
        let runs: Vec<f64> = (0..10)
            .map(|_| {
                let recs = decode_corpus_timed(&t.model, k, &sources, DecodeMode::Beam, &t.settings.beam);
                recs.iter().map(|r| r.seconds).sum::<f64>() / recs.len() as f64
            })
            .collect();
        times[k.index(3)] = median(runs);
    }
    let mut inversions = Vec::new();
    for n in 1..=3 {
        for m in 1..3 {
            let (a, b) = (times[c(n, m).index(3)], times[c(n, m + 1).index(3)]);
            if b < a {
                inversions.push((a - b) / a);
            }
        }
    }
    let pass = inversions.is_empty() || (inversions.len() == 1 && inversions[0] <= 0.05);
    let table: Vec<String> = (1..=3)
        .map(|n| {
            let row: Vec<String> = (1..=3).map(|m| format!("{:.3}", times[c(n, m).index(3)] * 1e3)).collect();
            format!("n={n}: {}", row.join(" "))
        })
        .collect();
    s.report(
        6,
        "decode time grows with decoder depth",
        pass,
        format!("ms/sentence by m [{}]; inversions {:?} (at most one, <= 5%)", table.join("; "), inversions),
    );
}

fn speed_order(s: &mut Suite) {
    let start = Instant::now();
    let all: Vec<LayerCombination> = (1..=6).flat_map(|n| (1..=6).map(move |m| c(n, m))).collect();
    let mut violations = 0;
    for &a in &all {
        violations += is_faster(a, a) as usize;
        for &b in &all {
            if a != b && is_faster(a, b) == is_faster(b, a) {
                violations += 1;
            }
            for &x in &all {
                if is_faster(a, b) && is_faster(b, x) && !is_faster(a, x) {
                    violations += 1;
                }
            }
        }
    }
    let grid = |cells: &[(usize, usize)], v: f64| {
        let mut g = vec![0.1; 36];
        for &(n, m) in cells {
            g[c(n, m).index(6)] = v;
        }
        CombinationGrid::new(6, 6, g).unwrap()
    };
    let ties = [
        (&[(6, 1), (1, 2)][..], 0.7, c(6, 1)),
        (&[(2, 3), (3, 2)][..], 0.7, c(3, 2)),
        (&[(4, 4), (5, 4), (4, 5)][..], 0.7, c(4, 4)),
        (&[(6, 6)][..], 0.9, c(6, 6)),
    ];
    let mut tie_ok = 0;
    for (cells, v, want) in &ties {
        let label = oracle_label_set(&grid(cells, *v));
        let mut best: Vec<LayerCombination> = cells.iter().map(|&(n, m)| c(n, m)).collect();
        best.sort_by_key(|k| k.index(6));
        tie_ok += (label.best == best && label.fastest_best == *want && oracle_combination(&grid(cells, *v)) == *want) as usize;
    }
    let flat = oracle_label_set(&grid(&[], 0.0));
    tie_ok += (flat.best.len() == 36 && flat.fastest_best == c(1, 1)) as usize;
    let t = secs(start.elapsed());
    s.report(
        7,
        "speed order",
        violations == 0 && tie_ok == ties.len() + 1 && t < 1.0,
        format!("{violations} order violations over 36 combinations, {tie_ok}/{} tie cases, {t:.3} s (< 1 s)", ties.len() + 1),
    );
}

fn chrf_oracle(hyp: &str, reference: &str) -> f64 {
    let h: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    if h.is_empty() && r.is_empty() {
        return 1.0;
    }
    let (mut ps, mut rs) = (Vec::new(), Vec::new());
    for n in 1..=6 {
        if h.len() < n || r.len() < n {
            continue;
        }
        let rg: Vec<&[char]> = r.windows(n).collect();
        let mut used = vec![false; rg.len()];
        let mut hits = 0.0;
        for g in h.windows(n) {
            if let Some(k) = (0..rg.len()).find(|&k| !used[k] && rg[k] == g) {
                used[k] = true;
                hits += 1.0;
            }
        }
        ps.push(hits / (h.len() - n + 1) as f64);
        rs.push(hits / rg.len() as f64);
    }
    if ps.is_empty() {
        return 0.0;
    }
    let p = ps.iter().sum::<f64>() / ps.len() as f64;
    let r = rs.iter().sum::<f64>() / rs.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        5.0 * p * r / (4.0 * p + r)
    }
}

fn bleu_oracle(hyps: &[String], refs: &[String]) -> f64 {
    let (mut hits, mut total) = ([0f64; 4], [0f64; 4]);
    let (mut hl, mut rl) = (0.0, 0.0);
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        hl += h.len() as f64;
        rl += r.len() as f64;
        for n in 1..=4.min(h.len()) {
            let rg: Vec<&[&str]> = if r.len() >= n { r.windows(n).collect() } else { Vec::new() };
            let mut used = vec![false; rg.len()];
            for g in h.windows(n) {
                total[n - 1] += 1.0;
                if let Some(k) = (0..rg.len()).find(|&k| !used[k] && rg[k] == g) {
                    used[k] = true;
                    hits[n - 1] += 1.0;
                }
            }
        }
    }
    if hits.iter().sum::<f64>() == 0.0 || total.contains(&0.0) {
        return 0.0;
    }
    let mut k = 1.0;
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = if hits[n] > 0.0 {
            hits[n] / total[n]
        } else {
            k *= 2.0;
            1.0 / (k * total[n])
        };
        log_sum += p.ln() / 4.0;
    }
    let bp = if hl < rl { (1.0 - rl / hl).exp() } else { 1.0 };
    100.0 * bp * log_sum.exp()
}

fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    let words = ["a", "b", "c", "d", "ab", "ba", "cd"];
    (0..rng.gen_range(0..10)).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ")
}

fn metric_oracles(s: &mut Suite) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pairs: Vec<(String, String)> = (0..100).map(|_| (random_sentence(&mut rng), random_sentence(&mut rng))).collect();
    let chrf_exact = pairs.iter().filter(|(h, r)| sentence_chrf(h, r, 6, 2.0) == chrf_oracle(h, r)).count();
    let mut worst_bleu: f64 = 0.0;
    for chunk in pairs.chunks(5) {
        let (h, r): (Vec<String>, Vec<String>) = chunk.iter().cloned().unzip();
        worst_bleu = worst_bleu.max((corpus_bleu(&h, &r).unwrap() - bleu_oracle(&h, &r)).abs());
    }
    let (h, r): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
    worst_bleu = worst_bleu.max((corpus_bleu(&h, &r).unwrap() - bleu_oracle(&h, &r)).abs());
    let t = secs(start.elapsed());
    s.report(
        8,
        "metric oracles",
        chrf_exact == 100 && worst_bleu < 0.01 && t < 5.0,
        format!("chrF exact on {chrf_exact}/100 pairs, BLEU max difference {worst_bleu:.2e} (< 0.01), {t:.2} s (< 5 s)"),
    );
}

fn selector_losses(s: &mut Suite) {
    let y = [true, false];
    let yhat = [0.5, 0.5];
    let w = ClassWeights::uniform(2);
    let bce = weighted_bce(&yhat, &y, &w);
    let fb = f_beta_loss(&yhat, &y, 1.0);
    let mix = selector_loss(&yhat, &y, &w, &SelectorConfig { beta: 1.0, lambda: 0.5, ..Default::default() });
    let values_ok = (bce - 0.6931).abs() < 1e-4 && (fb - 0.5).abs() < 1e-4 && (mix - 0.5966).abs() < 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut out_of_range = 0;
    for _ in 0..10_000 {
        let k = rng.gen_range(1..40);
        let yhat: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
        let mut y: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.3)).collect();
        y[rng.gen_range(0..k)] = true;
        let l = f_beta_loss(&yhat, &y, rng.gen_range(0.1..5.0));
        out_of_range += !(0.0..=1.0).contains(&l) as usize;
    }
    let mut wrong_backoff = 0;
    for _ in 0..1000 {
        let (n, m) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let mut p: Vec<f64> = (0..n * m).map(|_| rng.gen::<f64>()).collect();
        let max = p.iter().cloned().fold(0.0, f64::max);
        let target = rng.gen_range(0.0..0.5);
        p.iter_mut().for_each(|v| *v = *v / max * target);
        wrong_backoff += (select_combination(&p, 0.5, n, m) != c(n, m)) as usize;
    }
    s.report(
        9,
        "selector losses",
        values_ok && out_of_range == 0 && wrong_backoff == 0,
        format!(
            "bce {bce:.4} (0.6931), f-beta {fb:.4} (0.5), mix {mix:.4} (0.5966), tolerance 1e-4; {out_of_range}/10000 f-beta outside [0,1]; {wrong_backoff}/1000 wrong back-offs"
        ),
    );
}

fn selector_end_to_end(s: &mut Suite) {
    let start = Instant::now();
    let k = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<MultiLabelExample> = (0..200)
        .map(|_| {
            let len = rng.gen_range(3..=8);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(4..4 + 2 * k)).collect();
            let mut y = vec![false; k];
            y[(tokens[0] - 4) % k] = true;
            MultiLabelExample { tokens, y }
        })
        .collect();
    let shape = SelectorShape { layers: 2, heads: 4, d_ff: 64, d_model: 32, vocab: 32, max_len: 32, enc_layers: 2, dec_layers: 2 };
    let table = Tensor::normal(&[32, 32], 32f64.powf(-0.5), &mut ChaCha8Rng::seed_from_u64(7));
    let init = SelectorParams::with_embedding(shape, table, 1).unwrap();
    let cfg = SelectorConfig::default();
    let run = train_selector(init, &data, &cfg, &mut std::io::sink()).unwrap();
    let pred: Vec<Vec<bool>> = data.iter().map(|e| predict(&run.params, &e.tokens, cfg.threshold).unwrap()).collect();
    let gold: Vec<Vec<bool>> = data.iter().map(|e| e.y.clone()).collect();
    let f1 = macro_scores(&pred, &gold, 1.0).f;
    let t = secs(start.elapsed());
    s.report(
        10,
        "selector end-to-end",
        f1 > 0.95 && run.epochs.len() <= 20 && t < 120.0,
        format!("macro F1 {f1:.4} (> 0.95) after {} epochs (<= 20), {t:.1} s (< 120 s)", run.epochs.len()),
    );
}

fn distillation_direction(s: &mut Suite, t: &Trained) {
    let start = Instant::now();
    let mut wins = 0;
    let mut details = Vec::new();
    for seed in 1..=3u64 {
        let spec = ToyTaskSpec { size: 2000, noise: 0.15, seed: 100 + seed, ..t.settings.task.clone() };
        let noisy = generate_toy_corpus(&spec).unwrap().train;
        let training = TrainingConfig { steps: 1000, lr: 2e-3, warmup: 100, seed, checkpoint_every: 1000, keep_last: 1, ..t.settings.training.clone() };
        let report =
            run_distillation_pipeline(&t.model, &noisy, &t.test, &t.vocab, &[ChildKind::TiedRs], true, &training, &t.settings.beam).unwrap();
        let plain = report.children.iter().find(|c| !c.distilled).unwrap();
        let distilled = report.children.iter().find(|c| c.distilled).unwrap();
        let ok = distilled.greedy_beam_gap() <= plain.greedy_beam_gap();
        wins += ok as usize;
        details.push(format!(
            "seed {seed}: distilled gap {:.2} vs plain {:.2}",
            distilled.greedy_beam_gap(),
            plain.greedy_beam_gap()
        ));
    }
    let secs = secs(start.elapsed());
    s.report(
        11,
        "distillation narrows the greedy/beam gap",
        wins >= 2,
        format!("{wins}/3 seeds hold (majority needed); {}; {secs:.0} s", details.join("; ")),
    );
}

fn run_pipeline(bin: &str, dir: &Path) -> Result<(), String> {
    std::fs::write(dir.join("run.cfg"), "train.steps=300\ntrain.warmup=100\ntrain.checkpoint_every=100\ntask.size=2000\n")
        .map_err(|e| e.to_string())?;
    let steps: [&[&str]; 5] = [
        &["gen-data", "--out", "data"],
        &["train", "--data", "data/train.tsv", "--out", "model"],
        &["cost-benefit", "--model", "model/model.ckpt", "--data", "data/test.tsv", "--out", "cb"],
        &["oracle", "--logs", "cb/decode-greedy.log", "--data", "data/test.tsv", "--out", "oracle"],
        &["report", "--logs", "cb/decode-greedy.log", "--data", "data/test.tsv", "--grid", "oracle/grid.tsv", "--out", "report"],
    ];
    for args in steps {
        let out = Command::new(bin)
            .current_dir(dir)
            .args(args)
            .args(["--config", "run.cfg", "--seed", "2024"])
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn reproducibility(s: &mut Suite) {
    let start = Instant::now();
    let bin = env!("CARGO_BIN_EXE_tiedmulti");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut problems = Vec::new();
    for d in &dirs {
        if let Err(e) = run_pipeline(bin, d.path()) {
            problems.push(e);
        }
    }
    let files = ["report/report.txt", "report/report.csv", "report/report.json", "oracle/grid.tsv", "oracle/oracle.txt", "model/model.ckpt"];
    let mut identical = 0;
    if problems.is_empty() {
        for f in files {
            let a = std::fs::read(dirs[0].path().join(f)).unwrap_or_default();
            let b = std::fs::read(dirs[1].path().join(f)).unwrap_or_default();
            if !a.is_empty() && a == b {
                identical += 1;
            } else {
                problems.push(format!("{f} differs"));
            }
        }
    }
    let t = secs(start.elapsed());
    s.report(
        12,
        "reproducible pipeline",
        problems.is_empty(),
        format!("{identical}/{} outputs byte-identical across two runs, {t:.0} s{}", files.len(), if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }),
    );
}

fn main() {
    let mut suite = Suite { failed: 0 };
    loss_aggregation(&mut suite);
    submodel_equivalence(&mut suite);
    gradient_suite(&mut suite);
    size_ratios(&mut suite);
    let trained = toy_training(&mut suite);
    decode_time_trend(&mut suite, &trained);
    speed_order(&mut suite);
    metric_oracles(&mut suite);
    selector_losses(&mut suite);
    selector_end_to_end(&mut suite);
    distillation_direction(&mut suite, &trained);
    reproducibility(&mut suite);
    println!("acceptance: {} of 12 criteria failed", suite.failed);
    if suite.failed > 0 {
        std::process::exit(1);
    }
}
