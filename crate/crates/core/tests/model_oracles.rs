use tiedmulti::checkpoint::{model_from_bytes, model_to_bytes};
use tiedmulti::model::forward::encode_all;
use tiedmulti::model::{forward_combination, param_count, Batch, ModelConfig, Net, Parameters};
use tiedmulti::train::{tied_multi_loss, tied_multi_objective, train, vanilla_loss, ModelKind, TrainingConfig};
use tiedmulti::{LayerCombination, Tensor};

type Matrix = Vec<Vec<f64>>;

/// Plain-loop single-sentence forward pass reading weights by name.
struct Reference<'a> {
    p: &'a Parameters,
    heads: usize,
}

impl Reference<'_> {
    fn w(&self, name: &str) -> &Tensor {
        let set = self.p.set();
        set.get(set.slot(name).unwrap_or_else(|| panic!("no {name}")))
    }

    fn matrix(&self, name: &str) -> Matrix {
        let t = self.w(name);
        let cols = t.shape()[1];
        t.data().chunks(cols).map(|r| r.to_vec()).collect()
    }

    fn affine(&self, x: &Matrix, prefix: &str, w: &str, b: &str) -> Matrix {
        let w = self.matrix(&format!("{prefix}.{w}"));
        let b = self.w(&format!("{prefix}.{b}")).data();
        x.iter()
            .map(|row| {
                (0..b.len())
                    .map(|c| {
                        let mut acc = 0.0;
                        for (k, xv) in row.iter().enumerate() {
                            acc += xv * w[k][c];
                        }
                        acc + b[c]
                    })
                    .collect()
            })
            .collect()
    }

    fn norm(&self, x: &Matrix, prefix: &str) -> Matrix {
        let g = self.w(&format!("{prefix}.gamma")).data();
        let b = self.w(&format!("{prefix}.beta")).data();
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let s = (var + 1e-6).sqrt();
                row.iter().enumerate().map(|(c, v)| (v - mean) / s * g[c] + b[c]).collect()
            })
            .collect()
    }

    fn attention(&self, xq: &Matrix, xkv: &Matrix, prefix: &str, causal: bool) -> Matrix {
        let q = self.affine(xq, prefix, "wq", "bq");
        let k = self.affine(xkv, prefix, "wk", "bk");
        let v = self.affine(xkv, prefix, "wv", "bv");
        let d = q[0].len();
        let dh = d / self.heads;
        let mut ctx = vec![vec![0.0; d]; q.len()];
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            for (i, qi) in q.iter().enumerate() {
                let visible = if causal { i + 1 } else { k.len() };
                let scores: Vec<f64> = (0..visible)
                    .map(|j| cols.clone().map(|c| qi[c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    ctx[i][c] = (0..visible).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        self.affine(&ctx, prefix, "wo", "bo")
    }

    fn ffn(&self, x: &Matrix, prefix: &str) -> Matrix {
        let h = self.affine(x, prefix, "w1", "b1");
        let h: Matrix = h.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
        self.affine(&h, prefix, "w2", "b2")
    }

    fn embed(&self, ids: &[usize]) -> Matrix {
        let e = self.matrix("embedding");
        let d = e[0].len();
        ids.iter()
            .enumerate()
            .map(|(pos, &id)| {
                (0..d)
                    .map(|c| {
                        let freq = 10000f64.powf(-((c / 2 * 2) as f64) / d as f64);
                        let pe = if c % 2 == 0 { (pos as f64 * freq).sin() } else { (pos as f64 * freq).cos() };
                        e[id][c] * (d as f64).sqrt() + pe
                    })
                    .collect()
            })
            .collect()
    }

    fn layer_name(&self, stack: &str, i: usize) -> String {
        if self.p.config().recurrent_stacking {
            format!("{stack}.shared")
        } else {
            format!("{stack}.{i}")
        }
    }

    fn logits(&self, src: &[usize], tgt_in: &[usize], combo: LayerCombination) -> Matrix {
        let add = |a: &Matrix, b: &Matrix| -> Matrix {
            a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
        };
        let mut x = self.embed(src);
        for i in 0..combo.n {
            let l = self.layer_name("encoder", i);
            let a = self.attention(&self.norm(&x, &format!("{l}.ln_attn")), &self.norm(&x, &format!("{l}.ln_attn")), &format!("{l}.self_attn"), false);
            x = add(&x, &a);
            let f = self.ffn(&self.norm(&x, &format!("{l}.ln_ff")), &format!("{l}.ff"));
            x = add(&x, &f);
        }
        let mem = self.norm(&x, "encoder.final_norm");
        let mut y = self.embed(tgt_in);
        for j in 0..combo.m {
            let l = self.layer_name("decoder", j);
            let h = self.norm(&y, &format!("{l}.ln_self"));
            y = add(&y, &self.attention(&h, &h, &format!("{l}.self_attn"), true));
            let h = self.norm(&y, &format!("{l}.ln_cross"));
            y = add(&y, &self.attention(&h, &mem, &format!("{l}.cross_attn"), false));
            let h = self.norm(&y, &format!("{l}.ln_ff"));
            y = add(&y, &self.ffn(&h, &format!("{l}.ff")));
        }
        let h = self.norm(&y, "decoder.final_norm");
        let e = self.matrix("embedding");
        h.iter().map(|r| e.iter().map(|er| r.iter().zip(er).map(|(a, b)| a * b).sum()).collect()).collect()
    }
}

fn small(rs: bool) -> ModelConfig {
    ModelConfig { d_model: 16, heads: 4, d_ff: 24, vocab: 12, max_len: 16, ..Default::default() }.with_recurrent_stacking(rs)
}

fn pairs() -> Vec<(Vec<usize>, Vec<usize>)> {
    vec![(vec![4, 5, 6, 7], vec![7, 6, 5]), (vec![8, 9], vec![9, 8, 10, 11, 4]), (vec![11, 10, 9], vec![4])]
}

#[test]
fn forward_matches_straight_line_reference() {
    for rs in [false, true] {
        let p = Parameters::init(&small(rs), 21).unwrap();
        let r = Reference { p: &p, heads: 4 };
        for (src, tgt) in pairs() {
            let batch = Batch::single(&src, &tgt).unwrap();
            let mut src_ids = src.clone();
            src_ids.push(tiedmulti::vocab::EOS);
            for combo in p.config().combination_grid() {
                let got = forward_combination(&p, &batch, combo).unwrap();
                let want = r.logits(&src_ids, &batch.tgt_in, combo);
                let vocab = p.config().vocab;
                for (row, w) in want.iter().enumerate() {
                    for (c, v) in w.iter().enumerate() {
                        let g = got.data()[row * vocab + c];
                        assert!((g - v).abs() < 1e-10, "rs={rs} {combo} row {row}: {g} vs {v}");
                    }
                }
            }
        }
    }
}

#[test]
fn combinations_equal_extracted_submodels_bit_exact() {
    for rs in [false, true] {
        let p = Parameters::init(&small(rs), 3).unwrap();
        let batch = Batch::new(&pairs()).unwrap();
        for combo in p.config().combination_grid() {
            let sub = p.extract(combo.n, combo.m).unwrap();
            let a = forward_combination(&p, &batch, combo).unwrap();
            let b = forward_combination(&sub, &batch, sub.config().deepest()).unwrap();
            assert_eq!(a, b, "rs={rs} {combo}");
        }
    }
}

#[test]
fn overall_loss_is_mean_of_submodel_losses() {
    let p = Parameters::init(&small(false), 8).unwrap();
    let batch = Batch::new(&pairs()).unwrap();
    for smoothing in [0.0, 0.1] {
        let grid = tied_multi_loss(&p, &batch, smoothing).unwrap();
        let mean = grid.losses.iter().sum::<f64>() / grid.losses.len() as f64;
        assert!((grid.overall - mean).abs() < 1e-12);
        let mut oracle = 0.0;
        for combo in p.config().combination_grid() {
            let sub = vanilla_loss(&p.extract(combo.n, combo.m).unwrap(), &batch, smoothing).unwrap();
            assert!((grid.get(combo) - sub).abs() <= 1e-12 * sub.abs());
            oracle += sub / 9.0;
        }
        assert!(((grid.overall - oracle) / oracle).abs() < 1e-9);
    }
}

#[test]
fn one_forward_runs_each_encoder_layer_once_and_each_decoder_layer_n_times() {
    let cfg = ModelConfig { enc_layers: 4, dec_layers: 2, ..small(false) };
    let p = Parameters::init(&cfg, 1).unwrap();
    let mut net = Net::new(p.set());
    tied_multi_objective(&mut net, &p, &Batch::new(&pairs()).unwrap(), 0.0, |_| true).unwrap();
    for i in 0..4 {
        assert_eq!(net.trace.encoder_calls(i), 1);
    }
    for j in 0..2 {
        assert_eq!(net.trace.decoder_calls(j), 4);
    }
}

#[test]
fn mutating_the_shared_encoder_layer_changes_every_state() {
    let p = Parameters::init(&small(true), 4).unwrap();
    let batch = Batch::new(&pairs()).unwrap();
    let states = |p: &Parameters| -> Vec<Tensor> {
        let mut net = Net::new(p.set());
        let enc = encode_all(&mut net, p, &batch, 3).unwrap();
        enc.states.iter().map(|&v| net.tape.value(v).clone()).collect()
    };
    let before = states(&p);
    let mut q = p.clone();
    let slot = q.encoder_layer(2).ff.w1;
    q.set_mut().get_mut(slot).data_mut()[0] += 0.5;
    assert_eq!(q.encoder_layer(0).ff.w1, slot);
    let after = states(&q);
    assert_eq!(before[0], after[0]);
    for i in 1..=3 {
        assert!(before[i].max_abs_diff(&after[i]) > 0.0, "enc_{i} unchanged");
    }
}

#[test]
fn recurrent_stacking_size_is_depth_independent() {
    let base = small(true);
    assert_eq!(param_count(&base.with_depth(6, 6)), param_count(&base.with_depth(1, 1)));
    assert!(param_count(&small(false)) > param_count(&base));
}

fn toy_corpus() -> Vec<(Vec<usize>, Vec<usize>)> {
    (0..64usize)
        .map(|i| {
            let src: Vec<usize> = (0..3 + i % 3).map(|k| 4 + (i * 7 + k * 3) % 8).collect();
            let tgt = src.iter().rev().copied().collect();
            (src, tgt)
        })
        .collect()
}

fn short_run(steps: usize) -> TrainingConfig {
    TrainingConfig { steps, batch_size: 8, warmup: 10, checkpoint_every: 5, keep_last: 3, ..Default::default() }
}

#[test]
fn vanilla_and_tied_agree_with_one_layer_each() {
    let cfg = small(false).with_depth(1, 1);
    let p = Parameters::init(&cfg, 6).unwrap();
    let batch = Batch::new(&pairs()).unwrap();
    assert_eq!(tied_multi_loss(&p, &batch, 0.1).unwrap().overall, vanilla_loss(&p, &batch, 0.1).unwrap());
    let run = short_run(12);
    let a = train(ModelKind::Vanilla, &toy_corpus(), &run, &cfg, &mut std::io::sink()).unwrap();
    let b = train(ModelKind::TiedMulti, &toy_corpus(), &run, &cfg, &mut std::io::sink()).unwrap();
    assert_eq!(a.final_params, b.final_params);
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    let run = short_run(12);
    let a = train(ModelKind::TiedMulti, &toy_corpus(), &run, &small(false), &mut std::io::sink()).unwrap();
    let b = train(ModelKind::TiedMulti, &toy_corpus(), &run, &small(false), &mut std::io::sink()).unwrap();
    assert_eq!(a.final_params, b.final_params);
    assert_eq!(a.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), vec![5, 10, 12]);
    let bytes = model_to_bytes(&a.final_params).unwrap();
    assert_eq!(bytes, model_to_bytes(&b.final_params).unwrap());
    assert_eq!(model_to_bytes(&model_from_bytes(&bytes).unwrap()).unwrap(), bytes);
}

#[test]
fn training_log_lines_and_loss_trend() {
    let mut log = Vec::new();
    train(ModelKind::TiedMulti, &toy_corpus(), &TrainingConfig { lr: 3e-3, ..short_run(120) }, &small(false), &mut log).unwrap();
    let lines: Vec<Vec<f64>> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| l.split('\t').map(|f| f.parse().unwrap()).collect())
        .collect();
    assert_eq!(lines.len(), 120);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l.len(), 2 + 9);
        assert_eq!(l[0] as usize, i + 1);
        let mean = l[2..].iter().sum::<f64>() / 9.0;
        assert!((l[1] - mean).abs() < 1e-5);
    }
    let avg = |s: &[Vec<f64>]| s.iter().map(|l| l[1]).sum::<f64>() / s.len() as f64;
    assert!(avg(&lines[100..]) < 0.8 * avg(&lines[..20]));
}
