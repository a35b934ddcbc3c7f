use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tiedmulti::selector::{macro_scores, predict, train_selector, MultiLabelExample, SelectorConfig, SelectorParams, SelectorShape};
use tiedmulti::Tensor;

/// Class of each example is decided by its first token alone.
fn separable(n: usize, k: usize, seed: u64) -> Vec<MultiLabelExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(3..=8);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(4..4 + 2 * k)).collect();
            let mut y = vec![false; k];
            y[(tokens[0] - 4) % k] = true;
            MultiLabelExample { tokens, y }
        })
        .collect()
}

#[test]
fn separable_task_is_learned() {
    let k = 4;
    let shape = SelectorShape { layers: 2, heads: 4, d_ff: 64, d_model: 32, vocab: 32, max_len: 32, enc_layers: 2, dec_layers: 2 };
    let table = Tensor::normal(&[32, 32], 32f64.powf(-0.5), &mut ChaCha8Rng::seed_from_u64(7));
    let init = SelectorParams::with_embedding(shape, table, 1).unwrap();
    let data = separable(200, k, 3);
    let cfg = SelectorConfig::default();
    let run = train_selector(init, &data, &cfg, &mut std::io::sink()).unwrap();
    assert_eq!(run.epochs.len(), 20);
    let pred: Vec<Vec<bool>> = data.iter().map(|e| predict(&run.params, &e.tokens, cfg.threshold).unwrap()).collect();
    let gold: Vec<Vec<bool>> = data.iter().map(|e| e.y.clone()).collect();
    assert!(macro_scores(&pred, &gold, 1.0).f > 0.95);
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let shape = SelectorShape { layers: 1, heads: 2, d_ff: 8, d_model: 8, vocab: 16, max_len: 16, enc_layers: 1, dec_layers: 2 };
    let table = Tensor::normal(&[16, 8], 0.3, &mut ChaCha8Rng::seed_from_u64(2));
    let init = SelectorParams::with_embedding(shape, table, 5).unwrap();
    let cfg = SelectorConfig { lr: 0.0, epochs: 2, ..Default::default() };
    let run = train_selector(init.clone(), &separable(20, 2, 1), &cfg, &mut std::io::sink()).unwrap();
    assert_eq!(run.params, init);
}

#[test]
fn training_is_deterministic() {
    let shape = SelectorShape { layers: 1, heads: 2, d_ff: 8, d_model: 8, vocab: 16, max_len: 16, enc_layers: 1, dec_layers: 2 };
    let table = Tensor::normal(&[16, 8], 0.3, &mut ChaCha8Rng::seed_from_u64(2));
    let init = SelectorParams::with_embedding(shape, table, 5).unwrap();
    let cfg = SelectorConfig { epochs: 2, ..Default::default() };
    let data = separable(20, 2, 1);
    let a = train_selector(init.clone(), &data, &cfg, &mut std::io::sink()).unwrap();
    let b = train_selector(init, &data, &cfg, &mut std::io::sink()).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.epochs, b.epochs);
}
