use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Architecture hyper-parameters of a tied-multi Transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub recurrent_stacking: bool,
    pub dropout: Real,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 3,
            dec_layers: 3,
            d_model: 32,
            heads: 4,
            d_ff: 64,
            vocab: 32,
            max_len: 32,
            recurrent_stacking: false,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// transformer-base with a 32k shared vocabulary.
    pub fn paper_base() -> Self {
        ModelConfig {
            enc_layers: 6,
            dec_layers: 6,
            d_model: 512,
            heads: 8,
            d_ff: 2048,
            vocab: 32_768,
            max_len: 256,
            recurrent_stacking: false,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config("encoder and decoder need at least one layer".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_ff == 0 || self.vocab == 0 || self.max_len == 0 {
            return Err(Error::Config("d_ff, vocab and max_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn with_depth(&self, enc_layers: usize, dec_layers: usize) -> Self {
        ModelConfig { enc_layers, dec_layers, ..self.clone() }
    }

    pub fn with_recurrent_stacking(&self, on: bool) -> Self {
        ModelConfig { recurrent_stacking: on, ..self.clone() }
    }

    /// Number of layer combinations `K = N × M`.
    pub fn combinations(&self) -> usize {
        self.enc_layers * self.dec_layers
    }

    /// All combinations in row-major order: `n` outer, `m` fastest.
    pub fn combination_grid(&self) -> Vec<LayerCombination> {
        (1..=self.enc_layers)
            .flat_map(|n| (1..=self.dec_layers).map(move |m| LayerCombination { n, m }))
            .collect()
    }

    pub fn deepest(&self) -> LayerCombination {
        LayerCombination { n: self.enc_layers, m: self.dec_layers }
    }

    pub fn check(&self, combo: LayerCombination) -> Result<()> {
        if combo.n < 1 || combo.n > self.enc_layers || combo.m < 1 || combo.m > self.dec_layers {
            return Err(Error::InvalidCombination {
                combo,
                n_max: self.enc_layers,
                m_max: self.dec_layers,
            });
        }
        Ok(())
    }
}

/// Encoder depth `n` and decoder depth `m` used for one decode, both 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerCombination {
    pub n: usize,
    pub m: usize,
}

impl LayerCombination {
    pub fn new(n: usize, m: usize) -> Self {
        LayerCombination { n, m }
    }

    /// Row-major index in a grid with `dec_layers` columns.
    pub fn index(self, dec_layers: usize) -> usize {
        (self.n - 1) * dec_layers + (self.m - 1)
    }

    pub fn from_index(k: usize, dec_layers: usize) -> Self {
        LayerCombination { n: k / dec_layers + 1, m: k % dec_layers + 1 }
    }
}

impl fmt::Display for LayerCombination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.n, self.m)
    }
}

impl std::str::FromStr for LayerCombination {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_start_matches('(').trim_end_matches(')');
        let (a, b) = s
            .split_once(',')
            .ok_or_else(|| Error::format("layer combination", format!("expected n,m, got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| Error::format("layer combination", e.to_string()))
        };
        Ok(LayerCombination { n: parse(a)?, m: parse(b)? })
    }
}

/// Exact learnable-parameter count for `config`.
pub fn param_count(config: &ModelConfig) -> u64 {
    let d = config.d_model as u64;
    let ff = config.d_ff as u64;
    let norm = 2 * d;
    let attn = 4 * (d * d + d);
    let ffn = d * ff + ff + ff * d + d;
    let enc_layer = attn + ffn + 2 * norm;
    let dec_layer = 2 * attn + ffn + 3 * norm;
    let (enc_stack, dec_stack) = if config.recurrent_stacking {
        (1, 1)
    } else {
        (config.enc_layers as u64, config.dec_layers as u64)
    };
    let embedding = config.vocab as u64 * d;
    embedding + enc_stack * enc_layer + dec_stack * dec_layer + 2 * norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_order_is_m_fastest() {
        let cfg = ModelConfig::default().with_depth(2, 3);
        let grid = cfg.combination_grid();
        assert_eq!(grid[0], LayerCombination::new(1, 1));
        assert_eq!(grid[1], LayerCombination::new(1, 2));
        assert_eq!(grid[3], LayerCombination::new(2, 1));
        for (k, c) in grid.iter().enumerate() {
            assert_eq!(c.index(3), k);
            assert_eq!(LayerCombination::from_index(k, 3), *c);
        }
    }

    #[test]
    fn rs_count_is_depth_independent() {
        let base = ModelConfig::paper_base().with_recurrent_stacking(true);
        assert_eq!(param_count(&base), param_count(&base.with_depth(1, 1)));
        assert_eq!(param_count(&base.with_depth(1, 1)), param_count(&base.with_depth(1, 1).with_recurrent_stacking(false)));
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::default();
        c.heads = 5;
        assert!(c.validate().is_err());
        assert!(ModelConfig::default().with_depth(0, 2).validate().is_err());
        assert!(ModelConfig::default().check(LayerCombination::new(4, 1)).is_err());
        assert!(ModelConfig::default().check(LayerCombination::new(3, 0)).is_err());
    }

    #[test]
    fn parse_combination() {
        assert_eq!("2,3".parse::<LayerCombination>().unwrap(), LayerCombination::new(2, 3));
        assert_eq!("(6,1)".parse::<LayerCombination>().unwrap(), LayerCombination::new(6, 1));
        assert!("23".parse::<LayerCombination>().is_err());
    }
}
