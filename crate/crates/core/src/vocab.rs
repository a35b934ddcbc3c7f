//! Closed whitespace-symbol vocabulary with reserved ids.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Classification token appended to selector inputs.
pub const CLS: usize = 3;
pub const RESERVED: usize = 4;

const RESERVED_NAMES: [&str; RESERVED] = ["<pad>", "<s>", "</s>", "<cls>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// A vocabulary of `size` ids: the four reserved ids followed by
    /// generated symbols `a`..`z`, then `a1`..`z1`, and so on.
    pub fn toy(size: usize) -> Result<Self> {
        if size <= RESERVED {
            return Err(Error::Config(format!("vocabulary of {size} leaves no symbols")));
        }
        let symbols = (0..size - RESERVED).map(symbol_name).collect();
        Ok(Self::from_symbols(symbols))
    }

    pub fn from_symbols(symbols: Vec<String>) -> Self {
        let mut all: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        all.extend(symbols);
        let index = all.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocab { symbols: all, index }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Number of non-reserved symbols.
    pub fn symbol_count(&self) -> usize {
        self.symbols.len() - RESERVED
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|tok| match self.index.get(tok) {
                Some(&id) if id >= RESERVED => Ok(id),
                _ => Err(Error::UnknownToken(tok.to_string())),
            })
            .collect()
    }

    /// Joins symbols with single spaces, stopping at end-of-sequence and
    /// dropping other reserved ids.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = Vec::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            if id >= RESERVED && id < self.symbols.len() {
                out.push(self.symbols[id].as_str());
            }
        }
        out.join(" ")
    }
}

fn symbol_name(i: usize) -> String {
    let letter = (b'a' + (i % 26) as u8) as char;
    match i / 26 {
        0 => letter.to_string(),
        k => format!("{letter}{k}"),
    }
}
