use crate::error::{Error, Result};
use crate::vocab::{BOS, EOS, PAD};

/// Padded source/target ids for one training or scoring batch.
///
/// Sources get an end-of-sequence marker appended. The decoder reads
/// `<s> y` and predicts `y </s>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub src_ids: Vec<usize>,
    pub src_lens: Vec<usize>,
    pub tgt_len: usize,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

impl Batch {
    pub fn new(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let size = pairs.len();
        let src_lens: Vec<usize> = pairs.iter().map(|(s, _)| s.len() + 1).collect();
        let tgt_lens: Vec<usize> = pairs.iter().map(|(_, t)| t.len() + 1).collect();
        let src_len = *src_lens.iter().max().unwrap();
        let tgt_len = *tgt_lens.iter().max().unwrap();
        let mut src_ids = vec![PAD; size * src_len];
        let mut tgt_in = vec![PAD; size * tgt_len];
        let mut tgt_out = vec![PAD; size * tgt_len];
        for (b, (src, tgt)) in pairs.iter().enumerate() {
            let row = &mut src_ids[b * src_len..];
            row[..src.len()].copy_from_slice(src);
            row[src.len()] = EOS;
            let tin = &mut tgt_in[b * tgt_len..];
            tin[0] = BOS;
            tin[1..=tgt.len()].copy_from_slice(tgt);
            let tout = &mut tgt_out[b * tgt_len..];
            tout[..tgt.len()].copy_from_slice(tgt);
            tout[tgt.len()] = EOS;
        }
        Ok(Batch { size, src_len, src_ids, src_lens, tgt_len, tgt_in, tgt_out, tgt_lens })
    }

    pub fn single(src: &[usize], tgt: &[usize]) -> Result<Self> {
        Self::new(&[(src.to_vec(), tgt.to_vec())])
    }
}
