//! Binary weight container.
//!
//! Layout, all integers little-endian `u32`:
//! `"TMXC"`, version, kind, header length, header fields, record count, then
//! per record: name length, UTF-8 name, rank, extents, and the values as
//! little-endian `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamSet, Parameters};
use crate::selector::{SelectorParams, SelectorShape};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"TMXC";
pub const FORMAT_VERSION: u32 = 1;
const KIND_MODEL: u32 = 0;
const KIND_SELECTOR: u32 = 1;
const FLAG_RECURRENT: u32 = 1;

fn put(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format("checkpoint", format!("{what} {v} does not fit in 32 bits")))
}

fn encode(kind: u32, header: &[u32], set: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(set.element_count() * 4 + 256);
    out.extend_from_slice(MAGIC);
    put(&mut out, FORMAT_VERSION);
    put(&mut out, kind);
    put(&mut out, to_u32(header.len(), "header length")?);
    header.iter().for_each(|&h| put(&mut out, h));
    put(&mut out, to_u32(set.len(), "record count")?);
    for (name, t) in set.iter() {
        put(&mut out, to_u32(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
        put(&mut out, to_u32(t.shape().len(), "rank")?);
        for &e in t.shape() {
            put(&mut out, to_u32(e, "extent")?);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format("checkpoint", "unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

struct Decoded {
    kind: u32,
    header: Vec<u32>,
    records: Vec<(String, Tensor)>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let kind = c.u32()?;
    let hlen = c.u32()? as usize;
    let header = (0..hlen).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let count = c.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| Error::format("checkpoint", "record name is not UTF-8"))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        if rank == 0 || len == 0 {
            return Err(Error::format("checkpoint", format!("record {name} has an empty shape")));
        }
        let raw = c.take(len.checked_mul(4).ok_or_else(|| Error::format("checkpoint", "record too large"))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as Real).collect();
        records.push((name, Tensor::new(shape, data)));
    }
    if c.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok(Decoded { kind, header, records })
}

/// Copies `records` into `set`, which must hold exactly the same names and shapes.
fn fill(set: &mut ParamSet, records: Vec<(String, Tensor)>) -> Result<()> {
    if records.len() != set.len() {
        return Err(Error::ConfigMismatch(format!("{} records for {} parameters", records.len(), set.len())));
    }
    for (name, t) in records {
        let slot = set.slot(&name).ok_or_else(|| Error::ConfigMismatch(format!("unknown record {name}")))?;
        if set.get(slot).shape() != t.shape() {
            return Err(Error::ConfigMismatch(format!("record {name} has shape {:?}", t.shape())));
        }
        *set.get_mut(slot) = t;
    }
    Ok(())
}

fn model_header(cfg: &ModelConfig) -> Result<Vec<u32>> {
    let flags = if cfg.recurrent_stacking { FLAG_RECURRENT } else { 0 };
    let dropout = (cfg.dropout * 1e6).round() as u32;
    Ok(vec![
        to_u32(cfg.enc_layers, "enc_layers")?,
        to_u32(cfg.dec_layers, "dec_layers")?,
        to_u32(cfg.d_model, "d_model")?,
        to_u32(cfg.heads, "heads")?,
        to_u32(cfg.d_ff, "d_ff")?,
        to_u32(cfg.vocab, "vocab")?,
        to_u32(cfg.max_len, "max_len")?,
        flags,
        dropout,
    ])
}

pub fn model_to_bytes(params: &Parameters) -> Result<Vec<u8>> {
    encode(KIND_MODEL, &model_header(params.config())?, params.set())
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Parameters> {
    let d = decode(bytes)?;
    if d.kind != KIND_MODEL || d.header.len() != 9 {
        return Err(Error::format("checkpoint", "not a model checkpoint"));
    }
    let h: Vec<usize> = d.header.iter().map(|&v| v as usize).collect();
    let cfg = ModelConfig {
        enc_layers: h[0],
        dec_layers: h[1],
        d_model: h[2],
        heads: h[3],
        d_ff: h[4],
        vocab: h[5],
        max_len: h[6],
        recurrent_stacking: d.header[7] & FLAG_RECURRENT != 0,
        dropout: d.header[8] as Real / 1e6,
    };
    let mut params = Parameters::zeros(&cfg)?;
    fill(params.set_mut(), d.records)?;
    Ok(params)
}

pub fn selector_to_bytes(p: &SelectorParams) -> Result<Vec<u8>> {
    let s = p.shape();
    let header = [s.layers, s.heads, s.d_ff, s.d_model, s.vocab, s.max_len, s.enc_layers, s.dec_layers]
        .iter()
        .map(|&v| to_u32(v, "selector shape"))
        .collect::<Result<Vec<_>>>()?;
    encode(KIND_SELECTOR, &header, p.set())
}

pub fn selector_from_bytes(bytes: &[u8]) -> Result<SelectorParams> {
    let d = decode(bytes)?;
    if d.kind != KIND_SELECTOR || d.header.len() != 8 {
        return Err(Error::format("checkpoint", "not a selector checkpoint"));
    }
    let h: Vec<usize> = d.header.iter().map(|&v| v as usize).collect();
    let shape = SelectorShape {
        layers: h[0],
        heads: h[1],
        d_ff: h[2],
        d_model: h[3],
        vocab: h[4],
        max_len: h[5],
        enc_layers: h[6],
        dec_layers: h[7],
    };
    let mut p = SelectorParams::zeros(shape)?;
    fill(p.set_mut(), d.records)?;
    Ok(p)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

pub fn save_model(params: &Parameters, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &model_to_bytes(params)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Parameters> {
    model_from_bytes(&read_file(path.as_ref())?)
}

pub fn save_selector(p: &SelectorParams, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &selector_to_bytes(p)?)
}

pub fn load_selector(path: impl AsRef<Path>) -> Result<SelectorParams> {
    selector_from_bytes(&read_file(path.as_ref())?)
}

/// Rounds every weight through `f32`, giving exactly what a save/load cycle yields.
pub fn quantize(params: &Parameters) -> Parameters {
    let mut p = params.clone();
    for t in p.set_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as Real);
    }
    p
}
