//! Checkpoint file, little-endian:
//!
//! ```text
//! magic "NJMC" | version u32
//! header_len u64 | header (JSON: config, vocab, counters, rng state)
//! tensor_count u32
//!   name_len u32 | name | ndims u32 | dims u64 * ndims | f64 values
//! crc32 u32 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainingConfig;
use crate::captioner::{ModelDims, ModelParams, PARAM_NAMES};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::{AdamState, Matrix};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NJMC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Identifies the shuffle stream the next step draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainingConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
    pub adam: AdamState,
    pub step: u64,
    pub epoch: u64,
    /// Size of the training corpus, checked on resume.
    pub n_records: usize,
    pub rng: RngState,
}

impl Checkpoint {
    /// Untrained checkpoint wrapping arbitrary parameters, e.g. for evaluation.
    pub fn from_params(config: TrainingConfig, vocab: Vocabulary, params: ModelParams) -> Self {
        let adam = AdamState::new(config.adam, &params.tensors());
        let rng = RngState { seed: config.seed, stream: 1 };
        Self { config, vocab, params, adam, step: 0, epoch: 0, n_records: 0, rng }
    }

    /// Short hex tag derived from the parameter bytes.
    pub fn model_id(&self) -> String {
        let mut h = crc32fast::Hasher::new();
        for m in self.params.tensors() {
            for v in m.as_slice() {
                h.update(&v.to_le_bytes());
            }
        }
        format!("{:08x}", h.finalize())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainingConfig,
    vocab: Vec<String>,
    dims: ModelDims,
    step: u64,
    epoch: u64,
    n_records: usize,
    rng: RngState,
    adam_t: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, m: &Matrix) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, 2);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: ckpt.config.clone(),
        vocab: ckpt.vocab.tokens().to_vec(),
        dims: ckpt.params.dims,
        step: ckpt.step,
        epoch: ckpt.epoch,
        n_records: ckpt.n_records,
        rng: ckpt.rng,
        adam_t: ckpt.adam.t,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);

    put_u32(&mut out, (PARAM_NAMES.len() * 3) as u32);
    for (name, m) in ckpt.params.named() {
        put_tensor(&mut out, name, m);
    }
    for (name, m) in PARAM_NAMES.iter().zip(&ckpt.adam.m) {
        put_tensor(&mut out, &format!("adam.m.{name}"), m);
    }
    for (name, m) in PARAM_NAMES.iter().zip(&ckpt.adam.v) {
        put_tensor(&mut out, &format!("adam.v.{name}"), m);
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Malformed("checkpoint truncated".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Malformed("length overflow".into()))
    }

    fn tensor(&mut self) -> Result<(String, Matrix)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
        if self.u32()? != 2 {
            return Err(Error::Malformed(format!("tensor {name} is not 2-D")));
        }
        let (rows, cols) = (self.len()?, self.len()?);
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Malformed("tensor too large".into()))?;
        let data = self.take(n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, Matrix::from_vec(rows, cols, data)?))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 {
        return Err(Error::Malformed("checkpoint shorter than its header".into()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion { found: version, supported: CHECKPOINT_VERSION });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader { buf: body, at: 8 };
    let header_len = r.len()?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)?;
    let vocab = Vocabulary::from_tokens(header.vocab)?;
    if vocab.len() != header.dims.vocab_size {
        return Err(Error::Malformed("vocabulary size disagrees with model dims".into()));
    }

    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(r.tensor()?);
    }
    if r.at != body.len() {
        return Err(Error::Malformed("trailing bytes after tensor table".into()));
    }
    let mut take = |name: &str| -> Result<Matrix> {
        let i = tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Malformed(format!("missing tensor {name}")))?;
        Ok(tensors.swap_remove(i).1)
    };

    let mut params = ModelParams::zeros(header.dims);
    for (name, slot) in PARAM_NAMES.iter().zip(params.tensors_mut()) {
        *slot = take(name)?;
    }
    params.validate()?;
    let m = PARAM_NAMES.iter().map(|n| take(&format!("adam.m.{n}"))).collect::<Result<Vec<_>>>()?;
    let v = PARAM_NAMES.iter().map(|n| take(&format!("adam.v.{n}"))).collect::<Result<Vec<_>>>()?;
    for (moment, p) in m.iter().chain(&v).zip(params.tensors().iter().cycle()) {
        if moment.shape() != p.shape() {
            return Err(Error::Malformed("optimizer moment shape disagrees with parameter".into()));
        }
    }
    let adam = AdamState { config: header.config.adam, t: header.adam_t, m, v };

    Ok(Checkpoint {
        config: header.config,
        vocab,
        params,
        adam,
        step: header.step,
        epoch: header.epoch,
        n_records: header.n_records,
        rng: header.rng,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
