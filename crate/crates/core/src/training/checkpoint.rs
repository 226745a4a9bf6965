//! Binary checkpoints: an 8-byte magic, a little-endian `u32` version, a
//! `u64` header length, a JSON header, then raw little-endian `f64` arrays
//! (parameter values, and the optimizer moments when present) in store order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{AdamW, Rng, RngState};

use super::loss::LossConfig;
use super::trainer::{TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CTXDETCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    loss: LossConfig,
    tokens: Vec<String>,
    nouns: Vec<String>,
    params: Vec<ParamMeta>,
    optimizer: AdamW,
    moments: bool,
    rng: RngState,
    step: u64,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn encode(t: &Trainer) -> Result<Vec<u8>> {
    let store = &t.model.store;
    let (m, v) = t.optimizer.moments();
    let moments = !m.is_empty();
    let header = Header {
        model: t.model.config.clone(),
        train: t.train.clone(),
        loss: t.loss.clone(),
        tokens: t.model.vocab.tokens().to_vec(),
        nouns: t.model.vocab.noun_words(),
        params: store
            .iter()
            .map(|(_, p)| ParamMeta {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                frozen: p.frozen,
            })
            .collect(),
        optimizer: t.optimizer.clone(),
        moments,
        rng: t.rng.state(),
        step: t.step,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 20 + 8 * 3 * store.num_scalars());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    for (_, p) in store.iter() {
        put(p.tensor.values());
    }
    if moments {
        m.iter().chain(v).for_each(|b| put(b));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt("file is truncated"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| corrupt("array too large"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

fn decode(bytes: &[u8]) -> Result<Trainer> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let header: Header = serde_json::from_slice(r.take(usize::try_from(len).map_err(|_| corrupt("header too large"))?)?)
        .map_err(|e| corrupt(format!("bad header: {e}")))?;

    let vocab = Vocabulary::from_json_parts(header.tokens, &header.nouns)?;
    // Rebuild the architecture to obtain parameter handles, then overwrite values.
    let mut model = Model::new(header.model, vocab, &mut Rng::new(0))?;
    if model.store.len() != header.params.len() {
        return Err(corrupt(format!(
            "checkpoint has {} parameters, architecture has {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let mut m = Vec::new();
    for (p, meta) in model.store.iter_mut().zip(&header.params) {
        if p.name != meta.name || p.tensor.shape() != meta.shape.as_slice() {
            return Err(corrupt(format!(
                "parameter {} {:?} does not match architecture {} {:?}",
                meta.name,
                meta.shape,
                p.name,
                p.tensor.shape()
            )));
        }
        let vals = r.f64s(p.tensor.len())?;
        p.tensor.values_mut().copy_from_slice(&vals);
        p.frozen = meta.frozen;
        m.push(p.tensor.len());
    }
    let mut optimizer = header.optimizer;
    if header.moments {
        let first = m.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
        let second = m.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
        optimizer.set_moments(first, second);
    }
    if r.at != bytes.len() {
        return Err(corrupt("trailing bytes after payload"));
    }
    header.train.validate()?;
    header.loss.validate()?;
    Ok(Trainer {
        model,
        optimizer,
        rng: Rng::from_state(header.rng),
        step: header.step,
        train: header.train,
        loss: header.loss,
    })
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let bytes = encode(trainer)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint and requires its architecture to equal `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Trainer> {
    let t = load_checkpoint(path)?;
    if &t.model.config != expected {
        return Err(corrupt(format!(
            "architecture mismatch: checkpoint has {:?}, expected {:?}",
            t.model.config, expected
        )));
    }
    Ok(t)
}
