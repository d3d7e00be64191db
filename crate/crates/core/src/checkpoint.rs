//! Versioned checkpoint container.
//!
//! Layout: the magic bytes `HAQAECKP`, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the JSON manifest, then
//! raw little-endian tensor buffers at the offsets the manifest lists
//! (relative to the end of the manifest).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::HaqaeConfig;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{build_variant, Model};
use crate::optim::AdamState;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"HAQAECKP";
pub const FORMAT_VERSION: u32 = 1;

/// Optimizer and schedule position.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub step: u64,
    pub epoch: usize,
    pub best_valid_nll: Option<f64>,
    pub adam: AdamState<T>,
    /// Seed and word position of the batch-shuffling generator.
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

impl<T: Real> TrainState<T> {
    pub fn fresh(model: &Model<T>) -> Self {
        Self {
            step: 0,
            epoch: 0,
            best_valid_nll: None,
            adam: AdamState::new(&model.params),
            rng_seed: model.config.seed,
            rng_word_pos: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Real> {
    pub model: Model<T>,
    pub vocab: Vocabulary,
    pub state: TrainState<T>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct StateEntry {
    step: u64,
    epoch: usize,
    best_valid_nll: Option<f64>,
    adam_step: u64,
    rng_seed: u64,
    rng_word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: HaqaeConfig,
    vocab: Vec<String>,
    state: StateEntry,
    tensors: Vec<TensorEntry>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(model: Model<T>, vocab: Vocabulary) -> Self {
        let state = TrainState::fresh(&model);
        Self {
            model,
            vocab,
            state,
        }
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let p = &self.model.params;
        let mut out: Vec<(String, &Tensor<T>)> =
            p.iter().map(|(n, t)| (n.to_string(), t)).collect();
        for (id, (m, v)) in p
            .ids()
            .zip(self.state.adam.m.iter().zip(&self.state.adam.v))
        {
            out.push((format!("adam.m/{}", p.name(id)), m));
            out.push((format!("adam.v/{}", p.name(id)), v));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in self.named_tensors() {
            let offset = data.len() as u64;
            for &x in t.data() {
                x.write_le(&mut data);
            }
            entries.push(TensorEntry {
                name,
                shape: [t.rows(), t.cols()],
                dtype: T::DTYPE.to_string(),
                offset,
                len: data.len() as u64 - offset,
            });
        }
        let s = &self.state;
        let manifest = Manifest {
            config: self.model.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            state: StateEntry {
                step: s.step,
                epoch: s.epoch,
                best_valid_nll: s.best_valid_nll,
                adam_step: s.adam.step,
                rng_seed: s.rng_seed,
                rng_word_pos: s.rng_word_pos.to_string(),
            },
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let (manifest, data) = split(bytes)?;
        let vocab = Vocabulary::from_tokens(manifest.vocab);
        let mut model: Model<T> = build_variant(&manifest.config, vocab.len())?;
        let mut state = TrainState::fresh(&model);
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        let mut seen = vec![[false; 3]; names.len()];
        for e in &manifest.tensors {
            let (kind, base) = match e.name.split_once('/') {
                Some(("adam.m", n)) => (1, n),
                Some(("adam.v", n)) => (2, n),
                _ => (0, e.name.as_str()),
            };
            let id = model
                .params
                .find(base)
                .ok_or_else(|| bad(format!("unknown tensor {}", e.name)))?;
            let t = read_tensor::<T>(data, e)?;
            let expect = model.params.get(id).shape();
            if t.shape() != expect {
                return Err(bad(format!(
                    "tensor {}: shape {:?}, expected {expect:?}",
                    e.name,
                    t.shape()
                )));
            }
            match kind {
                0 => *model.params.get_mut(id) = t,
                1 => state.adam.m[id.0] = t,
                _ => state.adam.v[id.0] = t,
            }
            seen[id.0][kind] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s[0]) {
            return Err(bad(format!("missing parameter {}", names[i])));
        }
        let s = manifest.state;
        state.step = s.step;
        state.epoch = s.epoch;
        state.best_valid_nll = s.best_valid_nll;
        state.adam.step = s.adam_step;
        state.rng_seed = s.rng_seed;
        state.rng_word_pos = s
            .rng_word_pos
            .parse()
            .map_err(|_| bad("bad rng position".into()))?;
        Ok(Self {
            model,
            vocab,
            state,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn split(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let data_start = 20usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..data_start])
        .map_err(|e| bad(format!("manifest: {e}")))?;
    Ok((manifest, &bytes[data_start..]))
}

/// Element type the parameters were saved with, `"f32"` or `"f64"`.
pub fn stored_dtype(bytes: &[u8]) -> Result<String> {
    let (manifest, _) = split(bytes)?;
    manifest
        .tensors
        .first()
        .map(|t| t.dtype.clone())
        .ok_or_else(|| Error::Checkpoint("no tensors".into()))
}

fn read_tensor<T: Real>(data: &[u8], e: &TensorEntry) -> Result<Tensor<T>> {
    let width = match e.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        d => {
            return Err(Error::Checkpoint(format!(
                "tensor {}: unknown dtype {d}",
                e.name
            )))
        }
    };
    let [r, c] = e.shape;
    let start = e.offset as usize;
    let end = start + e.len as usize;
    if e.len as usize != r * c * width || end > data.len() {
        return Err(Error::Checkpoint(format!(
            "tensor {}: buffer out of bounds",
            e.name
        )));
    }
    let values: Vec<T> = data[start..end]
        .chunks_exact(width)
        .map(|b| {
            if width == T::BYTES {
                T::read_le(b)
            } else if width == 4 {
                T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            } else {
                T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes")))
            }
        })
        .collect();
    Tensor::new(r, c, values)
}
