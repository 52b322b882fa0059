//! Binary checkpoint: `"MIRC"`, version `u32`, header length `u32`, header
//! JSON (configs, step, and the ordered tensor manifest), then every
//! parameter, every first moment and every second moment as little-endian
//! `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::Group;
use crate::trainer::{AdamState, BestRecord, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"MIRC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub seed: u64,
    pub best: Option<BestRecord>,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(state: &TrainState, train: &TrainConfig) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model: state.model.config.clone(),
        train: train.clone(),
        step: state.step,
        seed: state.seed,
        best: state.best,
        tensors: state
            .model
            .store
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let scalars = state.model.store.num_scalars();
    let mut out = Vec::with_capacity(12 + json.len() + 12 * scalars);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let tensors = state
        .model
        .store
        .iter()
        .map(|p| &p.value)
        .chain(state.adam.m.iter())
        .chain(state.adam.v.iter());
    for t in tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save(path: &Path, state: &TrainState, train: &TrainConfig) -> Result<()> {
    let bytes = encode(state, train)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() - *pos < n {
        return Err(Error::Checkpoint(format!(
            "truncated in {what} at byte {}: need {n}, have {}",
            *pos,
            bytes.len() - *pos
        )));
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn read_tensor(bytes: &[u8], pos: &mut usize, shape: &[usize], what: &str) -> Result<Tensor<f32>> {
    let n: usize = shape.iter().product();
    let raw = take(bytes, pos, 4 * n, what)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn decode(bytes: &[u8]) -> Result<(TrainState, TrainConfig)> {
    let mut pos = 0;
    let magic = take(bytes, &mut pos, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(take(bytes, &mut pos, 4, "header length")?.try_into().unwrap()) as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(bytes, &mut pos, len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    header.train.validate()?;
    let mut model = Model::<f32>::new(header.model.clone(), header.train.ablation, header.seed)?;
    if model.store.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "tensor count: checkpoint has {}, model layout has {}",
            header.tensors.len(),
            model.store.len()
        )));
    }
    for (p, e) in model.store.iter().zip(&header.tensors) {
        if p.name != e.name || p.group != e.group || p.value.shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?}: model layout expects `{}` {:?}",
                e.name,
                e.shape,
                p.name,
                p.value.shape()
            )));
        }
    }
    for (p, e) in model.store.iter_mut().zip(&header.tensors) {
        p.value = read_tensor(bytes, &mut pos, &e.shape, &e.name)?;
    }
    let mut moments = |what: &str| -> Result<Vec<Tensor<f32>>> {
        header
            .tensors
            .iter()
            .map(|e| read_tensor(bytes, &mut pos, &e.shape, &format!("{what} of {}", e.name)))
            .collect()
    };
    let m = moments("first moment")?;
    let v = moments("second moment")?;
    if pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - pos)));
    }
    let state = TrainState {
        step: header.step,
        seed: header.seed,
        model,
        adam: AdamState { m, v },
        best: header.best,
    };
    Ok((state, header.train))
}

pub fn load(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// First field where two model configs disagree, as `name: a vs b`.
pub fn config_mismatch(have: &ModelConfig, want: &ModelConfig) -> Option<String> {
    let a = serde_json::to_value(have).ok()?;
    let b = serde_json::to_value(want).ok()?;
    let (a, b) = (a.as_object()?, b.as_object()?);
    a.iter()
        .find(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, v)| format!("{k}: checkpoint has {v}, expected {}", b[k]))
}

/// Loads and checks the stored model dimensions against `expected`.
pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<(TrainState, TrainConfig)> {
    let (state, train) = load(path)?;
    if let Some(diff) = config_mismatch(&state.model.config, expected) {
        return Err(Error::Checkpoint(diff));
    }
    Ok((state, train))
}
