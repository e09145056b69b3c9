//! Binary checkpoint container: an 8-byte magic, a little-endian `u32` format
//! version, a `u64` header length, a JSON header describing every tensor, then
//! the tensor payloads as little-endian `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::queue::EmbeddingQueue;
use super::state::{LearnerConfig, SecoState, TrainConfig};
use crate::error::{Error, IoContext, Result};
use crate::nn::Param;

pub const MAGIC: &[u8; 8] = b"SECOCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub learner: LearnerConfig,
    pub train: TrainConfig,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Run configuration echo supplied by the caller.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

struct Writer {
    tensors: Vec<TensorEntry>,
    data: Vec<f64>,
}

impl Writer {
    fn add(&mut self, name: String, shape: Vec<usize>, values: &[f64]) {
        self.tensors.push(TensorEntry {
            name,
            shape,
            offset: self.data.len(),
            len: values.len(),
        });
        self.data.extend_from_slice(values);
    }
}

pub fn save_checkpoint(
    path: &Path,
    state: &SecoState,
    train: &TrainConfig,
    epoch: usize,
    config: &serde_json::Value,
) -> Result<()> {
    let mut w = Writer {
        tensors: Vec::new(),
        data: Vec::new(),
    };
    for p in state.online_params() {
        w.add(format!("online.{}", p.name), p.shape.clone(), &p.value);
    }
    for p in state.key_params() {
        w.add(format!("key.{}", p.name), p.shape.clone(), &p.value);
    }
    for (i, q) in state.queues.iter().enumerate() {
        w.add(format!("queue{i}"), vec![q.len(), q.dim()], &q.to_flat());
    }
    for (p, v) in state.online_params().iter().zip(&state.optimizer.velocity) {
        w.add(format!("sgd.{}", p.name), p.shape.clone(), v);
    }
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        learner: state.config.clone(),
        train: train.clone(),
        step: state.step,
        epoch,
        config: config.clone(),
        tensors: w.tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + header_bytes.len() + 8 * w.data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for v in &w.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).at(&tmp)?;
    f.write_all(&buf).at(&tmp)?;
    f.sync_all().at(&tmp)?;
    fs::rename(&tmp, path).at(path)?;
    Ok(())
}

/// Reads only the header of a checkpoint.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let mut f = fs::File::open(path).at(path)?;
    let mut prefix = [0u8; 20];
    f.read_exact(&mut prefix).at(path)?;
    let len = parse_prefix(&prefix)?;
    let mut header = vec![0u8; len];
    f.read_exact(&mut header).at(path)?;
    Ok(serde_json::from_slice(&header)?)
}

fn parse_prefix(prefix: &[u8]) -> Result<usize> {
    if prefix.len() < 20 || &prefix[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(prefix[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    Ok(u64::from_le_bytes(prefix[12..20].try_into().expect("8 bytes")) as usize)
}

pub fn load_checkpoint(path: &Path) -> Result<(SecoState, CheckpointHeader)> {
    let bytes = fs::read(path).at(path)?;
    let len = parse_prefix(&bytes)?;
    let body = 20 + len;
    if bytes.len() < body {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..body])?;
    let payload = &bytes[body..];
    if payload.len() % 8 != 0 {
        return Err(Error::Checkpoint("payload is not a whole number of f64 values".into()));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let tensor = |name: &str| -> Result<(&TensorEntry, &[f64])> {
        let entry = header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let values = data
            .get(entry.offset..entry.offset + entry.len)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} out of bounds")))?;
        Ok((entry, values))
    };
    let fill = |params: Vec<&mut Param>, prefix: &str| -> Result<()> {
        for p in params {
            let (entry, values) = tensor(&format!("{prefix}.{}", p.name))?;
            if entry.shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    entry.name, entry.shape, p.shape
                )));
            }
            p.value.copy_from_slice(values);
        }
        Ok(())
    };
    let mut state = SecoState::new(header.learner.clone(), &header.train, 0)?;
    fill(state.online_params_mut(), "online")?;
    fill(state.key_params_mut(), "key")?;
    for i in 0..3 {
        let (_, values) = tensor(&format!("queue{i}"))?;
        state.queues[i] = EmbeddingQueue::from_flat(header.learner.queue_size, header.learner.proj_dim, values)?;
    }
    let names: Vec<String> = state.online_params().iter().map(|p| p.name.clone()).collect();
    let mut velocity = Vec::new();
    for name in &names {
        match tensor(&format!("sgd.{name}")) {
            Ok((_, v)) => velocity.push(v.to_vec()),
            Err(_) => break,
        }
    }
    if !velocity.is_empty() && velocity.len() != names.len() {
        return Err(Error::Checkpoint("partial optimizer state".into()));
    }
    state.optimizer.velocity = velocity;
    state.step = header.step;
    Ok((state, header))
}
