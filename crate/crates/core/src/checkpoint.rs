//! Checkpoint container.
//!
//! ```text
//! MYOLO1
//! config <canonical JSON of ModelConfig>
//! anchors <JSON of AnchorSet>
//! meta <JSON of TrainingMeta>
//! tensors <count>
//! <name> <d0>x<d1>x... <byte offset>      (one line per tensor, name order)
//! payload <byte length>
//! <raw little-endian f64 values of every tensor, concatenated>
//! ```
//!
//! The header is plain text; the payload reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::AnchorSet;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState, Params};
use crate::tensor::Tensor;
use crate::train::EpochLoss;

pub const FORMAT_TAG: &str = "MYOLO1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_completed: usize,
    pub loss_curve: Vec<EpochLoss>,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub anchors: AnchorSet,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn new(state: ModelState, anchors: AnchorSet, epochs_completed: usize, loss_curve: Vec<EpochLoss>) -> Self {
        let config_hash = state.config.hash();
        Self {
            state,
            anchors,
            meta: TrainingMeta {
                epochs_completed,
                loss_curve,
                config_hash,
            },
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        header.push_str(FORMAT_TAG);
        header.push('\n');
        header.push_str(&format!("config {}\n", serde_json::to_string(&self.state.config)?));
        header.push_str(&format!("anchors {}\n", serde_json::to_string(&self.anchors)?));
        header.push_str(&format!("meta {}\n", serde_json::to_string(&self.meta)?));
        header.push_str(&format!("tensors {}\n", self.state.params.len()));
        let mut payload = Vec::new();
        for (name, t) in &self.state.params {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("{name} {} {}\n", dims.join("x"), payload.len()));
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        header.push_str(&format!("payload {}\n", payload.len()));
        let mut bytes = header.into_bytes();
        bytes.extend_from_slice(&payload);
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[cursor..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
            cursor += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))
        };
        let tag = next_line()?;
        if tag != FORMAT_TAG {
            return Err(Error::Checkpoint(if tag.starts_with("MYOLO") {
                format!("unsupported format version `{tag}`, expected `{FORMAT_TAG}`")
            } else {
                "not a checkpoint file".to_string()
            }));
        }
        let field = |line: &str, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|s| s.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| Error::Checkpoint(format!("expected `{key}` line")))
        };
        let config: ModelConfig = serde_json::from_str(&field(next_line()?, "config")?)?;
        let anchors: AnchorSet = serde_json::from_str(&field(next_line()?, "anchors")?)?;
        let meta: TrainingMeta = serde_json::from_str(&field(next_line()?, "meta")?)?;
        let count: usize = parse_num(&field(next_line()?, "tensors")?)?;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line()?.to_string();
            let parts: Vec<&str> = line.split(' ').collect();
            let [name, dims, offset] = parts[..] else {
                return Err(Error::Checkpoint(format!("malformed tensor entry `{line}`")));
            };
            let shape = dims.split('x').map(parse_num).collect::<Result<Vec<usize>>>()?;
            table.push((name.to_string(), shape, parse_num(offset)?));
        }
        let payload_len: usize = parse_num(&field(next_line()?, "payload")?)?;
        let payload = &bytes[cursor..];
        if payload.len() != payload_len {
            return Err(Error::Checkpoint(format!(
                "payload truncated: header declares {payload_len} bytes, file holds {}",
                payload.len()
            )));
        }
        let mut params = Params::new();
        for (name, shape, offset) in table {
            let n: usize = shape.iter().product();
            let end = offset
                .checked_add(n * 8)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} runs past the payload")))?;
            let data = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        anchors.validate()?;
        if anchors.per_pathway() != config.anchors_per_cell {
            return Err(Error::Checkpoint("anchor count disagrees with config".into()));
        }
        let state = ModelState { config, params };
        state.validate()?;
        if state.config.hash() != meta.config_hash {
            return Err(Error::Checkpoint(
                "config hash in metadata does not match config".into(),
            ));
        }
        Ok(Self { state, anchors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Load, rejecting checkpoints written for a different model config.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        let (want, got) = (expected.hash(), ckpt.state.config.hash());
        if want != got {
            return Err(Error::Checkpoint(format!(
                "checkpoint config hash {} does not match expected {}",
                &got[..12],
                &want[..12]
            )));
        }
        Ok(ckpt)
    }
}

fn parse_num(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Checkpoint(format!("expected a number, found `{s}`")))
}
