//! Versioned flat binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "RTNCKPT\0" | u32 version | u32 tensor count | u64 step
//! u32 config length | config text (run-config format)
//! per tensor: u32 name length | name | u32 rank | u64 dims[rank] | f64 values
//! ```

use crate::config::{self, ConfigError, RunConfig};
use crate::train::Model;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"RTNCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint parse error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint does not fit the model: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: RunConfig,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &RunConfig, step: u64) -> Self {
        let tensors = model
            .params()
            .into_iter()
            .map(|(name, t)| NamedTensor { name, shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect();
        Self { step, config: config.clone(), tensors }
    }

    /// Rebuilds the model; names and shapes must match the architecture
    /// implied by the stored recurrence config.
    pub fn to_model(&self) -> Result<Model, CheckpointError> {
        let template = Model::new(self.config.train.recurrence.clone(), 0);
        let expected = template.params();
        if expected.len() != self.tensors.len() {
            return Err(CheckpointError::Mismatch(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, t), stored) in expected.iter().zip(&self.tensors) {
            if *name != stored.name || t.shape() != stored.shape.as_slice() {
                return Err(CheckpointError::Mismatch(format!(
                    "expected {name} {:?}, found {} {:?}",
                    t.shape(),
                    stored.name,
                    stored.shape
                )));
            }
        }
        template
            .with_param_values(self.tensors.iter().map(|t| t.data.clone()).collect())
            .map_err(|e| CheckpointError::Mismatch(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = config::serialize(&self.config);
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((self.tensors.len() as u32).to_le_bytes());
        out.extend(self.step.to_le_bytes());
        out.extend((cfg.len() as u32).to_le_bytes());
        out.extend(cfg.as_bytes());
        for t in &self.tensors {
            out.extend((t.name.len() as u32).to_le_bytes());
            out.extend(t.name.as_bytes());
            out.extend((t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend((d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::Format { offset: 0, reason: "bad magic".into() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Format {
                offset: 8,
                reason: format!("unsupported version {version}"),
            });
        }
        let count = r.u32()? as usize;
        let step = r.u64()?;
        let cfg_len = r.u32()? as usize;
        let at = r.pos;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| CheckpointError::Format { offset: at, reason: "config is not UTF-8".into() })?;
        let config = config::parse(cfg_text)?;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| CheckpointError::Format { offset: at, reason: "name is not UTF-8".into() })?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
                CheckpointError::Format { offset: r.pos, reason: format!("shape {shape:?} overflows") }
            })?;
            let raw = r.take(n.saturating_mul(8))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format { offset: r.pos, reason: "trailing bytes".into() });
        }
        Ok(Self { step, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path)
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Format {
                offset: self.pos,
                reason: format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            }
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
}
