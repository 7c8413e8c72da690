//! Versioned checkpoint files.
//!
//! Layout: 8-byte magic, format version (u32 LE), header length (u64 LE), a
//! JSON header with the full configuration, then a safetensors blob holding
//! the parameters (`param.<name>`) and optimizer moments (`adam_m.<name>`,
//! `adam_v.<name>`). Nothing time-dependent is stored, so saving a loaded
//! checkpoint reproduces the original bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Segmenter};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"DIFFSEG\0";
pub const FORMAT_VERSION: u32 = 1;
pub const EXTENSION: &str = "dsck";

const PARAM: &str = "param.";
const MOMENT1: &str = "adam_m.";
const MOMENT2: &str = "adam_v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Optimizer steps taken.
    pub step: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Fingerprint of the frozen backbone, when the model uses one.
    pub backbone_fingerprint: Option<String>,
    /// Most recent training losses, oldest first.
    pub recent_losses: Vec<f64>,
}

/// First and second moment estimates of the optimizer, keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut named: Vec<(String, &Tensor)> = Vec::new();
        for (prefix, map) in [
            (PARAM, &self.params),
            (MOMENT1, &self.optimizer.first),
            (MOMENT2, &self.optimizer.second),
        ] {
            named.extend(map.iter().map(|(k, v)| (format!("{prefix}{k}"), v)));
        }
        let blob = safetensors::serialize(named, None).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < len {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..len]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint("header and file versions disagree".into()));
        }
        let tensors = candle_core::safetensors::load_buffer(&body[len..], &Device::Cpu)
            .map_err(|e| Error::Checkpoint(format!("bad tensor blob: {e}")))?;
        let mut params = BTreeMap::new();
        let mut optimizer = OptimizerState::default();
        for (name, t) in tensors {
            if let Some(n) = name.strip_prefix(PARAM) {
                params.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(MOMENT1) {
                optimizer.first.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(MOMENT2) {
                optimizer.second.insert(n.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
            }
        }
        Ok(Self {
            header,
            params,
            optimizer,
        })
    }

    /// Writes through a temporary file so an interrupted save never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Rebuilds the model, checking that its backbone is the one trained with.
    pub fn segmenter(&self, dtype: DType) -> Result<Segmenter> {
        let model = Segmenter::new(self.header.model.clone(), self.header.train.seed, dtype)?;
        model.unet().params().load(&self.params)?;
        let fingerprint = model.backbone().map(|b| b.fingerprint());
        if fingerprint != self.header.backbone_fingerprint {
            return Err(Error::Checkpoint(
                "backbone weights differ from the ones the checkpoint was trained with".into(),
            ));
        }
        Ok(model)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:08}.{EXTENSION}"))
}

/// The checkpoint with the highest step in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(EXTENSION) {
            continue;
        }
        let step = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("step_"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}
