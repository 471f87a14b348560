//! `SWD1` checkpoint files.
//!
//! ```text
//! magic        4 bytes  "SWD1"
//! meta_len     u32 BE
//! meta         meta_len bytes of UTF-8 JSON (format version, architecture,
//!              training metadata, tensor count)
//! tensors      repeated tensor_count times:
//!   name_len   u32 BE
//!   name       UTF-8
//!   rank       u8
//!   dims       rank × u32 BE
//!   payload    product(dims) × f32 LE
//! ```

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ArchKind, ArchSpec, Network, ParamSet};
use crate::training::LossWeights;

pub const MAGIC: &[u8; 4] = b"SWD1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {found:?}, expected \"SWD1\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint format version {found} (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: String },
    #[error("invalid checkpoint metadata: {0}")]
    Metadata(String),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor #{index}: expected {expected}, found {found}")]
    UnexpectedTensor {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("{0} unexpected bytes after the last tensor")]
    TrailingBytes(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub kind: ArchKind,
    pub latent_dim: usize,
}

/// How a checkpointed network was trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    /// `None` for the independent pair, whose members each train on one loss.
    pub loss_weights: Option<LossWeights>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Reconstruction-RMSE cutoff (0–255 scale) computed on the training set
    /// after training.
    pub watchdog_threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub architecture: ArchDescriptor,
    pub training: TrainingMeta,
    pub tensor_count: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network,
    pub training: TrainingMeta,
}

impl Checkpoint {
    pub fn new(network: Network, training: TrainingMeta) -> Self {
        Self { network, training }
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            architecture: ArchDescriptor {
                kind: self.network.kind(),
                latent_dim: self.network.spec().latent_dim,
            },
            training: self.training.clone(),
            tensor_count: self.network.params().len(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta()).expect("metadata serializes");
        let mut out = Vec::with_capacity(8 + meta.len() + 4 * self.network.param_count() + 1024);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_be_bytes());
        out.extend_from_slice(&meta);
        for (name, tensor) in self.network.params() {
            out.extend_from_slice(&(name.len() as u32).to_be_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(tensor.rank() as u8);
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_be_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic {
                found: magic.to_vec(),
            });
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_bytes = r.take(meta_len, "metadata")?;
        let version = serde_json::from_slice::<serde_json::Value>(meta_bytes)
            .map_err(|e| CheckpointError::Metadata(e.to_string()))?
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CheckpointError::Metadata("missing format_version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(CheckpointError::VersionMismatch {
                found: version as u32,
                supported: FORMAT_VERSION,
            });
        }
        let meta: CheckpointMeta =
            serde_json::from_slice(meta_bytes).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        if meta.architecture.latent_dim == 0 {
            return Err(CheckpointError::Metadata("latent_dim must be positive".into()));
        }

        let spec = ArchSpec {
            latent_dim: meta.architecture.latent_dim,
        };
        let mut network = Network::build(meta.architecture.kind, spec, 0);
        let expected_count = network.params().len();
        if meta.tensor_count != expected_count {
            return Err(CheckpointError::Metadata(format!(
                "tensor_count {} does not match the {} tensors of a {} network",
                meta.tensor_count, expected_count, meta.architecture.kind
            )));
        }

        for (index, (expected_name, tensor)) in network.params_mut().into_iter().enumerate() {
            let name_len = r.u32(&format!("name length of tensor #{index}"))? as usize;
            let name = r.take(name_len, &format!("name of tensor #{index}"))?;
            let name = String::from_utf8_lossy(name).into_owned();
            if name != expected_name {
                return Err(CheckpointError::UnexpectedTensor {
                    index,
                    expected: expected_name,
                    found: name,
                });
            }
            let rank = r.take(1, &format!("rank of {name}"))?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32(&format!("dims of {name}"))? as usize);
            }
            if dims != tensor.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: tensor.shape().to_vec(),
                    found: dims,
                });
            }
            let payload = r.take(4 * tensor.len(), &format!("payload of {name}"))?;
            for (dst, chunk) in tensor.data_mut().iter_mut().zip(payload.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self {
            network,
            training: meta.training,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated { what: what.to_string() });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }
}
