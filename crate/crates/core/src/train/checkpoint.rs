//! On-disk checkpoint: a UTF-8 manifest, an `end` line, then one blob of
//! little-endian f32 values in manifest order.
//!
//! ```text
//! shappfn-checkpoint
//! version 1
//! step 2000
//! seed 0
//! param_count 25634
//! model {"layers":2,...}
//! shap {"num_subsets":4,...}
//! blob_sha256 9f86d0...
//! tensor base_decoder.b1 64 0 64
//! ...
//! end
//! <blob>
//! ```
//!
//! `tensor` lines are `name shape offset length`, with shape dims joined by
//! `x` and offsets/lengths counted in f32 elements.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{param_count, ModelConfig, Params};
use crate::ndcore::Tensor;
use crate::shaploss::ShapLossConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "shappfn-checkpoint";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: blob has {found} bytes, manifest needs {expected}")]
    Truncated { expected: usize, found: usize },
    #[error("parameter count mismatch: manifest says {declared}, tensors hold {actual}")]
    CountMismatch { declared: usize, actual: usize },
    #[error("checkpoint blob checksum mismatch")]
    Integrity,
    #[error("malformed checkpoint manifest: {0}")]
    Malformed(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Trained parameters plus the configuration needed to use them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub shap: ShapLossConfig,
    pub params: Params<f32>,
    pub step: usize,
    pub seed: u64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

impl Checkpoint {
    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blob = Vec::with_capacity(self.params.count() * 4);
        let mut tensors = String::new();
        let mut offset = 0;
        for (name, t) in self.params.iter() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(tensors, "tensor {name} {} {offset} {}", shape.join("x"), t.len());
            offset += t.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut m = String::new();
        let _ = writeln!(m, "{MAGIC}");
        let _ = writeln!(m, "version {CHECKPOINT_VERSION}");
        let _ = writeln!(m, "step {}", self.step);
        let _ = writeln!(m, "seed {}", self.seed);
        let _ = writeln!(m, "param_count {}", self.param_count());
        let _ = writeln!(m, "model {}", serde_json::to_string(&self.model).expect("config json"));
        let _ = writeln!(m, "shap {}", serde_json::to_string(&self.shap).expect("config json"));
        let _ = writeln!(m, "blob_sha256 {}", hex(&Sha256::digest(&blob)));
        m.push_str(&tensors);
        m.push_str("end\n");
        let mut out = m.into_bytes();
        out.extend(blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let bad = |s: &str| CheckpointError::Malformed(s.to_string());
        let end = bytes
            .windows(5)
            .position(|w| w == b"\nend\n")
            .ok_or_else(|| bad("no `end` line"))?;
        let manifest = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("manifest is not UTF-8"))?;
        let blob = &bytes[end + 5..];
        let mut lines = manifest.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("missing header line"));
        }
        let mut fields = BTreeMap::new();
        let mut specs = Vec::new();
        for line in lines {
            let (key, rest) = line.split_once(' ').ok_or_else(|| bad(line))?;
            if key == "tensor" {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 4 {
                    return Err(bad(line));
                }
                let shape = parts[1]
                    .split('x')
                    .map(str::parse)
                    .collect::<Result<Vec<usize>, _>>()
                    .map_err(|_| bad(line))?;
                let offset: usize = parts[2].parse().map_err(|_| bad(line))?;
                let len: usize = parts[3].parse().map_err(|_| bad(line))?;
                specs.push((parts[0].to_string(), shape, offset, len));
            } else {
                fields.insert(key.to_string(), rest.to_string());
            }
        }
        let field = |k: &str| fields.get(k).ok_or_else(|| bad(&format!("missing `{k}`")));
        let version: u32 = field("version")?.parse().map_err(|_| bad("version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let declared: usize = field("param_count")?.parse().map_err(|_| bad("param_count"))?;
        let total: usize = specs.iter().map(|s| s.3).sum();
        if blob.len() != total * 4 {
            return Err(CheckpointError::Truncated {
                expected: total * 4,
                found: blob.len(),
            });
        }
        if hex(&Sha256::digest(blob)) != *field("blob_sha256")? {
            return Err(CheckpointError::Integrity);
        }
        if declared != total {
            return Err(CheckpointError::CountMismatch {
                declared,
                actual: total,
            });
        }
        let model: ModelConfig = serde_json::from_str(field("model")?).map_err(|e| bad(&e.to_string()))?;
        let shap: ShapLossConfig = serde_json::from_str(field("shap")?).map_err(|e| bad(&e.to_string()))?;
        model.validate().map_err(|e| bad(&e.to_string()))?;
        if param_count(&model) != total {
            return Err(CheckpointError::CountMismatch {
                declared: param_count(&model),
                actual: total,
            });
        }
        let mut tensors = BTreeMap::new();
        for (name, shape, offset, len) in specs {
            if shape.iter().product::<usize>() != len || offset + len > total {
                return Err(bad(&format!("tensor `{name}` extent")));
            }
            let data = blob[offset * 4..(offset + len) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?);
        }
        let params = Params::from_tensors(&model, tensors).map_err(|e| bad(&e.to_string()))?;
        Ok(Self {
            model,
            shap,
            params,
            step: field("step")?.parse().map_err(|_| bad("step"))?,
            seed: field("seed")?.parse().map_err(|_| bad("seed"))?,
        })
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, c.to_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
