//! Checkpoint file: a UTF-8 manifest followed by a blob of little-endian f64.
//!
//! ```text
//! ltgbert-checkpoint 1
//! config layers 2
//! ...
//! meta step 300
//! tensor embedding.tokens 64,16 0
//! ...
//! end
//! <raw f64 data, in manifest order>
//! ```
//!
//! Tensor offsets count f64 elements from the start of the blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &str = "ltgbert-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Named tensors in file order (model parameters, then any optimizer
    /// state the caller appends).
    pub tensors: Vec<(String, Tensor)>,
    /// Free-form `key value` entries, e.g. the optimizer step.
    pub meta: Vec<(String, String)>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn check_token(kind: &str, s: &str) -> Result<(), ModelError> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace()) {
        return Err(bad(format!(
            "{kind} `{s}` must be non-empty and free of whitespace"
        )));
    }
    Ok(())
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let mut manifest = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
        for (key, value) in self.config.to_pairs() {
            manifest.push_str(&format!("config {key} {value}\n"));
        }
        for (key, value) in &self.meta {
            check_token("meta key", key)?;
            if value.contains('\n') {
                return Err(bad(format!("meta value for `{key}` contains a newline")));
            }
            manifest.push_str(&format!("meta {key} {value}\n"));
        }
        let mut offset = 0usize;
        for (name, tensor) in &self.tensors {
            check_token("tensor name", name)?;
            let shape: Vec<String> = tensor.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!("tensor {name} {} {offset}\n", shape.join(",")));
            offset += tensor.numel();
        }
        manifest.push_str("end\n");
        let mut bytes = manifest.into_bytes();
        bytes.reserve(offset * 8);
        for (_, tensor) in &self.tensors {
            for v in tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str, ModelError> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated manifest"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("manifest is not UTF-8"))
        };
        let header = next_line()?;
        let version = header
            .strip_prefix(CHECKPOINT_MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| bad("not a checkpoint file"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }

        let mut config = ModelConfig::default();
        let mut meta = Vec::new();
        let mut descriptors: Vec<(String, Vec<usize>, usize)> = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let mut parts = line.splitn(3, ' ');
            let kind = parts.next().unwrap_or_default();
            let key = parts
                .next()
                .ok_or_else(|| bad(format!("malformed line `{line}`")))?;
            let value = parts.next().unwrap_or_default();
            match kind {
                "config" => {
                    if !config.set(key, value)? {
                        return Err(bad(format!("unknown config key `{key}`")));
                    }
                }
                "meta" => meta.push((key.to_string(), value.to_string())),
                "tensor" => {
                    let (shape, offset) = value
                        .split_once(' ')
                        .ok_or_else(|| bad(format!("malformed tensor line `{line}`")))?;
                    let shape = shape
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("bad shape in `{line}`")))?;
                    let offset = offset
                        .parse()
                        .map_err(|_| bad(format!("bad offset in `{line}`")))?;
                    descriptors.push((key.to_string(), shape, offset));
                }
                other => return Err(bad(format!("unknown manifest entry `{other}`"))),
            }
        }

        let blob = &bytes[pos..];
        if blob.len() % 8 != 0 {
            return Err(bad("blob length is not a multiple of 8"));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut tensors = Vec::with_capacity(descriptors.len());
        let mut expected = 0;
        for (name, shape, offset) in descriptors {
            let n: usize = shape.iter().product();
            if offset != expected || offset + n > values.len() {
                return Err(bad(format!(
                    "tensor {name} has inconsistent offset {offset}"
                )));
            }
            tensors.push((
                name,
                Tensor::new(&shape, values[offset..offset + n].to_vec())?,
            ));
            expected += n;
        }
        if expected != values.len() {
            return Err(bad(format!(
                "blob holds {} values, manifest describes {expected}",
                values.len()
            )));
        }
        Ok(Self {
            config,
            tensors,
            meta,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut file = fs::File::create(&tmp)?;
            file.write_all(&bytes)?;
            file.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized file, as lowercase hex.
    pub fn digest(&self) -> Result<String, ModelError> {
        Ok(hex_digest(&self.to_bytes()?))
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
