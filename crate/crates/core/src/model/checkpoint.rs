//! Checkpoint container: 8-byte magic "CVIGCKPT", 4-byte version, 8-byte
//! manifest length, UTF-8 TOML manifest, then a payload of little-endian
//! raw tensor values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::{init_weights, ModelParams};
use crate::numeric::Tensor;
use crate::scalar::{Dtype, Scalar};

pub const MAGIC: &[u8; 8] = b"CVIGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    /// Free-form metadata; the model writer stores its config TOML here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<String>,
    #[serde(default, rename = "tensor")]
    tensors: Vec<ManifestEntry>,
}

/// In-memory checkpoint: ordered named tensors over a raw byte payload.
#[derive(Debug, Default)]
pub struct Checkpoint {
    pub meta: Option<String>,
    pub entries: Vec<ManifestEntry>,
    pub payload: Vec<u8>,
}

impl Checkpoint {
    pub fn new(meta: Option<String>) -> Self {
        Checkpoint {
            meta,
            entries: Vec::new(),
            payload: Vec::new(),
        }
    }

    pub fn push_tensor<F: Scalar>(&mut self, name: &str, t: &Tensor<F>) {
        self.entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: F::DTYPE.name().to_string(),
            offset: self.payload.len() as u64,
        });
        for &v in t.data() {
            self.payload.extend(v.to_le_bytes_vec());
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn entry(&self, name: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_tensor<F: Scalar>(&self, name: &str) -> Result<Tensor<F>> {
        let e = self
            .entry(name)
            .ok_or_else(|| Error::CorruptManifest(format!("missing tensor '{}'", name)))?;
        let dtype = Dtype::parse(&e.dtype)
            .ok_or_else(|| Error::CorruptManifest(format!("unknown dtype '{}'", e.dtype)))?;
        if dtype != F::DTYPE {
            return Err(Error::CorruptManifest(format!(
                "tensor '{}' stored as {}, requested {}",
                name,
                e.dtype,
                F::DTYPE.name()
            )));
        }
        let n: usize = e.shape.iter().product();
        let lo = e.offset as usize;
        let hi = lo + n * dtype.size_bytes();
        if hi > self.payload.len() {
            return Err(Error::TruncatedPayload {
                expected: hi,
                actual: self.payload.len(),
            });
        }
        let data = self.payload[lo..hi]
            .chunks_exact(dtype.size_bytes())
            .map(F::from_le_bytes_slice)
            .collect();
        Tensor::new(e.shape.clone(), data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            meta: self.meta.clone(),
            tensors: self.entries.clone(),
        };
        let text = toml::to_string(&manifest)
            .map_err(|e| Error::InvalidArg(format!("manifest encode: {}", e)))?;
        let mut out = Vec::with_capacity(20 + text.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 20 {
            return Err(Error::CorruptManifest("file shorter than header".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::CorruptManifest("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::CorruptManifest(format!("unsupported version {}", version)));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if 20 + mlen > bytes.len() {
            return Err(Error::CorruptManifest("manifest extends past file end".into()));
        }
        let text = std::str::from_utf8(&bytes[20..20 + mlen])
            .map_err(|e| Error::CorruptManifest(format!("manifest not UTF-8: {}", e)))?;
        let manifest: Manifest =
            toml::from_str(text).map_err(|e| Error::CorruptManifest(e.to_string()))?;
        let payload = bytes[20 + mlen..].to_vec();
        let ck = Checkpoint {
            meta: manifest.meta,
            entries: manifest.tensors,
            payload,
        };
        // validate extents up front so truncation is reported on load
        for e in &ck.entries {
            let dtype = Dtype::parse(&e.dtype)
                .ok_or_else(|| Error::CorruptManifest(format!("unknown dtype '{}'", e.dtype)))?;
            let n: usize = e.shape.iter().product();
            let end = e.offset as usize + n * dtype.size_bytes();
            if end > ck.payload.len() {
                return Err(Error::TruncatedPayload {
                    expected: end,
                    actual: ck.payload.len(),
                });
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

/// Serialize all model weights plus BN running state, with the config TOML
/// as manifest metadata.
pub fn model_to_checkpoint<F: Scalar>(params: &ModelParams<F>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(Some(params.config.to_toml_string()?));
    params.for_each(&mut |name, t| ck.push_tensor(&name, t));
    params.for_each_state(&mut |name, t| ck.push_tensor(&name, &t));
    Ok(ck)
}

/// Rebuild a model from a checkpoint, validating every tensor shape against
/// the config carried in the manifest.
pub fn model_from_checkpoint<F: Scalar>(ck: &Checkpoint) -> Result<ModelParams<F>> {
    let meta = ck
        .meta
        .as_deref()
        .ok_or_else(|| Error::CorruptManifest("checkpoint carries no model config".into()))?;
    let config = ModelConfig::from_toml_str(meta)?;
    let mut params: ModelParams<F> = init_weights(&config, 0)?;
    let mut err = None;
    params.for_each_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match ck.get_tensor::<F>(&name) {
            Ok(loaded) if loaded.shape() == t.shape() => *t = loaded,
            Ok(loaded) => {
                err = Some(Error::CheckpointShapeMismatch {
                    name,
                    expected: t.shape().to_vec(),
                    actual: loaded.shape().to_vec(),
                })
            }
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    for (i, cb) in params.stem.convs.iter_mut().enumerate() {
        let mean: Tensor<F> = ck.get_tensor(&format!("stem.conv{i}.running_mean"))?;
        let var: Tensor<F> = ck.get_tensor(&format!("stem.conv{i}.running_var"))?;
        if mean.len() != cb.stats.mean.len() || var.len() != cb.stats.var.len() {
            return Err(Error::CheckpointShapeMismatch {
                name: format!("stem.conv{i}.running_mean"),
                expected: vec![cb.stats.mean.len()],
                actual: mean.shape().to_vec(),
            });
        }
        cb.stats.mean = mean.into_data();
        cb.stats.var = var.into_data();
    }
    Ok(params)
}

pub fn save_model<F: Scalar>(path: impl AsRef<Path>, params: &ModelParams<F>) -> Result<()> {
    model_to_checkpoint(params)?.save(path)
}

pub fn load_model<F: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<F>> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}
