//! Checkpoint container: a JSON manifest followed by raw little-endian f32
//! tensor payloads in manifest order. Adapter checkpoints carry only the
//! A/B tensors plus the content hash of the base file they extend.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::schedule::ScheduleParams;

use super::{init_denoiser, Denoiser, DenoiserConfig, LoraConfig};

const MAGIC: &[u8; 4] = b"CTXL";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Base,
    Adapter,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config: DenoiserConfig,
    pub lora_config: Option<LoraConfig>,
    pub step: u64,
    pub schedule: Option<ScheduleParams>,
    /// For adapters: sha256 of the base checkpoint file.
    pub base_hash: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

/// Hex sha256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_container(path: &Path, manifest: &Manifest, tensors: &[&ArrayD<f32>]) -> Result<()> {
    let json = serde_json::to_vec(manifest)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes())?;
    file.write_all(&(json.len() as u64).to_le_bytes())?;
    file.write_all(&json)?;
    for tensor in tensors {
        for v in tensor.iter() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_container(path: &Path) -> Result<(Manifest, Vec<ArrayD<f32>>)> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let json_len = u64::from_le_bytes(len_bytes) as usize;
    let mut json = vec![0u8; json_len];
    file.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        file.read_exact(&mut buf)?;
        let values: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(
            ArrayD::from_shape_vec(entry.shape.clone(), values)
                .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", entry.name)))?,
        );
    }
    Ok((manifest, tensors))
}

impl Denoiser<f32> {
    /// Writes every active tensor plus the manifest. Records the attached
    /// adapter config when one is present.
    pub fn save(&self, path: &Path, step: u64, schedule: Option<ScheduleParams>) -> Result<()> {
        let mut entries = Vec::new();
        let mut tensors = Vec::new();
        for (_, p) in self.store().iter() {
            entries.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            });
            tensors.push(&p.value);
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::Base,
            config: self.config.clone(),
            lora_config: self.lora_config().cloned(),
            step,
            schedule,
            base_hash: None,
            tensors: entries,
        };
        write_container(path, &manifest, &tensors)
    }

    /// Reconstructs a denoiser from a base checkpoint.
    pub fn load(path: &Path) -> Result<(Denoiser<f32>, Manifest)> {
        let (manifest, tensors) = read_container(path)?;
        if manifest.kind != CheckpointKind::Base {
            return Err(Error::Checkpoint(
                "adapter checkpoint given where a base checkpoint was expected".into(),
            ));
        }
        let mut den: Denoiser<f32> = init_denoiser(&manifest.config, 0)?;
        if let Some(lcfg) = &manifest.lora_config {
            den.attach_lora(lcfg, 0)?;
        }
        for (entry, tensor) in manifest.tensors.iter().zip(tensors) {
            let id = den.store().find(&entry.name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint tensor {} has no slot", entry.name))
            })?;
            if den.store().get(id).shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} shape {:?} vs expected {:?}",
                    entry.name,
                    tensor.shape(),
                    den.store().get(id).shape()
                )));
            }
            *den.store_mut().get_mut(id) = tensor;
        }
        Ok((den, manifest))
    }

    /// Writes only the adapter tensors, bound to the base by content hash.
    pub fn save_adapter(&self, path: &Path, base_hash: &str, step: u64) -> Result<()> {
        let lcfg = self
            .lora_config()
            .ok_or_else(|| Error::Checkpoint("no adapters attached".into()))?
            .clone();
        let mut entries = Vec::new();
        let mut tensors = Vec::new();
        for (_, p) in self.store().iter() {
            if p.name.ends_with(".lora_a") || p.name.ends_with(".lora_b") {
                entries.push(TensorEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                });
                tensors.push(&p.value);
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::Adapter,
            config: self.config.clone(),
            lora_config: Some(lcfg),
            step,
            schedule: None,
            base_hash: Some(base_hash.to_string()),
            tensors: entries,
        };
        write_container(path, &manifest, &tensors)
    }

    /// Attaches and fills adapters from an adapter checkpoint. The recorded
    /// base hash must match `base_hash`; pass the sha256 of the base file
    /// the denoiser was loaded from.
    pub fn load_adapter(&mut self, path: &Path, base_hash: &str) -> Result<Manifest> {
        let (manifest, tensors) = read_container(path)?;
        if manifest.kind != CheckpointKind::Adapter {
            return Err(Error::Checkpoint("not an adapter checkpoint".into()));
        }
        let recorded = manifest
            .base_hash
            .as_deref()
            .ok_or_else(|| Error::Checkpoint("adapter lacks a base hash".into()))?;
        if recorded != base_hash {
            return Err(Error::Checkpoint(format!(
                "adapter was trained against base {recorded}, got {base_hash}"
            )));
        }
        let lcfg = manifest
            .lora_config
            .clone()
            .ok_or_else(|| Error::Checkpoint("adapter lacks a lora config".into()))?;
        self.attach_lora(&lcfg, 0)?;
        for (entry, tensor) in manifest.tensors.iter().zip(tensors) {
            let id = self.store().find(&entry.name).ok_or_else(|| {
                Error::Checkpoint(format!("adapter tensor {} has no slot", entry.name))
            })?;
            *self.store_mut().get_mut(id) = tensor;
        }
        Ok(manifest)
    }
}
