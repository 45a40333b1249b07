//! Single-file checkpoints.
//!
//! Layout: the magic `GATEDCKP`, a little-endian `u32` format version, a
//! `u64` header length, a JSON header, the tensor payload as little-endian
//! `f32`, and a SHA-256 of everything before it.

use std::io::Write;
use std::path::Path;

use gated_tensor::optim::{Adam, AdamConfig};
use gated_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{ParamId, ParamKind, ParamStore};

/// Adam first and second moments as they are read back, possibly incomplete.
type MomentPair = (Option<Tensor<f32>>, Option<Tensor<f32>>);

pub const MAGIC: &[u8; 8] = b"GATEDCKP";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EntryKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: EntryKind,
    shape: Vec<usize>,
    /// Element offset into the payload.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    epoch: u64,
    step: u64,
    best_psnr: Option<f64>,
    adam: Option<AdamHeader>,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AdamHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    /// Moment slots are indexed like the model's parameters.
    pub optimizer: Option<Adam<f32>>,
    pub epoch: u64,
    pub step: u64,
    pub best_psnr: Option<f64>,
    /// Snapshot of the training configuration.
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: Model<f32>) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            epoch: 0,
            step: 0,
            best_psnr: None,
            config: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = &self.model.params;
        let mut items: Vec<(&str, EntryKind, &Tensor<f32>)> = params
            .iter()
            .map(|(_, p)| {
                let kind = match p.kind {
                    ParamKind::Trainable => EntryKind::Param,
                    ParamKind::Buffer => EntryKind::Buffer,
                };
                (p.name.as_str(), kind, &p.tensor)
            })
            .collect();
        if let Some(adam) = &self.optimizer {
            for (slot, m) in adam.moments.iter().enumerate().take(params.len()) {
                if let Some((m, v)) = m {
                    let name = params.get(ParamId(slot)).name.as_str();
                    items.push((name, EntryKind::AdamM, m));
                    items.push((name, EntryKind::AdamV, v));
                }
            }
        }
        let mut offset = 0;
        let tensors = items
            .iter()
            .map(|(name, kind, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    kind: *kind,
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                e
            })
            .collect();
        let header = Header {
            model: self.model.config().clone(),
            epoch: self.epoch,
            step: self.step,
            best_psnr: self.best_psnr,
            adam: self.optimizer.as_ref().map(|a| AdamHeader {
                beta1: a.config.beta1,
                beta2: a.config.beta2,
                eps: a.config.eps,
                step: a.step,
            }),
            config: self.config.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header).expect("plain data serialises");
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + offset * 4 + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, t) in &items {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::ChecksumMismatch("not a checkpoint file, or truncated".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < PREFIX_LEN + DIGEST_LEN {
            return Err(Error::ChecksumMismatch("file truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::ChecksumMismatch("content does not match its checksum".into()));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let corrupt = |msg: String| Error::ChecksumMismatch(msg);
        let header_end = PREFIX_LEN
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("header length exceeds file size".into()))?;
        let header: Header = serde_json::from_slice(&body[PREFIX_LEN..header_end])
            .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
        let payload = &body[header_end..];
        if payload.len() % 4 != 0 {
            return Err(corrupt("payload is not a whole number of f32 values".into()));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut model = Model::<f32>::new(&header.model, 0)?;
        let mut stored = ParamStore::<f32>::new();
        let mut moments: Vec<(String, EntryKind, Tensor<f32>)> = Vec::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| corrupt(format!("tensor {} lies outside the payload", e.name)))?
                .to_vec();
            let t = Tensor::from_vec(e.shape.clone(), data)?;
            match e.kind {
                EntryKind::Param => {
                    stored.insert(e.name.clone(), t, ParamKind::Trainable);
                }
                EntryKind::Buffer => {
                    stored.insert(e.name.clone(), t, ParamKind::Buffer);
                }
                kind => moments.push((e.name.clone(), kind, t)),
            }
        }
        model.params.load_from(&stored)?;

        let optimizer = match &header.adam {
            None => None,
            Some(h) => {
                let config = AdamConfig {
                    beta1: h.beta1,
                    beta2: h.beta2,
                    eps: h.eps,
                };
                let mut adam = Adam::new(config, model.params.len());
                adam.step = h.step;
                let mut pending: std::collections::HashMap<String, MomentPair> = Default::default();
                for (name, kind, t) in moments {
                    let slot = pending.entry(name).or_default();
                    match kind {
                        EntryKind::AdamM => slot.0 = Some(t),
                        _ => slot.1 = Some(t),
                    }
                }
                for (name, pair) in pending {
                    let id = model
                        .params
                        .id(&name)
                        .ok_or_else(|| Error::ArchitectureMismatch(vec![format!("optimizer state for unknown {name}")]))?;
                    match pair {
                        (Some(m), Some(v)) if m.shape() == model.params.tensor(id).shape() && v.shape() == m.shape() => {
                            adam.moments[id.0] = Some((m, v));
                        }
                        _ => return Err(Error::ArchitectureMismatch(vec![format!("optimizer state for {name}")])),
                    }
                }
                Some(adam)
            }
        };
        Ok(Checkpoint {
            model,
            optimizer,
            epoch: header.epoch,
            step: header.step,
            best_psnr: header.best_psnr,
            config: header.config,
        })
    }

    /// Write atomically: the file appears complete or not at all.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()
        };
        if let Err(e) = write() {
            let _ = std::fs::remove_file(&tmp);
            return Err(Error::io(path, e));
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copy the stored weights into `model`, which must have the same
    /// parameter names and shapes.
    pub fn restore_into(&self, model: &mut Model<f32>) -> Result<()> {
        model.params.load_from(&self.model.params)
    }
}
