//! Versioned binary checkpoints.
//!
//! Layout: `PMADCKPT`, u32 version, u32 header length, JSON header, payload
//! of little-endian f32 values in header order, u64 checksum of the payload
//! (first eight bytes of its SHA-256, little-endian). All integers are LE.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cls::{ClsModel, ClsNetConfig};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::nn::{ParamKind, ParamStore};
use crate::seg::{SegModel, SegNetConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PMADCKPT";
pub const VERSION: u32 = 1;

/// Training progress stored next to the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub epoch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Validation losses of the completed epochs (drives the plateau rule on resume).
    #[serde(default)]
    pub val_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config: serde_json::Value,
    pub state: TrainingState,
    pub params: Vec<ParamEntry>,
}

/// A decoded checkpoint; parameter values are the stored f32 values widened to f64.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    pub params: ParamStore,
}

/// Either network, rebuilt from a checkpoint header.
pub enum AnyModel {
    Seg(SegModel),
    Cls(ClsModel),
}

impl AnyModel {
    pub fn network(&self) -> &dyn Network {
        match self {
            AnyModel::Seg(m) => m,
            AnyModel::Cls(m) => m,
        }
    }
}

pub fn checksum(payload: &[u8]) -> u64 {
    let digest = Sha256::digest(payload);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Serializes `net` with `state`. Values are written as f32.
pub fn encode<N: Network + ?Sized>(net: &N, state: &TrainingState) -> Result<Vec<u8>> {
    let store = net.params();
    let config: serde_json::Value =
        serde_json::from_str(&net.config_json()).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let header = Header {
        kind: net.kind().to_string(),
        config,
        state: state.clone(),
        params: store
            .iter()
            .map(|(name, t, kind)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                kind,
                dtype: "f32".into(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut payload = Vec::new();
    for (_, t, _) in store.iter() {
        for &v in t.values() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(24 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&checksum(&payload).to_le_bytes());
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(corrupt(format!("truncated {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut rest = bytes;
    if take(&mut rest, 8, "magic")? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut rest, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = u32::from_le_bytes(take(&mut rest, 4, "header length")?.try_into().expect("4 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(take(&mut rest, header_len, "header")?).map_err(|e| corrupt(format!("header: {e}")))?;
    let count: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    let payload = take(&mut rest, 4 * count, "payload")?;
    let stored = u64::from_le_bytes(take(&mut rest, 8, "checksum")?.try_into().expect("8 bytes"));
    if !rest.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    if checksum(payload) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))));
    let mut params = ParamStore::new();
    for p in &header.params {
        if p.dtype != "f32" {
            return Err(corrupt(format!("unsupported dtype {}", p.dtype)));
        }
        let n = p.shape.iter().product();
        let t = Tensor::from_vec(&p.shape, values.by_ref().take(n).collect())?;
        params.insert(p.name.clone(), t, p.kind).map_err(|e| corrupt(e.to_string()))?;
    }
    Ok(Checkpoint { header, params })
}

pub fn save_checkpoint<N: Network + ?Sized>(net: &N, state: &TrainingState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(net, state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

/// Copies stored values into a freshly wired store, checking names and shapes.
fn fill(target: &mut ParamStore, source: ParamStore) -> Result<()> {
    if target.len() != source.len() {
        return Err(corrupt(format!(
            "checkpoint has {} tensors, architecture expects {}",
            source.len(),
            target.len()
        )));
    }
    for i in 0..target.len() {
        if target.name(i) != source.name(i) || target.tensor(i).shape() != source.tensor(i).shape() {
            return Err(corrupt(format!(
                "tensor {i}: checkpoint {} {:?} vs architecture {} {:?}",
                source.name(i),
                source.tensor(i).shape(),
                target.name(i),
                target.tensor(i).shape()
            )));
        }
    }
    *target = source;
    Ok(())
}

impl Checkpoint {
    pub fn into_model(self) -> Result<AnyModel> {
        let bad = |e: serde_json::Error| corrupt(format!("config: {e}"));
        match self.header.kind.as_str() {
            "pmad-linknet" => {
                let cfg: SegNetConfig = serde_json::from_value(self.header.config.clone()).map_err(bad)?;
                let mut m = SegModel::new(cfg, 0)?;
                fill(m.params_mut(), self.params)?;
                Ok(AnyModel::Seg(m))
            }
            "csfec-net" => {
                let cfg: ClsNetConfig = serde_json::from_value(self.header.config.clone()).map_err(bad)?;
                let mut m = ClsModel::new(cfg, 0)?;
                fill(m.params_mut(), self.params)?;
                Ok(AnyModel::Cls(m))
            }
            other => Err(corrupt(format!("unknown model kind {other}"))),
        }
    }

    pub fn into_seg(self) -> Result<(SegModel, TrainingState)> {
        let state = self.header.state.clone();
        match self.into_model()? {
            AnyModel::Seg(m) => Ok((m, state)),
            AnyModel::Cls(_) => Err(Error::InvalidConfig("checkpoint holds a classifier".into())),
        }
    }

    pub fn into_cls(self) -> Result<(ClsModel, TrainingState)> {
        let state = self.header.state.clone();
        match self.into_model()? {
            AnyModel::Cls(m) => Ok((m, state)),
            AnyModel::Seg(_) => Err(Error::InvalidConfig("checkpoint holds a segmentation model".into())),
        }
    }
}
