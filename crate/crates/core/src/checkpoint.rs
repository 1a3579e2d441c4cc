//! Model checkpoints: named f64 tensors, a JSON config blob, and a dataset
//! fingerprint, in a CRC-protected binary container written atomically.
//!
//! Layout (little endian): magic `STCK` | u32 version=1 | u32 kind len +
//! bytes | u32 config len + JSON bytes | 64-byte data fingerprint | u32 entry
//! count | entries | u32 CRC32 of all preceding bytes. Each entry: u32 name
//! len + bytes | u8 trainable | u32 ndim | u64 dims | f64 data.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::nn::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"STCK";
const VERSION: u32 = 1;
const FINGERPRINT_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic; not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is for {got:?}, expected {want:?}")]
    KindMismatch { got: String, want: String },
    #[error("checksum mismatch")]
    Checksum,
    #[error("truncated checkpoint")]
    Truncated,
    #[error("fingerprint must be {FINGERPRINT_LEN} bytes, got {0}")]
    BadFingerprint(usize),
    #[error("config: {0}")]
    Config(#[from] serde_json::Error),
    #[error("parameter mismatch on load: {0}")]
    ParamMismatch(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// A serialized model: weights plus its config and data fingerprint.
pub struct Checkpoint {
    pub kind: String,
    pub config_json: String,
    pub data_fingerprint: String,
    pub entries: Vec<(String, bool, Tensor)>,
}

impl Checkpoint {
    pub fn from_store<C: serde::Serialize>(
        kind: &str,
        config: &C,
        data_fingerprint: &str,
        store: &ParamStore,
    ) -> Result<Self, CheckpointError> {
        if data_fingerprint.len() != FINGERPRINT_LEN {
            return Err(CheckpointError::BadFingerprint(data_fingerprint.len()));
        }
        Ok(Checkpoint {
            kind: kind.to_string(),
            config_json: serde_json::to_string(config)?,
            data_fingerprint: data_fingerprint.to_string(),
            entries: store
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.trainable, e.value.clone()))
                .collect(),
        })
    }

    pub fn config<C: serde::de::DeserializeOwned>(&self) -> Result<C, CheckpointError> {
        Ok(serde_json::from_str(&self.config_json)?)
    }

    /// Copy weights into a store whose entries must match by name and shape.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        if store.len() != self.entries.len() {
            return Err(CheckpointError::ParamMismatch(format!(
                "store has {} entries, checkpoint has {}",
                store.len(),
                self.entries.len()
            )));
        }
        for (slot, (name, _, value)) in store.entries_mut().iter_mut().zip(&self.entries) {
            if slot.name != *name {
                return Err(CheckpointError::ParamMismatch(format!(
                    "entry {:?} vs checkpoint {:?}",
                    slot.name, name
                )));
            }
            if slot.value.shape() != value.shape() {
                return Err(CheckpointError::ParamMismatch(format!(
                    "{}: shape {:?} vs checkpoint {:?}",
                    name,
                    slot.value.shape(),
                    value.shape()
                )));
            }
            slot.value = value.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        write_str(&mut buf, &self.kind);
        write_str(&mut buf, &self.config_json);
        buf.extend_from_slice(self.data_fingerprint.as_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, trainable, t) in &self.entries {
            write_str(&mut buf, name);
            buf.push(*trainable as u8);
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());

        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[0..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..bytes.len() - 4]);
        if stored != computed {
            return Err(CheckpointError::Checksum);
        }

        let mut off = 8usize;
        let kind = read_str(&bytes, &mut off)?;
        let config_json = read_str(&bytes, &mut off)?;
        if off + FINGERPRINT_LEN > bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let data_fingerprint =
            String::from_utf8_lossy(&bytes[off..off + FINGERPRINT_LEN]).into_owned();
        off += FINGERPRINT_LEN;
        let count = read_u32(&bytes, &mut off)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_str(&bytes, &mut off)?;
            if off >= bytes.len() {
                return Err(CheckpointError::Truncated);
            }
            let trainable = bytes[off] != 0;
            off += 1;
            let ndim = read_u32(&bytes, &mut off)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                if off + 8 > bytes.len() {
                    return Err(CheckpointError::Truncated);
                }
                shape.push(u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes")) as usize);
                off += 8;
            }
            let numel: usize = shape.iter().product();
            if off + numel * 8 > bytes.len() {
                return Err(CheckpointError::Truncated);
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes")));
                off += 8;
            }
            entries.push((name, trainable, Tensor::from_vec(&shape, data)));
        }
        Ok(Checkpoint { kind, config_json, data_fingerprint, entries })
    }

    pub fn expect_kind(&self, want: &str) -> Result<(), CheckpointError> {
        if self.kind != want {
            return Err(CheckpointError::KindMismatch {
                got: self.kind.clone(),
                want: want.to_string(),
            });
        }
        Ok(())
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn read_u32(bytes: &[u8], off: &mut usize) -> Result<u32, CheckpointError> {
    if *off + 4 > bytes.len() {
        return Err(CheckpointError::Truncated);
    }
    let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().expect("4 bytes"));
    *off += 4;
    Ok(v)
}

fn read_str(bytes: &[u8], off: &mut usize) -> Result<String, CheckpointError> {
    let len = read_u32(bytes, off)? as usize;
    if *off + len > bytes.len() {
        return Err(CheckpointError::Truncated);
    }
    let s = String::from_utf8_lossy(&bytes[*off..*off + len]).into_owned();
    *off += len;
    Ok(s)
}

/// SHA-256 hex fingerprint of a training pair list: per-pair tile ids,
/// positions, image shapes, and source flags. Detects dataset swaps without
/// hashing full pixel data.
pub fn dataset_fingerprint(pairs: &[crate::geodata::PairedCrop]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update((pairs.len() as u64).to_le_bytes());
    for p in pairs {
        h.update(p.satellite.tile_id.to_le_bytes());
        h.update(p.thermal.tile_id.to_le_bytes());
        h.update(p.satellite.position.0.to_le_bytes());
        h.update(p.satellite.position.1.to_le_bytes());
        h.update((p.satellite.image.height() as u64).to_le_bytes());
        h.update((p.satellite.image.width() as u64).to_le_bytes());
        h.update([matches!(p.source, crate::geodata::CropSource::Generated) as u8]);
        h.update(p.invalid_fraction.to_le_bytes());
    }
    crate::nn::params::hex_lower(&h.finalize())
}
