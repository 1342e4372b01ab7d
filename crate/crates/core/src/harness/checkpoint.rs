//! Binary named-tensor checkpoints.
//!
//! Layout: the 7-byte magic `ATVCKPT`, a little-endian `u32` format version,
//! a `u64` manifest length, the JSON manifest, the SHA-256 of the manifest,
//! then every tensor's `f64` values little-endian in manifest order. The
//! manifest carries the SHA-256 of the payload, so one verified digest covers
//! the whole file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"ATVCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
    pub payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(store.num_elements() * 8);
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        tensors.push(ManifestEntry {
            name: name.to_string(),
            dtype: "f64".into(),
            shape: t.shape().to_vec(),
            trainable: t.requires_grad,
        });
        for x in t.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        tensors,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(payload.len() + json.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&Sha256::digest(&json));
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ParamStore> {
    let fail = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let mut cursor = bytes;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(fail(format!("truncated while reading {what}")));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };
    if take(MAGIC.len(), "magic")? != MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fail(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(take(8, "manifest length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| fail("manifest length overflows".into()))?;
    let json = take(len, "manifest")?;
    let digest = take(32, "manifest digest")?;
    if Sha256::digest(json).as_slice() != digest {
        return Err(fail("manifest digest mismatch".into()));
    }
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| fail(format!("manifest: {e}")))?;
    let payload = cursor;
    if hex(&Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(fail("payload digest mismatch".into()));
    }
    let mut store = ParamStore::new();
    let mut offset = 0;
    for entry in manifest.tensors {
        if entry.dtype != "f64" {
            return Err(fail(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
        }
        let n: usize = entry.shape.iter().product();
        let end = offset + n * 8;
        if end > payload.len() {
            return Err(fail(format!("{}: payload too short", entry.name)));
        }
        let data = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset = end;
        let t = Tensor::new(entry.shape, data).map_err(|e| fail(format!("{}: {e}", entry.name)))?;
        store
            .insert(entry.name, t, entry.trainable)
            .map_err(|e| fail(e.to_string()))?;
    }
    if offset != payload.len() {
        return Err(fail(format!("{} trailing payload bytes", payload.len() - offset)));
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    fs::write(path, encode(store)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    decode(&bytes, path)
}
