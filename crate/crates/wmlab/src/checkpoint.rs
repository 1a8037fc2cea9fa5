//! Versioned checkpoint container.
//!
//! Layout (little-endian):
//! `"WMR1"` magic, `u32` format version, `u32` descriptor length, descriptor
//! bytes, `u64` parameter count, `f32` payload, 32-byte SHA-256 over
//! everything preceding the hash.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::nn::ClassifierNet;

const MAGIC: &[u8; 4] = b"WMR1";
const VERSION: u32 = 1;

/// Serialize an architecture descriptor + flat parameters.
pub fn save_raw(descriptor: &str, params: &[f32], path: &Path) -> Result<String> {
    let mut buf = Vec::with_capacity(16 + descriptor.len() + params.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    buf.extend_from_slice(descriptor.as_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let hash = Sha256::digest(&buf);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    f.write_all(&hash)?;
    Ok(hex::encode(hash))
}

/// Load a container, verifying magic, version and content hash.
pub fn load_raw(path: &Path) -> Result<(String, Vec<f32>)> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    if data.len() < 4 + 4 + 4 + 8 + 32 {
        return Err(Error::Corruption("file too short".into()));
    }
    let (body, stored_hash) = data.split_at(data.len() - 32);
    let actual = Sha256::digest(body);
    if actual.as_slice() != stored_hash {
        return Err(Error::Corruption("content hash mismatch".into()));
    }
    let mut off = 0usize;
    if &body[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    off += 4;
    let version = u32::from_le_bytes(body[off..off + 4].try_into().unwrap());
    off += 4;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let dlen = u32::from_le_bytes(body[off..off + 4].try_into().unwrap()) as usize;
    off += 4;
    if body.len() < off + dlen + 8 {
        return Err(Error::Corruption("truncated descriptor".into()));
    }
    let descriptor = String::from_utf8(body[off..off + dlen].to_vec())
        .map_err(|_| Error::Format("descriptor not utf-8".into()))?;
    off += dlen;
    let count = u64::from_le_bytes(body[off..off + 8].try_into().unwrap()) as usize;
    off += 8;
    if body.len() != off + count * 4 {
        return Err(Error::Corruption(format!(
            "payload length mismatch: expected {} floats",
            count
        )));
    }
    let mut params = Vec::with_capacity(count);
    for chunk in body[off..].chunks_exact(4) {
        params.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok((descriptor, params))
}

pub fn save_classifier(model: &ClassifierModel, path: &Path) -> Result<String> {
    save_raw(model.net.descriptor(), &model.net.params_flat(), path)
}

pub fn load_classifier(path: &Path) -> Result<ClassifierModel> {
    let (descriptor, params) = load_raw(path)?;
    let mut net = ClassifierNet::from_descriptor(&descriptor, 0)?;
    if params.len() != net.num_params() {
        return Err(Error::Corruption(format!(
            "parameter count {} does not match architecture ({})",
            params.len(),
            net.num_params()
        )));
    }
    net.set_params_flat(&params);
    Ok(ClassifierModel::new(net, "loaded".into()))
}
