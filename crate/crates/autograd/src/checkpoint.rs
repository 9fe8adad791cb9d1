//! Binary weight file.
//!
//! Layout: the 8-byte magic `MVDETRW1`, a little-endian `u64` header length,
//! a UTF-8 JSON header `{name: {shape, offset}}`, then the raw little-endian
//! `f32` blobs. Offsets are in bytes from the start of the blob section.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CheckpointError;
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MVDETRW1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryHeader {
    pub shape: Vec<usize>,
    pub offset: u64,
}

/// Serializes every parameter and buffer of the store. Entries are written in
/// store order; the header map is sorted by name.
pub fn to_bytes(store: &ParamStore<f32>) -> Vec<u8> {
    let mut header = BTreeMap::new();
    let mut blob = Vec::with_capacity(store.num_scalars() * 4);
    for (_, p) in store.iter() {
        header.insert(
            p.name.clone(),
            EntryHeader {
                shape: p.value.shape().to_vec(),
                offset: blob.len() as u64,
            },
        );
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

pub fn save(store: &ParamStore<f32>, path: &Path) -> Result<(), CheckpointError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(store))?;
    Ok(())
}

/// Parses a checkpoint into `(name, tensor)` pairs sorted by name.
pub fn parse(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let hend = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::Header("header length past end of file".into()))?;
    let header: BTreeMap<String, EntryHeader> =
        serde_json::from_slice(&bytes[16..hend]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let blob = &bytes[hend..];
    let mut out = Vec::with_capacity(header.len());
    for (name, e) in header {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * 4;
        if end > blob.len() {
            return Err(CheckpointError::Header(format!("{name}: blob out of range")));
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&e.shape, data).map_err(|err| CheckpointError::Header(format!("{name}: {err}")))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Copies checkpoint values into `store`. Without `partial`, the name sets
/// must match exactly; with it, absent names keep their current values and
/// unknown names are ignored. Shapes must always agree.
pub fn load_into(store: &mut ParamStore<f32>, bytes: &[u8], partial: bool) -> Result<usize, CheckpointError> {
    let entries = parse(bytes)?;
    let mut seen = vec![false; store.len()];
    let mut extra = Vec::new();
    let mut staged = Vec::new();
    for (name, t) in entries {
        match store.id(&name) {
            Some(id) => {
                let expected = store.value(id).shape();
                if expected != t.shape() {
                    return Err(CheckpointError::ShapeMismatch {
                        name,
                        expected: expected.to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
                seen[id.0] = true;
                staged.push((id, t));
            }
            None => extra.push(name),
        }
    }
    if !partial {
        let missing: Vec<String> = store
            .iter()
            .filter(|(id, _)| !seen[id.0])
            .map(|(_, p)| p.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(CheckpointError::Missing(missing));
        }
        if !extra.is_empty() {
            return Err(CheckpointError::Extra(extra));
        }
    }
    let loaded = staged.len();
    for (id, t) in staged {
        store.get_mut(id).value = t;
    }
    Ok(loaded)
}

pub fn load(store: &mut ParamStore<f32>, path: &Path, partial: bool) -> Result<usize, CheckpointError> {
    let bytes = fs::read(path)?;
    load_into(store, &bytes, partial)
}
