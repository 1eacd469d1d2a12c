//! Model checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `RBSTMODL` |
//! | 4     | format version (`u32`) |
//! | 8     | header length `h` (`u64`) |
//! | h     | JSON header: architecture, metadata, dtype, tensor shapes |
//! | p     | parameters, weight then bias of each parametric layer in order |
//! | 32    | SHA-256 of the parameter bytes |

use std::path::Path;

use robusta_core::model::{Architecture, LayerParams, ModelMeta};
use robusta_core::{Model, Real, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RBSTMODL";
pub const VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    meta: ModelMeta,
    dtype: String,
    /// `[weight shape, bias shape]` per parametric layer.
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    layer: usize,
    weight: Vec<usize>,
    bias: Vec<usize>,
}

/// Serializes a model into the checkpoint byte layout.
pub fn encode<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let tensors = model
        .params()
        .iter()
        .enumerate()
        .filter_map(|(layer, p)| {
            p.as_ref().map(|p| TensorEntry { layer, weight: p.weight.shape().to_vec(), bias: p.bias.shape().to_vec() })
        })
        .collect();
    let header = Header {
        architecture: model.architecture().clone(),
        meta: model.meta.clone(),
        dtype: T::DTYPE.to_string(),
        tensors,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Other(format!("header encoding: {e}")))?;
    let mut payload = Vec::with_capacity(model.parameter_count() * T::BYTES);
    for p in model.params().iter().flatten() {
        for &v in p.weight.data().iter().chain(p.bias.data()) {
            v.to_le_bytes_vec(&mut payload);
        }
    }
    let mut out = Vec::with_capacity(PREFIX + header.len() + payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    Ok(out)
}

fn read_elems<T: Real, S: Real>(bytes: &[u8]) -> Vec<T> {
    bytes.chunks_exact(S::BYTES).map(|c| T::cast_from(S::from_le_slice(c).as_f64())).collect()
}

/// Parses checkpoint bytes. A file stored in another precision is converted
/// to `T` on load.
pub fn decode<T: Real>(bytes: &[u8], path: &Path) -> Result<Model<T>> {
    if bytes.len() < PREFIX || &bytes[..8] != MAGIC {
        return Err(Error::format(path, 0, "not a model file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(path, 8, format!("unsupported format version {version}, expected {VERSION}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let hend = PREFIX
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(path, 12, format!("header length {hlen} runs past the end of the file")))?;
    let header: Header = serde_json::from_slice(&bytes[PREFIX..hend])
        .map_err(|e| Error::format(path, PREFIX as u64, format!("malformed header: {e}")))?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::format(path, PREFIX as u64, format!("unknown dtype `{other}`"))),
    };
    let count: usize =
        header.tensors.iter().map(|t| t.weight.iter().product::<usize>() + t.bias.iter().product::<usize>()).sum();
    let pend = hend + count * width;
    if bytes.len() != pend + 32 {
        return Err(Error::format(
            path,
            bytes.len().min(pend) as u64,
            format!("expected {} bytes for {count} parameters and the checksum, found {}", pend + 32, bytes.len()),
        ));
    }
    let payload = &bytes[hend..pend];
    if Sha256::digest(payload).as_slice() != &bytes[pend..] {
        return Err(Error::format(path, pend as u64, "parameter checksum mismatch"));
    }
    let values: Vec<T> = if width == 4 { read_elems::<T, f32>(payload) } else { read_elems::<T, f64>(payload) };
    let mut params: Vec<Option<LayerParams<T>>> = vec![None; header.architecture.layers.len()];
    let mut at = 0;
    for t in &header.tensors {
        let nw: usize = t.weight.iter().product();
        let nb: usize = t.bias.iter().product();
        let slot = params
            .get_mut(t.layer)
            .ok_or_else(|| Error::format(path, PREFIX as u64, format!("tensor entry for missing layer {}", t.layer)))?;
        *slot = Some(LayerParams {
            weight: Tensor::new(t.weight.clone(), values[at..at + nw].to_vec())?,
            bias: Tensor::new(t.bias.clone(), values[at + nw..at + nw + nb].to_vec())?,
        });
        at += nw + nb;
    }
    Ok(Model::from_params(header.architecture, params, header.meta)?)
}

pub fn save_model<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Hex SHA-256 of arbitrary bytes, used for configuration digests.
pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}
