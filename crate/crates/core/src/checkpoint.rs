//! Single-file checkpoints: one line of compact JSON header, then the raw
//! little-endian payload of every tensor in name order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::segnet::{heads, UNetConfig};
use crate::tensor::Tensor;

pub const FORMAT: &str = "metaseg-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub unet: UNetConfig,
    /// Task id → number of classes.
    pub heads: BTreeMap<String, usize>,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub unet: UNetConfig,
    pub params: ParamSet<T>,
}

pub fn to_bytes<T: Scalar>(unet: &UNetConfig, params: &ParamSet<T>) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel() * T::BYTES;
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        dtype: T::DTYPE.into(),
        unet: *unet,
        heads: heads(params),
        tensors,
        payload_bytes: offset,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(offset);
    for (_, t) in params.iter() {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line"))?;
    let text = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not UTF-8"))?;
    let header: Header = serde_json::from_str(text).map_err(|e| bad(format!("invalid header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(format!("not a checkpoint (format {:?})", header.format)));
    }
    if header.version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {}", header.version)));
    }
    let payload = &bytes[nl + 1..];
    if payload.len() != header.payload_bytes {
        return Err(bad(format!(
            "payload is {} bytes, header says {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    Ok((header, payload))
}

fn decode<S: Scalar, T: Scalar>(header: &Header, payload: &[u8]) -> Result<ParamSet<T>> {
    let mut params = ParamSet::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * S::BYTES;
        let raw = payload
            .get(e.offset..end)
            .ok_or_else(|| bad(format!("tensor {} lies outside the payload", e.name)))?;
        let data = raw
            .chunks_exact(S::BYTES)
            .map(|c| T::from_f64_lossy(S::read_le(c).as_f64()))
            .collect();
        if params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?).is_some() {
            return Err(bad(format!("tensor {} listed twice", e.name)));
        }
    }
    if heads(&params) != header.heads {
        return Err(bad("head registry does not match the stored tensors"));
    }
    Ok(params)
}

/// Parses a checkpoint; values stored in the other precision are converted.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (header, payload) = read_header(bytes)?;
    header.unet.validate()?;
    let params = match header.dtype.as_str() {
        "f32" => decode::<f32, T>(&header, payload)?,
        "f64" => decode::<f64, T>(&header, payload)?,
        other => return Err(bad(format!("unknown dtype {other:?}"))),
    };
    Ok(Checkpoint {
        unet: header.unet,
        params,
    })
}

/// Writes via a temporary file and rename, so readers never see a partial file.
pub fn save<T: Scalar>(path: &Path, unet: &UNetConfig, params: &ParamSet<T>) -> Result<()> {
    let bytes = to_bytes(unet, params)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
