//! Checkpoint container: a little-endian `u64` header length, a JSON header
//! describing the model and its tensors, then the tensor data as
//! little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const FORMAT: &str = "egorl-ckpt-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes `params` with a model description `config`.
pub fn to_bytes<P: ParamSet, C: Serialize>(kind: &str, config: &C, params: &P) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut offset = 0;
    for (i, t) in params.tensors().iter().enumerate() {
        entries.push(TensorEntry {
            name: format!("t{i}"),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = Header {
        format: FORMAT.into(),
        kind: kind.into(),
        config: serde_json::to_value(config)?,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + offset * 8);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits a checkpoint into its header and flat payload.
pub fn parse_bytes(bytes: &[u8]) -> Result<(Header, Vec<f64>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("file too short"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..).ok_or_else(|| bad("file too short"))?;
    if hlen > body.len() {
        return Err(bad("header length exceeds file size"));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format '{}'", header.format)));
    }
    let payload = &body[hlen..];
    if payload.len() % 8 != 0 {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut expect = 0;
    for e in &header.tensors {
        if e.offset != expect {
            return Err(Error::Checkpoint(format!("tensor {} at unexpected offset", e.name)));
        }
        expect += e.shape.iter().product::<usize>();
    }
    if expect != data.len() {
        return Err(Error::Checkpoint(format!(
            "header describes {expect} values, payload has {}",
            data.len()
        )));
    }
    Ok((header, data))
}

/// Fills `skeleton` from a parsed checkpoint, checking every shape.
pub fn fill_params<P: ParamSet>(skeleton: &mut P, header: &Header, data: &[f64]) -> Result<()> {
    let mut targets = skeleton.tensors_mut();
    if targets.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            header.tensors.len(),
            targets.len()
        )));
    }
    for (t, e) in targets.iter_mut().zip(&header.tensors) {
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                e.name,
                e.shape,
                t.shape()
            )));
        }
        let n = t.len();
        t.data_mut().copy_from_slice(&data[e.offset..e.offset + n]);
    }
    Ok(())
}

pub fn save<P: ParamSet, C: Serialize>(path: &Path, kind: &str, config: &C, params: &P) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_bytes(kind, config, params)?)?;
    Ok(())
}

/// Reads a checkpoint of the given kind, building the parameter skeleton
/// from the stored config with `build`.
pub fn load<P, C, F>(path: &Path, kind: &str, build: F) -> Result<(C, P)>
where
    P: ParamSet,
    C: DeserializeOwned,
    F: FnOnce(&C) -> Result<P>,
{
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (header, data) = parse_bytes(&bytes)?;
    if header.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a '{}' checkpoint, expected '{kind}'",
            path.display(),
            header.kind
        )));
    }
    let config: C = serde_json::from_value(header.config.clone())
        .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
    let mut params = build(&config)?;
    fill_params(&mut params, &header, &data)?;
    if !params.all_finite() {
        return Err(Error::Checkpoint("checkpoint contains non-finite values".into()));
    }
    Ok((config, params))
}

/// A bare tensor list, handy for tests and tools.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorList(pub Vec<Tensor>);

impl ParamSet for TensorList {
    fn tensors(&self) -> Vec<&Tensor> {
        self.0.iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.0.iter_mut().collect()
    }
}
