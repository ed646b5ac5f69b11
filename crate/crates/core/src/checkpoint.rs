//! Binary checkpoint format.
//!
//! ```text
//! magic    4 bytes   "ADVP"
//! version  u16 LE    currently 1
//! hlen     u32 LE    byte length of the JSON header
//! header   hlen      UTF-8 JSON: architecture, num_classes, alpha, tensor table
//! payload            every tensor as f64 LE, in tensor-table order
//! ```
//!
//! The tensor table lists the extractor tensors in
//! [`ArchitectureConfig::param_specs`] order followed by `prototypes` (`[M, d]`).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchitectureConfig, ModelParams, PrototypeBank, PROTOTYPES};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ADVP";
pub const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    architecture: ArchitectureConfig,
    num_classes: usize,
    alpha: f64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> Result<()> {
    let mut tensors: Vec<(&str, &Tensor)> = params.extractor().iter().map(|(n, t)| (n.as_str(), t)).collect();
    tensors.push((PROTOTYPES, params.bank().tensor()));
    let header = Header {
        architecture: params.arch().clone(),
        num_classes: params.num_classes(),
        alpha: params.bank().alpha(),
        tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut buf2 = [0u8; 2];
    read_exact(&mut r, &mut buf2, "version")?;
    let version = u16::from_le_bytes(buf2);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut buf4 = [0u8; 4];
    read_exact(&mut r, &mut buf4, "header length")?;
    let mut json = vec![0u8; u32::from_le_bytes(buf4) as usize];
    read_exact(&mut r, &mut json, "header")?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        read_exact(&mut r, &mut bytes, &entry.name)?;
        let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("tensor `{}` holds non-finite values", entry.name)));
        }
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    let (name, protos) = tensors.pop().ok_or_else(|| Error::Format("empty tensor table".into()))?;
    if name != PROTOTYPES || protos.shape().first() != Some(&header.num_classes) {
        return Err(Error::Format("last tensor must be the [M, d] prototype bank".into()));
    }
    let bank = PrototypeBank::new(protos, header.alpha)?;
    ModelParams::from_parts(header.architecture, tensors, bank)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated checkpoint while reading {what}")),
        _ => Error::Io(e),
    })
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(params, &mut bytes)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}
