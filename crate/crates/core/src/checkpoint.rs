//! Model checkpoints.
//!
//! Two files per checkpoint: `<stem>.bin` holds the parameters as a flat list
//! of named `f64` arrays, `<stem>.json` the architecture and seed needed to
//! rebuild the networks. The binary layout, all integers `u32` little-endian:
//!
//! ```text
//! b"GPDA" version count
//! count × ( name_len name_bytes rows cols rows·cols × f64 )
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::models::{Architecture, GpdaNets, Parameters};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"GPDA";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub architecture: Architecture,
    pub seed: u64,
    pub params: Vec<String>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Parameter blob for `nets`.
pub fn encode<T: Scalar>(nets: &GpdaNets<T>) -> Vec<u8> {
    let named = nets.named_params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, m) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format {
                kind: "checkpoint",
                offset: self.pos,
                detail: format!("truncated: wanted {n} more bytes"),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn fail(&self, detail: String) -> Error {
        Error::Format {
            kind: "checkpoint",
            offset: self.pos,
            detail,
        }
    }
}

/// Named arrays from a parameter blob, in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Matrix<f64>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format {
            kind: "checkpoint",
            offset: 0,
            detail: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| r.fail(format!("name is not UTF-8: {e}")))?;
        let (rows, cols) = (r.u32()?, r.u32()?);
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| r.fail(format!("{name}: shape {rows}×{cols} overflows")))?;
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        out.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Rebuilds networks from a manifest and decoded arrays. Names and shapes
/// must match the manifest's architecture exactly.
pub fn restore<T: Scalar>(manifest: &Manifest, arrays: Vec<(String, Matrix<f64>)>) -> Result<GpdaNets<T>> {
    let mut nets = GpdaNets::<T>::init(manifest.architecture.clone(), manifest.seed)?;
    let expected: Vec<(String, (usize, usize))> =
        nets.named_params().into_iter().map(|(n, m)| (n, m.shape())).collect();
    if arrays.len() != expected.len() {
        return Err(Error::contract(format!(
            "checkpoint has {} arrays, architecture needs {}",
            arrays.len(),
            expected.len()
        )));
    }
    for ((slot, (name, shape)), (got_name, m)) in nets.params_mut().into_iter().zip(&expected).zip(arrays) {
        if &got_name != name || m.shape() != *shape {
            return Err(Error::contract(format!(
                "checkpoint array {got_name} {:?} does not match {name} {shape:?}",
                m.shape()
            )));
        }
        *slot = m.cast();
    }
    Ok(nets)
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn save<T: Scalar>(nets: &GpdaNets<T>, stem: &Path) -> Result<()> {
    let (bin, json) = paths(stem);
    let manifest = Manifest {
        architecture: nets.architecture.clone(),
        seed: nets.seed,
        params: nets.named_params().into_iter().map(|(n, _)| n).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::contract(format!("manifest: {e}")))?;
    fs::write(&bin, encode(nets)).map_err(|e| Error::io(&bin, e))?;
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

pub fn load<T: Scalar>(stem: &Path) -> Result<GpdaNets<T>> {
    let (bin, json) = paths(stem);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        kind: "checkpoint manifest",
        offset: 0,
        detail: e.to_string(),
    })?;
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    restore(&manifest, decode(&bytes)?)
}
