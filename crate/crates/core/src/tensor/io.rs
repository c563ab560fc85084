//! Tensor file format: raw little-endian `f32` values, row-major, plus a JSON
//! sidecar `{"shape": [rows, cols]}` next to it (`foo.bin` -> `foo.json`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: [usize; 2],
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Raw payload and sidecar text for `m`.
pub fn encode_tensor(m: &Matrix) -> (Vec<u8>, String) {
    let mut bytes = Vec::with_capacity(m.data().len() * 4);
    for v in m.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let header = TensorHeader {
        shape: [m.rows(), m.cols()],
    };
    // serializing a two-field struct cannot fail
    let json = serde_json::to_string(&header).expect("tensor header serializes");
    (bytes, json)
}

pub fn decode_tensor(bytes: &[u8], sidecar_json: &str) -> Result<Matrix> {
    let header: TensorHeader = serde_json::from_str(sidecar_json)?;
    let [rows, cols] = header.shape;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format("tensor shape overflows"))?;
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "tensor payload is {} bytes, shape {rows}x{cols} needs {expected}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Matrix::new(rows, cols, data)
}

pub fn write_tensor(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let (bytes, json) = encode_tensor(m);
    fs::write(path, bytes)?;
    fs::write(sidecar(path), json)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let json = fs::read_to_string(sidecar(path))?;
    decode_tensor(&bytes, &json)
}
