//! Tensor files: raw little-endian payload (`<stem>.bin`) plus a JSON sidecar
//! (`<stem>.json`) holding `{shape, dtype}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::element::{DType, Element};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    pub dtype: DType,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".bin"), with(".json"))
}

pub fn encode<E: Element>(tensor: &Tensor<E>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(tensor.numel() * E::DTYPE.size());
    for &v in tensor.data() {
        v.write_le(&mut bytes);
    }
    bytes
}

/// Decodes a payload, converting from the stored precision to `E`.
pub fn decode<E: Element>(header: &TensorHeader, bytes: &[u8]) -> Result<Tensor<E>> {
    let n: usize = header.shape.iter().product();
    if bytes.len() != n * header.dtype.size() {
        return Err(Error::Numeric(format!(
            "payload of {} bytes does not match shape {:?} ({:?})",
            bytes.len(),
            header.shape,
            header.dtype
        )));
    }
    let data = match header.dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| E::of(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| E::of(f64::read_le(c)))
            .collect(),
    };
    Tensor::new(header.shape.clone(), data)
}

pub fn save_tensor<E: Element>(stem: &Path, tensor: &Tensor<E>) -> Result<()> {
    let (bin, json) = paths(stem);
    let header = TensorHeader {
        shape: tensor.shape().to_vec(),
        dtype: E::DTYPE,
    };
    fs::write(bin, encode(tensor))?;
    fs::write(json, serde_json::to_vec(&header)?)?;
    Ok(())
}

pub fn load_tensor<E: Element>(stem: &Path) -> Result<Tensor<E>> {
    let (bin, json) = paths(stem);
    let header: TensorHeader = serde_json::from_slice(&fs::read(json)?)?;
    decode(&header, &fs::read(bin)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_file_loads_as_f64() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![2, 3], vec![0.5f32, -1.0, 2.25, 3.0, 1e-3, 7.0]).unwrap();
        let stem = dir.path().join("block0.w");
        save_tensor(&stem, &t).unwrap();
        let sidecar = fs::read_to_string(dir.path().join("block0.w.json")).unwrap();
        assert_eq!(sidecar, r#"{"shape":[2,3],"dtype":"f32"}"#);
        let back: Tensor<f64> = load_tensor(&stem).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert_eq!(back.data()[0], 0.5);
        assert_eq!(back.data()[4], 1e-3f32 as f64);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let h = TensorHeader {
            shape: vec![4],
            dtype: DType::F32,
        };
        assert!(decode::<f32>(&h, &[0u8; 15]).is_err());
    }
}
