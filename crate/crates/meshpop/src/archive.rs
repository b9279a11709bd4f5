//! Named-tensor archive: a one-line JSON index (name -> shape/dtype/byte
//! offset, plus an embedded metadata document) followed by raw
//! little-endian payload. Used for pretrained weights and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("archive format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArchiveTensor {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl ArchiveTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            ArchiveTensor::F32(a) => a.shape(),
            ArchiveTensor::F64(a) => a.shape(),
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            ArchiveTensor::F32(_) => "float32",
            ArchiveTensor::F64(_) => "float64",
        }
    }

    fn byte_len(&self) -> u64 {
        let elems: usize = self.shape().iter().product();
        match self {
            ArchiveTensor::F32(_) => (elems * 4) as u64,
            ArchiveTensor::F64(_) => (elems * 8) as u64,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: BTreeMap<String, IndexEntry>,
}

/// In-memory named-tensor collection with an attached metadata document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    tensors: BTreeMap<String, ArchiveTensor>,
    pub meta: serde_json::Value,
}

impl TensorArchive {
    pub fn new() -> Self {
        TensorArchive {
            tensors: BTreeMap::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, tensor: ArrayD<f32>) {
        self.tensors.insert(name.into(), ArchiveTensor::F32(tensor));
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) {
        self.tensors.insert(name.into(), ArchiveTensor::F64(tensor));
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.get(name)
    }

    pub fn get_f32(&self, name: &str) -> Option<&ArrayD<f32>> {
        match self.tensors.get(name) {
            Some(ArchiveTensor::F32(a)) => Some(a),
            _ => None,
        }
    }

    pub fn get_f64(&self, name: &str) -> Option<&ArrayD<f64>> {
        match self.tensors.get(name) {
            Some(ArchiveTensor::F64(a)) => Some(a),
            _ => None,
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Write atomically (temp file + rename). Tensors are packed in name
    /// order so identical content produces identical bytes.
    pub fn save(&self, path: &Path) -> Result<(), ArchiveError> {
        let mut offset = 0u64;
        let mut index = BTreeMap::new();
        for (name, tensor) in &self.tensors {
            index.insert(
                name.clone(),
                IndexEntry {
                    shape: tensor.shape().to_vec(),
                    dtype: tensor.dtype().to_string(),
                    offset,
                },
            );
            offset += tensor.byte_len();
        }
        let header = Header {
            meta: self.meta.clone(),
            tensors: index,
        };

        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
        ));
        {
            let mut out = BufWriter::new(fs::File::create(&tmp)?);
            serde_json::to_writer(&mut out, &header)?;
            out.write_all(b"\n")?;
            for tensor in self.tensors.values() {
                match tensor {
                    ArchiveTensor::F32(a) => {
                        for v in a.iter() {
                            out.write_all(&v.to_le_bytes())?;
                        }
                    }
                    ArchiveTensor::F64(a) => {
                        for v in a.iter() {
                            out.write_all(&v.to_le_bytes())?;
                        }
                    }
                }
            }
            out.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TensorArchive, ArchiveError> {
        let mut f = std::io::BufReader::new(fs::File::open(path)?);
        let mut header_bytes = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            f.read_exact(&mut byte)
                .map_err(|_| ArchiveError::Format("unterminated header line".into()))?;
            if byte[0] == b'\n' {
                break;
            }
            header_bytes.push(byte[0]);
            if header_bytes.len() > 1 << 24 {
                return Err(ArchiveError::Format("header too large".into()));
            }
        }
        let header: Header = serde_json::from_slice(&header_bytes)?;
        let mut payload = Vec::new();
        f.read_to_end(&mut payload)?;

        let mut tensors = BTreeMap::new();
        for (name, entry) in header.tensors {
            let elems: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let tensor = match entry.dtype.as_str() {
                "float32" => {
                    let end = start + elems * 4;
                    let bytes = payload.get(start..end).ok_or_else(|| {
                        ArchiveError::Format(format!("tensor {name} payload out of range"))
                    })?;
                    let data: Vec<f32> = bytes
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect();
                    ArchiveTensor::F32(
                        ArrayD::from_shape_vec(entry.shape.clone(), data)
                            .map_err(|e| ArchiveError::Format(e.to_string()))?,
                    )
                }
                "float64" => {
                    let end = start + elems * 8;
                    let bytes = payload.get(start..end).ok_or_else(|| {
                        ArchiveError::Format(format!("tensor {name} payload out of range"))
                    })?;
                    let data: Vec<f64> = bytes
                        .chunks_exact(8)
                        .map(|b| {
                            f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]])
                        })
                        .collect();
                    ArchiveTensor::F64(
                        ArrayD::from_shape_vec(entry.shape.clone(), data)
                            .map_err(|e| ArchiveError::Format(e.to_string()))?,
                    )
                }
                other => {
                    return Err(ArchiveError::Format(format!(
                        "tensor {name}: unsupported dtype {other}"
                    )))
                }
            };
            tensors.insert(name, tensor);
        }
        Ok(TensorArchive {
            tensors,
            meta: header.meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn round_trip_mixed_dtypes_and_meta() {
        let mut a = TensorArchive::new();
        a.insert_f32(
            "w",
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 2.5, -3.0, 0.0, f32::MIN, f32::MAX])
                .unwrap(),
        );
        a.insert_f64(
            "m",
            ArrayD::from_shape_vec(IxDyn(&[3]), vec![1e-300, 0.1, -2.0]).unwrap(),
        );
        a.meta = serde_json::json!({"step": 7, "note": "x"});

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.npt");
        a.save(&path).unwrap();
        let b = TensorArchive::load(&path).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.meta["step"], 7);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let mut a = TensorArchive::new();
        a.insert_f32("z", ArrayD::zeros(IxDyn(&[4])));
        a.insert_f32("a", ArrayD::zeros(IxDyn(&[2, 2])));
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("1.npt");
        let p2 = dir.path().join("2.npt");
        a.save(&p1).unwrap();
        a.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut a = TensorArchive::new();
        a.insert_f32("w", ArrayD::zeros(IxDyn(&[8])));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.npt");
        a.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            TensorArchive::load(&path),
            Err(ArchiveError::Format(_))
        ));
    }
}
