//! The `LTKD` binary tensor container.
//!
//! Layout: the magic `LTKD`, a version byte, a dtype byte (0 = f32, 1 = f64,
//! 2 = u8, 3 = i64), a rank byte, one little-endian `u32` per dimension, then
//! the row-major little-endian payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LTKD";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
    I64 = 3,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
            DType::I64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::U8 => "u8",
            DType::I64 => "i64",
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::U8,
            3 => DType::I64,
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        })
    }

    pub fn from_name(name: &str) -> Result<Self> {
        [DType::F32, DType::F64, DType::U8, DType::I64]
            .into_iter()
            .find(|d| d.name() == name)
            .ok_or_else(|| Error::Format(format!("unknown dtype name {name:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I64(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl TensorContainer {
    pub fn new(dims: &[usize], payload: Payload) -> Result<Self> {
        let c = TensorContainer {
            dims: dims.to_vec(),
            payload,
        };
        if c.payload_len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "container dims {dims:?} hold {} elements, payload has {}",
                dims.iter().product::<usize>(),
                c.payload_len()
            )));
        }
        if dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Format(format!(
                "dims {dims:?} exceed the container limits"
            )));
        }
        Ok(c)
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        TensorContainer {
            dims: t.shape().to_vec(),
            payload: Payload::F64(t.data().to_vec()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self.payload {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
            Payload::U8(_) => DType::U8,
            Payload::I64(_) => DType::I64,
        }
    }

    fn payload_len(&self) -> usize {
        match &self.payload {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
            Payload::I64(v) => v.len(),
        }
    }

    /// Widens any float payload to an f64 tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
            _ => {
                return Err(Error::Format(format!(
                    "expected a float tensor, found {}",
                    self.dtype().name()
                )))
            }
        };
        Tensor::new(&self.dims, data)
    }

    pub fn encoded_len(&self) -> usize {
        7 + 4 * self.dims.len() + self.payload_len() * self.dtype().size()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend([VERSION, self.dtype() as u8, self.dims.len() as u8]);
        for &d in &self.dims {
            out.extend((d as u32).to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
            Payload::I64(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
        }
        out
    }

    /// Decodes one container occupying the whole of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 7 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing LTKD magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {}",
                bytes[4]
            )));
        }
        let dtype = DType::from_code(bytes[5])?;
        let rank = bytes[6] as usize;
        let header = 7 + 4 * rank;
        if bytes.len() < header {
            return Err(Error::Format("truncated container header".into()));
        }
        let dims: Vec<usize> = bytes[7..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let n: usize = dims.iter().product();
        let body = &bytes[header..];
        if body.len() != n * dtype.size() {
            return Err(Error::Format(format!(
                "payload is {} bytes, dims {dims:?} of {} need {}",
                body.len(),
                dtype.name(),
                n * dtype.size()
            )));
        }
        let payload = match dtype {
            DType::F32 => Payload::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => Payload::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => Payload::U8(body.to_vec()),
            DType::I64 => Payload::I64(
                body.chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(TensorContainer { dims, payload })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_dtype_round_trips() {
        let cases = [
            TensorContainer::new(
                &[2, 2],
                Payload::F32(vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0]),
            )
            .unwrap(),
            TensorContainer::new(&[3], Payload::F64(vec![0.1, -2.0, 1e300])).unwrap(),
            TensorContainer::new(&[1, 2, 2], Payload::U8(vec![0, 7, 255, 1])).unwrap(),
            TensorContainer::new(&[2], Payload::I64(vec![-1, i64::MAX])).unwrap(),
            TensorContainer::new(&[], Payload::F64(vec![4.0])).unwrap(),
        ];
        for c in cases {
            let bytes = c.encode();
            assert_eq!(bytes.len(), c.encoded_len());
            assert_eq!(TensorContainer::decode(&bytes).unwrap(), c);
        }
    }

    #[test]
    fn header_layout() {
        let c = TensorContainer::new(&[2, 1], Payload::U8(vec![9, 8])).unwrap();
        assert_eq!(
            c.encode(),
            vec![b'L', b'T', b'K', b'D', 1, 2, 2, 2, 0, 0, 0, 1, 0, 0, 0, 9, 8]
        );
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TensorContainer::new(&[3], Payload::U8(vec![1])).is_err());
        let mut bytes = TensorContainer::new(&[2], Payload::I64(vec![1, 2]))
            .unwrap()
            .encode();
        bytes.pop();
        assert!(TensorContainer::decode(&bytes).is_err());
        assert!(TensorContainer::decode(b"NOPE\x01\x01\x00").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/x.ltkd");
        let c = TensorContainer::from_tensor(&Tensor::from_vec(vec![1.0, 2.0]));
        c.write(&path).unwrap();
        assert_eq!(TensorContainer::read(&path).unwrap(), c);
    }
}
