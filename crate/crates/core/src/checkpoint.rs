//! Versioned binary checkpoints: magic, format version, JSON header and named
//! little-endian `f32` parameter blobs.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ADVCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(header: &impl Serialize, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        Ok(Self {
            header: serde_json::to_value(header)?,
            tensors,
        })
    }

    pub fn header_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.header.clone())?)
    }

    /// Checks the `kind` field of the header.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.header.get("kind").and_then(|k| k.as_str()) {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Compatibility(format!("expected a {kind} checkpoint, found {other:?}"))),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for d in t.dims() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            let mut bytes = Vec::with_capacity(values.len() * 4);
            for v in values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Compatibility(format!("checkpoint format {version}, expected {FORMAT_VERSION}")));
        }
        let header_len = read_u64(&mut r)? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let header = serde_json::from_slice(&header)?;
        let count = read_u32(&mut r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            let dims = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(name, Tensor::from_vec(values, dims, &Device::Cpu)?);
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::path(path, e.to_string()))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let mut tensors = BTreeMap::new();
        tensors.insert("a.w".to_string(), Tensor::new(&[[1f32, 2.], [3., 4.]], &Device::Cpu).unwrap());
        tensors.insert("tau".to_string(), Tensor::new(0.5f32, &Device::Cpu).unwrap());
        let ck = Checkpoint::new(&serde_json::json!({"kind": "test", "d": 3}), tensors).unwrap();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back.header, ck.header);
        assert_eq!(back.tensors["a.w"].to_vec2::<f32>().unwrap(), vec![vec![1., 2.], vec![3., 4.]]);
        assert_eq!(back.tensors["tau"].to_scalar::<f32>().unwrap(), 0.5);
        back.expect_kind("test").unwrap();
        assert!(back.expect_kind("unet").is_err());
        buf[0] = b'X';
        assert!(Checkpoint::read_from(&buf[..]).is_err());
    }
}
