//! Versioned binary container for model and optimizer state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "MDIFCKPT"
//! version    u32
//! header     u64 length + UTF-8 JSON
//! count      u32
//! tensors    count x { u32 name length, name, u32 rank, rank x u64 dims,
//!                      prod(dims) x f64 }
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub const MAGIC: &[u8; 8] = b"MDIFCKPT";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            let numel: usize = t.shape.iter().product();
            ensure!(
                numel == t.data.len(),
                Contract,
                "tensor {} has shape {:?} but {} values",
                t.name,
                t.shape,
                t.data.len()
            );
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in &t.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let c = Self::read_from(&mut r)?;
        ensure!(r.is_empty(), Load, "{} trailing bytes after container", r.len());
        Ok(c)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        ensure!(&magic == MAGIC, Load, "bad checkpoint magic");
        let version = read_u32(r)?;
        ensure!(
            version == CONTAINER_VERSION,
            Load,
            "unsupported checkpoint version {version}"
        );
        let header_len = read_u64(r)? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let header: serde_json::Value = serde_json::from_slice(&header)?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Load(e.to_string()))?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Load(msg) => Error::Format {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_garbage() {
        assert!(Container::from_bytes(b"not a checkpoint at all").is_err());
        let c = Container {
            header: serde_json::json!({"kind": "x"}),
            tensors: vec![],
        };
        let mut bytes = c.to_bytes().unwrap();
        bytes.push(0);
        assert!(Container::from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            bits in proptest::collection::vec(any::<u64>(), 0..40),
            name in "[a-z.0-9]{1,12}",
        ) {
            let data: Vec<f64> = bits.iter().map(|b| f64::from_bits(*b)).collect();
            let c = Container {
                header: serde_json::json!({"kind": "test", "step": 3}),
                tensors: vec![NamedTensor { name, shape: vec![data.len()], data }],
            };
            let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
            let a: Vec<u64> = c.tensors[0].data.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = back.tensors[0].data.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.header, c.header);
        }
    }
}
