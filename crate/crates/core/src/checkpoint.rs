//! Versioned binary weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "EYOLOCKP"
//! version      u32
//! config hash  u64
//! count        u32
//! count × { name_len u32, name utf-8, rank u32, dims u64 × rank, payload f64 × Π dims }
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{NetConfig, Network};
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 8] = b"EYOLOCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor4) -> Self {
        Self {
            name: name.into(),
            dims: t.shape().dims().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            dims: vec![1],
            data: vec![value],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub arrays: Vec<NamedArray>,
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new(config_hash: u64) -> Self {
        Self {
            config_hash,
            arrays: Vec::new(),
        }
    }

    pub fn from_network(net: &Network) -> Self {
        Self {
            config_hash: net.config().hash(),
            arrays: net
                .named_tensors()
                .into_iter()
                .map(|(name, t)| NamedArray::from_tensor(name, t))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.arrays.iter().map(|a| a.data.len() * 8 + a.name.len() + 8 + a.dims.len() * 8).sum();
        let mut out = Vec::with_capacity(24 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
            for &d in &a.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let config_hash = r.u64()?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("array {name} is too large")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push(NamedArray { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config_hash,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Overwrites `net`'s weights; the config hash and every array must match.
    pub fn restore_network(&self, net: &mut Network) -> Result<()> {
        let expected = net.config().hash();
        if self.config_hash != expected {
            return Err(Error::Config(format!(
                "checkpoint config hash {:016x} does not match network config {:016x}",
                self.config_hash, expected
            )));
        }
        for (name, t) in net.named_tensors_mut() {
            let a = self
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing array {name}")))?;
            if a.dims != t.shape().dims() {
                return Err(Error::Dimension(format!(
                    "array {name} has dims {:?}, network expects {}",
                    a.dims,
                    t.shape()
                )));
            }
            let fresh = Tensor4::new(t.shape(), a.data.clone())?;
            *t = fresh;
        }
        Ok(())
    }
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    Checkpoint::from_network(net).save(path)
}

pub fn load_network(config: NetConfig, path: &Path) -> Result<Network> {
    let mut net = Network::build(config, 0)?;
    Checkpoint::load(path)?.restore_network(&mut net)?;
    Ok(net)
}
