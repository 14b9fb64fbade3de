//! Model checkpoints.
//!
//! Layout, in order:
//!
//! | field        | encoding                                   |
//! |--------------|--------------------------------------------|
//! | magic        | the four bytes `SPLN`                      |
//! | version      | `u32`, little endian                       |
//! | header size  | `u64`, little endian, in bytes             |
//! | header       | UTF-8 JSON, see [`Header`]                 |
//! | tensors      | raw little-endian values, in header order  |
//!
//! Values are stored in the element type named by the header, so a save and
//! load round trip is bit exact.

use std::io::{Read, Write};
use std::path::Path;

use autodiff::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelSpec, Network};

pub const MAGIC: &[u8; 4] = b"SPLN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: String,
    pub model: ModelSpec,
    pub tensors: Vec<TensorEntry>,
    /// Free-form run information (config, epoch, step).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelSpec,
    pub params: Vec<Tensor<T>>,
    pub meta: serde_json::Value,
}

impl<T: Float> Checkpoint<T> {
    /// Pairs parameters with the network they belong to.
    pub fn new(net: &Network, params: Vec<Tensor<T>>, meta: serde_json::Value) -> Result<Self> {
        net.check_params(&params)?;
        Ok(Self { model: net.spec.clone(), params, meta })
    }

    /// Rebuilds the network and checks the stored tensors against it.
    pub fn network(&self) -> Result<Network> {
        let net = Network::build(&self.model)?;
        net.check_params(&self.params).map_err(|e| Error::Checkpoint(format!("model mismatch: {e}")))?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let net = Network::build(&self.model)?;
        let header = Header {
            dtype: T::DTYPE.into(),
            model: self.model.clone(),
            tensors: net
                .param_specs()
                .iter()
                .zip(&self.params)
                .map(|(s, p)| TensorEntry { name: s.name.clone(), shape: p.shape().to_vec() })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            for &v in p.data() {
                match T::DTYPE {
                    "f32" => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                    _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated header size"))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        if header.dtype != T::DTYPE {
            return Err(bad(&format!("stored as {}, requested {}", header.dtype, T::DTYPE)));
        }
        let width = std::mem::size_of::<T>();
        let mut params = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            if r.len() < n * width {
                return Err(bad(&format!("truncated tensor {}", entry.name)));
            }
            let (blob, rest) = r.split_at(n * width);
            r = rest;
            let data = blob
                .chunks_exact(width)
                .map(|c| match width {
                    4 => T::cst(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                    _ => T::cst(f64::from_le_bytes(c.try_into().unwrap())),
                })
                .collect();
            params.push(Tensor::new(entry.shape.clone(), data)?);
        }
        if !r.is_empty() {
            return Err(bad(&format!("{} trailing bytes", r.len())));
        }
        let ckpt = Self { model: header.model, params, meta: header.meta };
        ckpt.network()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn bad(detail: &str) -> Error {
    Error::Checkpoint(detail.into())
}
