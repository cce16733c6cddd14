//! Versioned binary checkpoints.
//!
//! ```text
//! "DPVQ"  u32 version  u64 config hash
//! u32 config_len  config text (UTF-8 key=value lines)
//! u32 n_params
//! per param: u32 name_len, name, u32 rank, rank × u32 extents, f32 data
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"DPVQ";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub config_text: String,
    pub params: Vec<(String, Tensor<f32>)>,
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("checkpoint", "truncated".to_string())
    } else {
        Error::Io(e)
    }
}

impl Checkpoint {
    pub fn from_store<F: Real>(store: &ParamStore<F>, config_hash: u64, config_text: String) -> Self {
        Checkpoint {
            config_hash,
            config_text,
            params: store.iter().map(|p| (p.name.clone(), p.value.cast::<f32>())).collect(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.config_hash.to_le_bytes())?;
        w.write_all(&(self.config_text.len() as u32).to_le_bytes())?;
        w.write_all(self.config_text.as_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", "bad magic".to_string()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let mut h = [0u8; 8];
        r.read_exact(&mut h).map_err(truncated)?;
        let config_hash = u64::from_le_bytes(h);
        let clen = read_u32(&mut r)? as usize;
        let mut text = vec![0u8; clen];
        r.read_exact(&mut text).map_err(truncated)?;
        let config_text =
            String::from_utf8(text).map_err(|_| Error::format("checkpoint", "config is not UTF-8".to_string()))?;
        let n = read_u32(&mut r)? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let nlen = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; nlen];
            r.read_exact(&mut name).map_err(truncated)?;
            let name =
                String::from_utf8(name).map_err(|_| Error::format("checkpoint", "name is not UTF-8".to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| read_u32(&mut r).map(|e| e as usize)).collect::<Result<_>>()?;
            let count: usize = shape.iter().product();
            let mut bytes = vec![0u8; count * 4];
            r.read_exact(&mut bytes).map_err(truncated)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("checkpoint", "trailing bytes".to_string()));
        }
        Ok(Checkpoint {
            config_hash,
            config_text,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Copies values into a store with exactly the same parameter names and shapes.
    pub fn restore_into<F: Real>(&self, store: &mut ParamStore<F>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Ingestion(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Ingestion(format!("model has no parameter `{name}`")))?;
            if store.value(id).shape() != t.shape() {
                return Err(Error::Ingestion(format!(
                    "parameter `{name}` has shape {:?}, checkpoint {:?}",
                    store.value(id).shape(),
                    t.shape()
                )));
            }
            store.set(id, t.cast())?;
        }
        Ok(())
    }
}
