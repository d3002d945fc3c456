//! Parameter checkpoints.
//!
//! Layout, all integers little-endian: the magic `MSNG`, a `u32` format
//! version, the `u64` seed, the `u64` iteration, a `u32` record count, then
//! per parameter a `u32` name length, the UTF-8 name, `u32` rows, `u32`
//! cols and `rows·cols` `f64` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::netgraph::NeuralNet;
use crate::tensor::Blob;

const MAGIC: &[u8; 4] = b"MSNG";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub iteration: u64,
    /// Full parameter values keyed by base name.
    pub params: BTreeMap<String, Blob>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, blob) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(blob.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(blob.cols() as u32).to_le_bytes());
            for v in blob.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let seed = r.u64()?;
        let iteration = r.u64()?;
        let count = r.u32()?;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("parameter name at byte {} is not UTF-8", r.at - len)))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 8)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            params.insert(name, Blob::from_vec(rows, cols, values)?);
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Checkpoint { seed, iteration, params })
    }

    /// Writes through a temporary file so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Installs every parameter of `net` whose base name is in the
    /// checkpoint, cutting column blocks where the net splits a parameter.
    /// Others keep their values. Shapes are checked before anything is
    /// written, so a mismatch leaves the net untouched.
    pub fn restore(&self, net: &mut NeuralNet) -> Result<Vec<String>> {
        let mut staged = Vec::new();
        for spec in net.param_specs() {
            if let Some(full) = self.params.get(spec.base_name()) {
                staged.push((spec.name.clone(), spec.block_of(full)?));
            }
        }
        let mut restored = Vec::with_capacity(staged.len());
        for (name, value) in staged {
            net.params_mut().get_mut(&name)?.refresh(value, 0)?;
            restored.push(name);
        }
        Ok(restored)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.at,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}
