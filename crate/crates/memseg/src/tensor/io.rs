//! Tensor serialization.
//!
//! Two formats:
//!
//! * **MSTF** — single tensor, the exchange format written by the CLI for
//!   probability maps: magic `"MSTF"`, `u32` rank, `u32` dims, then the data
//!   as little-endian 32-bit floats, row-major.
//! * **MSCK** — named-section container used for checkpoints (model weights,
//!   feature memory, optimizer state). Sections keep full 64-bit precision so
//!   training state round-trips exactly; a JSON metadata string lives in the
//!   header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MSTF_MAGIC: &[u8; 4] = b"MSTF";
const MSCK_MAGIC: &[u8; 4] = b"MSCK";
const MSCK_VERSION: u32 = 1;
const MAX_RANK: u32 = 8;

impl Tensor {
    /// Write in MSTF format (values cast to `f32`).
    pub fn write_mstf<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MSTF_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in self.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in self.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save_mstf(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_mstf(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Read an MSTF tensor; `origin` is used in error messages.
    pub fn read_mstf<R: Read>(mut r: R, origin: &Path) -> Result<Tensor> {
        let fmt = |reason: String| Error::format(origin, reason);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| fmt("truncated header".into()))?;
        if &magic != MSTF_MAGIC {
            return Err(fmt(format!("bad magic {magic:?}, expected \"MSTF\"")));
        }
        let rank = read_u32(&mut r, origin)?;
        if rank == 0 || rank > MAX_RANK {
            return Err(fmt(format!("unreasonable rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = read_u32(&mut r, origin)? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| fmt("dimension overflow".into()))?;
            shape.push(d);
        }
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)
                .map_err(|_| fmt("truncated data".into()))?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        Tensor::from_vec(shape, data)
    }

    pub fn load_mstf(path: &Path) -> Result<Tensor> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Tensor::read_mstf(BufReader::new(file), path)
    }
}

fn read_u32<R: Read>(r: &mut R, origin: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(origin, "truncated header"))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R, origin: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(origin, "truncated data"))?;
    Ok(u64::from_le_bytes(buf))
}

/// Named-tensor container with a JSON metadata header.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Container {
        Container {
            meta,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Like [`get`](Container::get) but missing sections are an error.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Manifest(format!("checkpoint section missing: {name}")))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let write = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
            w.write_all(bytes).map_err(|e| Error::io(path, e))
        };
        write(&mut w, MSCK_MAGIC)?;
        write(&mut w, &MSCK_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        write(&mut w, &(meta.len() as u32).to_le_bytes())?;
        write(&mut w, &meta)?;
        write(&mut w, &(self.entries.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.entries {
            write(&mut w, &(name.len() as u32).to_le_bytes())?;
            write(&mut w, name.as_bytes())?;
            write(&mut w, &(tensor.rank() as u32).to_le_bytes())?;
            for &d in tensor.shape() {
                write(&mut w, &(d as u32).to_le_bytes())?;
            }
            for &v in tensor.data() {
                write(&mut w, &v.to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Container> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let fmt = |reason: &str| Error::format(path, reason);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| fmt("truncated header"))?;
        if &magic != MSCK_MAGIC {
            return Err(fmt("bad magic, expected \"MSCK\""));
        }
        let version = read_u32(&mut r, path)?;
        if version != MSCK_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported container version {version}"),
            ));
        }
        let meta_len = read_u32(&mut r, path)? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        r.read_exact(&mut meta_bytes)
            .map_err(|_| fmt("truncated metadata"))?;
        let meta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::format(path, format!("bad metadata JSON: {e}")))?;
        let count = read_u32(&mut r, path)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r, path)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)
                .map_err(|_| fmt("truncated section name"))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| fmt("section name is not UTF-8"))?;
            let rank = read_u32(&mut r, path)?;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::format(path, format!("unreasonable rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = read_u32(&mut r, path)? as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| fmt("dimension overflow"))?;
                shape.push(d);
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_bits(read_u64(&mut r, path)?));
            }
            entries.push((name, Tensor::from_vec(shape, data)?));
        }
        Ok(Container {
            meta,
            entries,
        })
    }
}
