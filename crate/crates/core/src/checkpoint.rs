//! Binary checkpoint container: named little-endian buffers.
//!
//! Layout: magic `SACK`, version `u32`, entry count `u32`, then per entry a
//! `u32` name length, the UTF-8 name, a kind byte (0 = `f64`, 1 = `u64`),
//! a `u64` element count and the elements.

use std::path::Path;

use sacflow_autodiff::{AdamState, ParamStore};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SACK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Blob {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

/// Ordered collection of named buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Blob)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn put_f64(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.entries.push((name.into(), Blob::F64(values)));
    }

    pub fn put_u64(&mut self, name: impl Into<String>, values: Vec<u64>) {
        self.entries.push((name.into(), Blob::U64(values)));
    }

    fn find(&self, name: &str) -> Result<&Blob> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::format("checkpoint", format!("missing entry `{name}`")))
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.find(name)? {
            Blob::F64(v) => Ok(v),
            Blob::U64(_) => Err(Error::format("checkpoint", format!("entry `{name}` is not f64"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.find(name)? {
            Blob::U64(v) => Ok(v),
            Blob::F64(_) => Err(Error::format("checkpoint", format!("entry `{name}` is not u64"))),
        }
    }

    /// Single `u64` entry.
    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.u64s(name)? {
            [x] => Ok(*x),
            other => Err(Error::format(
                "checkpoint",
                format!("entry `{name}` holds {} values, expected 1", other.len()),
            )),
        }
    }

    /// Single `f64` entry.
    pub fn f64(&self, name: &str) -> Result<f64> {
        match self.f64s(name)? {
            [x] => Ok(*x),
            other => Err(Error::format(
                "checkpoint",
                format!("entry `{name}` holds {} values, expected 1", other.len()),
            )),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, blob) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match blob {
                Blob::F64(v) => {
                    out.push(0);
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                Blob::U64(v) => {
                    out.push(1);
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "missing SACK header"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::format("checkpoint", format!("entry name: {e}")))?
                .to_string();
            let kind = r.take(1)?[0];
            let n = r.u64()? as usize;
            let blob = match kind {
                0 => Blob::F64((0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<_>>()?),
                1 => Blob::U64((0..n).map(|_| r.u64()).collect::<Result<_>>()?),
                k => {
                    return Err(Error::format(
                        "checkpoint",
                        format!("entry `{name}` has unknown kind {k}"),
                    ))
                }
            };
            entries.push((name, blob));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Stores every tensor of `p` under `prefix/<index>/<name>`.
    pub fn put_params(&mut self, prefix: &str, p: &ParamStore) {
        for (i, (name, t)) in p.iter().enumerate() {
            self.put_f64(format!("{prefix}/{i}/{name}"), t.data().to_vec());
        }
    }

    /// Loads tensors stored by [`Checkpoint::put_params`] into `p`.
    pub fn load_params(&self, prefix: &str, p: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = p
            .iter()
            .enumerate()
            .map(|(i, (n, _))| format!("{prefix}/{i}/{n}"))
            .collect();
        for (t, name) in p.tensors_mut().iter_mut().zip(names) {
            let data = self.f64s(&name)?;
            if data.len() != t.len() {
                return Err(Error::format(
                    "checkpoint",
                    format!("`{name}` holds {} values, the model expects {}", data.len(), t.len()),
                ));
            }
            t.data_mut().copy_from_slice(data);
        }
        Ok(())
    }

    /// Stores the step count and both moment estimates of `a`.
    pub fn put_adam(&mut self, prefix: &str, a: &AdamState) {
        self.put_u64(format!("{prefix}/step"), vec![a.step_count]);
        for (i, (m, v)) in a.first_moment.iter().zip(&a.second_moment).enumerate() {
            self.put_f64(format!("{prefix}/m{i}"), m.clone());
            self.put_f64(format!("{prefix}/v{i}"), v.clone());
        }
    }

    pub fn load_adam(&self, prefix: &str, a: &mut AdamState) -> Result<()> {
        a.step_count = self.u64(&format!("{prefix}/step"))?;
        for (i, (m, v)) in a.first_moment.iter_mut().zip(a.second_moment.iter_mut()).enumerate() {
            for (dst, key) in [(m, format!("{prefix}/m{i}")), (v, format!("{prefix}/v{i}"))] {
                let data = self.f64s(&key)?;
                if data.len() != dst.len() {
                    return Err(Error::format("checkpoint", format!("`{key}` has the wrong length")));
                }
                dst.copy_from_slice(data);
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated file"))?;
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
