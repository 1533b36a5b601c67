//! Binary checkpoints.
//!
//! Layout, all integers little-endian: magic `GAAT`, `u32` version, `u32`
//! entry count, then per entry a `u16` name length, the UTF-8 name, a `u8`
//! dtype code, a `u8` rank, `rank` × `u32` dims and the payload.
//!
//! Dtype codes: 0 = f32, 1 = f64, 2 = u64. Parameters and optimizer moments
//! are written as f64 so a round trip is bit-exact; f32 entries are accepted
//! on load and widened.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::tensor::{AdamState, ParamStore};

pub const MAGIC: &[u8; 4] = b"GAAT";
pub const VERSION: u32 = 1;

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// One stored tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F64(ArrayD<f64>),
    U64(ArrayD<u64>),
}

/// Parameters, optimizer state and training progress.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    /// Snapshot of a store, its Adam state, the number of completed epochs
    /// and the model config hash.
    pub fn capture(store: &ParamStore, adam: &AdamState, epoch: u64, config_hash: u64) -> Self {
        let mut entries = Vec::with_capacity(3 * store.len() + 3);
        entries.push(("meta/epoch".into(), Entry::U64(ArrayD::from_elem(IxDyn(&[]), epoch))));
        entries.push(("meta/config_hash".into(), Entry::U64(ArrayD::from_elem(IxDyn(&[]), config_hash))));
        entries.push(("meta/adam_step".into(), Entry::U64(ArrayD::from_elem(IxDyn(&[]), adam.step))));
        for (id, p) in store.iter() {
            entries.push((format!("{PARAM}{}", p.name), Entry::F64((*p.value).clone())));
            entries.push((format!("{ADAM_M}{}", p.name), Entry::F64(adam.m[id.index()].clone())));
            entries.push((format!("{ADAM_V}{}", p.name), Entry::F64(adam.v[id.index()].clone())));
        }
        Self {
            version: VERSION,
            entries,
        }
    }

    fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    fn meta(&self, name: &str) -> Result<u64> {
        match self.get(&format!("meta/{name}")) {
            Some(Entry::U64(a)) if a.len() == 1 => Ok(a.iter().copied().next().unwrap()),
            _ => Err(Error::input(format!("checkpoint lacks meta/{name}"))),
        }
    }

    pub fn epoch(&self) -> Result<u64> {
        self.meta("epoch")
    }

    pub fn config_hash(&self) -> Result<u64> {
        self.meta("config_hash")
    }

    fn tensor(&self, name: &str) -> Result<&ArrayD<f64>> {
        match self.get(name) {
            Some(Entry::F64(a)) => Ok(a),
            Some(_) => Err(Error::input(format!("checkpoint entry `{name}` is not a float tensor"))),
            None => Err(Error::input(format!("checkpoint lacks `{name}`"))),
        }
    }

    /// Copies every parameter of `store` from the checkpoint. Names and
    /// shapes must match.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = self.tensor(&format!("{PARAM}{name}"))?;
            store.set(id, t.clone())?;
        }
        Ok(())
    }

    /// Adam moments for `store`'s parameters.
    pub fn restore_adam(&self, store: &ParamStore) -> Result<AdamState> {
        let mut state = AdamState::zeros(store);
        state.step = self.meta("adam_step")?;
        for (id, p) in store.iter() {
            for (prefix, slot) in [(ADAM_M, &mut state.m), (ADAM_V, &mut state.v)] {
                let t = self.tensor(&format!("{prefix}{}", p.name))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::input(format!("optimizer state for `{}` has the wrong shape", p.name)));
                }
                slot[id.index()] = t.clone();
            }
        }
        Ok(state)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::input(format!("entry name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (code, shape) = match entry {
                Entry::F64(a) => (1u8, a.shape()),
                Entry::U64(a) => (2u8, a.shape()),
            };
            out.push(code);
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match entry {
                Entry::F64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Entry::U64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.error(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(4, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error(at, "entry name is not UTF-8"))?
                .to_string();
            let code_at = r.pos;
            let code = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let entry = match code {
                0 => Entry::F64(ArrayD::from_shape_vec(
                    IxDyn(&shape),
                    r.take(n * 4)?
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                        .collect(),
                )
                .unwrap()),
                1 => Entry::F64(ArrayD::from_shape_vec(
                    IxDyn(&shape),
                    r.take(n * 8)?
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )
                .unwrap()),
                2 => Entry::U64(ArrayD::from_shape_vec(
                    IxDyn(&shape),
                    r.take(n * 8)?
                        .chunks_exact(8)
                        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )
                .unwrap()),
                c => return Err(r.error(code_at, format!("unknown dtype code {c}"))),
            };
            entries.push((name, entry));
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, "trailing bytes after the last entry"));
        }
        Ok(Self { version, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(self.pos, format!("truncated: wanted {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_entries_widen() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'w');
        bytes.extend_from_slice(&[0, 1]);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2f32).to_le_bytes());
        let c = Checkpoint::from_bytes(&bytes, Path::new("c")).unwrap();
        assert_eq!(c.entries[0].1, Entry::F64(ndarray::arr1(&[1.5, -2.0]).into_dyn()));
    }

    #[test]
    fn truncation_reports_offset() {
        let err = Checkpoint::from_bytes(b"GAAT\x01\x00", Path::new("c")).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 4, .. }), "{err}");
    }
}
