//! Binary tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes   "PETCKPT1"
//! count    u32
//! entry*   name_len u32, name utf-8, dtype u8 (4 = f32, 8 = f64),
//!          frozen u8, rank u32, dims u64 × rank, data dtype × product(dims)
//! ```
//!
//! Loading restores values bit for bit.

use std::fs;
use std::path::Path;

use crate::error::{PetError, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 8] = b"PETCKPT1";

/// One tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry<T> {
    pub name: String,
    pub frozen: bool,
    pub tensor: Tensor<T>,
}

pub fn encode<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, e) in store.iter() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(T::BYTES as u8);
        out.push(u8::from(!e.tensor.requires_grad()));
        out.extend_from_slice(&(e.tensor.shape().len() as u32).to_le_bytes());
        for &dim in e.tensor.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in e.tensor.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| PetError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode<T: Real>(buf: &[u8]) -> Result<Vec<ArchiveEntry<T>>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(PetError::Checkpoint("bad magic".into()));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| PetError::Checkpoint("parameter name is not utf-8".into()))?;
        let width = r.u8()? as usize;
        if width != T::BYTES {
            return Err(PetError::Checkpoint(format!(
                "{name}: stored as {width}-byte floats, reading as {}",
                T::NAME
            )));
        }
        let frozen = r.u8()? != 0;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * width)?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        let tensor = Tensor::new(&shape, data)?.with_requires_grad(!frozen);
        entries.push(ArchiveEntry {
            name,
            frozen,
            tensor,
        });
    }
    if r.pos != buf.len() {
        return Err(PetError::Checkpoint(
            "trailing bytes after last entry".into(),
        ));
    }
    Ok(entries)
}

pub fn save<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    fs::write(path, encode(store))?;
    Ok(())
}

pub fn read<T: Real>(path: &Path) -> Result<Vec<ArchiveEntry<T>>> {
    decode(&fs::read(path)?)
}

/// Overwrites values and trainable flags in `store` from the archive.
/// Names and shapes must match exactly.
pub fn load_into<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let entries = read::<T>(path)?;
    if entries.len() != store.len() {
        return Err(PetError::Checkpoint(format!(
            "archive has {} tensors, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for e in entries {
        let id = store
            .find(&e.name)
            .ok_or_else(|| PetError::Checkpoint(format!("unknown tensor {}", e.name)))?;
        if store.get(id).shape() != e.tensor.shape() {
            return Err(PetError::Checkpoint(format!(
                "shape mismatch for {}",
                e.name
            )));
        }
        *store.get_mut(id) = e.tensor;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Group, Kind};
    use crate::tensor::Rng;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let mut rng = Rng::new(3);
        s.add(
            "a.w",
            Tensor::randn(&[3, 2], 1.0, &mut rng),
            Group::Pet,
            Kind::Weight,
        )
        .unwrap();
        let b = s
            .add(
                "b",
                Tensor::full(&[4], f32::MIN_POSITIVE),
                Group::Backbone,
                Kind::Bias,
            )
            .unwrap();
        s.set_trainable(b, true);
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let bytes = encode(&s);
        let back = decode::<f32>(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for ((_, e), a) in s.iter().zip(&back) {
            assert_eq!(e.name, a.name);
            let x: Vec<u32> = e.tensor.data().iter().map(|v| v.to_bits()).collect();
            let y: Vec<u32> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(x, y);
            assert_eq!(a.frozen, !e.tensor.requires_grad());
        }
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let bytes = encode(&store());
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode::<f64>(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
    }
}
