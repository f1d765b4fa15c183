//! SNN1 parameter checkpoints.
//!
//! Layout: `b"SNN1"`, u32 LE entry count, then per entry a u32 LE name length,
//! the UTF-8 name, u32 LE rank, rank x u64 LE dims and a u64 LE byte offset
//! into the payload. The payload follows the manifest as little-endian f64.

use std::fs;
use std::path::Path;

use super::params::{ParamStore, Parameter};
use super::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SNN1";

pub fn encode(stores: &[&ParamStore]) -> Vec<u8> {
    let params: Vec<&Parameter> = stores.iter().flat_map(|s| s.iter()).collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for p in &params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * p.value.len() as u64;
    }
    for p in &params {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.origin, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0, origin };
    if r.take(4)? != MAGIC {
        return Err(Error::format(origin, "bad checkpoint magic"));
    }
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(origin, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let offset = r.u64()? as usize;
        manifest.push((name, shape, offset));
    }
    let payload = &bytes[r.pos..];
    let mut params = Vec::with_capacity(count);
    let mut expected_end = 0usize;
    for (name, shape, offset) in manifest {
        let n: usize = shape.iter().product();
        let end = offset + 8 * n;
        if end > payload.len() {
            return Err(Error::format(origin, format!("payload of {name} out of bounds")));
        }
        let data = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        expected_end = expected_end.max(end);
        params.push(Parameter {
            name,
            value: Tensor::new(&shape, data)?,
        });
    }
    if expected_end != payload.len() {
        return Err(Error::format(origin, "trailing bytes after checkpoint payload"));
    }
    Ok(ParamStore::from_params(params))
}

pub fn save(path: &Path, stores: &[&ParamStore]) -> Result<()> {
    fs::write(path, encode(stores)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Fills `target` from the entries of `loaded` with matching names.
pub fn restore_into(target: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    for p in target.iter_mut() {
        let id = loaded
            .find(&p.name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("checkpoint lacks parameter {}", p.name)))?;
        let src = &loaded.get(id).value;
        if src.shape() != p.value.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "parameter {} has shape {:?} in checkpoint, model expects {:?}",
                p.name,
                src.shape(),
                p.value.shape()
            )));
        }
        p.value = src.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_byte_exact(values in prop::collection::vec(-1e6f64..1e6, 1..40), split in 0usize..40) {
            let split = split.min(values.len());
            let mut store = ParamStore::new();
            store.add("a.weight", Tensor::new(&[split], values[..split].to_vec()).unwrap()).unwrap();
            store.add("b", Tensor::new(&[1, values.len() - split], values[split..].to_vec()).unwrap()).unwrap();
            let bytes = encode(&[&store]);
            let back = decode(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(&back, &store);
            prop_assert_eq!(encode(&[&back]), bytes);
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let bytes = encode(&[&store]);
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(decode(&bad, Path::new("m")).is_err());
        assert!(decode(&bytes[..bytes.len() - 3], Path::new("m")).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode(&longer, Path::new("m")).is_err());
    }

    #[test]
    fn restore_reports_mismatches() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(&[2])).unwrap();
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(&[3])).unwrap();
        assert!(matches!(restore_into(&mut a, &b), Err(Error::CheckpointMismatch(_))));
        let empty = ParamStore::new();
        assert!(matches!(restore_into(&mut a, &empty), Err(Error::CheckpointMismatch(_))));
    }
}
