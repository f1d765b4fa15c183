//! SVOL: uncompressed single-volume binary format.
//!
//! Layout: `b"SVL1"`, one dtype byte (`0` = u8 labels, `1` = f32 LE), three
//! u32 LE dims `(d, h, w)`, then the row-major payload.

use std::fs;
use std::path::Path;

use super::{GridDims, LabelVolume, ScalarVolume};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SVL1";
const HEADER_LEN: usize = 4 + 1 + 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    U8 = 0,
    F32 = 1,
}

/// Decoded SVOL payload. Label class counts are not part of the format.
#[derive(Debug, Clone, PartialEq)]
pub enum SvolData {
    Labels { dims: GridDims, data: Vec<u8> },
    Scalar { dims: GridDims, data: Vec<f32> },
}

impl SvolData {
    pub fn dims(&self) -> GridDims {
        match self {
            SvolData::Labels { dims, .. } | SvolData::Scalar { dims, .. } => *dims,
        }
    }
}

fn header(dtype: DType, dims: GridDims) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.push(dtype as u8);
    for v in dims.as_array() {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out
}

pub fn encode_labels(vol: &LabelVolume) -> Vec<u8> {
    let mut out = header(DType::U8, vol.dims());
    out.extend_from_slice(vol.data());
    out
}

pub fn encode_scalar(vol: &ScalarVolume) -> Vec<u8> {
    let mut out = header(DType::F32, vol.dims());
    out.reserve(vol.data().len() * 4);
    for v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes an SVOL byte buffer; `origin` only labels error messages.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<SvolData> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(origin, "truncated SVOL header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(origin, "bad SVOL magic"));
    }
    let dtype = bytes[4];
    let mut dims = [0usize; 3];
    for (k, slot) in dims.iter_mut().enumerate() {
        let off = 5 + 4 * k;
        *slot = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let dims = GridDims::new(dims[0], dims[1], dims[2])
        .map_err(|e| Error::format(origin, e.to_string()))?;
    let payload = &bytes[HEADER_LEN..];
    match dtype {
        0 => {
            if payload.len() != dims.len() {
                return Err(Error::format(
                    origin,
                    format!("expected {} payload bytes, found {}", dims.len(), payload.len()),
                ));
            }
            Ok(SvolData::Labels {
                dims,
                data: payload.to_vec(),
            })
        }
        1 => {
            if payload.len() != dims.len() * 4 {
                return Err(Error::format(
                    origin,
                    format!("expected {} payload bytes, found {}", dims.len() * 4, payload.len()),
                ));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(SvolData::Scalar { dims, data })
        }
        other => Err(Error::format(origin, format!("unknown dtype code {other}"))),
    }
}

pub fn write_labels(path: &Path, vol: &LabelVolume) -> Result<()> {
    fs::write(path, encode_labels(vol)).map_err(|e| Error::io(path, e))
}

pub fn write_scalar(path: &Path, vol: &ScalarVolume) -> Result<()> {
    fs::write(path, encode_scalar(vol)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<SvolData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads a label volume, checking every id against `num_classes`.
pub fn read_labels(path: &Path, num_classes: u8) -> Result<LabelVolume> {
    match read(path)? {
        SvolData::Labels { dims, data } => LabelVolume::new(dims, num_classes, data)
            .map_err(|e| Error::format(path, e.to_string())),
        SvolData::Scalar { .. } => Err(Error::format(path, "expected u8 labels, found f32 volume")),
    }
}

pub fn read_scalar(path: &Path) -> Result<ScalarVolume> {
    match read(path)? {
        SvolData::Scalar { dims, data } => {
            ScalarVolume::new(dims, data).map_err(|e| Error::format(path, e.to_string()))
        }
        SvolData::Labels { .. } => Err(Error::format(path, "expected f32 volume, found u8 labels")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let dims = GridDims::new(2, 3, 4).unwrap();
        let bytes = encode_labels(&LabelVolume::zeros(dims, 2));
        assert_eq!(&bytes[..4], b"SVL1");
        assert_eq!(bytes[4], 0);
        assert_eq!(&bytes[5..17], &[2, 0, 0, 0, 3, 0, 0, 0, 4, 0, 0, 0]);
        assert_eq!(bytes.len(), 17 + 24);

        let s = ScalarVolume::new(dims, vec![1.0; 24]).unwrap();
        let bytes = encode_scalar(&s);
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[17..21], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let dims = GridDims::cube(2).unwrap();
        let good = encode_labels(&LabelVolume::zeros(dims, 2));
        let p = Path::new("mem");
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, p), Err(Error::Format { .. })));
        assert!(matches!(decode(&good[..good.len() - 1], p), Err(Error::Format { .. })));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad, p), Err(Error::Format { .. })));
        assert!(matches!(decode(&good[..10], p), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_byte_exact(d in 2usize..5, h in 2usize..5, w in 2usize..5, seed in any::<u64>()) {
            let dims = GridDims::new(d, h, w).unwrap();
            let labels: Vec<u8> = (0..dims.len()).map(|i| ((seed >> (i % 60)) as u8) % 19).collect();
            let vol = LabelVolume::new(dims, 19, labels).unwrap();
            let bytes = encode_labels(&vol);
            let back = decode(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back, SvolData::Labels { dims, data: vol.data().to_vec() });

            let scalars: Vec<f32> = (0..dims.len()).map(|i| (seed.wrapping_mul(i as u64 + 1) % 1000) as f32 * 0.37 - 100.0).collect();
            let s = ScalarVolume::new(dims, scalars).unwrap();
            let bytes = encode_scalar(&s);
            match decode(&bytes, Path::new("mem")).unwrap() {
                SvolData::Scalar { data, .. } => {
                    let again = encode_scalar(&ScalarVolume::new(dims, data).unwrap());
                    prop_assert_eq!(again, bytes);
                }
                _ => prop_assert!(false),
            }
        }
    }
}
