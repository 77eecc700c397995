use std::path::Path;

use super::FlowField;
use crate::error::{Error, Result};

/// Header tag of Middlebury `.flo` files.
pub const FLO_MAGIC: f32 = 202021.25;

const MAX_PIXELS: i64 = 1 << 28;

/// Little-endian layout: magic, `i32` width, `i32` height, then row-major
/// interleaved `(u, v)` as `f32`.
pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + flow.vectors.len() * 4);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(flow.width as i32).to_le_bytes());
    buf.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for v in &flow.vectors {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: 3,
            found: 0,
        });
    }
    let word = |i: usize| -> [u8; 4] { bytes[i * 4..i * 4 + 4].try_into().unwrap() };
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            expected: 2,
            found: (bytes.len() - 4) / 4,
        });
    }
    let width = i64::from(i32::from_le_bytes(word(1)));
    let height = i64::from(i32::from_le_bytes(word(2)));
    if width <= 0 || height <= 0 || width * height > MAX_PIXELS {
        return Err(Error::SizeOverflow { width, height });
    }
    let (w, h) = (width as usize, height as usize);
    let expected = w * h * 2;
    let found = (bytes.len() - 12) / 4;
    if found < expected {
        return Err(Error::Truncated { expected, found });
    }
    let vectors = bytes[12..12 + expected * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FlowField::new(h, w, vectors))
}

pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    std::fs::write(path, encode_flo(flow)).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.flo");
        let vectors = (0..8 * 6 * 2)
            .map(|i| (i as f32 * 0.37).sin() * 9.0)
            .collect();
        let f = FlowField::new(6, 8, vectors);
        write_flo(&f, &path).unwrap();
        assert_eq!(read_flo(&path).unwrap(), f);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], &FLO_MAGIC.to_le_bytes());
        assert_eq!(i32::from_le_bytes(bytes[4..8].try_into().unwrap()), 8);
        assert_eq!(i32::from_le_bytes(bytes[8..12].try_into().unwrap()), 6);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode_flo(&FlowField::zeros(2, 2));
        bytes[..4].copy_from_slice(&0.0f32.to_le_bytes());
        assert!(matches!(decode_flo(&bytes), Err(Error::BadMagic(m)) if m == 0.0));
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        bytes.extend_from_slice(&4i32.to_le_bytes());
        bytes.extend_from_slice(&4i32.to_le_bytes());
        for _ in 0..10 {
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        assert!(matches!(
            decode_flo(&bytes),
            Err(Error::Truncated {
                expected: 32,
                found: 10
            })
        ));
    }

    #[test]
    fn rejects_oversized_and_negative_dims() {
        for (w, h) in [(-1i32, 4i32), (1 << 20, 1 << 20), (0, 3)] {
            let mut bytes = Vec::new();
            bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
            bytes.extend_from_slice(&w.to_le_bytes());
            bytes.extend_from_slice(&h.to_le_bytes());
            assert!(matches!(
                decode_flo(&bytes),
                Err(Error::SizeOverflow { .. })
            ));
        }
    }

    proptest! {
        #[test]
        fn payload_bytes_survive(h in 1usize..6, w in 1usize..6, bits in proptest::collection::vec(any::<u32>(), 72)) {
            // Arbitrary bit patterns (NaN payloads included) must be preserved.
            let vectors: Vec<f32> = bits.iter().take(h * w * 2).map(|b| f32::from_bits(*b)).collect();
            let f = FlowField::new(h, w, vectors);
            let back = decode_flo(&encode_flo(&f)).unwrap();
            let a: Vec<u32> = f.vectors.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.vectors.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
