//! AECHIP1 container.
//!
//! Little-endian layout:
//!
//! | bytes | content |
//! |-------|---------|
//! | 0..8  | magic `AECHIP1\0` |
//! | 8..12 | u32 channel count C |
//! | 12..16| u32 height H |
//! | 16..20| u32 width W |
//! | 20    | u8 class (0 non-tomato, 1 tomato) |
//! | 21..24| zero |
//! | ...   | C*H*W binary32, band-major then row-major |
//! | ...   | H*W u8 cells: 0/1 valid label, 255 invalid |
//!
//! Chips always have C = 64; single-channel rasters reuse the layout.

use std::fs;
use std::path::Path;

use super::chip::{ClassLabel, EmbeddingChip, LabelMask, BANDS, MIN_SIDE};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"AECHIP1\0";
pub const HEADER_LEN: usize = 24;
pub const INVALID_CELL: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub class_label: ClassLabel,
}

impl Header {
    pub fn payload_len(&self) -> usize {
        HEADER_LEN + self.channels * self.height * self.width * 4 + self.height * self.width
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.push(self.class_label.as_u8());
        out.extend_from_slice(&[0, 0, 0]);
    }

    /// Parses and checks the header and the total length of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let word = |at: usize| {
            u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice")) as usize
        };
        let class_label = ClassLabel::from_u8(bytes[20]).ok_or_else(|| {
            Error::Invariant(format!("class byte {} is neither 0 nor 1", bytes[20]))
        })?;
        let header = Header {
            channels: word(8),
            height: word(12),
            width: word(16),
            class_label,
        };
        let expected = header
            .channels
            .checked_mul(header.height)
            .and_then(|v| v.checked_mul(header.width))
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(header.height * header.width + HEADER_LEN))
            .ok_or_else(|| Error::DimensionMismatch("header dimensions overflow".into()))?;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::DimensionMismatch(format!(
                "{} trailing bytes after payload",
                bytes.len() - expected
            )));
        }
        Ok(header)
    }
}

pub(crate) fn decode_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect()
}

pub fn encode_chip(chip: &EmbeddingChip, labels: &LabelMask) -> Result<Vec<u8>> {
    chip.validate()?;
    labels.validate_against(chip)?;
    let header = Header {
        channels: BANDS,
        height: chip.height,
        width: chip.width,
        class_label: chip.class_label,
    };
    let mut out = Vec::with_capacity(header.payload_len());
    header.encode(&mut out);
    for v in &chip.bands {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(
        chip.valid
            .iter()
            .zip(&labels.labels)
            .map(|(&v, &l)| if v { l } else { INVALID_CELL }),
    );
    Ok(out)
}

/// Decodes a chip. Non-finite band values mark the whole pixel invalid and
/// every band of an invalid pixel is zero-filled.
pub fn decode_chip(bytes: &[u8], chip_id: &str) -> Result<(EmbeddingChip, LabelMask)> {
    let header = Header::decode(bytes)?;
    if header.channels != BANDS {
        return Err(Error::DimensionMismatch(format!(
            "chip has {} channels, expected {BANDS}",
            header.channels
        )));
    }
    if header.height < MIN_SIDE || header.width < MIN_SIDE {
        return Err(Error::DimensionMismatch(format!(
            "chip is {}x{}, minimum side is {MIN_SIDE}",
            header.height, header.width
        )));
    }
    let n = header.height * header.width;
    let data_end = HEADER_LEN + BANDS * n * 4;
    let mut bands = decode_f32s(&bytes[HEADER_LEN..data_end]);
    let cells = &bytes[data_end..];

    let mut valid = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (i, &cell) in cells.iter().enumerate() {
        match cell {
            0 | 1 => {
                let finite = (0..BANDS).all(|b| bands[b * n + i].is_finite());
                valid.push(finite);
                labels.push(if finite { cell } else { 0 });
            }
            INVALID_CELL => {
                valid.push(false);
                labels.push(0);
            }
            other => {
                return Err(Error::Invariant(format!("mask cell {i} has value {other}")));
            }
        }
    }
    for b in 0..BANDS {
        for i in 0..n {
            if !valid[i] {
                bands[b * n + i] = 0.0;
            }
        }
    }
    let chip = EmbeddingChip {
        chip_id: chip_id.to_string(),
        class_label: header.class_label,
        centroid: (0.0, 0.0),
        height: header.height,
        width: header.width,
        bands,
        valid,
    };
    chip.validate()?;
    let labels = LabelMask {
        height: header.height,
        width: header.width,
        labels,
    };
    Ok((chip, labels))
}

/// Writes `chip` to `destination` and returns the number of bytes written.
pub fn write_chip(chip: &EmbeddingChip, labels: &LabelMask, destination: &Path) -> Result<usize> {
    let bytes = encode_chip(chip, labels)?;
    fs::write(destination, &bytes).map_err(|e| Error::io(destination, e))?;
    Ok(bytes.len())
}

/// Reads a chip file. The chip id is taken from the file stem and the
/// centroid is left at the origin; manifests fill both in.
pub fn read_chip(source: &Path) -> Result<(EmbeddingChip, LabelMask)> {
    let bytes = fs::read(source).map_err(|e| Error::io(source, e))?;
    let id = source
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_chip(&bytes, &id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chip(h: usize, w: usize) -> (EmbeddingChip, LabelMask) {
        let n = h * w;
        let bands = (0..BANDS * n)
            .map(|i| ((i % 200) as f32 / 100.0) - 1.0)
            .collect();
        let chip = EmbeddingChip {
            chip_id: "c0".into(),
            class_label: ClassLabel::Tomato,
            centroid: (0.0, 0.0),
            height: h,
            width: w,
            bands,
            valid: vec![true; n],
        };
        let labels = LabelMask::uniform(&chip, ClassLabel::Tomato);
        (chip, labels)
    }

    #[test]
    fn byte_count_for_minimal_chip() {
        let (c, l) = chip(8, 8);
        let bytes = encode_chip(&c, &l).unwrap();
        assert_eq!(bytes.len(), 24 + 64 * 8 * 8 * 4 + 8 * 8);
        assert_eq!(bytes.len(), 16_472);
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (mut c, mut l) = chip(9, 12);
        c.valid[5] = false;
        for b in 0..BANDS {
            c.bands[b * 108 + 5] = 0.0;
        }
        l.labels[5] = 0;
        let bytes = encode_chip(&c, &l).unwrap();
        let (c2, l2) = decode_chip(&bytes, "c0").unwrap();
        assert_eq!(c2, c);
        assert_eq!(l2, l);
        assert!(c
            .bands
            .iter()
            .zip(&c2.bands)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn out_of_range_band_is_rejected() {
        let (mut c, l) = chip(8, 8);
        c.bands[3] = 1.5;
        assert!(matches!(encode_chip(&c, &l), Err(Error::Invariant(_))));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let (c, l) = chip(8, 8);
        let mut bytes = encode_chip(&c, &l).unwrap();
        bytes[0] = b'X';
        let err = decode_chip(&bytes, "x").unwrap_err();
        assert_eq!(err.to_string(), "bad magic");
    }

    #[test]
    fn truncated_and_oversized_payloads() {
        let (c, l) = chip(8, 8);
        let bytes = encode_chip(&c, &l).unwrap();
        assert!(matches!(
            decode_chip(&bytes[..bytes.len() - 1], "x"),
            Err(Error::Truncated { .. })
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            decode_chip(&longer, "x"),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn wrong_channel_count_is_a_dimension_mismatch() {
        let mut bytes = Vec::new();
        Header {
            channels: 3,
            height: 8,
            width: 8,
            class_label: ClassLabel::Tomato,
        }
        .encode(&mut bytes);
        bytes.resize(24 + 3 * 64 * 4 + 64, 0);
        assert!(matches!(
            decode_chip(&bytes, "x"),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn nan_pixel_becomes_invalid_and_zero() {
        let (c, l) = chip(8, 8);
        let mut bytes = encode_chip(&c, &l).unwrap();
        // band 7, pixel 10
        let at = HEADER_LEN + (7 * 64 + 10) * 4;
        bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let (c2, l2) = decode_chip(&bytes, "x").unwrap();
        assert!(!c2.valid[10]);
        assert_eq!(l2.labels[10], 0);
        for b in 0..BANDS {
            assert_eq!(c2.bands[b * 64 + 10].to_bits(), 0);
        }
        assert_eq!(c2.valid_count(), 63);
    }

    #[test]
    fn hand_assembled_zero_file() {
        // Built byte by byte from the layout table, not via Header::encode.
        let mut bytes = b"AECHIP1\0".to_vec();
        bytes.extend_from_slice(&[64, 0, 0, 0]);
        bytes.extend_from_slice(&[8, 0, 0, 0]);
        bytes.extend_from_slice(&[8, 0, 0, 0]);
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        bytes.extend(std::iter::repeat_n(0u8, 64 * 64 * 4));
        let mut cells = vec![0u8; 64];
        cells[0] = 255;
        cells[63] = 1;
        bytes.extend_from_slice(&cells);
        assert_eq!(bytes.len(), 16_472);

        let (c, l) = decode_chip(&bytes, "hand").unwrap();
        assert_eq!(c.class_label, ClassLabel::NonTomato);
        assert!(c.bands.iter().all(|&v| v == 0.0));
        assert!(!c.valid[0]);
        assert!(c.valid[1..].iter().all(|&v| v));
        assert_eq!(l.labels[63], 1);
        assert_eq!(l.labels[1], 0);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field_01.aechip");
        let (c, l) = chip(8, 10);
        let n = write_chip(&c, &l, &path).unwrap();
        assert_eq!(n, std::fs::metadata(&path).unwrap().len() as usize);
        let (mut c2, l2) = read_chip(&path).unwrap();
        assert_eq!(c2.chip_id, "field_01");
        c2.chip_id = c.chip_id.clone();
        assert_eq!((c2, l2), (c, l));
    }

    #[test]
    fn unwritable_destination_errors() {
        let (c, l) = chip(8, 8);
        let err = write_chip(&c, &l, Path::new("/nonexistent-dir/x.aechip")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
