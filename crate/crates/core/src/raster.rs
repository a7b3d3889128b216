//! Single-band rasters and display previews.
//!
//! Rasters reuse the AECHIP1 layout with one channel. Previews are binary
//! netpbm images: P5 for probability and variance maps, P6 for
//! pseudo-RGB renderings of three embedding bands.

use std::fs;
use std::path::Path;

use crate::chipdata::format::{decode_f32s, Header, HEADER_LEN, INVALID_CELL};
use crate::chipdata::{ClassLabel, EmbeddingChip, BANDS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub class_label: ClassLabel,
    pub values: Vec<f32>,
    /// 0/1 label at valid pixels, 255 at invalid ones.
    pub cells: Vec<u8>,
}

impl Raster {
    pub fn valid(&self) -> Vec<bool> {
        self.cells.iter().map(|&c| c != INVALID_CELL).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.cells
            .iter()
            .map(|&c| if c == INVALID_CELL { 0 } else { c })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            channels: 1,
            height: self.height,
            width: self.width,
            class_label: self.class_label,
        };
        let mut out = Vec::with_capacity(header.payload_len());
        header.encode(&mut out);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.cells);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header = Header::decode(bytes)?;
        if header.channels != 1 {
            return Err(Error::DimensionMismatch(format!(
                "raster has {} channels, expected 1",
                header.channels
            )));
        }
        let n = header.height * header.width;
        let end = HEADER_LEN + 4 * n;
        Ok(Raster {
            height: header.height,
            width: header.width,
            class_label: header.class_label,
            values: decode_f32s(&bytes[HEADER_LEN..end]),
            cells: bytes[end..].to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P5 image mapping `[0, full_scale]` linearly onto `[0, 255]`; invalid
/// pixels are black.
pub fn encode_pgm(values: &[f64], valid: &[bool], height: usize, width: usize, full_scale: f64) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        values
            .iter()
            .zip(valid)
            .map(|(&v, &ok)| if ok { to_byte(v / full_scale) } else { 0 }),
    );
    out
}

/// P6 rendering of three embedding bands, each mapped `[-1, 1] -> [0, 255]`.
/// For display only; the network never sees it.
pub fn render_pseudo_rgb(chip: &EmbeddingChip, bands: [usize; 3]) -> Result<Vec<u8>> {
    if let Some(&b) = bands.iter().find(|&&b| b >= BANDS) {
        return Err(Error::Config(format!("band index {b} out of range 0..{BANDS}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", chip.width, chip.height).into_bytes();
    let planes = bands.map(|b| chip.band(b));
    for i in 0..chip.pixels() {
        for plane in &planes {
            out.push(to_byte((f64::from(plane[i]) + 1.0) / 2.0));
        }
    }
    Ok(out)
}
