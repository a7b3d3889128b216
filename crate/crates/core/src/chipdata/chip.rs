use crate::error::{Error, Result};

/// Embedding bands per pixel.
pub const BANDS: usize = 64;
/// Smallest chip side accepted anywhere in the pipeline.
pub const MIN_SIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    NonTomato,
    Tomato,
}

impl ClassLabel {
    pub fn as_u8(self) -> u8 {
        match self {
            ClassLabel::NonTomato => 0,
            ClassLabel::Tomato => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ClassLabel::NonTomato),
            1 => Some(ClassLabel::Tomato),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::NonTomato => "non_tomato",
            ClassLabel::Tomato => "tomato",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "non_tomato" => Some(ClassLabel::NonTomato),
            "tomato" => Some(ClassLabel::Tomato),
            _ => None,
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            ClassLabel::NonTomato => ClassLabel::Tomato,
            ClassLabel::Tomato => ClassLabel::NonTomato,
        }
    }
}

/// A 64-band embedding raster clipped to one field, with its validity mask.
///
/// Bands are stored band-major: `bands[(b * height + row) * width + col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingChip {
    pub chip_id: String,
    pub class_label: ClassLabel,
    /// Planar centroid in meters.
    pub centroid: (f64, f64),
    pub height: usize,
    pub width: usize,
    pub bands: Vec<f32>,
    pub valid: Vec<bool>,
}

impl EmbeddingChip {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn band(&self, b: usize) -> &[f32] {
        let n = self.pixels();
        &self.bands[b * n..(b + 1) * n]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Checks the container invariants: sizes, minimum side, band range on
    /// valid pixels and zero fill on invalid ones.
    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::Invariant(format!(
                "chip {} is {}x{}, minimum side is {MIN_SIDE}",
                self.chip_id, self.height, self.width
            )));
        }
        let n = self.pixels();
        if self.bands.len() != BANDS * n || self.valid.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "chip {}: {} band values and {} mask cells for {}x{}",
                self.chip_id,
                self.bands.len(),
                self.valid.len(),
                self.height,
                self.width
            )));
        }
        for b in 0..BANDS {
            for (i, &v) in self.band(b).iter().enumerate() {
                if self.valid[i] {
                    if !(-1.0..=1.0).contains(&v) {
                        return Err(Error::Invariant(format!(
                            "chip {}: band {b} pixel {i} value {v} outside [-1, 1]",
                            self.chip_id
                        )));
                    }
                } else if v.to_bits() != 0 {
                    return Err(Error::Invariant(format!(
                        "chip {}: invalid pixel {i} carries nonzero band {b}",
                        self.chip_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-pixel ground truth paired with a chip. Labels at invalid pixels are
/// ignored by every consumer and normalized to 0 on load.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMask {
    /// Single-field mask: `label` everywhere the chip is valid.
    pub fn uniform(chip: &EmbeddingChip, label: ClassLabel) -> Self {
        let labels = chip
            .valid
            .iter()
            .map(|&v| if v { label.as_u8() } else { 0 })
            .collect();
        LabelMask {
            height: chip.height,
            width: chip.width,
            labels,
        }
    }

    pub fn validate_against(&self, chip: &EmbeddingChip) -> Result<()> {
        if self.height != chip.height || self.width != chip.width {
            return Err(Error::DimensionMismatch(format!(
                "labels {}x{} vs chip {}x{}",
                self.height, self.width, chip.height, chip.width
            )));
        }
        if self.labels.len() != chip.pixels() {
            return Err(Error::DimensionMismatch("label count".into()));
        }
        for (i, (&l, &v)) in self.labels.iter().zip(&chip.valid).enumerate() {
            if v && l > 1 {
                return Err(Error::Invariant(format!("label {l} at valid pixel {i}")));
            }
        }
        Ok(())
    }
}

/// A chip with its labels, as consumed by training and inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub chip: EmbeddingChip,
    pub labels: LabelMask,
}
