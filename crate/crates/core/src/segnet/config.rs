use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of 2x downsamplings.
    pub depth: usize,
    pub dropout_rate: f64,
    pub norm_enabled: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 64,
            base_width: 32,
            depth: 3,
            dropout_rate: 0.2,
            norm_enabled: true,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 1 || self.base_width < 1 {
            return Err(Error::Config("in_channels and base_width must be >= 1".into()));
        }
        if !(1..=5).contains(&self.depth) {
            return Err(Error::Config(format!("depth {} outside 1..=5", self.depth)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Feature width at encoder/decoder level `level`.
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Encoder levels followed by spatial dropout (the bottleneck included).
    pub fn encoder_dropout(&self, level: usize) -> bool {
        level + 2 >= self.depth
    }

    /// Decoder levels followed by spatial dropout.
    pub fn decoder_dropout(&self, level: usize) -> bool {
        level + 1 == self.depth
    }
}

/// How a forward pass treats dropout and normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Dropout active, batch statistics.
    Train,
    /// No dropout, running statistics.
    Eval,
    /// Dropout active, running statistics.
    McDropout,
}

impl ForwardMode {
    pub fn dropout_active(self) -> bool {
        !matches!(self, ForwardMode::Eval)
    }

    pub fn batch_stats(self) -> bool {
        matches!(self, ForwardMode::Train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_sites_for_default_depth() {
        let c = UNetConfig::default();
        let enc: Vec<_> = (0..=3).filter(|&l| c.encoder_dropout(l)).collect();
        assert_eq!(enc, vec![1, 2, 3]);
        let dec: Vec<_> = (0..3).filter(|&l| c.decoder_dropout(l)).collect();
        assert_eq!(dec, vec![2]);
    }

    #[test]
    fn validation() {
        assert!(UNetConfig::default().validate().is_ok());
        let bad = UNetConfig {
            depth: 6,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = UNetConfig {
            dropout_rate: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
