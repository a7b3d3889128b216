//! Pixel and chip metrics over valid pixels, tomato as the positive class.
//!
//! Pixels are counted positive when `prob > threshold` (ties are negative).
//! Counts are pooled over all chips before any ratio is taken. A ratio with
//! a zero denominator is 1.0, since its error count is then zero too.

use std::fmt::Write as _;

use num_traits::Float;

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// One probability map with its labels and validity.
#[derive(Clone, Copy, Debug)]
pub struct MapRef<'a, F> {
    pub probs: &'a [F],
    pub labels: &'a [u8],
    pub valid: &'a [bool],
}

impl<'a, F> MapRef<'a, F> {
    pub fn new(probs: &'a [F], labels: &'a [u8], valid: &'a [bool]) -> Result<Self> {
        if probs.len() != labels.len() || probs.len() != valid.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} probabilities, {} labels, {} mask cells",
                probs.len(),
                labels.len(),
                valid.len()
            )));
        }
        Ok(MapRef {
            probs,
            labels,
            valid,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(())
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn accumulate<F: Float>(&mut self, map: MapRef<'_, F>, threshold: f64) -> Result<()> {
        check_threshold(threshold)?;
        for ((&p, &y), &v) in map.probs.iter().zip(map.labels).zip(map.valid) {
            if !v {
                continue;
            }
            let predicted = p.to_f64().is_some_and(|p| p > threshold);
            match (predicted, y == 1) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => self.tn += 1,
            }
        }
        Ok(())
    }
}

/// Confusion counts pooled over `maps`.
pub fn confusion<F: Float>(maps: &[MapRef<'_, F>], threshold: f64) -> Result<ConfusionCounts> {
    let mut c = ConfusionCounts::default();
    for &m in maps {
        c.accumulate(m, threshold)?;
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn pixel_metrics(c: &ConfusionCounts) -> Result<PixelMetrics> {
    if c.total() == 0 {
        return Err(Error::EmptyValidMask);
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    // harmonic mean of precision and recall, written in counts
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    Ok(PixelMetrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        f1,
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
    })
}

/// Fraction of chips whose valid-pixel mean probability lands on the side
/// of `threshold` matching the chip's class. The class of a chip is the
/// majority label over its valid pixels.
pub fn chip_accuracy<F: Float>(maps: &[MapRef<'_, F>], threshold: f64) -> Result<f64> {
    check_threshold(threshold)?;
    if maps.is_empty() {
        return Err(Error::Config("no chips to score".into()));
    }
    let mut correct = 0usize;
    for m in maps {
        let (mut n, mut psum, mut ysum) = (0usize, 0.0f64, 0usize);
        for ((&p, &y), &v) in m.probs.iter().zip(m.labels).zip(m.valid) {
            if v {
                n += 1;
                psum += p.to_f64().unwrap_or(f64::NAN);
                ysum += usize::from(y == 1);
            }
        }
        if n == 0 {
            return Err(Error::EmptyValidMask);
        }
        let predicted = psum / n as f64 > threshold;
        let actual = 2 * ysum > n;
        correct += usize::from(predicted == actual);
    }
    Ok(correct as f64 / maps.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub pixel_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub chip_accuracy: f64,
    pub counts: ConfusionCounts,
    pub n_chips: usize,
}

const ROWS: [&str; 6] = [
    "Pixel Accuracy",
    "Precision",
    "Recall",
    "F1 Score",
    "Intersection over Union (IoU)",
    "Chip Accuracy",
];
const KEYS: [&str; 6] = [
    "pixel_accuracy",
    "precision",
    "recall",
    "f1",
    "iou",
    "chip_accuracy",
];

impl MetricsReport {
    /// Pixel metrics and chip accuracy over the same maps.
    pub fn compute<F: Float>(maps: &[MapRef<'_, F>], threshold: f64) -> Result<Self> {
        let counts = confusion(maps, threshold)?;
        let px = pixel_metrics(&counts)?;
        Ok(MetricsReport {
            pixel_accuracy: px.accuracy,
            precision: px.precision,
            recall: px.recall,
            f1: px.f1,
            iou: px.iou,
            chip_accuracy: chip_accuracy(maps, threshold)?,
            counts,
            n_chips: maps.len(),
        })
    }

    fn values(&self) -> [f64; 6] {
        [
            self.pixel_accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.iou,
            self.chip_accuracy,
        ]
    }

    /// Aligned table followed by a `key=value` block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<32}{:>10}", "Metric", "Score").unwrap();
        for (row, v) in ROWS.iter().zip(self.values()) {
            writeln!(s, "{row:<32}{v:>10.6}").unwrap();
        }
        s.push('\n');
        for (key, v) in KEYS.iter().zip(self.values()) {
            writeln!(s, "{key}={v:.6}").unwrap();
        }
        let c = &self.counts;
        writeln!(s, "tp={}\nfp={}\nfn={}\ntn={}", c.tp, c.fp, c.fn_, c.tn).unwrap();
        writeln!(s, "n_chips={}", self.n_chips).unwrap();
        s
    }

    /// Reads the `key=value` block written by [`MetricsReport::to_text`].
    pub fn parse(text: &str) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            text.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| Error::Invariant(format!("metrics text lacks {key}")))
        };
        let f = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Invariant(format!("bad value for {key}")))
        };
        let u = |key: &str| -> Result<u64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Invariant(format!("bad value for {key}")))
        };
        Ok(MetricsReport {
            pixel_accuracy: f("pixel_accuracy")?,
            precision: f("precision")?,
            recall: f("recall")?,
            f1: f("f1")?,
            iou: f("iou")?,
            chip_accuracy: f("chip_accuracy")?,
            counts: ConfusionCounts {
                tp: u("tp")?,
                fp: u("fp")?,
                fn_: u("fn")?,
                tn: u("tn")?,
            },
            n_chips: u("n_chips")? as usize,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    #[test]
    fn hand_counted_confusion() {
        let y = [1u8, 1, 0, 0];
        let p = [0.9f64, 0.1, 0.2, 0.8];
        let v = [true; 4];
        let c = confusion(&[MapRef::new(&p, &y, &v).unwrap()], 0.5).unwrap();
        assert_eq!(c, counts(1, 1, 1, 1));
        let none = [false; 4];
        let c = confusion(&[MapRef::new(&p, &y, &none).unwrap()], 0.5).unwrap();
        assert_eq!(c, ConfusionCounts::default());
        let half = [0.5f64; 4];
        let c = confusion(&[MapRef::new(&half, &y, &v).unwrap()], 0.5).unwrap();
        assert_eq!(c, counts(0, 0, 2, 2));
    }

    #[test]
    fn hand_metrics() {
        let m = pixel_metrics(&counts(1, 1, 1, 1)).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (0.5, 0.5, 0.5, 0.5));
        assert!((m.iou - 1.0 / 3.0).abs() < 1e-15);
        let m = pixel_metrics(&counts(7, 0, 0, 3)).unwrap();
        assert_eq!(m, PixelMetrics { accuracy: 1.0, precision: 1.0, recall: 1.0, f1: 1.0, iou: 1.0 });
        assert!(pixel_metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn degenerate_denominators() {
        // no positives anywhere, all predicted negative
        let m = pixel_metrics(&counts(0, 0, 0, 5)).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.iou), (1.0, 1.0, 1.0, 1.0));
        // nothing predicted positive but positives exist
        let m = pixel_metrics(&counts(0, 0, 4, 5)).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.iou), (1.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn chip_accuracy_uses_mean_probability() {
        let p: Vec<f64> = (0..10).map(|i| if i < 6 { 0.9 } else { 0.4 }).collect();
        let y = [1u8; 10];
        let v = [true; 10];
        let map = MapRef::new(&p, &y, &v).unwrap();
        assert_eq!(chip_accuracy(&[map], 0.5).unwrap(), 1.0);
        let y0 = [0u8; 10];
        let wrong = MapRef::new(&p, &y0, &v).unwrap();
        assert_eq!(chip_accuracy(&[map, wrong], 0.5).unwrap(), 0.5);
        let none = [false; 10];
        assert!(chip_accuracy(&[MapRef::new(&p, &y, &none).unwrap()], 0.5).is_err());
    }

    #[test]
    fn report_text_roundtrip() {
        let p = [0.9f64, 0.1, 0.2, 0.8];
        let y = [1u8, 1, 0, 0];
        let v = [true; 4];
        let r = MetricsReport::compute(&[MapRef::new(&p, &y, &v).unwrap()], 0.5).unwrap();
        let text = r.to_text();
        assert!(text.contains("Intersection over Union (IoU)"));
        assert!(text.contains("pixel_accuracy=0.500000"));
        let back = MetricsReport::parse(&text).unwrap();
        assert_eq!((back.counts, back.n_chips), (r.counts, r.n_chips));
        for (a, b) in back.values().iter().zip(r.values()) {
            assert!((a - b).abs() <= 5e-7);
        }
    }

    fn instance(seed: u64, n: usize) -> (Vec<f64>, Vec<u8>, Vec<bool>) {
        use rand::Rng;
        let mut rng = crate::rng::seeded_rng(seed);
        let p = (0..n).map(|_| rng.random::<f64>()).collect();
        let y = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        let v = (0..n).map(|_| rng.random::<f64>() > 0.2).collect();
        (p, y, v)
    }

    proptest! {
        #[test]
        fn pooling_is_additive(seed in any::<u64>(), split in 1usize..99) {
            let (p, y, v) = instance(seed, 100);
            let all = confusion(&[MapRef::new(&p, &y, &v).unwrap()], 0.5).unwrap();
            let a = MapRef::new(&p[..split], &y[..split], &v[..split]).unwrap();
            let b = MapRef::new(&p[split..], &y[split..], &v[split..]).unwrap();
            let mut sum = confusion(&[a], 0.5).unwrap();
            sum.add(&confusion(&[b], 0.5).unwrap());
            prop_assert_eq!(all, sum);
            prop_assert_eq!(all, confusion(&[a, b], 0.5).unwrap());
        }

        #[test]
        fn threshold_monotonicity(seed in any::<u64>(), t1 in 0.01f64..0.98, dt in 0.0f64..0.5) {
            let (p, y, v) = instance(seed, 200);
            let t2 = (t1 + dt).min(0.99);
            let m = MapRef::new(&p, &y, &v).unwrap();
            let lo = confusion(&[m], t1).unwrap();
            let hi = confusion(&[m], t2).unwrap();
            prop_assert!(hi.tp <= lo.tp);
            prop_assert!(hi.tn >= lo.tn);
        }

        #[test]
        fn iou_never_exceeds_f1(tp in 1u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
            let m = pixel_metrics(&counts(tp, fp, fn_, tn)).unwrap();
            prop_assert!(m.iou <= m.f1 + 1e-15);
            prop_assert!(m.f1 <= 1.0);
            if fp + fn_ == 0 {
                prop_assert_eq!(m.iou, m.f1);
            } else {
                prop_assert!(m.iou < m.f1);
            }
            let harmonic = 2.0 * m.precision * m.recall / (m.precision + m.recall);
            prop_assert!((m.f1 - harmonic).abs() < 1e-15);
        }
    }
}
