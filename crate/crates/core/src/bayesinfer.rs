//! Monte Carlo dropout inference.
//!
//! Each chip is run `T` times with dropout active and normalization frozen.
//! The per-pixel predictive mean and population variance of the tomato
//! probability are streamed in pass order in double precision.

use crate::chipdata::format::INVALID_CELL;
use crate::chipdata::{chip_tensor, crop_map, ClassLabel, EmbeddingChip};
use crate::error::{Error, Result};
use crate::objective::sigmoid;
use crate::raster::{encode_pgm, Raster};
use crate::rng::hash_bytes;
use crate::scalar::Scalar;
use crate::segnet::{forward_with_seeds, ForwardMode, ParameterSet};

pub const DEFAULT_PASSES: usize = 100;
pub const DEFAULT_EDGE_DISTANCE: usize = 2;
/// Passes evaluated together in one batched forward.
const PASS_CHUNK: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct McConfig {
    pub passes: usize,
    pub base_seed: u64,
    pub store_samples: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            passes: DEFAULT_PASSES,
            base_seed: 0,
            store_samples: false,
        }
    }
}

/// Dropout seed of pass `t` on chip `chip_id`.
pub fn pass_seed(base_seed: u64, chip_id: &str, t: usize) -> u64 {
    let mut bytes = chip_id.as_bytes().to_vec();
    bytes.extend_from_slice(&(t as u64).to_le_bytes());
    hash_bytes(base_seed, &bytes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMaps {
    pub height: usize,
    pub width: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub valid: Vec<bool>,
    /// Per-pass probability maps, when requested.
    pub samples: Option<Vec<Vec<f64>>>,
}

/// Pass-ordered Welford accumulator over whole maps.
#[derive(Clone, Debug)]
pub struct StreamingMoments {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl StreamingMoments {
    pub fn new(len: usize) -> Self {
        StreamingMoments {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let k = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / k;
            *s += d * (v - *m);
        }
    }

    /// Mean and population variance.
    pub fn finish(self) -> (Vec<f64>, Vec<f64>) {
        let n = self.count.max(1) as f64;
        let var = self.m2.into_iter().map(|s| (s / n).max(0.0)).collect();
        (self.mean, var)
    }
}

pub fn mc_predict<T: Scalar>(
    params: &ParameterSet<T>,
    chip: &EmbeddingChip,
    config: &McConfig,
) -> Result<UncertaintyMaps> {
    if config.passes < 1 {
        return Err(Error::Config("at least one Monte Carlo pass is required".into()));
    }
    let depth = params.config().depth;
    let (h, w) = (chip.height, chip.width);
    let mut moments = StreamingMoments::new(h * w);
    let mut stored = config.store_samples.then(|| Vec::with_capacity(config.passes));
    let mut t0 = 0;
    while t0 < config.passes {
        let k = PASS_CHUNK.min(config.passes - t0);
        let input = chip_tensor::<T>(chip, depth, k);
        let seeds: Vec<u64> = (t0..t0 + k)
            .map(|t| pass_seed(config.base_seed, &chip.chip_id, t))
            .collect();
        let logits = forward_with_seeds(params, &input, ForwardMode::McDropout, &seeds)?;
        for j in 0..k {
            let probs: Vec<f64> = crop_map(logits.sample(j), logits.w, h, w)
                .iter()
                .map(|z| sigmoid(z.as_f64()))
                .collect();
            moments.push(&probs);
            if let Some(s) = stored.as_mut() {
                s.push(probs);
            }
        }
        t0 += k;
    }
    let (mean, variance) = moments.finish();
    Ok(UncertaintyMaps {
        height: h,
        width: w,
        mean,
        variance,
        valid: chip.valid.clone(),
        samples: stored,
    })
}

impl UncertaintyMaps {
    fn raster(&self, values: &[f64], class_label: ClassLabel, labels: &[u8]) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            class_label,
            values: values.iter().map(|&v| v as f32).collect(),
            cells: self
                .valid
                .iter()
                .zip(labels)
                .map(|(&ok, &l)| if ok { l } else { INVALID_CELL })
                .collect(),
        }
    }

    pub fn mean_raster(&self, class_label: ClassLabel, labels: &[u8]) -> Raster {
        self.raster(&self.mean, class_label, labels)
    }

    pub fn variance_raster(&self, class_label: ClassLabel, labels: &[u8]) -> Raster {
        self.raster(&self.variance, class_label, labels)
    }

    /// P5 preview, `[0, 1] -> [0, 255]`.
    pub fn mean_pgm(&self) -> Vec<u8> {
        encode_pgm(&self.mean, &self.valid, self.height, self.width, 1.0)
    }

    /// P5 preview, `[0, 0.25] -> [0, 255]`.
    pub fn variance_pgm(&self) -> Vec<u8> {
        encode_pgm(&self.variance, &self.valid, self.height, self.width, 0.25)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeSummary {
    pub edge_median_var: f64,
    pub interior_median_var: f64,
    pub edge_pixel_count: usize,
    pub interior_pixel_count: usize,
}

/// Exact median; mean of the two middle values for even counts.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Valid pixels with an invalid pixel, the chip border or a different
/// label within Chebyshev distance `edge_distance`.
pub fn edge_pixels(labels: &[u8], valid: &[bool], height: usize, width: usize, edge_distance: usize) -> Vec<bool> {
    let d = edge_distance as isize;
    let (h, w) = (height as isize, width as isize);
    (0..height * width)
        .map(|i| {
            if !valid[i] {
                return false;
            }
            let (r, c) = ((i / width) as isize, (i % width) as isize);
            (-d..=d).any(|dr| {
                (-d..=d).any(|dc| {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= h || cc >= w {
                        return true;
                    }
                    let j = (rr * w + cc) as usize;
                    !valid[j] || labels[j] != labels[i]
                })
            })
        })
        .collect()
}

pub fn edge_interior_summary(
    variance: &[f64],
    labels: &[u8],
    valid: &[bool],
    height: usize,
    width: usize,
    edge_distance: usize,
) -> Result<EdgeSummary> {
    let n = height * width;
    if variance.len() != n || labels.len() != n || valid.len() != n {
        return Err(Error::DimensionMismatch("variance, labels and mask must align".into()));
    }
    let edge = edge_pixels(labels, valid, height, width, edge_distance);
    let mut e = Vec::new();
    let mut inner = Vec::new();
    for i in (0..n).filter(|&i| valid[i]) {
        if edge[i] {
            e.push(variance[i]);
        } else {
            inner.push(variance[i]);
        }
    }
    let (edge_pixel_count, interior_pixel_count) = (e.len(), inner.len());
    let interior_median_var = median(&mut inner).ok_or_else(|| {
        Error::Config(format!("no interior pixels at edge distance {edge_distance}"))
    })?;
    let edge_median_var = median(&mut e).unwrap_or(f64::NAN);
    Ok(EdgeSummary {
        edge_median_var,
        interior_median_var,
        edge_pixel_count,
        interior_pixel_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chipdata::Sample;
    use crate::segnet::{forward, init_params, UNetConfig};
    use crate::synthfields::{generate_dataset, SynthConfig};

    fn chip() -> Sample {
        let cfg = SynthConfig {
            chip_height: 16,
            chip_width: 16,
            edge_mix_width: 1,
            margin_width: 1,
            ..Default::default()
        };
        generate_dataset(&cfg, 1, 5000.0).unwrap().samples.remove(0)
    }

    fn params(rate: f64) -> ParameterSet<f64> {
        let cfg = UNetConfig {
            base_width: 2,
            depth: 2,
            dropout_rate: rate,
            ..Default::default()
        };
        let mut p: ParameterSet<f64> = init_params(&cfg, 3).unwrap();
        for t in p.running.iter_mut().filter(|t| t.name.ends_with("running_var")) {
            t.data.fill(1.0);
        }
        p
    }

    #[test]
    fn no_dropout_means_no_variance() {
        let s = chip();
        let p = params(0.0);
        let maps = mc_predict(&p, &s.chip, &McConfig { passes: 7, ..Default::default() }).unwrap();
        let input = chip_tensor::<f64>(&s.chip, 2, 1);
        let logits = forward(&p, &input, ForwardMode::Eval, 0).unwrap();
        let eval: Vec<f64> = crop_map(logits.sample(0), logits.w, 16, 16)
            .iter()
            .map(|&z| sigmoid(z))
            .collect();
        assert!(maps.variance.iter().all(|&v| v == 0.0));
        for (a, b) in maps.mean.iter().zip(&eval) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn single_pass_has_zero_variance() {
        let s = chip();
        let maps = mc_predict(&params(0.5), &s.chip, &McConfig { passes: 1, ..Default::default() }).unwrap();
        assert!(maps.variance.iter().all(|&v| v == 0.0));
        assert!(mc_predict(&params(0.5), &s.chip, &McConfig { passes: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn streamed_moments_match_two_pass() {
        let s = chip();
        let cfg = McConfig {
            passes: 45,
            base_seed: 8,
            store_samples: true,
        };
        let maps = mc_predict(&params(0.5), &s.chip, &cfg).unwrap();
        let samples = maps.samples.as_ref().unwrap();
        assert_eq!(samples.len(), 45);
        let mut any_var = false;
        for i in 0..maps.mean.len() {
            let mean = samples.iter().map(|m| m[i]).sum::<f64>() / 45.0;
            let var = samples.iter().map(|m| (m[i] - mean).powi(2)).sum::<f64>() / 45.0;
            assert!((mean - maps.mean[i]).abs() < 1e-9);
            assert!((var - maps.variance[i]).abs() < 1e-9);
            assert!(maps.variance[i] <= maps.mean[i] * (1.0 - maps.mean[i]) + 1e-9);
            any_var |= var > 0.0;
        }
        assert!(any_var);
        let again = mc_predict(&params(0.5), &s.chip, &cfg).unwrap();
        assert_eq!(maps, again);
    }

    #[test]
    fn pass_seeds_depend_on_every_input() {
        let a = pass_seed(1, "field_00001", 3);
        assert_ne!(a, pass_seed(2, "field_00001", 3));
        assert_ne!(a, pass_seed(1, "field_00002", 3));
        assert_ne!(a, pass_seed(1, "field_00001", 4));
        assert_eq!(a, pass_seed(1, "field_00001", 3));
    }

    #[test]
    fn border_ring_versus_inside() {
        let (h, w) = (8, 8);
        let var: Vec<f64> = (0..64)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                if r < 2 || c < 2 || r >= h - 2 || c >= w - 2 {
                    0.2
                } else {
                    0.01
                }
            })
            .collect();
        let s = edge_interior_summary(&var, &[1; 64], &[true; 64], h, w, 2).unwrap();
        assert_eq!(s.edge_median_var, 0.2);
        assert_eq!(s.interior_median_var, 0.01);
        assert_eq!((s.edge_pixel_count, s.interior_pixel_count), (48, 16));

        let flat = edge_interior_summary(&[0.07; 64], &[0; 64], &[true; 64], h, w, 2).unwrap();
        assert_eq!(flat.edge_median_var, flat.interior_median_var);
        assert!(edge_interior_summary(&[0.0; 64], &[0; 64], &[true; 64], h, w, 4).is_err());
    }

    #[test]
    fn label_and_validity_boundaries_count() {
        let (h, w) = (12, 12);
        let labels: Vec<u8> = (0..144).map(|i| u8::from(i % w >= 6)).collect();
        let valid = vec![true; 144];
        let edge = edge_pixels(&labels, &valid, h, w, 1);
        assert!(edge[5 * w + 5] && edge[5 * w + 6]);
        assert!(!edge[5 * w + 3]);
        let mut holed = valid.clone();
        holed[5 * w + 3] = false;
        let edge = edge_pixels(&labels, &holed, h, w, 1);
        assert!(edge[4 * w + 2] && !edge[5 * w + 3]);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn previews_scale_linearly() {
        let maps = UncertaintyMaps {
            height: 1,
            width: 3,
            mean: vec![0.0, 0.5, 1.0],
            variance: vec![0.0, 0.125, 0.25],
            valid: vec![true, true, false],
            samples: None,
        };
        let m = maps.mean_pgm();
        assert_eq!(&m[m.len() - 3..], &[0, 128, 0]);
        let v = maps.variance_pgm();
        assert_eq!(&v[v.len() - 3..], &[0, 128, 0]);
        let r = maps.variance_raster(ClassLabel::Tomato, &[1, 1, 1]);
        assert_eq!(r.cells, vec![1, 1, INVALID_CELL]);
        assert_eq!(Raster::decode(&r.encode()).unwrap(), r);
    }
}
