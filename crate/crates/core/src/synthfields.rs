//! Synthetic embedding fields with a known Bayes-optimal accuracy.
//!
//! Two class signatures sit in the 64-dimensional embedding cube. A chip is
//! an irregular field footprint surrounded by NoData: interior pixels are
//! the class signature plus isotropic Gaussian noise, pixels near the
//! footprint boundary are a random convex mix of both signatures plus
//! noise, and everything outside the footprint is invalid.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::chipdata::{ClassLabel, EmbeddingChip, LabelMask, Sample, BANDS};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng};

/// Bound on signature components, leaving headroom for noise before the
/// final clamp to [-1, 1].
pub const SIGNATURE_BOUND: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct SignaturePair {
    pub mu_tomato: Vec<f64>,
    pub mu_other: Vec<f64>,
    pub noise_sigma: f64,
    pub separation: f64,
}

impl SignaturePair {
    pub fn signature(&self, class: ClassLabel) -> &[f64] {
        match class {
            ClassLabel::Tomato => &self.mu_tomato,
            ClassLabel::NonTomato => &self.mu_other,
        }
    }
}

/// Two signatures `separation` apart along a random direction, centered on
/// a random point chosen so that both stay inside the component bound.
pub fn make_signature_pair(seed: u64, separation: f64, noise_sigma: f64) -> Result<SignaturePair> {
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!("separation {separation} must be >= 0")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma {noise_sigma} must be >= 0")));
    }
    let half = separation / 2.0;
    // equal-magnitude direction admits the largest separation
    let max_separation = 2.0 * SIGNATURE_BOUND * (BANDS as f64).sqrt();
    if separation > max_separation {
        return Err(Error::Config(format!(
            "separation {separation} cannot fit inside [-{SIGNATURE_BOUND}, {SIGNATURE_BOUND}]^{BANDS} (max {max_separation})"
        )));
    }
    let mut rng = seeded_rng(seed);
    let fits = |u: &[f64]| u.iter().all(|c| half * c.abs() <= SIGNATURE_BOUND);
    let mut direction = None;
    for _ in 0..64 {
        let g: Vec<f64> = (0..BANDS).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u: Vec<f64> = g.iter().map(|v| v / norm).collect();
        if fits(&u) {
            direction = Some(u);
            break;
        }
    }
    let u = direction.unwrap_or_else(|| {
        let s = 1.0 / (BANDS as f64).sqrt();
        (0..BANDS)
            .map(|_| if rng.random::<bool>() { s } else { -s })
            .collect()
    });
    let mut mu_tomato = Vec::with_capacity(BANDS);
    let mut mu_other = Vec::with_capacity(BANDS);
    for &uj in &u {
        let room = (SIGNATURE_BOUND - half * uj.abs()).max(0.0);
        let center = rng.random_range(-0.5..=0.5) * room;
        mu_tomato.push(center + half * uj);
        mu_other.push(center - half * uj);
    }
    Ok(SignaturePair {
        mu_tomato,
        mu_other,
        noise_sigma,
        separation,
    })
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Optimal per-pixel accuracy for two equal-prior isotropic Gaussians:
/// `Phi(d / (2 sigma))`. Ignores the clamp to [-1, 1].
pub fn bayes_accuracy(pair: &SignaturePair) -> f64 {
    if pair.noise_sigma == 0.0 {
        return if pair.separation > 0.0 { 1.0 } else { 0.5 };
    }
    normal_cdf(pair.separation / (2.0 * pair.noise_sigma))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub chip_height: usize,
    pub chip_width: usize,
    /// Width in pixels of the mixed band inside the footprint boundary.
    pub edge_mix_width: usize,
    /// NoData frame around the chip border.
    pub margin_width: usize,
    /// 0 gives rectangles; 1 gives strongly lobed outlines.
    pub field_irregularity: f64,
    pub noise_sigma: f64,
    pub separation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            chip_height: 64,
            chip_width: 64,
            edge_mix_width: 2,
            margin_width: 2,
            field_irregularity: 0.5,
            noise_sigma: 0.25,
            separation: 1.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chip_height < 16 || self.chip_width < 16 {
            return Err(Error::Config("synthetic chips must be at least 16x16".into()));
        }
        if 4 * self.edge_mix_width >= self.chip_height.min(self.chip_width) {
            return Err(Error::Config(
                "edge_mix_width must be below a quarter of the chip side".into(),
            ));
        }
        if 4 * self.margin_width >= self.chip_height.min(self.chip_width) {
            return Err(Error::Config(
                "margin_width must be below a quarter of the chip side".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.field_irregularity) {
            return Err(Error::Config("field_irregularity outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Interior,
    EdgeBand,
    Margin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldMask {
    pub height: usize,
    pub width: usize,
    pub regions: Vec<Region>,
}

impl FieldMask {
    /// Fraction of pixels inside the footprint (interior plus edge band).
    pub fn occupancy(&self) -> f64 {
        let inside = self.regions.iter().filter(|&&r| r != Region::Margin).count();
        inside as f64 / self.regions.len() as f64
    }
}

const MAX_MASK_ATTEMPTS: usize = 200;
const OCCUPANCY: (f64, f64) = (0.30, 0.80);

/// Seeded field footprint: a rectangle whose boundary radius is modulated
/// by low harmonics scaled by `field_irregularity`, clipped to the chip
/// minus its NoData frame and reduced to the 4-connected component holding
/// the center. Resamples until the footprint covers 30-80% of the chip.
pub fn generate_field_mask(config: &SynthConfig, seed: u64) -> Result<FieldMask> {
    config.validate()?;
    let (h, w) = (config.chip_height, config.chip_width);
    let m = config.margin_width;
    let mut rng = seeded_rng(seed);
    for _ in 0..MAX_MASK_ATTEMPTS {
        let cx = w as f64 / 2.0 + rng.random_range(-0.05..0.05) * w as f64;
        let cy = h as f64 / 2.0 + rng.random_range(-0.05..0.05) * h as f64;
        let a = rng.random_range(0.28..0.46) * w as f64;
        let b = rng.random_range(0.28..0.46) * h as f64;
        let harmonics: Vec<(f64, f64, f64)> = (2..=5)
            .map(|k| {
                let amp = rng.random_range(0.0..0.3) / (k as f64).sqrt();
                (k as f64, amp, rng.random_range(0.0..2.0 * PI))
            })
            .collect();

        let inside = |r: usize, c: usize| -> bool {
            if r < m || c < m || r >= h - m || c >= w - m {
                return false;
            }
            let dx = c as f64 + 0.5 - cx;
            let dy = r as f64 + 0.5 - cy;
            if config.field_irregularity == 0.0 {
                return dx.abs() <= a && dy.abs() <= b;
            }
            let theta = dy.atan2(dx);
            let rect = (a / theta.cos().abs()).min(b / theta.sin().abs());
            let wobble: f64 = harmonics
                .iter()
                .map(|&(k, amp, phase)| amp * (k * theta + phase).cos())
                .sum();
            let radius = rect * (1.0 + config.field_irregularity * wobble).max(0.3);
            dx.hypot(dy) <= radius
        };

        let mut footprint: Vec<bool> = (0..h * w).map(|i| inside(i / w, i % w)).collect();
        let center = (cy as usize).min(h - 1) * w + (cx as usize).min(w - 1);
        if !footprint[center] {
            continue;
        }
        keep_component(&mut footprint, h, w, center);

        let regions = classify(&footprint, h, w, config.edge_mix_width);
        let mask = FieldMask {
            height: h,
            width: w,
            regions,
        };
        let occ = mask.occupancy();
        let has_interior = mask.regions.contains(&Region::Interior);
        if (OCCUPANCY.0..=OCCUPANCY.1).contains(&occ) && has_interior {
            return Ok(mask);
        }
    }
    Err(Error::Config(format!(
        "no field footprint with occupancy in {OCCUPANCY:?} after {MAX_MASK_ATTEMPTS} attempts"
    )))
}

fn keep_component(footprint: &mut [bool], h: usize, w: usize, start: usize) {
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(i) = queue.pop_front() {
        let (r, c) = (i / w, i % w);
        let mut visit = |j: usize| {
            if footprint[j] && !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        };
        if r > 0 {
            visit(i - w);
        }
        if r + 1 < h {
            visit(i + w);
        }
        if c > 0 {
            visit(i - 1);
        }
        if c + 1 < w {
            visit(i + 1);
        }
    }
    footprint.copy_from_slice(&seen);
}

/// Footprint pixels within Chebyshev distance `band` of a non-footprint
/// pixel (or the chip edge) form the edge band.
fn classify(footprint: &[bool], h: usize, w: usize, band: usize) -> Vec<Region> {
    let b = band as isize;
    (0..h * w)
        .map(|i| {
            if !footprint[i] {
                return Region::Margin;
            }
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            let near_outside = (-b..=b).any(|dr| {
                (-b..=b).any(|dc| {
                    let (rr, cc) = (r + dr, c + dc);
                    rr < 0
                        || cc < 0
                        || rr >= h as isize
                        || cc >= w as isize
                        || !footprint[rr as usize * w + cc as usize]
                })
            });
            if near_outside {
                Region::EdgeBand
            } else {
                Region::Interior
            }
        })
        .collect()
}

/// Fill a chip from a field mask. Pixels are visited in row-major order;
/// each draws its mixing weight (edge band only) and then one noise value
/// per band.
pub fn synthesize_chip(
    pair: &SignaturePair,
    mask: &FieldMask,
    class_label: ClassLabel,
    chip_id: &str,
    seed: u64,
) -> Result<Sample> {
    if pair.mu_tomato.len() != BANDS || pair.mu_other.len() != BANDS {
        return Err(Error::DimensionMismatch("signatures must have 64 components".into()));
    }
    let (h, w) = (mask.height, mask.width);
    let n = h * w;
    let own = pair.signature(class_label);
    let other = pair.signature(class_label.opposite());
    let mut rng = seeded_rng(seed);
    let mut bands = vec![0.0f32; BANDS * n];
    let mut valid = vec![false; n];
    for (i, region) in mask.regions.iter().enumerate() {
        let alpha = match region {
            Region::Margin => continue,
            Region::Interior => 1.0,
            Region::EdgeBand => rng.random_range(0.5..=1.0),
        };
        valid[i] = true;
        for b in 0..BANDS {
            let base = if alpha == 1.0 {
                own[b]
            } else {
                alpha * own[b] + (1.0 - alpha) * other[b]
            };
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = if pair.noise_sigma == 0.0 {
                base
            } else {
                base + pair.noise_sigma * z
            };
            bands[b * n + i] = v.clamp(-1.0, 1.0) as f32;
        }
    }
    let chip = EmbeddingChip {
        chip_id: chip_id.to_string(),
        class_label,
        centroid: (0.0, 0.0),
        height: h,
        width: w,
        bands,
        valid,
    };
    let labels = LabelMask::uniform(&chip, class_label);
    Ok(Sample { chip, labels })
}

/// A whole synthetic dataset: balanced classes, one chip per `spacing`-meter
/// grid cell so that a blocking of the same size isolates every chip.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub pair: SignaturePair,
    pub samples: Vec<Sample>,
}

/// Chip-at-a-time dataset generation, so large datasets can be streamed to
/// disk. Chip `i` is tomato for even `i`.
#[derive(Clone, Debug)]
pub struct DatasetGenerator {
    pub config: SynthConfig,
    pub pair: SignaturePair,
    centroids: Vec<(f64, f64)>,
}

impl DatasetGenerator {
    pub fn new(config: &SynthConfig, chips: usize, spacing: f64) -> Result<Self> {
        config.validate()?;
        if chips == 0 {
            return Err(Error::Config("chip count must be positive".into()));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::Config("spacing must be positive".into()));
        }
        let pair = make_signature_pair(derive_seed(config.seed, &[0]), config.separation, config.noise_sigma)?;
        let side = (chips as f64).sqrt().ceil() as usize;
        let mut rng = seeded_rng(derive_seed(config.seed, &[1]));
        let mut cells: Vec<usize> = (0..side * side).collect();
        rand::seq::SliceRandom::shuffle(cells.as_mut_slice(), &mut rng);
        let centroids = cells[..chips]
            .iter()
            .map(|&cell| {
                let (gx, gy) = ((cell % side) as f64, (cell / side) as f64);
                (
                    (gx + rng.random_range(0.1..0.9)) * spacing,
                    (gy + rng.random_range(0.1..0.9)) * spacing,
                )
            })
            .collect();
        Ok(DatasetGenerator {
            config: *config,
            pair,
            centroids,
        })
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn chip_id(i: usize) -> String {
        format!("field_{i:05}")
    }

    pub fn chip(&self, i: usize) -> Result<Sample> {
        let class = if i.is_multiple_of(2) {
            ClassLabel::Tomato
        } else {
            ClassLabel::NonTomato
        };
        let chip_seed = derive_seed(self.config.seed, &[2, i as u64]);
        let mask = generate_field_mask(&self.config, derive_seed(chip_seed, &[0]))?;
        let mut s = synthesize_chip(&self.pair, &mask, class, &Self::chip_id(i), derive_seed(chip_seed, &[1]))?;
        s.chip.centroid = self.centroids[i];
        Ok(s)
    }
}

pub fn generate_dataset(config: &SynthConfig, chips: usize, spacing: f64) -> Result<SyntheticDataset> {
    let generator = DatasetGenerator::new(config, chips, spacing)?;
    let samples = (0..chips).map(|i| generator.chip(i)).collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset {
        pair: generator.pair,
        samples,
    })
}
