//! Spatial block splitting.
//!
//! Centroids are bucketed into square blocks of `block_size` meters. Blocks
//! are shuffled with the seed and handed out one at a time to the split
//! with the largest class-weighted deficit, so whole blocks always land in
//! a single split.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::chip::ClassLabel;
use super::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::rng::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = SplitRatios { train, val, test };
        let parts = r.as_array();
        if parts.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Config(format!("split ratios {parts:?} outside [0, 1]")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {parts:?} do not sum to 1")));
        }
        Ok(r)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

/// Block containing `centroid`.
pub fn block_index(centroid: (f64, f64), block_size: f64) -> (i64, i64) {
    (
        (centroid.0 / block_size).floor() as i64,
        (centroid.1 / block_size).floor() as i64,
    )
}

pub fn spatial_split(
    manifest: &DatasetManifest,
    ratios: SplitRatios,
    block_size: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if manifest.entries.is_empty() {
        return Err(Error::Split("empty manifest".into()));
    }
    if !(block_size > 0.0 && block_size.is_finite()) {
        return Err(Error::Config(format!("block size {block_size} must be positive")));
    }

    let mut blocks: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        blocks
            .entry(block_index(e.centroid, block_size))
            .or_default()
            .push(i);
    }
    if blocks.len() < 3 {
        return Err(Error::Split(format!(
            "fewer than 3 blocks ({}) at block size {block_size} m",
            blocks.len()
        )));
    }

    let mut order: Vec<Vec<usize>> = blocks.into_values().collect();
    order.shuffle(&mut seeded_rng(seed));

    let class_idx = |c: ClassLabel| c.as_u8() as usize;
    let mut class_totals = [0usize; 2];
    for e in &manifest.entries {
        class_totals[class_idx(e.class_label)] += 1;
    }
    let fractions = ratios.as_array();
    let mut assigned = [[0usize; 2]; 3];
    let mut out = manifest.clone();

    for block in &order {
        let mut in_block = [0usize; 2];
        for &i in block {
            in_block[class_idx(manifest.entries[i].class_label)] += 1;
        }
        let deficit = |s: usize| -> f64 {
            (0..2)
                .map(|c| {
                    let target = fractions[s] * class_totals[c] as f64;
                    in_block[c] as f64 * (target - assigned[s][c] as f64)
                })
                .sum()
        };
        let mut best = 0;
        for s in 1..3 {
            if deficit(s) > deficit(best) {
                best = s;
            }
        }
        for c in 0..2 {
            assigned[best][c] += in_block[c];
        }
        for &i in block {
            out.entries[i].split = Split::ASSIGNED[best];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chipdata::ManifestEntry;
    use rand::Rng;

    fn synthetic_manifest(n: usize, extent: f64, seed: u64) -> DatasetManifest {
        let mut rng = seeded_rng(seed);
        let entries = (0..n)
            .map(|i| ManifestEntry {
                chip_id: format!("f{i:05}"),
                path: format!("chips/f{i:05}.aechip"),
                class_label: if i % 2 == 0 {
                    ClassLabel::Tomato
                } else {
                    ClassLabel::NonTomato
                },
                centroid: (rng.random_range(0.0..extent), rng.random_range(0.0..extent)),
                split: Split::Unassigned,
            })
            .collect();
        DatasetManifest::new(entries, seed).unwrap()
    }

    fn ratios() -> SplitRatios {
        SplitRatios::new(0.70, 0.15, 0.15).unwrap()
    }

    #[test]
    fn whole_blocks_stay_together() {
        let m = synthetic_manifest(600, 60_000.0, 3);
        let s = spatial_split(&m, ratios(), 5000.0, 11).unwrap();
        let mut owner: BTreeMap<(i64, i64), Split> = BTreeMap::new();
        for e in &s.entries {
            assert_ne!(e.split, Split::Unassigned);
            let prev = owner.insert(block_index(e.centroid, 5000.0), e.split);
            assert!(prev.is_none_or(|p| p == e.split));
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let m = synthetic_manifest(300, 50_000.0, 1);
        let a = spatial_split(&m, ratios(), 5000.0, 5).unwrap();
        let b = spatial_split(&m, ratios(), 5000.0, 5).unwrap();
        assert_eq!(a, b);
        let c = spatial_split(&m, ratios(), 5000.0, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_block_is_rejected() {
        let m = synthetic_manifest(20, 100.0, 1);
        let err = spatial_split(&m, ratios(), 5000.0, 0).unwrap_err();
        assert!(err.to_string().contains("fewer than 3 blocks"));
    }

    #[test]
    fn bad_inputs() {
        let empty = DatasetManifest::new(vec![], 0).unwrap();
        assert!(spatial_split(&empty, ratios(), 5000.0, 0).is_err());
        let m = synthetic_manifest(20, 100_000.0, 1);
        assert!(spatial_split(&m, ratios(), 0.0, 0).is_err());
        assert!(SplitRatios::new(0.7, 0.2, 0.2).is_err());
    }

    #[test]
    fn ratios_and_class_balance_hold_with_many_blocks() {
        let m = synthetic_manifest(2000, 150_000.0, 8);
        let s = spatial_split(&m, ratios(), 5000.0, 2).unwrap();
        for (split, want) in Split::ASSIGNED.iter().zip(ratios().as_array()) {
            let members: Vec<_> = s.in_split(*split).collect();
            let got = members.len() as f64 / 2000.0;
            assert!((got - want).abs() <= 0.03, "{split:?}: {got} vs {want}");
            let tomato = members
                .iter()
                .filter(|e| e.class_label == ClassLabel::Tomato)
                .count() as f64
                / members.len() as f64;
            assert!((0.45..=0.55).contains(&tomato), "{split:?}: {tomato}");
        }
    }
}
