//! AEMANIFEST text format.
//!
//! First line `AEMANIFEST\t1`, then one tab-separated record per chip:
//! `chip_id  path  class  x  y  split`. Lines starting with `#` are
//! metadata; `#generator_seed\t<n>` records the seed of synthetic sets.
//! Paths are relative to the manifest's directory unless absolute.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::chip::{ClassLabel, Sample};
use super::format::read_chip;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
const HEADER: &str = "AEMANIFEST";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub const ASSIGNED: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            "unassigned" => Some(Split::Unassigned),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub chip_id: String,
    pub path: String,
    pub class_label: ClassLabel,
    pub centroid: (f64, f64),
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub generator_seed: u64,
    pub format_version: u32,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, generator_seed: u64) -> Result<Self> {
        let m = DatasetManifest {
            entries,
            generator_seed,
            format_version: MANIFEST_VERSION,
        };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.chip_id.as_str()) {
                return Err(Error::Invariant(format!("duplicate chip_id {}", e.chip_id)));
            }
        }
        Ok(())
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.in_split(split).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\t{}\n", self.format_version);
        writeln!(s, "#generator_seed\t{}", self.generator_seed).unwrap();
        for e in &self.entries {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                e.chip_id,
                e.path,
                e.class_label.as_str(),
                e.centroid.0,
                e.centroid.1,
                e.split.as_str()
            )
            .unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or(Error::Manifest {
            line: 1,
            reason: "empty file".into(),
        })?;
        let version = first
            .strip_prefix(HEADER)
            .and_then(|r| r.strip_prefix('\t'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or(Error::Manifest {
                line: 1,
                reason: format!("expected \"{HEADER}\\t{MANIFEST_VERSION}\""),
            })?;
        if version != MANIFEST_VERSION {
            return Err(Error::Manifest {
                line: 1,
                reason: format!("unsupported version {version}"),
            });
        }
        let mut generator_seed = 0;
        let mut entries = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let bad = |reason: &str| Error::Manifest {
                line: line_no,
                reason: reason.to_string(),
            };
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some(v) = meta.strip_prefix("generator_seed\t") {
                    generator_seed = v.parse().map_err(|_| bad("bad generator_seed"))?;
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(bad(&format!("expected 6 fields, found {}", fields.len())));
            }
            entries.push(ManifestEntry {
                chip_id: fields[0].to_string(),
                path: fields[1].to_string(),
                class_label: ClassLabel::parse(fields[2]).ok_or_else(|| bad("bad class"))?,
                centroid: (
                    fields[3].parse().map_err(|_| bad("bad x"))?,
                    fields[4].parse().map_err(|_| bad("bad y"))?,
                ),
                split: Split::parse(fields[5]).ok_or_else(|| bad("bad split"))?,
            });
        }
        let m = DatasetManifest {
            entries,
            generator_seed,
            format_version: version,
        };
        m.check_unique()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Loads every chip of `split` (all chips when `None`) in manifest order.
/// Relative paths resolve against `base_dir`.
pub fn load_samples(
    manifest: &DatasetManifest,
    base_dir: &Path,
    split: Option<Split>,
) -> Result<Vec<Sample>> {
    manifest
        .entries
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .map(|e| {
            let (mut chip, labels) = read_chip(&base_dir.join(&e.path))?;
            if chip.class_label != e.class_label {
                return Err(Error::Invariant(format!(
                    "chip {} is {} on disk but {} in the manifest",
                    e.chip_id,
                    chip.class_label.as_str(),
                    e.class_label.as_str()
                )));
            }
            chip.chip_id = e.chip_id.clone();
            chip.centroid = e.centroid;
            Ok(Sample { chip, labels })
        })
        .collect()
}
