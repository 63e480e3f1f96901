//! Dataset plumbing: TSV manifests, sample loading, and deterministic
//! epoch-permutation batch iteration.
//!
//! Dataset layout: `root/{images,masks}/<id>.png` plus manifest files
//! `train.tsv` / `val.tsv` / `test.tsv` next to them. A manifest starts
//! with `#`-comment header lines (format version, dataset kind, split,
//! angle normalization scale) followed by a column header and one row per
//! sample; absent fields hold `-`.

pub mod imgproc;
pub mod preprocess;
pub mod synth;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DatasetKind;
use crate::rng;
use crate::tensor::ArrayDyn;

pub const MANIFEST_VERSION: &str = "roadmtl-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Image path relative to the manifest's root.
    pub image: String,
    /// Mask path relative to the root, when annotated.
    pub mask: Option<String>,
    /// Raw (un-normalized) steering angle.
    pub angle_raw: Option<f64>,
    pub timestamp: Option<String>,
}

/// One loaded sample. Angles are normalized to `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `[3,H,W]` in `[0,1]`.
    pub image: ArrayDyn,
    /// `[1,H,W]` binary, present on source samples and annotated target
    /// evaluation samples.
    pub road_mask: Option<ArrayDyn>,
    pub steer_angle: Option<f64>,
    pub kind: DatasetKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub kind: DatasetKind,
    pub split: Split,
    /// Angle normalization scale: normalized = raw / max_angle.
    pub max_angle: f64,
    pub entries: Vec<ManifestEntry>,
}

fn kind_str(kind: DatasetKind) -> &'static str {
    match kind {
        DatasetKind::Source => "source",
        DatasetKind::Target => "target",
    }
}

fn parse_kind(s: &str) -> Result<DatasetKind> {
    match s {
        "source" => Ok(DatasetKind::Source),
        "target" => Ok(DatasetKind::Target),
        other => Err(Error::Data(format!("unknown dataset kind {other:?}"))),
    }
}

fn opt_str(v: &Option<String>) -> &str {
    v.as_deref().unwrap_or("-")
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "# {MANIFEST_VERSION}").unwrap();
        writeln!(out, "# kind: {}", kind_str(self.kind)).unwrap();
        writeln!(out, "# split: {}", self.split.as_str()).unwrap();
        writeln!(out, "# max_angle: {}", self.max_angle).unwrap();
        writeln!(out, "id\timage\tmask\tangle\ttimestamp").unwrap();
        for e in &self.entries {
            let angle = e.angle_raw.map(|a| a.to_string());
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                e.id,
                e.image,
                opt_str(&e.mask),
                opt_str(&angle),
                opt_str(&e.timestamp)
            )
            .unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(format!("writing manifest {}", path.display()), e))
    }

    /// Parses a manifest; `root` becomes the manifest's directory. Checks
    /// that every referenced file exists and that angles are finite.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
        let root = path
            .parent()
            .ok_or_else(|| Error::Data(format!("manifest {} has no parent directory", path.display())))?
            .to_path_buf();

        let (mut kind, mut split, mut max_angle) = (None, None, None);
        let mut entries = Vec::new();
        let mut saw_columns = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(v) = comment.strip_prefix("kind:") {
                    kind = Some(parse_kind(v.trim())?);
                } else if let Some(v) = comment.strip_prefix("split:") {
                    split = Some(Split::parse(v.trim())?);
                } else if let Some(v) = comment.strip_prefix("max_angle:") {
                    max_angle = Some(v.trim().parse::<f64>().map_err(|_| {
                        Error::Data(format!("bad max_angle {v:?} in {}", path.display()))
                    })?);
                }
                continue;
            }
            if !saw_columns {
                // first non-comment line is the column header
                if line != "id\timage\tmask\tangle\ttimestamp" {
                    return Err(Error::Data(format!(
                        "unexpected manifest columns in {}: {line:?}",
                        path.display()
                    )));
                }
                saw_columns = true;
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::Data(format!(
                    "{}:{}: expected 5 tab-separated fields, got {}",
                    path.display(),
                    lineno + 1,
                    fields.len()
                )));
            }
            let parse_opt = |s: &str| if s == "-" { None } else { Some(s.to_string()) };
            let angle_raw = match fields[3] {
                "-" => None,
                s => {
                    let a = s.parse::<f64>().map_err(|_| {
                        Error::Data(format!("{}:{}: bad angle {s:?}", path.display(), lineno + 1))
                    })?;
                    if !a.is_finite() {
                        return Err(Error::Data(format!(
                            "{}:{}: angle must be finite",
                            path.display(),
                            lineno + 1
                        )));
                    }
                    Some(a)
                }
            };
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                image: fields[1].to_string(),
                mask: parse_opt(fields[2]),
                angle_raw,
                timestamp: parse_opt(fields[4]),
            });
        }

        let manifest = DatasetManifest {
            root,
            kind: kind.ok_or_else(|| Error::Data(format!("{} lacks a kind header", path.display())))?,
            split: split.ok_or_else(|| Error::Data(format!("{} lacks a split header", path.display())))?,
            max_angle: max_angle
                .ok_or_else(|| Error::Data(format!("{} lacks a max_angle header", path.display())))?,
            entries,
        };
        if manifest.max_angle <= 0.0 {
            return Err(Error::Data("max_angle must be positive".into()));
        }
        manifest.check_files()?;
        manifest.check_label_invariants()?;
        Ok(manifest)
    }

    fn check_files(&self) -> Result<()> {
        let mut missing = Vec::new();
        for e in &self.entries {
            if !self.root.join(&e.image).is_file() {
                missing.push(e.id.clone());
            }
            if let Some(m) = &e.mask {
                if !self.root.join(m).is_file() {
                    missing.push(e.id.clone());
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            missing.dedup();
            Err(Error::Data(format!("missing files for samples: {}", missing.join(", "))))
        }
    }

    fn check_label_invariants(&self) -> Result<()> {
        for e in &self.entries {
            match self.kind {
                DatasetKind::Source => {
                    if e.mask.is_none() {
                        return Err(Error::Data(format!("source sample {} lacks a mask", e.id)));
                    }
                    if e.angle_raw.is_some() {
                        return Err(Error::Data(format!(
                            "source sample {} must not carry a steering angle",
                            e.id
                        )));
                    }
                }
                DatasetKind::Target => {
                    if e.angle_raw.is_none() {
                        return Err(Error::Data(format!("target sample {} lacks an angle", e.id)));
                    }
                    if e.mask.is_some() && self.split == Split::Train {
                        return Err(Error::Data(format!(
                            "target training sample {} must not carry a mask",
                            e.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Loads images/labels for one entry; angles come out normalized.
    pub fn load_sample(&self, index: usize) -> Result<Sample> {
        let e = self
            .entries
            .get(index)
            .ok_or_else(|| Error::contract("load_sample", format!("index {index} out of range")))?;
        let image = imgproc::load_image_rgb(&self.root.join(&e.image))?;
        let road_mask = match &e.mask {
            Some(m) => Some(imgproc::load_mask(&self.root.join(m))?),
            None => None,
        };
        let steer_angle = e.angle_raw.map(|a| (a / self.max_angle).clamp(-1.0, 1.0));
        Ok(Sample { id: e.id.clone(), image, road_mask, steer_angle, kind: self.kind })
    }
}

/// Deterministic batches: each epoch visits every index exactly once in a
/// seed-derived permutation; batches continue across epoch boundaries. The
/// mapping `step → indices` is a pure function, so iteration resumes
/// mid-training without replaying.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    n: usize,
    batch: usize,
    seed: u64,
    purpose: String,
}

impl BatchIterator {
    pub fn new(n: usize, batch: usize, seed: u64, purpose: &str) -> Result<Self> {
        if batch == 0 {
            return Err(Error::contract("batch_iterator", "batch size must be positive"));
        }
        Ok(Self { n, batch, seed, purpose: purpose.to_string() })
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.n).collect();
        let mut r = rng::stream(self.seed, &format!("{}/shuffle", self.purpose), epoch);
        perm.shuffle(&mut r);
        perm
    }

    /// Indices for batch number `step` (0-based). Empty when the dataset is
    /// empty.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        if self.n == 0 {
            return Vec::new();
        }
        let start = step * self.batch as u64;
        let mut out = Vec::with_capacity(self.batch);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for g in start..start + self.batch as u64 {
            let epoch = g / self.n as u64;
            let pos = (g % self.n as u64) as usize;
            let perm = match &cached {
                Some((e, p)) if *e == epoch => p,
                _ => {
                    cached = Some((epoch, self.permutation(epoch)));
                    &cached.as_ref().expect("just set").1
                }
            };
            out.push(perm[pos]);
        }
        out
    }
}
