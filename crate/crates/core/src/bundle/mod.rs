//! On-disk feature bundles.
//!
//! A bundle directory holds `manifest.json`, one `class_<id>.ptf` description
//! bank per class and one `sample_<id>.ptf` feature grid per sample. Banks are
//! `(P+Z+1)×m` with rows ordered `[parts.., intervals.., global]`; grids are
//! `L'×J×n`, which flattens to `S×n` with node index `s = t·J + j`.

pub mod ptf;
pub mod split;
pub mod static_map;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use split::{load_split, write_split, SplitSpec};
pub use static_map::{BodyPart, StaticPartitionMap};

use crate::tensor::Tensor;
use ptf::{DType, PtfError};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: invalid JSON: {message}")]
    Json { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Tensor {
        path: PathBuf,
        #[source]
        source: PtfError,
    },
    #[error("{path}: checksum mismatch (manifest {expected}, file {found})")]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: {what} has shape {found:?}, expected {expected:?}")]
    Shape {
        path: PathBuf,
        what: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("class {class_id} has no description bank ({path})")]
    MissingBank { class_id: u32, path: PathBuf },
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },
    #[error("split: class {0} is both seen and unseen")]
    SplitOverlap(u32),
    #[error("split: class {0} is listed more than once")]
    SplitDuplicate(u32),
    #[error("split: class {0} does not exist in the bundle")]
    UnknownClass(u32),
}

impl BundleError {
    fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        BundleError::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Bundle-wide dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Temporal feature length `L'`.
    pub temporal: usize,
    pub joints: usize,
    /// Skeleton feature dimension `n`.
    pub feature_dim: usize,
    /// Text embedding dimension `m`.
    pub text_dim: usize,
    pub parts: usize,
    pub intervals: usize,
}

impl Dims {
    /// Node count `S = L'·J`.
    pub fn nodes(&self) -> usize {
        self.temporal * self.joints
    }

    /// Description rows per class, `P+Z+1`.
    pub fn rows(&self) -> usize {
        self.parts + self.intervals + 1
    }

    /// Index of the global description row.
    pub fn global_row(&self) -> usize {
        self.parts + self.intervals
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonFeatures {
    pub sample_id: String,
    pub class_id: u32,
    /// `L'×J×n`
    pub grid: Tensor,
}

impl SkeletonFeatures {
    /// The `S×n` node matrix, rows in t-major order.
    pub fn nodes(&self) -> Tensor {
        let s = self.grid.shape();
        self.grid.clone().reshape(vec![s[0] * s[1], s[2]]).expect("grid is 3-D")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptionBank {
    pub class_id: u32,
    /// `(P+Z+1)×m`
    pub rows: Tensor,
}

impl DescriptionBank {
    pub fn global(&self) -> &[f64] {
        self.rows.row(self.rows.rows() - 1)
    }
}

/// Everything but the payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub dims: Dims,
    pub part_labels: Vec<String>,
    pub interval_labels: Vec<String>,
    pub classes: Vec<ClassInfo>,
    pub static_map: Option<StaticPartitionMap>,
}

impl BundleMeta {
    pub fn class_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.iter().map(|c| c.id)
    }

    pub fn has_class(&self, id: u32) -> bool {
        self.classes.iter().any(|c| c.id == id)
    }

    /// Labels for the `P+Z+1` description rows.
    pub fn row_labels(&self) -> Vec<String> {
        self.part_labels
            .iter()
            .chain(&self.interval_labels)
            .cloned()
            .chain(std::iter::once("global".to_string()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub meta: BundleMeta,
    pub banks: BTreeMap<u32, DescriptionBank>,
    pub samples: Vec<SkeletonFeatures>,
}

impl Bundle {
    pub fn dims(&self) -> &Dims {
        &self.meta.dims
    }

    pub fn bank(&self, class_id: u32) -> Option<&DescriptionBank> {
        self.banks.get(&class_id)
    }

    pub fn samples_of<'a>(&'a self, classes: &'a [u32]) -> impl Iterator<Item = &'a SkeletonFeatures> {
        self.samples.iter().filter(move |s| classes.contains(&s.class_id))
    }

    /// Checks every in-memory invariant that [`load_bundle`] enforces.
    pub fn validate(&self) -> Result<(), BundleError> {
        let manifest = Manifest::describe(self);
        manifest.validate()?;
        let d = self.meta.dims;
        for c in &self.meta.classes {
            let bank = self.banks.get(&c.id).ok_or_else(|| BundleError::MissingBank {
                class_id: c.id,
                path: PathBuf::from(bank_file(c.id)),
            })?;
            check_shape(
                &bank_file(c.id),
                &format!("bank of class {}", c.id),
                &bank.rows,
                &[d.rows(), d.text_dim],
            )?;
        }
        for s in &self.samples {
            check_shape(
                &sample_file(&s.sample_id),
                &format!("sample {}", s.sample_id),
                &s.grid,
                &[d.temporal, d.joints, d.feature_dim],
            )?;
        }
        Ok(())
    }
}

fn check_shape(path: &str, what: &str, t: &Tensor, expected: &[usize]) -> Result<(), BundleError> {
    if t.shape() != expected {
        return Err(BundleError::Shape {
            path: PathBuf::from(path),
            what: what.to_string(),
            expected: expected.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn bank_file(class_id: u32) -> String {
    format!("class_{class_id}.ptf")
}

pub fn sample_file(sample_id: &str) -> String {
    format!("sample_{sample_id}.ptf")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u32,
    pub name: String,
    pub bank: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub file: String,
    pub class_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

/// `manifest.json`. File checksums are optional; when present they are
/// verified on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dims: Dims,
    pub part_labels: Vec<String>,
    pub interval_labels: Vec<String>,
    pub classes: Vec<ClassEntry>,
    pub samples: Vec<SampleEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_map: Option<StaticPartitionMap>,
}

fn valid_file_name(name: &str) -> bool {
    !name.is_empty() && !name.contains('/') && !name.contains('\\') && name != "." && name != ".."
}

fn valid_sample_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
        && !id.starts_with('.')
}

impl Manifest {
    /// Manifest for an in-memory bundle, without checksums.
    pub fn describe(bundle: &Bundle) -> Self {
        let m = &bundle.meta;
        Self {
            format_version: FORMAT_VERSION,
            dims: m.dims,
            part_labels: m.part_labels.clone(),
            interval_labels: m.interval_labels.clone(),
            classes: m
                .classes
                .iter()
                .map(|c| ClassEntry {
                    id: c.id,
                    name: c.name.clone(),
                    bank: bank_file(c.id),
                    sha256: None,
                })
                .collect(),
            samples: bundle
                .samples
                .iter()
                .map(|s| SampleEntry {
                    id: s.sample_id.clone(),
                    file: sample_file(&s.sample_id),
                    class_id: s.class_id,
                    sha256: None,
                })
                .collect(),
            static_map: m.static_map.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), BundleError> {
        if self.format_version != FORMAT_VERSION {
            return Err(BundleError::validation(
                "format_version",
                format!("unsupported version {}", self.format_version),
            ));
        }
        let d = &self.dims;
        for (name, v) in [
            ("temporal", d.temporal),
            ("joints", d.joints),
            ("feature_dim", d.feature_dim),
            ("text_dim", d.text_dim),
        ] {
            if v == 0 {
                return Err(BundleError::validation(format!("dims.{name}"), "must be positive"));
            }
        }
        if d.intervals > d.temporal {
            return Err(BundleError::validation(
                "dims.intervals",
                format!("{} intervals cannot tile {} temporal steps", d.intervals, d.temporal),
            ));
        }
        if self.part_labels.len() != d.parts {
            return Err(BundleError::validation(
                "part_labels",
                format!("{} labels for {} parts", self.part_labels.len(), d.parts),
            ));
        }
        if self.interval_labels.len() != d.intervals {
            return Err(BundleError::validation(
                "interval_labels",
                format!("{} labels for {} intervals", self.interval_labels.len(), d.intervals),
            ));
        }
        let mut ids = HashSet::new();
        for (i, c) in self.classes.iter().enumerate() {
            if !ids.insert(c.id) {
                return Err(BundleError::validation(
                    format!("classes[{i}].id"),
                    format!("duplicate class id {}", c.id),
                ));
            }
            if !valid_file_name(&c.bank) {
                return Err(BundleError::validation(
                    format!("classes[{i}].bank"),
                    format!("{:?} is not a plain file name", c.bank),
                ));
            }
        }
        let mut sample_ids = HashSet::new();
        for (i, s) in self.samples.iter().enumerate() {
            if !valid_sample_id(&s.id) {
                return Err(BundleError::validation(
                    format!("samples[{i}].id"),
                    format!("{:?} must be non-empty [A-Za-z0-9_.-]", s.id),
                ));
            }
            if !sample_ids.insert(s.id.as_str()) {
                return Err(BundleError::validation(
                    format!("samples[{i}].id"),
                    format!("duplicate sample id {}", s.id),
                ));
            }
            if !valid_file_name(&s.file) {
                return Err(BundleError::validation(
                    format!("samples[{i}].file"),
                    format!("{:?} is not a plain file name", s.file),
                ));
            }
            if !ids.contains(&s.class_id) {
                return Err(BundleError::validation(
                    format!("samples[{i}].class_id"),
                    format!("unknown class {}", s.class_id),
                ));
            }
        }
        if let Some(map) = &self.static_map {
            map.validate(d)?;
            for (i, (part, label)) in map.parts.iter().zip(&self.part_labels).enumerate() {
                if part.name != *label {
                    return Err(BundleError::validation(
                        format!("static_map.parts[{i}].name"),
                        format!("{:?} does not match part label {:?}", part.name, label),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> BundleError {
    BundleError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads and validates a tensor file, verifying its checksum if one is given.
fn read_checked(path: &Path, sha256: Option<&str>) -> Result<Tensor, BundleError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (tensor, _) = ptf::decode(&bytes).map_err(|source| BundleError::Tensor {
        path: path.to_path_buf(),
        source,
    })?;
    if let Some(expected) = sha256 {
        let found = sha256_hex(&bytes);
        if !found.eq_ignore_ascii_case(expected) {
            return Err(BundleError::Checksum {
                path: path.to_path_buf(),
                expected: expected.to_string(),
                found,
            });
        }
    }
    Ok(tensor)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, BundleError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| BundleError::Json {
        path: path.clone(),
        message: e.to_string(),
    })?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads a bundle directory, validating every invariant and cross-checking
/// all tensor shapes against the manifest.
pub fn load_bundle(dir: &Path) -> Result<Bundle, BundleError> {
    let manifest = read_manifest(dir)?;
    let d = manifest.dims;

    let mut banks = BTreeMap::new();
    for c in &manifest.classes {
        let path = dir.join(&c.bank);
        if !path.is_file() {
            return Err(BundleError::MissingBank { class_id: c.id, path });
        }
        let rows = read_checked(&path, c.sha256.as_deref())?;
        if rows.shape() != [d.rows(), d.text_dim] {
            return Err(BundleError::Shape {
                path,
                what: format!("bank of class {} ({:?})", c.id, c.name),
                expected: vec![d.rows(), d.text_dim],
                found: rows.shape().to_vec(),
            });
        }
        banks.insert(c.id, DescriptionBank { class_id: c.id, rows });
    }

    let mut samples = Vec::with_capacity(manifest.samples.len());
    for s in &manifest.samples {
        let path = dir.join(&s.file);
        let grid = read_checked(&path, s.sha256.as_deref())?;
        let expected = [d.temporal, d.joints, d.feature_dim];
        if grid.shape() != expected {
            return Err(BundleError::Shape {
                path,
                what: format!("sample {}", s.id),
                expected: expected.to_vec(),
                found: grid.shape().to_vec(),
            });
        }
        samples.push(SkeletonFeatures {
            sample_id: s.id.clone(),
            class_id: s.class_id,
            grid,
        });
    }

    Ok(Bundle {
        meta: BundleMeta {
            dims: d,
            part_labels: manifest.part_labels,
            interval_labels: manifest.interval_labels,
            classes: manifest
                .classes
                .into_iter()
                .map(|c| ClassInfo { id: c.id, name: c.name })
                .collect(),
            static_map: manifest.static_map,
        },
        banks,
        samples,
    })
}

/// Writes `bundle` into `dir` (created if needed) as 32-bit payloads with
/// checksummed manifest entries. Returns the manifest written.
pub fn write_bundle(bundle: &Bundle, dir: &Path) -> Result<Manifest, BundleError> {
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut manifest = Manifest::describe(bundle);
    for entry in &mut manifest.classes {
        let bank = &bundle.banks[&entry.id];
        let path = dir.join(&entry.bank);
        let bytes = ptf::write_file(&path, &bank.rows, DType::F32).map_err(|e| io_err(&path, e))?;
        entry.sha256 = Some(sha256_hex(&bytes));
    }
    for (entry, sample) in manifest.samples.iter_mut().zip(&bundle.samples) {
        let path = dir.join(&entry.file);
        let bytes = ptf::write_file(&path, &sample.grid, DType::F32).map_err(|e| io_err(&path, e))?;
        entry.sha256 = Some(sha256_hex(&bytes));
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    crate::fsutil::write_atomic(&path, text.as_bytes()).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}
