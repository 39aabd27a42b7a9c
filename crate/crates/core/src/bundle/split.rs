use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BundleError, BundleMeta};

/// Disjoint seen/unseen class lists for one zero-shot experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen: Vec<u32>,
    pub unseen: Vec<u32>,
}

impl SplitSpec {
    /// Checks disjointness and duplicates; with `meta`, also that every id
    /// names a class of the bundle.
    pub fn validate(&self, meta: Option<&BundleMeta>) -> Result<(), BundleError> {
        let mut seen = HashSet::new();
        for &id in &self.seen {
            if !seen.insert(id) {
                return Err(BundleError::SplitDuplicate(id));
            }
        }
        let mut unseen = HashSet::new();
        for &id in &self.unseen {
            if seen.contains(&id) {
                return Err(BundleError::SplitOverlap(id));
            }
            if !unseen.insert(id) {
                return Err(BundleError::SplitDuplicate(id));
            }
        }
        if let Some(meta) = meta {
            if let Some(&id) = self.seen.iter().chain(&self.unseen).find(|&&id| !meta.has_class(id)) {
                return Err(BundleError::UnknownClass(id));
            }
        }
        Ok(())
    }
}

pub fn parse_split(text: &str, meta: Option<&BundleMeta>) -> Result<SplitSpec, BundleError> {
    let split: SplitSpec = serde_json::from_str(text).map_err(|e| BundleError::Json {
        path: "split".into(),
        message: e.to_string(),
    })?;
    split.validate(meta)?;
    Ok(split)
}

/// Reads a split JSON file `{"seen":[..],"unseen":[..]}`.
pub fn load_split(path: &Path, meta: Option<&BundleMeta>) -> Result<SplitSpec, BundleError> {
    let text = fs::read_to_string(path).map_err(|e| BundleError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_split(&text, meta).map_err(|e| match e {
        BundleError::Json { message, .. } => BundleError::Json {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

pub fn write_split(path: &Path, split: &SplitSpec) -> Result<(), BundleError> {
    let text = serde_json::to_string(split).expect("split serializes");
    crate::fsutil::write_atomic(path, text.as_bytes()).map_err(|e| BundleError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
