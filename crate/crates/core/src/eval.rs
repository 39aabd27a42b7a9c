//! Zero-shot inference, reports and attention export.
//!
//! The test-time loss of candidate `y` is
//! `-½ log( exp(V·F^y/τ) / Σ_o exp(V·F^o/τ) )` over the candidate set. The
//! denominator is shared by all candidates, so its argmin is the argmax of
//! `V·F^y`; ties go to the lowest class id.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{AlignmentModel, PartitionMode};
use crate::bundle::{Bundle, DescriptionBank, SkeletonFeatures, SplitSpec};
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Scores `V·F^y/τ` for each candidate, in the order given.
pub fn candidate_scores(nodes: &Tensor, candidates: &[&DescriptionBank], model: &AlignmentModel) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let m = model.dims.text_dim;
    for bank in candidates {
        if bank.rows.shape() != [model.dims.rows(), m] {
            return Err(Error::Mismatch(format!(
                "bank of class {} has shape {:?}, model expects [{}, {m}]",
                bank.class_id,
                bank.rows.shape(),
                model.dims.rows()
            )));
        }
    }
    let v = model.global_embedding(nodes)?;
    let tau = model.tau();
    Ok(candidates
        .iter()
        .map(|b| dot(&v, &model.text_row(b.global())) / tau)
        .collect())
}

fn argmax_lowest_id(scores: &[f64], candidates: &[&DescriptionBank]) -> u32 {
    let mut best = 0;
    for i in 1..scores.len() {
        let better = scores[i] > scores[best]
            || (scores[i] == scores[best] && candidates[i].class_id < candidates[best].class_id);
        if better {
            best = i;
        }
    }
    candidates[best].class_id
}

/// Predicted class among `candidates`.
pub fn predict(nodes: &Tensor, candidates: &[&DescriptionBank], model: &AlignmentModel) -> Result<u32> {
    let scores = candidate_scores(nodes, candidates, model)?;
    Ok(argmax_lowest_id(&scores, candidates))
}

fn banks_for<'a>(bundle: &'a Bundle, classes: &[u32]) -> Result<Vec<&'a DescriptionBank>> {
    classes
        .iter()
        .map(|&c| bundle.bank(c).ok_or(Error::MissingBank(c)))
        .collect()
}

fn check_compatible(bundle: &Bundle, split: &SplitSpec, model: &AlignmentModel) -> Result<()> {
    if bundle.meta.dims != model.dims {
        return Err(Error::Mismatch(format!(
            "bundle dims {:?} differ from model dims {:?}",
            bundle.meta.dims, model.dims
        )));
    }
    split.validate(Some(&bundle.meta))?;
    Ok(())
}

/// Fraction of samples of `classes` predicted correctly among `classes`.
pub(crate) fn accuracy_over(
    samples: &[&SkeletonFeatures],
    candidates: &[&DescriptionBank],
    model: &AlignmentModel,
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let preds: Vec<Result<u32>> = samples
        .par_iter()
        .map(|s| predict(&s.nodes(), candidates, model))
        .collect();
    let mut correct = 0usize;
    for (s, p) in samples.iter().zip(preds) {
        if p? == s.class_id {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Seen-class top-1 accuracy on the training samples, via the global
/// representation.
pub fn monitored_accuracy(bundle: &Bundle, split: &SplitSpec, model: &AlignmentModel) -> Result<f64> {
    check_compatible(bundle, split, model)?;
    let candidates = banks_for(bundle, &split.seen)?;
    let samples: Vec<&SkeletonFeatures> = bundle.samples_of(&split.seen).collect();
    accuracy_over(&samples, &candidates, model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class_id: u32,
    pub name: String,
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub n_samples: usize,
    pub per_class: Vec<ClassAccuracy>,
    /// `confusion[true][predicted]`, both indexed by position in `classes`.
    pub confusion: Vec<Vec<usize>>,
    pub classes: Vec<u32>,
    pub split: SplitSpec,
    pub config_hash: String,
}

pub fn config_hash(model: &AlignmentModel) -> String {
    use sha2::{Digest, Sha256};
    let text = serde_json::json!({
        "dims": model.dims,
        "config": model.config,
        "static_map": model.static_map,
    })
    .to_string();
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Zero-shot evaluation on the unseen classes of `split`.
pub fn evaluate(bundle: &Bundle, split: &SplitSpec, model: &AlignmentModel) -> Result<EvalReport> {
    check_compatible(bundle, split, model)?;
    let candidates = banks_for(bundle, &split.unseen)?;
    let samples: Vec<&SkeletonFeatures> = bundle.samples_of(&split.unseen).collect();
    let preds: Vec<Result<u32>> = samples
        .par_iter()
        .map(|s| predict(&s.nodes(), &candidates, model))
        .collect();

    let k = split.unseen.len();
    let index = |c: u32| split.unseen.iter().position(|&u| u == c).expect("unseen class");
    let mut confusion = vec![vec![0usize; k]; k];
    for (s, p) in samples.iter().zip(preds) {
        confusion[index(s.class_id)][index(p?)] += 1;
    }
    let per_class = split
        .unseen
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let total: usize = confusion[i].iter().sum();
            let correct = confusion[i][i];
            ClassAccuracy {
                class_id: c,
                name: bundle
                    .meta
                    .classes
                    .iter()
                    .find(|ci| ci.id == c)
                    .map(|ci| ci.name.clone())
                    .unwrap_or_default(),
                samples: total,
                correct,
                accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            }
        })
        .collect();
    let diag: usize = (0..k).map(|i| confusion[i][i]).sum();
    let n = samples.len();
    Ok(EvalReport {
        top1: if n == 0 { 0.0 } else { diag as f64 / n as f64 },
        n_samples: n,
        per_class,
        confusion,
        classes: split.unseen.clone(),
        split: split.clone(),
        config_hash: config_hash(model),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeLabel {
    pub node: usize,
    pub t: usize,
    pub j: usize,
}

/// Sidecar describing the axes of an exported attention CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSidecar {
    pub sample_id: String,
    pub sample_class: u32,
    pub bank_class: u32,
    pub csv: String,
    pub shape: [usize; 2],
    pub rows: Vec<String>,
    pub columns: Vec<NodeLabel>,
    pub temporal: usize,
    pub joints: usize,
}

/// Writes the full attention matrix of `sample` against `bank` as
/// `<out>.csv` plus `<out>.json`. Returns the in-memory matrix.
pub fn export_attention(
    sample: &SkeletonFeatures,
    bank: &DescriptionBank,
    row_labels: &[String],
    model: &AlignmentModel,
    out: &Path,
) -> Result<Tensor> {
    if model.config.mode != PartitionMode::Adaptive {
        return Err(Error::NotAdaptive);
    }
    let a = model
        .represent(&sample.nodes(), &bank.rows)?
        .a
        .expect("adaptive mode yields attention");
    let dims = model.dims;
    let csv_path = out.with_extension("csv");
    let json_path = out.with_extension("json");
    if let Some(parent) = csv_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }

    let columns: Vec<NodeLabel> = (0..dims.nodes())
        .map(|s| NodeLabel {
            node: s,
            t: s / dims.joints,
            j: s % dims.joints,
        })
        .collect();
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let header = std::iter::once("description".to_string()).chain(columns.iter().map(|c| format!("({},{})", c.t, c.j)));
    w.write_record(header).map_err(|e| Error::io(&csv_path, e))?;
    for (r, label) in row_labels.iter().enumerate().take(a.rows()) {
        let record = std::iter::once(label.clone()).chain(a.row(r).iter().map(|&v| format!("{}", v as f32)));
        w.write_record(record).map_err(|e| Error::io(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let sidecar = AttentionSidecar {
        sample_id: sample.sample_id.clone(),
        sample_class: sample.class_id,
        bank_class: bank.class_id,
        csv: csv_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        shape: [a.rows(), a.cols()],
        rows: row_labels.to_vec(),
        columns,
        temporal: dims.temporal,
        joints: dims.joints,
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(a)
}

/// Reads an exported attention CSV back into a matrix.
pub fn read_attention_csv(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::io(path, e))?;
        labels.push(rec.get(0).unwrap_or_default().to_string());
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| Error::io(path, e)))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(vals);
    }
    Ok((labels, Tensor::from_rows(&rows)?))
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<PathBuf> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    crate::fsutil::write_atomic(path, text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}
