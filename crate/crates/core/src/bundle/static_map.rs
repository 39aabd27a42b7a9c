use serde::{Deserialize, Serialize};

use super::{BundleError, Dims};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyPart {
    pub name: String,
    pub joints: Vec<usize>,
}

/// Manual joint-to-part assignment plus temporal interval boundaries.
///
/// Intervals are half-open `[start, end)` ranges over the temporal feature
/// axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticPartitionMap {
    pub parts: Vec<BodyPart>,
    pub intervals: Vec<[usize; 2]>,
}

/// Splits `[0, len)` into `count` consecutive, nearly equal ranges.
pub fn even_ranges(len: usize, count: usize) -> Vec<[usize; 2]> {
    (0..count).map(|z| [z * len / count, (z + 1) * len / count]).collect()
}

impl StaticPartitionMap {
    /// Four-part map for the 25-joint Kinect layout: head, hands, torso, legs.
    pub fn ntu25(temporal: usize, intervals: usize) -> Self {
        let part = |name: &str, joints: Vec<usize>| BodyPart {
            name: name.to_string(),
            joints,
        };
        Self {
            parts: vec![
                part("head", vec![2, 3, 20]),
                part("hands", vec![4, 5, 6, 7, 8, 9, 10, 11, 21, 22, 23, 24]),
                part("torso", vec![0, 1, 12, 16]),
                part("legs", vec![13, 14, 15, 17, 18, 19]),
            ],
            intervals: even_ranges(temporal, intervals),
        }
    }

    /// Contiguous joint chunks named `part_0..`, for skeletons without a
    /// hand-made map.
    pub fn contiguous(joints: usize, parts: usize, temporal: usize, intervals: usize) -> Self {
        Self {
            parts: even_ranges(joints, parts)
                .into_iter()
                .enumerate()
                .map(|(i, [a, b])| BodyPart {
                    name: format!("part_{i}"),
                    joints: (a..b).collect(),
                })
                .collect(),
            intervals: even_ranges(temporal, intervals),
        }
    }

    pub fn validate(&self, dims: &Dims) -> Result<(), BundleError> {
        let invalid = |field: &str, reason: String| BundleError::Validation {
            field: format!("static_map.{field}"),
            reason,
        };
        if self.parts.len() != dims.parts {
            return Err(invalid(
                "parts",
                format!("{} parts listed, dims.parts = {}", self.parts.len(), dims.parts),
            ));
        }
        let mut owner = vec![None; dims.joints];
        for (p, part) in self.parts.iter().enumerate() {
            if part.joints.is_empty() {
                return Err(invalid(&format!("parts[{p}].joints"), "empty joint list".into()));
            }
            for &j in &part.joints {
                let slot = owner.get_mut(j).ok_or_else(|| {
                    invalid(
                        &format!("parts[{p}].joints"),
                        format!("joint {j} out of range 0..{}", dims.joints),
                    )
                })?;
                if let Some(prev) = slot.replace(p) {
                    return Err(invalid(
                        &format!("parts[{p}].joints"),
                        format!("joint {j} also assigned to part {prev}"),
                    ));
                }
            }
        }
        if let Some(j) = owner.iter().position(Option::is_none) {
            return Err(invalid("parts", format!("joint {j} is not assigned to any part")));
        }
        if self.intervals.len() != dims.intervals {
            return Err(invalid(
                "intervals",
                format!(
                    "{} intervals listed, dims.intervals = {}",
                    self.intervals.len(),
                    dims.intervals
                ),
            ));
        }
        let mut cursor = 0;
        for (z, &[a, b]) in self.intervals.iter().enumerate() {
            if a != cursor || b <= a {
                return Err(invalid(
                    &format!("intervals[{z}]"),
                    format!("[{a}, {b}) does not continue contiguously from {cursor}"),
                ));
            }
            cursor = b;
        }
        if cursor != dims.temporal && !self.intervals.is_empty() {
            return Err(invalid(
                "intervals",
                format!("intervals end at {cursor}, temporal length is {}", dims.temporal),
            ));
        }
        Ok(())
    }

    /// Node-index sets for every row of the partition, in bank row order:
    /// parts, then intervals, then the global row.
    pub fn node_sets(&self, dims: &Dims) -> Vec<Vec<usize>> {
        let j_count = dims.joints;
        let mut sets = Vec::with_capacity(dims.rows());
        for part in &self.parts {
            let mut nodes: Vec<usize> = (0..dims.temporal)
                .flat_map(|t| part.joints.iter().map(move |&j| t * j_count + j))
                .collect();
            nodes.sort_unstable();
            sets.push(nodes);
        }
        for &[a, b] in &self.intervals {
            sets.push((a * j_count..b * j_count).collect());
        }
        sets.push((0..dims.nodes()).collect());
        sets
    }

    /// `(P+Z+1)×S` row-stochastic matrix whose product with the node features
    /// gives the static partition averages.
    pub fn averaging_matrix(&self, dims: &Dims) -> Tensor {
        let s = dims.nodes();
        let sets = self.node_sets(dims);
        let mut data = vec![0.0; sets.len() * s];
        for (i, set) in sets.iter().enumerate() {
            let w = 1.0 / set.len() as f64;
            for &node in set {
                data[i * s + node] = w;
            }
        }
        Tensor::from_parts_unchecked(vec![sets.len(), s], data)
    }
}
