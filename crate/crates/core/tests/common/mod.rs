#![allow(dead_code)]

use std::collections::BTreeMap;

use purls::align::{AlignmentModel, BatchContext, ModelConfig};
use purls::bundle::{DescriptionBank, Dims, StaticPartitionMap};
use purls::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

pub fn dims(temporal: usize, joints: usize, n: usize, m: usize, parts: usize, intervals: usize) -> Dims {
    Dims {
        temporal,
        joints,
        feature_dim: n,
        text_dim: m,
        parts,
        intervals,
    }
}

/// Random banks, seen classes `0..classes` and a batch of node matrices.
pub struct Instance {
    pub banks: BTreeMap<u32, DescriptionBank>,
    pub seen: Vec<u32>,
    pub nodes: Vec<Tensor>,
    pub labels: Vec<u32>,
}

impl Instance {
    pub fn random(rng: &mut ChaCha8Rng, d: &Dims, classes: usize, batch: usize) -> Self {
        let banks = (0..classes as u32)
            .map(|c| {
                (
                    c,
                    DescriptionBank {
                        class_id: c,
                        rows: rand_tensor(rng, d.rows(), d.text_dim, 1.0),
                    },
                )
            })
            .collect();
        let nodes = (0..batch)
            .map(|_| rand_tensor(rng, d.nodes(), d.feature_dim, 1.0))
            .collect();
        let labels = (0..batch).map(|_| rng.gen_range(0..classes as u32)).collect();
        Self {
            banks,
            seen: (0..classes as u32).collect(),
            nodes,
            labels,
        }
    }

    pub fn ctx(&self) -> BatchContext<'_> {
        BatchContext {
            samples: self.nodes.iter().zip(&self.labels).map(|(n, &c)| (n, c)).collect(),
            banks: &self.banks,
            seen: &self.seen,
        }
    }
}

/// A model with every tensor, including the α logits and the inference
/// query, drawn at random.
pub fn random_model(rng: &mut ChaCha8Rng, d: Dims, config: ModelConfig) -> AlignmentModel {
    let map = StaticPartitionMap::contiguous(d.joints, d.parts, d.temporal, d.intervals);
    let mut model = AlignmentModel::init(d, config, Some(map), rng).unwrap();
    model.alpha_logits = rand_tensor(rng, 1, d.rows(), 1.0);
    model.global_query = rand_tensor(rng, 1, d.text_dim, 1.0);
    model.mlp.b1 = rand_tensor(rng, 1, model.mlp.b1.cols(), 0.5);
    model.mlp.b2 = rand_tensor(rng, 1, d.text_dim, 0.5);
    model
}

/// `classes` classes whose nodes sit near the class one-hot in feature space
/// and whose bank rows are the class one-hot in text space.
pub fn separable_bundle(classes: usize, per_class: usize, noise: f64, seed: u64) -> purls::Bundle {
    use purls::bundle::{BundleMeta, ClassInfo, SkeletonFeatures};
    use rand::SeedableRng;
    let d = dims(2, 3, classes + 2, classes + 1, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = StaticPartitionMap::contiguous(d.joints, d.parts, d.temporal, d.intervals);
    let mut banks = BTreeMap::new();
    let mut samples = Vec::new();
    for c in 0..classes {
        let mut rows = vec![0.0; d.rows() * d.text_dim];
        for r in 0..d.rows() {
            rows[r * d.text_dim + c] = 1.0;
        }
        banks.insert(
            c as u32,
            DescriptionBank {
                class_id: c as u32,
                rows: Tensor::matrix(d.rows(), d.text_dim, rows).unwrap(),
            },
        );
        for s in 0..per_class {
            let mut grid = Vec::with_capacity(d.nodes() * d.feature_dim);
            for _ in 0..d.nodes() {
                for k in 0..d.feature_dim {
                    let v = f64::from(k == c) + noise * rng.gen_range(-1.0..1.0);
                    grid.push(v as f32 as f64);
                }
            }
            samples.push(SkeletonFeatures {
                sample_id: format!("c{c}_{s}"),
                class_id: c as u32,
                grid: Tensor::new(vec![d.temporal, d.joints, d.feature_dim], grid).unwrap(),
            });
        }
    }
    let bundle = purls::Bundle {
        meta: BundleMeta {
            dims: d,
            part_labels: map.parts.iter().map(|p| p.name.clone()).collect(),
            interval_labels: (0..d.intervals).map(|z| format!("interval_{z}")).collect(),
            classes: (0..classes as u32)
                .map(|id| ClassInfo {
                    id,
                    name: format!("class {id}"),
                })
                .collect(),
            static_map: Some(map),
        },
        banks,
        samples,
    };
    bundle.validate().unwrap();
    bundle
}
