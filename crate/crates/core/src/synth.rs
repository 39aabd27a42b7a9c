//! Compositional synthetic bundles.
//!
//! A class is an assignment of one concept to each of the `P` part slots and
//! `Z` interval slots. Node `(t, j)` carries an affine mix of the visual
//! vectors of the concepts of `part(j)` and `interval(t)`, a fixed per-joint
//! signature and Gaussian noise; the class bank carries the matching text
//! vectors. Every class has its own concept multiset, so unseen classes are
//! new mixes of the concepts the seen classes cover.
//!
//! The mix weights are chosen so that the node mean weighs every slot
//! equally, like the normalized slot sum on the text side. For part `p` and
//! interval `z` the part concept gets
//! `(J/|p| - L/|z| + Z) / (P + Z)` and the interval concept the rest.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bundle::{
    Bundle, BundleMeta, ClassInfo, DescriptionBank, Dims, SkeletonFeatures, SplitSpec, StaticPartitionMap,
};
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub concepts: usize,
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub samples_per_class: usize,
    pub sigma: f64,
    pub temporal: usize,
    pub joints: usize,
    pub feature_dim: usize,
    pub text_dim: usize,
    pub parts: usize,
    pub intervals: usize,
    /// Norm of the per-joint identity vector added to every node.
    pub joint_signature: f64,
    /// Upper bound on pairwise |cos| between concept vectors.
    pub cos_bound: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            concepts: 6,
            seen_classes: 12,
            unseen_classes: 4,
            samples_per_class: 20,
            sigma: 0.1,
            temporal: 6,
            joints: 25,
            feature_dim: 32,
            text_dim: 32,
            parts: 4,
            intervals: 3,
            joint_signature: 1.0,
            cos_bound: 0.35,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn slots(&self) -> usize {
        self.parts + self.intervals
    }

    pub fn dims(&self) -> Dims {
        Dims {
            temporal: self.temporal,
            joints: self.joints,
            feature_dim: self.feature_dim,
            text_dim: self.text_dim,
            parts: self.parts,
            intervals: self.intervals,
        }
    }

    fn infeasible(msg: String) -> Error {
        Error::Config(format!("infeasible synthetic spec: {msg}"))
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.slots();
        if self.concepts == 0 || k == 0 || self.seen_classes == 0 {
            return Err(Self::infeasible(
                "concepts, slots and seen classes must be positive".into(),
            ));
        }
        if self.parts == 0 || self.intervals == 0 || self.intervals > self.temporal || self.parts > self.joints {
            return Err(Self::infeasible(format!(
                "{} parts over {} joints and {} intervals over {} steps",
                self.parts, self.joints, self.intervals, self.temporal
            )));
        }
        if self.feature_dim == 0 || self.text_dim == 0 {
            return Err(Self::infeasible("dimensions must be positive".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Self::infeasible(format!("sigma {} must be non-negative", self.sigma)));
        }
        let multisets = binomial(self.concepts + k - 1, k);
        let wanted = (self.seen_classes + self.unseen_classes) as u128;
        if wanted > multisets {
            return Err(Self::infeasible(format!(
                "{wanted} classes need distinct concept mixes, only {multisets} exist"
            )));
        }
        if self.seen_classes * k < self.concepts {
            return Err(Self::infeasible(format!(
                "{} seen classes with {k} slots cannot cover {} concepts",
                self.seen_classes, self.concepts
            )));
        }
        Ok(())
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    let mut acc: u128 = 1;
    for i in 0..k.min(n - k) {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// Unit-norm visual and text vectors per concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDictionary {
    pub visual: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
}

/// Slot assignment of one class: `P` part concepts then `Z` interval concepts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticClassSpec {
    pub class_id: u32,
    pub slots: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub bundle: Bundle,
    pub split: SplitSpec,
    pub concepts: ConceptDictionary,
    pub classes: Vec<SyntheticClassSpec>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = dot(&v, &v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Random unit vectors, Gram-Schmidt orthogonalized against `basis` and each
/// other while the dimension allows it.
fn near_orthogonal(rng: &mut ChaCha8Rng, count: usize, dim: usize, basis: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut done: Vec<Vec<f64>> = basis.to_vec();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = gaussian(rng, dim);
        if done.len() < dim {
            for b in &done {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let v = unit(v);
        done.push(v.clone());
        out.push(v);
    }
    out
}

fn max_abs_cos(vs: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            worst = worst.max(dot(&vs[i], &vs[j]).abs());
        }
    }
    worst
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn interval_labels(z: usize) -> Vec<String> {
    if z == 3 {
        return ["start", "middle", "end"].iter().map(|s| s.to_string()).collect();
    }
    (0..z).map(|i| format!("interval_{i}")).collect()
}

fn default_static_map(spec: &SynthSpec) -> StaticPartitionMap {
    if spec.joints == 25 && spec.parts == 4 {
        StaticPartitionMap::ntu25(spec.temporal, spec.intervals)
    } else {
        StaticPartitionMap::contiguous(spec.joints, spec.parts, spec.temporal, spec.intervals)
    }
}

type Assignments = Vec<Vec<usize>>;

fn sample_assignments(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<(Assignments, Assignments)> {
    let k = spec.slots();
    let draw = |rng: &mut ChaCha8Rng| -> Vec<usize> { (0..k).map(|_| rng.gen_range(0..spec.concepts)).collect() };
    // Classes must differ as concept multisets, since the global rows on both
    // sides weigh all slots equally.
    let fresh = |rng: &mut ChaCha8Rng, mixes: &mut HashSet<Vec<usize>>, count: usize| {
        let mut out: Vec<Vec<usize>> = Vec::new();
        let mut tries = 0;
        while out.len() < count && tries < ATTEMPTS {
            tries += 1;
            let a = draw(rng);
            let mut mix = a.clone();
            mix.sort_unstable();
            if mixes.insert(mix) {
                out.push(a);
            }
        }
        out
    };
    const RESTARTS: usize = 200;
    const ATTEMPTS: usize = 100_000;
    for _ in 0..RESTARTS {
        let mut mixes = HashSet::new();
        let seen = fresh(rng, &mut mixes, spec.seen_classes);
        let covered: HashSet<usize> = seen.iter().flatten().copied().collect();
        if seen.len() < spec.seen_classes || covered.len() < spec.concepts {
            continue;
        }
        let unseen = fresh(rng, &mut mixes, spec.unseen_classes);
        if unseen.len() == spec.unseen_classes {
            return Ok((seen, unseen));
        }
    }
    Err(SynthSpec::infeasible(
        "could not draw enough distinct slot assignments".into(),
    ))
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dims = spec.dims();
    let map = default_static_map(spec);
    map.validate(&dims)?;

    let visual = near_orthogonal(&mut rng, spec.concepts, spec.feature_dim, &[]);
    let text = near_orthogonal(&mut rng, spec.concepts, spec.text_dim, &[]);
    for (name, vs) in [("visual", &visual), ("text", &text)] {
        let worst = max_abs_cos(vs);
        if worst > spec.cos_bound {
            return Err(SynthSpec::infeasible(format!(
                "{name} concepts reach |cos| = {worst:.3} > bound {}",
                spec.cos_bound
            )));
        }
    }
    let signatures: Vec<Vec<f64>> = near_orthogonal(&mut rng, spec.joints, spec.feature_dim, &visual)
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * spec.joint_signature).collect())
        .collect();

    let (seen, unseen) = sample_assignments(spec, &mut rng)?;
    let classes: Vec<SyntheticClassSpec> = seen
        .iter()
        .chain(&unseen)
        .enumerate()
        .map(|(i, slots)| SyntheticClassSpec {
            class_id: i as u32,
            slots: slots.clone(),
        })
        .collect();

    let mut part_of = vec![0usize; spec.joints];
    for (p, part) in map.parts.iter().enumerate() {
        for &j in &part.joints {
            part_of[j] = p;
        }
    }
    let mut interval_of = vec![0usize; spec.temporal];
    for (z, &[a, b]) in map.intervals.iter().enumerate() {
        interval_of[a..b].iter_mut().for_each(|v| *v = z);
    }

    let m = spec.text_dim;
    let n = spec.feature_dim;
    let mut banks = BTreeMap::new();
    for c in &classes {
        let mut rows = Vec::with_capacity(dims.rows() * m);
        for &concept in &c.slots {
            let noise = gaussian(&mut rng, m);
            rows.extend(
                text[concept]
                    .iter()
                    .zip(noise)
                    .map(|(t, e)| f32_round(t + spec.sigma * e)),
            );
        }
        let mut sum = vec![0.0; m];
        for &concept in &c.slots {
            sum.iter_mut().zip(&text[concept]).for_each(|(s, t)| *s += t);
        }
        let noise = gaussian(&mut rng, m);
        rows.extend(
            unit(sum)
                .into_iter()
                .zip(noise)
                .map(|(t, e)| f32_round(t + spec.sigma * e)),
        );
        let rows = Tensor::matrix(dims.rows(), m, rows)?;
        banks.insert(
            c.class_id,
            DescriptionBank {
                class_id: c.class_id,
                rows,
            },
        );
    }

    let k = spec.slots() as f64;
    let part_weight = |j: usize, t: usize| {
        let [a, b] = map.intervals[interval_of[t]];
        let jp = map.parts[part_of[j]].joints.len() as f64;
        (spec.joints as f64 / jp - spec.temporal as f64 / (b - a) as f64 + spec.intervals as f64) / k
    };
    let mut samples = Vec::new();
    for c in &classes {
        for s in 0..spec.samples_per_class {
            let mut grid = Vec::with_capacity(dims.nodes() * n);
            for t in 0..spec.temporal {
                let vi = &visual[c.slots[spec.parts + interval_of[t]]];
                for j in 0..spec.joints {
                    let vp = &visual[c.slots[part_of[j]]];
                    let w = part_weight(j, t);
                    let noise = gaussian(&mut rng, n);
                    for d in 0..n {
                        let v = w * vp[d] + (1.0 - w) * vi[d] + signatures[j][d] + spec.sigma * noise[d];
                        grid.push(f32_round(v));
                    }
                }
            }
            samples.push(SkeletonFeatures {
                sample_id: format!("c{}_s{s:03}", c.class_id),
                class_id: c.class_id,
                grid: Tensor::new(vec![spec.temporal, spec.joints, n], grid)?,
            });
        }
    }

    let class_name = |c: &SyntheticClassSpec| {
        let slots: Vec<String> = c.slots.iter().map(|s| s.to_string()).collect();
        format!("mix_{}", slots.join("-"))
    };
    let meta = BundleMeta {
        dims,
        part_labels: map.parts.iter().map(|p| p.name.clone()).collect(),
        interval_labels: interval_labels(spec.intervals),
        classes: classes
            .iter()
            .map(|c| ClassInfo {
                id: c.class_id,
                name: class_name(c),
            })
            .collect(),
        static_map: Some(map),
    };
    let bundle = Bundle { meta, banks, samples };
    bundle.validate()?;
    let split = SplitSpec {
        seen: (0..spec.seen_classes as u32).collect(),
        unseen: (spec.seen_classes as u32..(spec.seen_classes + spec.unseen_classes) as u32).collect(),
    };
    Ok(SynthOutput {
        bundle,
        split,
        concepts: ConceptDictionary { visual, text },
        classes,
    })
}
