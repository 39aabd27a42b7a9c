//! Visual-to-text projection and the bidirectional contrastive objective.
//!
//! For scale `i`, sample `b` with class `y`, projected embedding `V_i` and
//! description row `F_i = F_i^y`:
//!
//! ```text
//! L_i = -½ log softmax_o(V_i·F_i^o / τ)[y] - ½ log softmax_w(V_i^w·F_i / τ)[b]
//! ```
//!
//! with `o` ranging over all seen classes and `w` over the batch, both sets
//! including the positive. The training loss is `Σ α_i L_i` averaged over
//! the batch.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{DescriptionBank, Dims, StaticPartitionMap};
use crate::error::{Error, Result};
use crate::partition::{self, AttentionPartition};
use crate::tape::{GradTape, Var};
use crate::tensor::{dot, log_sum_exp, matmul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    /// Global representation only, aligned with the global description.
    Global,
    /// Fixed part/interval averages.
    Static,
    /// Cross-attention over all nodes.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    Uniform,
    Learnable,
}

/// Query for the global row's attention during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GlobalQuery {
    /// The global description of the sample's own class.
    #[default]
    Class,
    /// The stored inference query, so training and inference attend alike.
    Shared,
}

/// Architecture and objective settings that live with the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: PartitionMode,
    pub alpha_mode: AlphaMode,
    pub tau: f64,
    pub learn_tau: bool,
    pub normalize: bool,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    #[serde(default)]
    pub global_query: GlobalQuery,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: PartitionMode::Adaptive,
            alpha_mode: AlphaMode::Uniform,
            tau: 0.1,
            learn_tau: false,
            normalize: false,
            hidden_dim: 512,
            attention_dim: 150,
            global_query: GlobalQuery::Class,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.hidden_dim == 0 || self.attention_dim == 0 {
            return Err(Error::Config("hidden_dim and attention_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Two-layer perceptron `n → hidden → m` with a rectifier in between.
/// Row-vector convention: `V = relu(R·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = add_row(&matmul(x, &self.w1)?, &self.b1);
        let h = h.map(|v| v.max(0.0))?;
        Ok(add_row(&matmul(&h, &self.w2)?, &self.b2))
    }
}

fn add_row(x: &Tensor, row: &Tensor) -> Tensor {
    let c = x.cols();
    let mut data = x.data().to_vec();
    for chunk in data.chunks_mut(c) {
        chunk.iter_mut().zip(row.data()).for_each(|(a, b)| *a += b);
    }
    Tensor::from_parts_unchecked(x.shape().to_vec(), data)
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_parts_unchecked(vec![fan_in, fan_out], data)
}

pub const PARAM_NAMES: [&str; 8] = [
    "w_q",
    "w_k",
    "mlp.w1",
    "mlp.b1",
    "mlp.w2",
    "mlp.b2",
    "alpha_logits",
    "log_tau",
];

/// Everything a checkpoint stores: the parameters plus the inference query.
pub const STATE_NAMES: [&str; 9] = [
    "w_q",
    "w_k",
    "mlp.w1",
    "mlp.b1",
    "mlp.w2",
    "mlp.b2",
    "alpha_logits",
    "log_tau",
    "global_query",
];

/// The full trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentModel {
    pub dims: Dims,
    pub config: ModelConfig,
    pub static_map: Option<StaticPartitionMap>,
    pub attention: AttentionPartition,
    pub mlp: Mlp,
    /// `1×(P+Z+1)`; effective weights are its softmax.
    pub alpha_logits: Tensor,
    /// `1×1`
    pub log_tau: Tensor,
    /// `1×m` attention query for the global row at inference. Zero (uniform
    /// attention) until training sets it to the mean seen global row.
    pub global_query: Tensor,
}

impl AlignmentModel {
    pub fn init(
        dims: Dims,
        config: ModelConfig,
        static_map: Option<StaticPartitionMap>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if config.mode == PartitionMode::Static {
            let map = static_map.as_ref().ok_or_else(|| {
                Error::Config("static_map: static mode needs a static partition map in the bundle".into())
            })?;
            map.validate(&dims)?;
        }
        let (n, m, h, hid) = (dims.feature_dim, dims.text_dim, config.attention_dim, config.hidden_dim);
        let attention = AttentionPartition::new(glorot(rng, m, h), glorot(rng, n, h))?;
        let mlp = Mlp {
            w1: glorot(rng, n, hid),
            b1: Tensor::zeros(&[1, hid]),
            w2: glorot(rng, hid, m),
            b2: Tensor::zeros(&[1, m]),
        };
        Ok(Self {
            dims,
            alpha_logits: Tensor::zeros(&[1, dims.rows()]),
            log_tau: Tensor::filled(&[1, 1], config.tau.ln()),
            global_query: Tensor::zeros(&[1, dims.text_dim]),
            config,
            static_map,
            attention,
            mlp,
        })
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.data()[0].exp()
    }

    /// Scale indices that enter the loss.
    pub fn scales(&self) -> Vec<usize> {
        match self.config.mode {
            PartitionMode::Global => vec![self.dims.global_row()],
            _ => (0..self.dims.rows()).collect(),
        }
    }

    /// Effective weights over [`Self::scales`]; always on the simplex.
    pub fn alphas(&self) -> Vec<f64> {
        let k = self.scales().len();
        if self.config.mode == PartitionMode::Global {
            return vec![1.0];
        }
        match self.config.alpha_mode {
            AlphaMode::Uniform => vec![1.0 / k as f64; k],
            AlphaMode::Learnable => {
                let mut a = self.alpha_logits.data().to_vec();
                crate::tensor::softmax_in_place(&mut a);
                a
            }
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        Some(match name {
            "w_q" => &self.attention.w_q,
            "w_k" => &self.attention.w_k,
            "mlp.w1" => &self.mlp.w1,
            "mlp.b1" => &self.mlp.b1,
            "mlp.w2" => &self.mlp.w2,
            "mlp.b2" => &self.mlp.b2,
            "alpha_logits" => &self.alpha_logits,
            "log_tau" => &self.log_tau,
            "global_query" => &self.global_query,
            _ => return None,
        })
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        Some(match name {
            "w_q" => &mut self.attention.w_q,
            "w_k" => &mut self.attention.w_k,
            "mlp.w1" => &mut self.mlp.w1,
            "mlp.b1" => &mut self.mlp.b1,
            "mlp.w2" => &mut self.mlp.w2,
            "mlp.b2" => &mut self.mlp.b2,
            "alpha_logits" => &mut self.alpha_logits,
            "log_tau" => &mut self.log_tau,
            "global_query" => &mut self.global_query,
            _ => return None,
        })
    }

    /// Parameters the current configuration actually trains.
    pub fn trainable(&self) -> Vec<&'static str> {
        PARAM_NAMES
            .iter()
            .copied()
            .filter(|&name| match name {
                "w_q" | "w_k" => self.config.mode == PartitionMode::Adaptive,
                "alpha_logits" => {
                    self.config.mode != PartitionMode::Global && self.config.alpha_mode == AlphaMode::Learnable
                }
                "log_tau" => self.config.learn_tau,
                _ => true,
            })
            .collect()
    }

    /// `V = f_skel(R)` for every row of `r`.
    pub fn project(&self, r: &Tensor) -> Result<Tensor> {
        self.mlp.forward(r)
    }

    /// Visual representations for all `P+Z+1` rows, using `bank` as the
    /// attention queries in adaptive mode. Global mode returns the node mean
    /// in every row.
    pub fn represent(&self, nodes: &Tensor, bank: &Tensor) -> Result<partition::PartitionOutput> {
        match self.config.mode {
            PartitionMode::Global => {
                let mean = partition::node_mean(nodes)?;
                let rows = (0..self.dims.rows()).flat_map(|_| mean.data().to_vec()).collect();
                Ok(partition::PartitionOutput {
                    r: Tensor::matrix(self.dims.rows(), self.dims.feature_dim, rows)?,
                    a: None,
                })
            }
            PartitionMode::Static => {
                let map = self
                    .static_map
                    .as_ref()
                    .ok_or(Error::Config("static_map missing".into()))?;
                Ok(partition::partition_static(nodes, map, &self.dims)?)
            }
            PartitionMode::Adaptive => Ok(partition::partition_adaptive(nodes, bank, &self.attention)?),
        }
    }

    /// Global visual representation `R_{P+Z}` (`1×n`). In adaptive mode the
    /// attention query is [`Self::global_query`], which does not depend on
    /// the candidate classes.
    pub fn global_representation(&self, nodes: &Tensor) -> Result<Tensor> {
        match self.config.mode {
            PartitionMode::Global | PartitionMode::Static => Ok(partition::node_mean(nodes)?),
            PartitionMode::Adaptive => Ok(partition::partition_adaptive(nodes, &self.global_query, &self.attention)?.r),
        }
    }

    /// Projected (and, with `normalize`, unit-length) global embedding.
    pub fn global_embedding(&self, nodes: &Tensor) -> Result<Vec<f64>> {
        let r = self.global_representation(nodes)?;
        let mut v = self.project(&r)?.into_data();
        if self.config.normalize {
            normalize(&mut v);
        }
        Ok(v)
    }

    /// Text row as it enters the dot products.
    pub fn text_row(&self, row: &[f64]) -> Vec<f64> {
        let mut f = row.to_vec();
        if self.config.normalize {
            normalize(&mut f);
        }
        f
    }
}

pub(crate) fn normalize(v: &mut [f64]) {
    let norm = (v.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
}

/// Mean of the global rows of `banks`; training stores the seen-class mean
/// as the inference query.
pub fn mean_global_query<'a>(banks: impl IntoIterator<Item = &'a DescriptionBank>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for bank in banks {
        let g = bank.global();
        if acc.is_empty() {
            acc = vec![0.0; g.len()];
        }
        acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        count += 1;
    }
    acc.iter_mut().for_each(|v| *v /= count.max(1) as f64);
    acc
}

/// One scale's contrastive loss evaluated directly.
///
/// `class_rows` are `F_i^o` for every seen class, `batch_rows` are `V_i^w`
/// for every batch sample; both must contain the positive pair.
pub fn scale_loss(v: &[f64], f: &[f64], class_rows: &[&[f64]], batch_rows: &[&[f64]], tau: f64) -> Result<f64> {
    if class_rows.is_empty() {
        return Err(Error::EmptySeen);
    }
    if batch_rows.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let pos = dot(v, f) / tau;
    let to_classes: Vec<f64> = class_rows.iter().map(|fo| dot(v, fo) / tau).collect();
    let to_batch: Vec<f64> = batch_rows.iter().map(|vw| dot(vw, f) / tau).collect();
    Ok(-0.5 * (pos - log_sum_exp(&to_classes)) - 0.5 * (pos - log_sum_exp(&to_batch)))
}

/// Samples and class semantics for one training step.
pub struct BatchContext<'a> {
    /// `(S×n node matrix, class id)` per sample.
    pub samples: Vec<(&'a Tensor, u32)>,
    pub banks: &'a BTreeMap<u32, DescriptionBank>,
    pub seen: &'a [u32],
}

impl BatchContext<'_> {
    fn check(&self) -> Result<()> {
        if self.seen.is_empty() {
            return Err(Error::EmptySeen);
        }
        if self.samples.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        for &c in self.seen {
            if !self.banks.contains_key(&c) {
                return Err(Error::MissingBank(c));
            }
        }
        for &(_, c) in &self.samples {
            if !self.seen.contains(&c) {
                return Err(Error::Mismatch(format!(
                    "batch sample of class {c} is not a seen class"
                )));
            }
        }
        Ok(())
    }
}

/// Training loss recorded on `tape`, plus the tape handles of every
/// trainable parameter in [`AlignmentModel::trainable`] order.
pub fn record_train_loss(
    model: &AlignmentModel,
    tape: &mut GradTape,
    ctx: &BatchContext<'_>,
) -> Result<(Var, Vec<(&'static str, Var)>)> {
    ctx.check()?;
    let dims = model.dims;
    let trainable = model.trainable();
    let mut handles: BTreeMap<&'static str, Var> = BTreeMap::new();
    for name in PARAM_NAMES {
        let t = model.param(name).expect("known name").clone();
        let v = if trainable.contains(&name) {
            tape.param(t)?
        } else {
            tape.constant(t)?
        };
        handles.insert(name, v);
    }

    let scales = model.scales();
    let per_sample = scales.len();
    let batch = ctx.samples.len();

    let mut reps = Vec::with_capacity(batch);
    for &(nodes, class) in &ctx.samples {
        let bank = &ctx.banks[&class];
        let r = match model.config.mode {
            PartitionMode::Global => tape.constant(partition::node_mean(nodes)?)?,
            PartitionMode::Static => {
                let map = model
                    .static_map
                    .as_ref()
                    .ok_or(Error::Config("static_map missing".into()))?;
                tape.constant(partition::partition_static(nodes, map, &dims)?.r)?
            }
            PartitionMode::Adaptive => {
                let g = tape.constant(nodes.clone())?;
                let mut queries = bank.rows.clone();
                if model.config.global_query == GlobalQuery::Shared {
                    let g = dims.global_row() * dims.text_dim;
                    queries.data_mut()[g..].copy_from_slice(model.global_query.data());
                }
                let f = tape.constant(queries)?;
                partition::partition_adaptive_on_tape(tape, g, f, handles["w_q"], handles["w_k"])?.0
            }
        };
        reps.push(r);
    }
    let stacked = tape.vstack(&reps)?;
    let hidden = tape.matmul(stacked, handles["mlp.w1"])?;
    let hidden = tape.add_row(hidden, handles["mlp.b1"])?;
    let hidden = tape.relu(hidden)?;
    let v_all = tape.matmul(hidden, handles["mlp.w2"])?;
    let mut v_all = tape.add_row(v_all, handles["mlp.b2"])?;
    if model.config.normalize {
        v_all = tape.normalize_rows(v_all)?;
    }

    let inv_tau = if model.config.learn_tau {
        let neg = tape.scale(handles["log_tau"], -1.0)?;
        Some(tape.exp(neg)?)
    } else {
        None
    };
    let tau = model.tau();
    let apply_tau = |tape: &mut GradTape, x: Var| -> Result<Var> {
        Ok(match inv_tau {
            Some(s) => tape.mul_scalar(x, s)?,
            None => tape.scale(x, 1.0 / tau)?,
        })
    };

    let pos_class: Vec<usize> = ctx
        .samples
        .iter()
        .map(|&(_, c)| ctx.seen.iter().position(|&s| s == c).expect("checked"))
        .collect();
    let w = -0.5 / batch as f64;

    let mut losses = Vec::with_capacity(per_sample);
    for (u, &i) in scales.iter().enumerate() {
        let v_i = tape.gather_rows(v_all, (0..batch).map(|b| b * per_sample + u).collect())?;
        let seen_rows: Vec<Vec<f64>> = ctx
            .seen
            .iter()
            .map(|c| model.text_row(ctx.banks[c].rows.row(i)))
            .collect();
        let f_seen = tape.constant(Tensor::from_rows(&seen_rows)?)?;
        let pos_rows: Vec<Vec<f64>> = ctx
            .samples
            .iter()
            .map(|&(_, c)| model.text_row(ctx.banks[&c].rows.row(i)))
            .collect();
        let f_pos = tape.constant(Tensor::from_rows(&pos_rows)?)?;

        let to_classes = tape.matmul_nt(v_i, f_seen)?;
        let to_classes = apply_tau(tape, to_classes)?;
        let ls_classes = tape.log_softmax_rows(to_classes)?;
        let to_batch = tape.matmul_nt(f_pos, v_i)?;
        let to_batch = apply_tau(tape, to_batch)?;
        let ls_batch = tape.log_softmax_rows(to_batch)?;

        let l1 = tape.weighted_sum(
            ls_classes,
            pos_class.iter().enumerate().map(|(b, &p)| (b, p, w)).collect(),
        )?;
        let l2 = tape.weighted_sum(ls_batch, (0..batch).map(|b| (b, b, w)).collect())?;
        losses.push(tape.add(l1, l2)?);
    }

    let total = if model.config.mode == PartitionMode::Global {
        losses[0]
    } else {
        let alpha = match model.config.alpha_mode {
            AlphaMode::Uniform => None,
            AlphaMode::Learnable => Some(tape.softmax_rows(handles["alpha_logits"])?),
        };
        let mut acc: Option<Var> = None;
        for (u, &l) in losses.iter().enumerate() {
            let term = match alpha {
                None => tape.scale(l, 1.0 / per_sample as f64)?,
                Some(a) => {
                    let a_u = tape.weighted_sum(a, vec![(0, u, 1.0)])?;
                    tape.mul_scalar(l, a_u)?
                }
            };
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term)?,
            });
        }
        acc.expect("at least one scale")
    };

    let params = trainable.into_iter().map(|n| (n, handles[n])).collect();
    Ok((total, params))
}

/// Training loss value for a batch.
pub fn train_loss(model: &AlignmentModel, ctx: &BatchContext<'_>) -> Result<f64> {
    let mut tape = GradTape::new();
    let (loss, _) = record_train_loss(model, &mut tape, ctx)?;
    Ok(tape.value(loss).data()[0])
}
