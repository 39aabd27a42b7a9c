//! Seeded Adam training with early stopping and checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamState};
use crate::align::Mlp;
use crate::align::{
    mean_global_query, record_train_loss, AlignmentModel, AlphaMode, BatchContext, GlobalQuery, ModelConfig,
    PartitionMode,
};
use crate::bundle::ptf::{self, DType};
use crate::bundle::{Bundle, Dims, SkeletonFeatures, SplitSpec, StaticPartitionMap};
use crate::error::{Error, Result};
use crate::eval::accuracy_over;
use crate::partition::AttentionPartition;
use crate::tape::GradTape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub mode: PartitionMode,
    pub alpha_mode: AlphaMode,
    pub tau: f64,
    pub learn_tau: bool,
    pub normalize: bool,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub global_query: GlobalQuery,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            learning_rate: 1e-4,
            batch_size: 256,
            max_epochs: 300,
            patience: 20,
            seed: 0,
            mode: m.mode,
            alpha_mode: m.alpha_mode,
            tau: m.tau,
            learn_tau: m.learn_tau,
            normalize: m.normalize,
            hidden_dim: m.hidden_dim,
            attention_dim: m.attention_dim,
            global_query: m.global_query,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            alpha_mode: self.alpha_mode,
            tau: self.tau,
            learn_tau: self.learn_tau,
            normalize: self.normalize,
            hidden_dim: self.hidden_dim,
            attention_dim: self.attention_dim,
            global_query: self.global_query,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // A zero learning rate is allowed: it freezes the model.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be a non-negative number".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience ({}) exceeds max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        self.model_config().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// ChaCha stream position, enough to resume the shuffling sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: String,
}

impl RngState {
    fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: AlignmentModel,
    pub config: TrainConfig,
    /// Epoch whose parameters are stored (1-based; 0 = initialization).
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_accuracy: f64,
    pub history: Vec<EpochRecord>,
    pub rng: RngState,
}

/// Training data for one split.
struct TrainSet<'a> {
    samples: Vec<&'a SkeletonFeatures>,
    nodes: Vec<Tensor>,
}

pub fn train(bundle: &Bundle, split: &SplitSpec, cfg: &TrainConfig) -> Result<Checkpoint> {
    train_with(bundle, split, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    bundle: &Bundle,
    split: &SplitSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    cfg.validate()?;
    split.validate(Some(&bundle.meta))?;
    if split.seen.is_empty() {
        return Err(Error::EmptySeen);
    }
    let seen_banks = split
        .seen
        .iter()
        .map(|&c| bundle.bank(c).ok_or(Error::MissingBank(c)))
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<&SkeletonFeatures> = bundle.samples_of(&split.seen).collect();
    if samples.is_empty() {
        return Err(Error::Config("no training samples belong to the seen classes".into()));
    }
    let data = TrainSet {
        nodes: samples.iter().map(|s| s.nodes()).collect(),
        samples,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = AlignmentModel::init(
        *bundle.dims(),
        cfg.model_config(),
        bundle.meta.static_map.clone(),
        &mut rng,
    )?;
    let query = mean_global_query(seen_banks.iter().copied());
    model.global_query = Tensor::matrix(1, query.len(), query)?;
    let trainable = model.trainable();
    let mut state = AdamState::new(
        &trainable
            .iter()
            .map(|n| model.param(n).expect("known"))
            .collect::<Vec<_>>(),
    );

    let mut best = (f64::NEG_INFINITY, 0usize, model.clone());
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..data.samples.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let ctx = BatchContext {
                samples: chunk
                    .iter()
                    .map(|&i| (&data.nodes[i], data.samples[i].class_id))
                    .collect(),
                banks: &bundle.banks,
                seen: &split.seen,
            };
            let mut tape = GradTape::new();
            let (loss, params) = record_train_loss(&model, &mut tape, &ctx)?;
            let vars: Vec<_> = params.iter().map(|&(_, v)| v).collect();
            let grads = tape.grad(loss, &vars)?;
            loss_sum += tape.value(loss).data()[0] * chunk.len() as f64;
            drop(tape);
            let mut slots = param_slots(&mut model, &trainable);
            adam_step(&mut slots, &grads, &mut state, cfg.learning_rate)?;
        }
        let accuracy = accuracy_over(&data.samples, &seen_banks, &model)?;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / data.samples.len() as f64,
            accuracy,
        };
        on_epoch(&record);
        history.push(record);
        if accuracy > best.0 {
            best = (accuracy, epoch, model.clone());
        }
        if epoch - best.1 >= cfg.patience {
            break;
        }
    }

    Ok(Checkpoint {
        model: best.2,
        config: cfg.clone(),
        best_epoch: best.1,
        epochs_run: history.len(),
        best_accuracy: best.0,
        history,
        rng: RngState::capture(cfg.seed, &rng),
    })
}

fn param_slots<'a>(model: &'a mut AlignmentModel, names: &[&str]) -> Vec<&'a mut Tensor> {
    let AlignmentModel {
        attention,
        mlp,
        alpha_logits,
        log_tau,
        ..
    } = model;
    let mut all: Vec<(&str, &'a mut Tensor)> = vec![
        ("w_q", &mut attention.w_q),
        ("w_k", &mut attention.w_k),
        ("mlp.w1", &mut mlp.w1),
        ("mlp.b1", &mut mlp.b1),
        ("mlp.w2", &mut mlp.w2),
        ("mlp.b2", &mut mlp.b2),
        ("alpha_logits", alpha_logits),
        ("log_tau", log_tau),
    ];
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let pos = all.iter().position(|(n, _)| n == name).expect("known parameter");
        out.push(all.swap_remove(pos).1);
    }
    out
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    dims: Dims,
    model_config: ModelConfig,
    static_map: Option<StaticPartitionMap>,
    train_config: TrainConfig,
    best_epoch: usize,
    epochs_run: usize,
    best_accuracy: f64,
    history: Vec<EpochRecord>,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn tensor_file(name: &str) -> String {
    format!("{}.ptf", name.replace('.', "_"))
}

impl Checkpoint {
    /// Writes every model tensor as f64 `.ptf` plus `checkpoint.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::new();
        for name in crate::align::STATE_NAMES {
            let t = self.model.param(name).expect("known");
            let file = tensor_file(name);
            let path = dir.join(&file);
            let bytes = ptf::write_file(&path, t, DType::F64).map_err(|e| Error::io(&path, e))?;
            tensors.push(TensorEntry {
                name: name.to_string(),
                file,
                shape: t.shape().to_vec(),
                sha256: sha256_hex(&bytes),
            });
        }
        let meta = CheckpointFile {
            format_version: 1,
            dims: self.model.dims,
            model_config: self.model.config.clone(),
            static_map: self.model.static_map.clone(),
            train_config: self.config.clone(),
            best_epoch: self.best_epoch,
            epochs_run: self.epochs_run,
            best_accuracy: self.best_accuracy,
            history: self.history.clone(),
            rng: self.rng.clone(),
            tensors,
        };
        let path = dir.join(CHECKPOINT_FILE);
        let text = serde_json::to_string_pretty(&meta).expect("checkpoint serializes");
        crate::fsutil::write_atomic(&path, text.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if meta.format_version != 1 {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                meta.format_version
            )));
        }
        let mut loaded = std::collections::BTreeMap::new();
        for entry in &meta.tensors {
            let p = dir.join(&entry.file);
            let (t, _, bytes) = ptf::read_file(&p).map_err(|e| Error::io(&p, e))?;
            if sha256_hex(&bytes) != entry.sha256 {
                return Err(Error::io(&p, "checksum mismatch"));
            }
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Mismatch(format!(
                    "{}: shape {:?} vs {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape
                )));
            }
            loaded.insert(entry.name.clone(), t);
        }
        let mut take = |name: &str| -> Result<Tensor> {
            loaded
                .remove(name)
                .ok_or_else(|| Error::Mismatch(format!("checkpoint lacks tensor {name}")))
        };
        let attention = AttentionPartition::new(take("w_q")?, take("w_k")?)?;
        let mlp = Mlp {
            w1: take("mlp.w1")?,
            b1: take("mlp.b1")?,
            w2: take("mlp.w2")?,
            b2: take("mlp.b2")?,
        };
        let model = AlignmentModel {
            dims: meta.dims,
            config: meta.model_config,
            static_map: meta.static_map,
            attention,
            mlp,
            alpha_logits: take("alpha_logits")?,
            log_tau: take("log_tau")?,
            global_query: take("global_query")?,
        };
        check_model_shapes(&model)?;
        Ok(Self {
            model,
            config: meta.train_config,
            best_epoch: meta.best_epoch,
            epochs_run: meta.epochs_run,
            best_accuracy: meta.best_accuracy,
            history: meta.history,
            rng: meta.rng,
        })
    }
}

fn check_model_shapes(model: &AlignmentModel) -> Result<()> {
    let d = model.dims;
    let c = &model.config;
    let expected: [(&str, [usize; 2]); 9] = [
        ("w_q", [d.text_dim, c.attention_dim]),
        ("w_k", [d.feature_dim, c.attention_dim]),
        ("mlp.w1", [d.feature_dim, c.hidden_dim]),
        ("mlp.b1", [1, c.hidden_dim]),
        ("mlp.w2", [c.hidden_dim, d.text_dim]),
        ("mlp.b2", [1, d.text_dim]),
        ("alpha_logits", [1, d.rows()]),
        ("log_tau", [1, 1]),
        ("global_query", [1, d.text_dim]),
    ];
    for (name, shape) in expected {
        let t = model.param(name).expect("known");
        if t.shape() != shape {
            return Err(Error::Mismatch(format!(
                "{name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}
