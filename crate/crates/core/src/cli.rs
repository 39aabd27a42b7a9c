//! Command-line front end. Exit codes: 0 ok, 1 runtime failure, 2 usage.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::align::{AlphaMode, GlobalQuery, PartitionMode};
use crate::bundle::{load_bundle, load_split, write_bundle, write_split, Bundle, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_attention, write_report};
use crate::synth::{generate, SynthSpec};
use crate::train::{train_with, Checkpoint, TrainConfig, CHECKPOINT_FILE};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const THREADS_ENV: &str = "PURLS_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "purls",
    version,
    about = "Zero-shot skeleton action recognition by partitioned alignment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on the seen classes of a split and write a checkpoint directory.
    Train(TrainArgs),
    /// Zero-shot evaluation on the unseen classes of a split.
    Eval(EvalArgs),
    /// Generate a compositional synthetic bundle plus split.json.
    Synth(SynthArgs),
    /// Write one sample's attention matrix as CSV plus a JSON sidecar.
    ExportAttention(ExportArgs),
    /// Check a bundle (and optionally a split) without training.
    Validate(ValidateArgs),
}

/// Optional overrides, one per `TrainConfig` field.
#[derive(Debug, Args, Default)]
struct TrainFlags {
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<PartitionMode>,
    #[arg(long, value_enum)]
    alpha_mode: Option<AlphaMode>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    learn_tau: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    normalize: Option<bool>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    attention_dim: Option<usize>,
    #[arg(long, value_enum)]
    global_query: Option<GlobalQuery>,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f.clone() {
                    cfg.$f = v;
                }
            )*};
        }
        set!(
            learning_rate,
            batch_size,
            max_epochs,
            patience,
            seed,
            mode,
            alpha_mode,
            tau,
            learn_tau,
            normalize,
            hidden_dim,
            attention_dim,
            global_query
        );
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Bundle directory.
    #[arg(long)]
    data: PathBuf,
    /// Split JSON.
    #[arg(long)]
    split: PathBuf,
    /// JSON file with `TrainConfig` defaults; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long, default_value = "checkpoint")]
    out: PathBuf,
    /// Print one line per epoch to stderr.
    #[arg(long)]
    verbose: bool,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Report path; defaults to `<checkpoint>/eval_report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also export the attention of this sample id.
    #[arg(long, value_name = "SAMPLE_ID")]
    export_attention: Option<String>,
    /// Bank used for the export; defaults to the sample's own class.
    #[arg(long)]
    bank: Option<u32>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON `SynthSpec`; flags override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Total number of classes (seen plus unseen).
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    unseen: Option<usize>,
    #[arg(long)]
    concepts: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    temporal: Option<usize>,
    #[arg(long)]
    joints: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    text_dim: Option<usize>,
    #[arg(long)]
    parts: Option<usize>,
    #[arg(long)]
    intervals: Option<usize>,
    #[arg(long)]
    joint_signature: Option<f64>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    sample: String,
    #[arg(long)]
    bank: Option<u32>,
    /// Output prefix; `.csv` and `.json` are appended.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: Option<PathBuf>,
}

/// Everything needed to repeat a run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Input path to sha256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn hash_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

fn write_run_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    crate::fsutil::write_atomic(path, text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn load_data(data: &Path) -> Result<Bundle> {
    Ok(load_bundle(data)?)
}

fn cmd_train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    a.flags.apply(&mut cfg);
    cfg.validate()?;
    let bundle = load_data(&a.data)?;
    let split = load_split(&a.split, Some(&bundle.meta))?;
    let verbose = a.verbose;
    let ck = train_with(&bundle, &split, &cfg, |r| {
        if verbose {
            eprintln!("epoch {:4}  loss {:.6}  seen acc {:.4}", r.epoch, r.loss, r.accuracy);
        }
    })?;
    ck.save(&a.out)?;
    println!(
        "best epoch {} of {}, seen accuracy {:.4}, checkpoint {}",
        ck.best_epoch,
        ck.epochs_run,
        ck.best_accuracy,
        a.out.display()
    );

    let manifest_file = a.data.join(MANIFEST_FILE);
    let mut inputs: Vec<&Path> = vec![&manifest_file, &a.split];
    if let Some(c) = &a.config {
        inputs.push(c);
    }
    write_run_manifest(
        &a.out.join(RUN_MANIFEST_FILE),
        &RunManifest {
            command: "train".into(),
            args: argv.to_vec(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(&cfg).expect("config serializes"),
            seeds: vec![cfg.seed],
            inputs: hash_inputs(&inputs)?,
            outputs: vec![a.out.join(CHECKPOINT_FILE).display().to_string()],
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        },
    )
}

fn find_sample<'a>(bundle: &'a Bundle, id: &str) -> Result<&'a crate::bundle::SkeletonFeatures> {
    bundle
        .samples
        .iter()
        .find(|s| s.sample_id == id)
        .ok_or_else(|| Error::UnknownSample(id.to_string()))
}

fn export_one(
    bundle: &Bundle,
    ck: &Checkpoint,
    sample_id: &str,
    bank: Option<u32>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let sample = find_sample(bundle, sample_id)?;
    let class = bank.unwrap_or(sample.class_id);
    let bank = bundle.bank(class).ok_or(Error::MissingBank(class))?;
    export_attention(sample, bank, &bundle.meta.row_labels(), &ck.model, out)?;
    Ok(vec![out.with_extension("csv"), out.with_extension("json")])
}

fn cmd_eval(a: &EvalArgs, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    let bundle = load_data(&a.data)?;
    let split = load_split(&a.split, Some(&bundle.meta))?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let report = evaluate(&bundle, &split, &ck.model)?;
    let out = a.out.clone().unwrap_or_else(|| a.checkpoint.join("eval_report.json"));
    write_report(&report, &out)?;
    println!(
        "top1 {:.4} over {} samples, report {}",
        report.top1,
        report.n_samples,
        out.display()
    );

    let mut outputs = vec![out.display().to_string()];
    if let Some(id) = &a.export_attention {
        let prefix = out.with_file_name(format!("attention_{id}"));
        for p in export_one(&bundle, &ck, id, a.bank, &prefix)? {
            outputs.push(p.display().to_string());
        }
    }
    let manifest_file = a.data.join(MANIFEST_FILE);
    let ck_file = a.checkpoint.join(CHECKPOINT_FILE);
    write_run_manifest(
        &out.with_file_name(RUN_MANIFEST_FILE),
        &RunManifest {
            command: "eval".into(),
            args: argv.to_vec(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(&ck.config).expect("config serializes"),
            seeds: vec![ck.config.seed],
            inputs: hash_inputs(&[&manifest_file, &a.split, &ck_file])?,
            outputs,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        },
    )
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => {$(
            if let Some(v) = a.$f {
                spec.$f = v;
            }
        )*};
    }
    set!(
        concepts,
        samples_per_class,
        sigma,
        seed,
        temporal,
        joints,
        feature_dim,
        text_dim,
        parts,
        intervals,
        joint_signature
    );
    if let Some(u) = a.unseen {
        spec.unseen_classes = u;
    }
    if let Some(total) = a.classes {
        spec.seen_classes = total.checked_sub(spec.unseen_classes).ok_or_else(|| {
            Error::Config(format!(
                "--classes {total} is smaller than the {} unseen classes",
                spec.unseen_classes
            ))
        })?;
    }
    let out = generate(&spec)?;
    write_bundle(&out.bundle, &a.out)?;
    let split_path = a.out.join("split.json");
    write_split(&split_path, &out.split)?;
    println!(
        "{} seen + {} unseen classes, {} samples, bundle {}",
        out.split.seen.len(),
        out.split.unseen.len(),
        out.bundle.samples.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let bundle = load_data(&a.data)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    if bundle.meta.dims != ck.model.dims {
        return Err(Error::Mismatch(format!(
            "bundle dims {:?} differ from checkpoint dims {:?}",
            bundle.meta.dims, ck.model.dims
        )));
    }
    for p in export_one(&bundle, &ck, &a.sample, a.bank, &a.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_validate(a: &ValidateArgs) -> Result<()> {
    let bundle = load_data(&a.data)?;
    if let Some(s) = &a.split {
        let split = load_split(s, Some(&bundle.meta))?;
        println!("split ok: {} seen, {} unseen", split.seen.len(), split.unseen.len());
    }
    println!(
        "bundle ok: {} classes, {} samples, dims {:?}",
        bundle.meta.classes.len(),
        bundle.samples.len(),
        bundle.meta.dims
    );
    Ok(())
}

fn thread_count() -> std::result::Result<Option<usize>, String> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(format!("{THREADS_ENV} must be a positive integer, got {v:?}")),
        },
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let threads = match thread_count() {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 2;
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 1;
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::Train(a) => cmd_train(a, &argv),
        Command::Eval(a) => cmd_eval(a, &argv),
        Command::Synth(a) => cmd_synth(a),
        Command::ExportAttention(a) => cmd_export(a),
        Command::Validate(a) => cmd_validate(a),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
