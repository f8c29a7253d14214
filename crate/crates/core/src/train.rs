//! Supervised instruction pretraining and few-shot head tuning.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::model::checkpoint::{self, CheckpointError, DType};
use crate::model::{self, encode, Example, Mat, ModelConfig, ModelError, ModelParams};
use crate::molgraph::{parse_smiles, SmilesError};
use crate::structure::GraphStructure;
use crate::tasks::{deterministic_split, format_label, Label, TaskKind, TaskRecord, TooFewSamples};
use crate::tokenizer::{Vocab, VocabError, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Architecture knobs; the vocabulary size comes from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub d_kv: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_len: usize,
    pub init_std: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::small(0);
        Self {
            d_model: c.d_model,
            d_kv: c.d_kv,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            enc_layers: c.enc_layers,
            dec_layers: c.dec_layers,
            max_len: c.max_len,
            init_std: c.init_std,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            d_kv: self.d_kv,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            max_len: self.max_len,
            buckets: Default::default(),
            init_std: self.init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Save an intermediate checkpoint every this many epochs; 0 saves only
    /// the final one.
    pub checkpoint_every: usize,
    /// Seed of the per-task train/valid/test index split.
    pub split_seed: u64,
    pub model: ModelShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            precision: Precision::F64,
            checkpoint_every: 0,
            split_seed: 0,
            model: ModelShape::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid TOML config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid JSON config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl TrainConfig {
    /// Reads a `.json` file as JSON and anything else as TOML.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let config: TrainConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("lr", self.lr),
            ("eps", self.eps),
            ("clip", self.clip),
            ("init_std", self.model.init_std),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(ConfigError::Invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        let m = &self.model;
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("d_model", m.d_model),
            ("d_kv", m.d_kv),
            ("n_heads", m.n_heads),
            ("d_ff", m.d_ff),
            ("max_len", m.max_len),
        ] {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no tasks to train on")]
    NoTasks,
    #[error("loss diverged at epoch {epoch}: {loss} against initial {initial}")]
    DivergedLoss { epoch: usize, loss: f64, initial: f64 },
    #[error("few-shot tuning needs at least one shot per class")]
    TooFewShots,
    #[error("task {task_id}: {source}")]
    Split {
        task_id: String,
        #[source]
        source: TooFewSamples,
    },
    #[error("task {task_id}: invalid SMILES {smiles:?}: {source}")]
    Smiles {
        task_id: String,
        smiles: String,
        #[source]
        source: SmilesError,
    },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TrainError {
    pub fn code(&self) -> &'static str {
        match self {
            TrainError::NoTasks => "NoTasks",
            TrainError::DivergedLoss { .. } => "DivergedLoss",
            TrainError::TooFewShots => "TooFewShots",
            TrainError::Split { .. } => "TooFewSamples",
            TrainError::Smiles { source, .. } => source.code(),
            TrainError::Vocab(_) => "VocabError",
            TrainError::Model(e) => e.code(),
            TrainError::Checkpoint(e) => e.code(),
            TrainError::Io(_) => "IoError",
        }
    }
}

/// Per-epoch losses and the final checkpoint location. Wall time is
/// informational and ignored by `==`.
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub valid_losses: Vec<f64>,
    pub wall_time_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        bits(&self.epoch_losses) == bits(&other.epoch_losses)
            && bits(&self.valid_losses) == bits(&other.valid_losses)
            && self.checkpoint == other.checkpoint
    }
}

/// Rescales `grads` so their global norm is at most `clip`; returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut ModelParams, clip: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > clip {
        grads.scale(clip / norm);
    }
    norm
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Updates each tensor slice in place; `params` and `grads` must list the
    /// same tensors in the same order on every call.
    pub fn step_slices<'a>(&mut self, params: impl IntoIterator<Item = &'a mut [f64]>, grads: &[&[f64]]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, p) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], grads[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        let g: Vec<&[f64]> = grads.named().into_iter().map(|(_, m)| m.data()).collect();
        let p = params.named_mut().into_iter().map(|(_, m)| m.data_mut());
        self.step_slices(p, &g);
    }
}

fn round_to_f32(p: &mut ModelParams) {
    p.for_each_mut(|_, m| {
        for v in m.data_mut() {
            *v = *v as f32 as f64;
        }
    });
}

/// Examples with parsed graphs and token ids, grouped by split.
pub struct Prepared {
    pub structures: Vec<GraphStructure>,
    pub train: Vec<PreparedExample>,
    pub valid: Vec<PreparedExample>,
    pub test: Vec<PreparedExample>,
}

#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub task: usize,
    pub structure: usize,
    pub instruction: Vec<u32>,
    pub target: Vec<u32>,
    pub label: Label,
}

impl PreparedExample {
    pub fn as_example<'a>(&'a self, structures: &'a [GraphStructure]) -> Example<'a> {
        Example {
            structure: &structures[self.structure],
            instruction: &self.instruction,
            target: &self.target,
        }
    }
}

/// Label text as token ids followed by EOS.
pub fn encode_target(vocab: &Vocab, label: &Label) -> Vec<u32> {
    let mut t = vocab.encode(&format_label(label));
    t.push(EOS);
    t
}

/// Parses every molecule once and splits each task by sample index.
pub fn prepare(tasks: &[TaskRecord], vocab: &Vocab, split_seed: u64) -> Result<Prepared, TrainError> {
    let mut structures = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut out = Prepared {
        structures: Vec::new(),
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for (ti, task) in tasks.iter().enumerate() {
        let split = deterministic_split(task.samples.len(), split_seed).map_err(|source| TrainError::Split {
            task_id: task.task_id.clone(),
            source,
        })?;
        let instruction = vocab.encode(&task.instruction);
        let mut make = |idx: &[usize]| -> Result<Vec<PreparedExample>, TrainError> {
            idx.iter()
                .map(|&i| {
                    let s = &task.samples[i];
                    let structure = match seen.get(s.smiles.as_str()) {
                        Some(&k) => k,
                        None => {
                            let g = parse_smiles(&s.smiles).map_err(|source| TrainError::Smiles {
                                task_id: task.task_id.clone(),
                                smiles: s.smiles.clone(),
                                source,
                            })?;
                            structures.push(GraphStructure::new(g));
                            seen.insert(&s.smiles, structures.len() - 1);
                            structures.len() - 1
                        }
                    };
                    Ok(PreparedExample {
                        task: ti,
                        structure,
                        instruction: instruction.clone(),
                        target: encode_target(vocab, &s.label),
                        label: s.label,
                    })
                })
                .collect()
        };
        out.train.extend(make(&split.train)?);
        out.valid.extend(make(&split.valid)?);
        out.test.extend(make(&split.test)?);
    }
    out.structures = structures;
    Ok(out)
}

/// Vocabulary over instructions and label strings.
pub fn build_vocab(tasks: &[TaskRecord]) -> Result<Vocab, VocabError> {
    let mut corpus: Vec<String> = Vec::new();
    for t in tasks {
        corpus.push(t.instruction.clone());
        if t.kind == TaskKind::Regression {
            corpus.extend(t.samples.iter().map(|s| format_label(&s.label)));
        }
    }
    Vocab::build(&corpus)
}

fn mean_loss(p: &ModelParams, structures: &[GraphStructure], data: &[PreparedExample]) -> Result<f64, ModelError> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let batch: Vec<Example<'_>> = data.iter().map(|e| e.as_example(structures)).collect();
    let per: Vec<f64> = {
        use rayon::prelude::*;
        batch
            .par_iter()
            .map(|ex| model::sequence_nll(p, ex).map(|(nll, len)| nll / len as f64))
            .collect::<Result<_, _>>()?
    };
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub struct Pretrained {
    pub params: ModelParams,
    pub vocab: Vocab,
    pub report: TrainReport,
}

fn log_event(log: &mut dyn Write, event: serde_json::Value) -> std::io::Result<()> {
    writeln!(log, "{event}")
}

fn intermediate_path(out: &Path, epoch: usize) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("gmlt");
    out.with_file_name(format!("{stem}.epoch{epoch}.{ext}"))
}

/// Trains a fresh model on the train split of every task. Batches mix tasks
/// and are drawn uniformly over samples. With `out` set, the final model (and
/// any intermediate ones) is written there.
pub fn pretrain(
    tasks: &[TaskRecord],
    config: &TrainConfig,
    out: Option<&Path>,
    log: &mut dyn Write,
) -> Result<Pretrained, TrainError> {
    if tasks.is_empty() {
        return Err(TrainError::NoTasks);
    }
    let start = Instant::now();
    let vocab = build_vocab(tasks)?;
    let data = prepare(tasks, &vocab, config.split_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(config.model.config(vocab.len()), &mut rng);
    if config.precision == Precision::F32 {
        round_to_f32(&mut params);
    }
    let mut adam = Adam::new(config);
    log_event(
        log,
        json!({"event": "start", "train": data.train.len(), "valid": data.valid.len(),
               "vocab": vocab.len(), "parameters": params.n_parameters()}),
    )?;

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut valid_losses = Vec::with_capacity(config.epochs);
    let mut initial = None;
    let mut bad_epochs = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Example<'_>> = chunk
                .iter()
                .map(|&i| data.train[i].as_example(&data.structures))
                .collect();
            match model::loss_and_grad(&params, &batch) {
                Ok((loss, mut grads)) => {
                    clip_global_norm(&mut grads, config.clip);
                    adam.step(&mut params, &grads);
                    if config.precision == Precision::F32 {
                        round_to_f32(&mut params);
                    }
                    total += loss * chunk.len() as f64;
                }
                Err(ModelError::NonFiniteGradient | ModelError::NonFiniteActivation) => total = f64::NAN,
                Err(e) => return Err(e.into()),
            }
        }
        let loss = total / data.train.len().max(1) as f64;
        let valid = mean_loss(&params, &data.structures, &data.valid)?;
        epoch_losses.push(loss);
        valid_losses.push(valid);
        log_event(
            log,
            json!({"event": "epoch", "epoch": epoch, "loss": loss, "valid_loss": valid}),
        )?;

        let initial = *initial.get_or_insert(loss);
        if !loss.is_finite() || loss > 10.0 * initial {
            bad_epochs += 1;
            if bad_epochs >= 3 {
                return Err(TrainError::DivergedLoss { epoch, loss, initial });
            }
        } else {
            bad_epochs = 0;
        }
        if let Some(out) = out {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 && epoch < config.epochs {
                let path = intermediate_path(out, epoch);
                checkpoint::save(&path, &params, Some(&vocab), config.precision.dtype())?;
                log_event(log, json!({"event": "checkpoint", "epoch": epoch, "path": path}))?;
            }
        }
    }
    if let Some(out) = out {
        checkpoint::save(out, &params, Some(&vocab), config.precision.dtype())?;
    }
    let report = TrainReport {
        epoch_losses,
        valid_losses,
        wall_time_secs: start.elapsed().as_secs_f64(),
        checkpoint: out.map(Path::to_path_buf),
    };
    log_event(log, json!({"event": "done", "wall_time_secs": report.wall_time_secs}))?;
    Ok(Pretrained { params, vocab, report })
}

/// Cached decoder features for head-only training.
struct HeadExample {
    features: Mat,
    target: Vec<u32>,
}

fn head_loss_and_grad(head: &Mat, scale: f64, data: &[HeadExample], want_grad: bool) -> (f64, Mat) {
    let mut grad = Mat::zeros(head.rows(), head.cols());
    let mut loss = 0.0;
    for ex in data {
        let mut logits = ex.features.matmul_nt(head);
        logits.scale(scale);
        let len = ex.target.len() as f64;
        let mut dlogits = Mat::zeros(logits.rows(), logits.cols());
        for (t, &y) in ex.target.iter().enumerate() {
            let row = logits.row(t);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss -= (row[y as usize] - max - z.ln()) / len;
            if want_grad {
                let d = dlogits.row_mut(t);
                for (dv, v) in d.iter_mut().zip(row) {
                    *dv = (v - max).exp() / z / len;
                }
                d[y as usize] -= 1.0 / len;
            }
        }
        if want_grad {
            dlogits.scale(scale);
            dlogits.matmul_tn_acc(&ex.features, &mut grad);
        }
    }
    let n = data.len() as f64;
    grad.scale(1.0 / n);
    (loss / n, grad)
}

#[derive(Debug, Clone, Serialize)]
pub struct FewShotReport {
    pub shots: usize,
    pub steps: usize,
    pub best_step: usize,
    pub initial_valid_loss: f64,
    pub best_valid_loss: f64,
}

/// Tunes an untied copy of the output projection on `k` shots per class (or
/// `k` samples for regression) from the task's train split, for
/// `config.epochs` full-batch Adam steps. Returns the snapshot with the
/// lowest validation loss, which may be the untuned head.
pub fn few_shot_tune_head(
    p: &ModelParams,
    vocab: &Vocab,
    task: &TaskRecord,
    k: usize,
    config: &TrainConfig,
) -> Result<(ModelParams, FewShotReport), TrainError> {
    if k == 0 {
        return Err(TrainError::TooFewShots);
    }
    let data = prepare(std::slice::from_ref(task), vocab, config.split_seed)?;
    let shots: Vec<&PreparedExample> = match task.kind {
        TaskKind::Classification => {
            let pos: Vec<_> = data
                .train
                .iter()
                .filter(|e| e.label == Label::Positive)
                .take(k)
                .collect();
            let neg: Vec<_> = data
                .train
                .iter()
                .filter(|e| e.label == Label::Negative)
                .take(k)
                .collect();
            if pos.is_empty() || neg.is_empty() {
                return Err(TrainError::TooFewShots);
            }
            pos.into_iter().chain(neg).collect()
        }
        TaskKind::Regression => data.train.iter().take(k).collect(),
    };
    let features = |examples: &[&PreparedExample]| -> Result<Vec<HeadExample>, ModelError> {
        examples
            .iter()
            .map(|e| {
                let enc = encode(p, &data.structures[e.structure], &e.instruction)?;
                Ok(HeadExample {
                    features: model::decoder_features(p, &enc, &e.target)?,
                    target: e.target.clone(),
                })
            })
            .collect()
    };
    let train = features(&shots)?;
    let valid_refs: Vec<&PreparedExample> = data.valid.iter().collect();
    let valid = features(&valid_refs)?;

    let mut tuned = p.clone();
    let mut head = p.output_projection().clone();
    let scale = model::output_scale(p);
    let valid_loss = |h: &Mat| head_loss_and_grad(h, scale, &valid, false).0;
    let initial_valid_loss = valid_loss(&head);
    let (mut best, mut best_loss, mut best_step) = (head.clone(), initial_valid_loss, 0);
    let mut adam = Adam::new(config);
    for step in 1..=config.epochs {
        let (_, mut grad) = head_loss_and_grad(&head, scale, &train, true);
        let norm = grad.sum_sq().sqrt();
        if norm > config.clip {
            grad.scale(config.clip / norm);
        }
        adam.step_slices([head.data_mut()], &[grad.data()]);
        let l = valid_loss(&head);
        if l < best_loss {
            (best, best_loss, best_step) = (head.clone(), l, step);
        }
    }
    tuned.lm_head = Some(best);
    Ok((
        tuned,
        FewShotReport {
            shots: shots.len(),
            steps: config.epochs,
            best_step,
            initial_valid_loss,
            best_valid_loss: best_loss,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::synth::{synth_tasks, CatalogConfig, TaskType};

    fn tiny() -> TrainConfig {
        TrainConfig {
            lr: 3e-3,
            batch_size: 8,
            epochs: 10,
            model: ModelShape {
                d_model: 16,
                d_kv: 4,
                n_heads: 2,
                d_ff: 32,
                enc_layers: 2,
                dec_layers: 1,
                max_len: 128,
                init_std: 0.02,
            },
            ..Default::default()
        }
    }

    fn ring_task(n: usize) -> Vec<TaskRecord> {
        let c = CatalogConfig {
            n_molecules: n,
            trained: vec![TaskType::RingPresence],
            unseen: vec![],
        };
        vec![synth_tasks(&c, 5).pretrain.remove(0)]
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let config = TrainConfig::default();
        let mut adam = Adam::new(&config);
        let mut x = [1.5f64];
        let (mut m, mut v, mut r) = (0.0f64, 0.0f64, 1.5f64);
        for t in 1..=50 {
            let g = 2.0 * x[0] - 0.3;
            adam.step_slices([&mut x[..]], &[&[g]]);
            let gr = 2.0 * r - 0.3;
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            r -= 3e-4 * mh / (vh.sqrt() + 1e-8);
            assert!((x[0] - r).abs() <= 1e-12);
        }
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = ModelParams::init(ModelConfig::small(20), &mut rng);
        g.randomize_bias_tables(3.0, &mut rng);
        let before = clip_global_norm(&mut g, 1.0);
        assert!(before > 1.0);
        assert!(g.global_norm() <= 1.0 + 1e-9);
        let mut small = g.clone();
        small.scale(0.1);
        let snapshot = small.clone();
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, snapshot);
    }

    #[test]
    fn loss_decreases_on_one_task() {
        let tasks = ring_task(40);
        let r = pretrain(&tasks, &tiny(), None, &mut std::io::sink()).unwrap();
        assert_eq!(r.report.epoch_losses.len(), 10);
        assert!(
            r.report.epoch_losses[9] < r.report.epoch_losses[0],
            "{:?}",
            r.report.epoch_losses
        );
    }

    #[test]
    fn zero_epochs_leaves_init_untouched() {
        let tasks = ring_task(20);
        let config = TrainConfig { epochs: 0, ..tiny() };
        let r = pretrain(&tasks, &config, None, &mut std::io::sink()).unwrap();
        let init = ModelParams::init(
            config.model.config(r.vocab.len()),
            &mut ChaCha8Rng::seed_from_u64(config.seed),
        );
        assert_eq!(r.params, init);
        assert!(r.report.epoch_losses.is_empty());
    }

    #[test]
    fn same_seed_same_run() {
        let tasks = ring_task(20);
        let config = TrainConfig { epochs: 2, ..tiny() };
        let a = pretrain(&tasks, &config, None, &mut std::io::sink()).unwrap();
        let b = pretrain(&tasks, &config, None, &mut std::io::sink()).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.params, b.params);
        let c = pretrain(&tasks, &TrainConfig { seed: 1, ..config }, None, &mut std::io::sink()).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn config_rejects_unknown_and_invalid_fields() {
        assert!(toml::from_str::<TrainConfig>("learning_rate = 0.1").is_err());
        let c: TrainConfig = toml::from_str("lr = 0.01\nepochs = 3\n[model]\nd_model = 8").unwrap();
        assert_eq!((c.lr, c.epochs, c.model.d_model, c.batch_size), (0.01, 3, 8, 16));
        assert!(TrainConfig { lr: 0.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..c }.validate().is_err());
    }

    #[test]
    fn few_shot_only_moves_the_head() {
        let tasks = ring_task(60);
        let base = pretrain(&tasks, &TrainConfig { epochs: 1, ..tiny() }, None, &mut std::io::sink()).unwrap();
        let config = TrainConfig {
            lr: 1e-2,
            epochs: 30,
            ..tiny()
        };
        let (tuned, report) = few_shot_tune_head(&base.params, &base.vocab, &tasks[0], 4, &config).unwrap();
        assert!(report.best_valid_loss <= report.initial_valid_loss);
        assert_eq!(report.shots, 8);
        let mut frozen = tuned.clone();
        frozen.lm_head = None;
        assert_eq!(frozen, base.params);
        assert!(tuned.lm_head.is_some());
        assert!(matches!(
            few_shot_tune_head(&base.params, &base.vocab, &tasks[0], 0, &config),
            Err(TrainError::TooFewShots)
        ));
    }
}
