//! Adam training loop, accuracy evaluation, and checkpointing.
//!
//! Everything is deterministic under a fixed seed: the epoch shuffle and the
//! per-instance dropout masks derive their seeds from the run seed, the
//! epoch number, and the instance index, so the whole trajectory replays
//! bitwise.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::data::Dataset;
use crate::encoders::{EmbeddingTable, Vocab};
use crate::model::{param_seed, Model, ModelConfig, ModelError, Prepared};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, instance {instance}")]
    NonFiniteLoss { epoch: usize, instance: usize },
    #[error("answer probability underflowed at epoch {epoch}, instance {instance}")]
    Underflow { epoch: usize, instance: usize },
    #[error("forward failed on instance {instance}: {message}")]
    Forward { instance: usize, message: String },
    #[error("no training instance has a linked answer")]
    NoUsableInstances,
    #[error("io error")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("json error")]
    Json(#[from] serde_json::Error),
}

// ---- optimizer ----

/// Adam with bias correction. Consumes the gradients accumulated in the
/// parameter store and leaves them zeroed.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        let mut steps: BTreeMap<String, Tensor> = BTreeMap::new();
        for name in names {
            let grad = params.grad(&name).clone();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros_like(&grad));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros_like(&grad));
            let mut delta = Tensor::zeros_like(&grad);
            for i in 0..grad.len() {
                let g = grad.data()[i];
                m.data_mut()[i] = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                v.data_mut()[i] = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m.data()[i] / bc1;
                let v_hat = v.data()[i] / bc2;
                delta.data_mut()[i] = -self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            steps.insert(name, delta);
        }
        params.apply_steps(&steps);
        params.zero_grads();
    }
}

// ---- configuration and reports ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub l2: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a dev-accuracy improvement.
    pub patience: usize,
    pub seed: u64,
    /// Optional early exit once dev accuracy reaches this level.
    pub stop_at_dev_acc: Option<f64>,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            lr: 0.001,
            l2: 1e-8,
            dropout: 0.1,
            batch_size: 16,
            epochs,
            patience: 5,
            seed,
            stop_at_dev_acc: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    /// Mean per-instance loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub dev_accuracies: Vec<f64>,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub best_checkpoint: Option<PathBuf>,
    /// Instances skipped per epoch because their answer has no mention.
    pub skipped_per_epoch: usize,
    /// Instances contributing gradients per epoch.
    pub used_per_epoch: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Instances where no mention links to any candidate; they fall back to
    /// an all-zero distribution, so candidate 0 is predicted.
    pub unscorable: usize,
}

/// Index of the maximum, earliest index winning ties.
pub fn argmax_lowest(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

fn eval_probs(model: &Model, prep: &Prepared) -> Result<Vec<f64>, TrainError> {
    let mut tape = Tape::inference();
    match model.forward(&mut tape, prep, 0.0) {
        Ok(out) => Ok(tape.value(out.probs).data().to_vec()),
        Err(ModelError::Match(_)) => Ok(vec![0.0; prep.candidate_count]),
        Err(e) => Err(TrainError::Forward {
            instance: usize::MAX,
            message: e.to_string(),
        }),
    }
}

/// Accuracy over prepared instances, ties resolved toward candidate 0.
pub fn evaluate(model: &Model, prepared: &[Prepared]) -> Result<EvalReport, TrainError> {
    let mut correct = 0;
    let mut unscorable = 0;
    for (idx, prep) in prepared.iter().enumerate() {
        let probs = eval_probs(model, prep).map_err(|e| match e {
            TrainError::Forward { message, .. } => TrainError::Forward {
                instance: idx,
                message,
            },
            other => other,
        })?;
        if probs.iter().all(|&p| p == 0.0) {
            unscorable += 1;
        }
        if argmax_lowest(&probs) == prep.answer {
            correct += 1;
        }
    }
    Ok(EvalReport {
        accuracy: if prepared.is_empty() {
            0.0
        } else {
            correct as f64 / prepared.len() as f64
        },
        correct,
        total: prepared.len(),
        unscorable,
    })
}

// ---- training loop ----

/// Train in place, tracking the best dev accuracy. The model is left at the
/// best-epoch parameters; when `checkpoint_path` is set, they are also
/// written there (with a `.meta.json` sidecar).
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    dev_set: &Dataset,
    config: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    let start = Instant::now();
    let train_prep: Vec<Prepared> = train_set
        .instances
        .iter()
        .map(|i| model.prepare(i))
        .collect();
    let dev_prep: Vec<Prepared> = dev_set.instances.iter().map(|i| model.prepare(i)).collect();

    let usable = train_prep.iter().filter(|p| p.answer_linked).count();
    if usable == 0 {
        return Err(TrainError::NoUsableInstances);
    }

    let mut adam = Adam::new(config.lr);
    let mut epoch_losses = Vec::new();
    let mut dev_accuracies = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut since_best = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_prep.len()).collect();
        let shuffle_seed = param_seed(config.seed, &format!("shuffle.epoch{}", epoch));
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));

        let mut loss_sum = 0.0;
        let mut used = 0usize;
        let mut skipped = 0usize;
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut batch_used = 0usize;
            for &idx in batch {
                let prep = &train_prep[idx];
                let mask_seed =
                    param_seed(config.seed, &format!("dropout.epoch{}.inst{}", epoch, idx));
                let mut tape = Tape::new(mask_seed);
                let loss = match model.loss(&mut tape, prep, config.dropout, config.l2) {
                    Ok(loss) => loss,
                    Err(ModelError::AnswerUnlinked) | Err(ModelError::Match(_)) => {
                        skipped += 1;
                        continue;
                    }
                    Err(ModelError::AnswerProbabilityUnderflow) => {
                        return Err(TrainError::Underflow {
                            epoch,
                            instance: idx,
                        });
                    }
                    Err(e) => {
                        return Err(TrainError::Forward {
                            instance: idx,
                            message: e.to_string(),
                        });
                    }
                };
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        instance: idx,
                    });
                }
                loss_sum += value;
                tape.backward(loss).expect("fresh recording tape");
                model.params.accumulate_bound_grads(&tape);
                batch_used += 1;
            }
            if batch_used > 0 {
                model.params.scale_grads(1.0 / batch_used as f64);
                adam.step(&mut model.params);
                used += batch_used;
            } else {
                model.params.zero_grads();
            }
        }

        epoch_losses.push(if used > 0 {
            loss_sum / used as f64
        } else {
            0.0
        });
        let dev = evaluate(model, &dev_prep)?;
        dev_accuracies.push(dev.accuracy);
        log::info!(
            "epoch {}: loss {:.4}, dev accuracy {:.4} ({} skipped)",
            epoch,
            epoch_losses[epoch],
            dev.accuracy,
            skipped
        );

        let improved = best.as_ref().is_none_or(|(_, acc, _)| dev.accuracy > *acc);
        if improved {
            best = Some((epoch, dev.accuracy, model.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
        if let Some(target) = config.stop_at_dev_acc {
            if dev.accuracy >= target {
                break;
            }
        }
    }

    let (best_epoch, best_dev_accuracy, best_params) = best.expect("at least one epoch evaluated");
    model.params = best_params;

    let mut best_checkpoint = None;
    if let Some(path) = checkpoint_path {
        save_checkpoint(model, path)?;
        best_checkpoint = Some(path.to_path_buf());
    }

    let skipped_per_epoch = train_prep.len() - usable;
    Ok(TrainReport {
        epoch_losses,
        dev_accuracies,
        best_epoch,
        best_dev_accuracy,
        best_checkpoint,
        skipped_per_epoch,
        used_per_epoch: usable,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

// ---- checkpoints ----

const CHECKPOINT_MAGIC: &[u8; 8] = b"MHQACKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    vocab: Vec<String>,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn write_tensor(w: &mut impl Write, name: &str, tensor: &Tensor) -> Result<(), TrainError> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &x in tensor.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_buf(r: &mut impl Read, n: usize) -> Result<Vec<u8>, TrainError> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32, TrainError> {
    let b = read_exact_buf(r, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor), TrainError> {
    let name_len = read_u32(r)? as usize;
    let name = String::from_utf8(read_exact_buf(r, name_len)?)
        .map_err(|e| TrainError::BadCheckpoint(format!("tensor name not utf-8: {}", e)))?;
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 2 {
        return Err(TrainError::BadCheckpoint(format!(
            "tensor {} has unsupported rank {}",
            name, rank
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let len: usize = shape.iter().product();
    let bytes = read_exact_buf(r, len * 8)?;
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect();
    if !data.iter().all(|x| x.is_finite()) {
        return Err(TrainError::BadCheckpoint(format!(
            "tensor {} holds non-finite values",
            name
        )));
    }
    Ok((name, Tensor::new(shape, data)))
}

/// Binary tensor dump plus a JSON sidecar with the config and vocabulary.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let extra_table = !model.config.trainable_embeddings;
    let count = model.params.param_count() + usize::from(extra_table);
    w.write_all(&(count as u32).to_le_bytes())?;
    if extra_table {
        write_tensor(&mut w, "emb.table", &model.embeddings.table)?;
    }
    for (name, tensor) in model.params.iter() {
        write_tensor(&mut w, name, tensor)?;
    }
    w.flush()?;

    let meta = CheckpointMeta {
        config: model.config.clone(),
        vocab: model.embeddings.vocab.by_index(),
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(meta_path(path))?), &meta)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model, TrainError> {
    let meta: CheckpointMeta =
        serde_json::from_reader(BufReader::new(File::open(meta_path(path))?))?;
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_exact_buf(&mut r, 8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(TrainError::BadCheckpoint("wrong magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::BadCheckpoint(format!(
            "unsupported version {}",
            version
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let (name, tensor) = read_tensor(&mut r)?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(TrainError::BadCheckpoint(format!(
                "duplicate tensor {}",
                name
            )));
        }
    }

    let table = tensors
        .get("emb.table")
        .cloned()
        .ok_or_else(|| TrainError::BadCheckpoint("missing emb.table".into()))?;
    if !meta.config.trainable_embeddings {
        tensors.remove("emb.table");
    }
    let vocab = Vocab::from_indexed(meta.vocab);
    if table.shape() != [vocab.len() + 1, meta.config.emb_dim] {
        return Err(TrainError::BadCheckpoint(format!(
            "embedding table shape {:?} does not match vocab {} + dim {}",
            table.shape(),
            vocab.len(),
            meta.config.emb_dim
        )));
    }
    let embeddings = EmbeddingTable {
        vocab,
        table,
        dim: meta.config.emb_dim,
        trainable: meta.config.trainable_embeddings,
    };
    let mut params = ParamStore::new();
    for (name, tensor) in tensors {
        params.insert(&name, tensor);
    }
    Ok(Model {
        config: meta.config,
        params,
        embeddings,
    })
}
