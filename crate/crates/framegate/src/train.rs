//! Adam optimizer, training loop, evaluation metrics, and checkpoint I/O.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctx::RunCtx;
use crate::data::{Episode, Stream};
use crate::gates::predicted_answer;
use crate::losses::{frame_score_stats, FrameScoreStats, LossFlags};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamStore, StoreEntry};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FGQA";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (episodes {first}..{last})")]
    NanLoss { epoch: usize, batch: usize, first: String, last: String },
    #[error("bad checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
}

pub type TrainResult<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub losses: LossFlags,
    pub lr_initial: f64,
    pub lr_after_drop: f64,
    /// Epochs run at the initial rate before the drop takes effect.
    pub lr_drop_after_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Early-stopping patience on validation accuracy.
    pub patience: usize,
    pub seed: u64,
    /// When set, object embedding row k is initialized as a copy of token
    /// embedding row `offset + k` (the object's name token). This stands in
    /// for the cross-modal alignment that pretrained visual features give a
    /// real system: the visual stream starts out comparable with the text
    /// streams instead of having to learn the correspondence from scratch.
    pub object_name_offset: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            losses: LossFlags::default(),
            lr_initial: 0.001,
            lr_after_drop: 0.0002,
            lr_drop_after_epochs: 10,
            batch_size: 16,
            epochs: 30,
            patience: 5,
            seed: 0,
            object_name_offset: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("batch size and epoch count must be positive".into()));
        }
        if !(self.lr_initial > 0.0 && self.lr_after_drop > 0.0) {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch index.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch > self.lr_drop_after_epochs {
            self.lr_after_drop
        } else {
            self.lr_initial
        }
    }
}

/// Bias-corrected Adam moments, stored per parameter tensor in store order.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct AdamState {
    pub step: u64,
    pub skipped_steps: u64,
    #[serde(skip)]
    pub m: Vec<Vec<f64>>,
    #[serde(skip)]
    pub v: Vec<Vec<f64>>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new<F: Scalar>(params: &[(String, Tensor<F>)]) -> Self {
        AdamState {
            step: 0,
            skipped_steps: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }
}

/// One Adam update over all parameters. If any gradient entry is non-finite
/// the whole step is skipped and counted; moments are untouched.
pub fn adam_step<F: Scalar>(
    params: &[(String, Tensor<F>)],
    state: &mut AdamState,
    lr: f64,
) -> bool {
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, t)| {
            t.grad()
                .map(|g| g.iter().map(|x| x.to_f64_val()).collect())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        state.skipped_steps += 1;
        eprintln!(
            "warning: non-finite gradient, skipping optimizer step (skipped so far: {})",
            state.skipped_steps
        );
        return false;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (_, p)) in params.iter().enumerate() {
        let mut vals: Vec<f64> = p.values().iter().map(|x| x.to_f64_val()).collect();
        for (j, &g) in grads[i].iter().enumerate() {
            let m = &mut state.m[i][j];
            let v = &mut state.v[i][j];
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            vals[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        p.set_values(vals.iter().map(|&x| F::from_f64(x)).collect())
            .expect("shape unchanged by optimizer step");
    }
    true
}

/// Ranking-based average precision of scores against binary labels;
/// equivalent to sweeping a decision threshold over the scores.
/// Ties are broken by original index so the result is deterministic.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let total_pos = labels.iter().filter(|&&l| l != 0).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if labels[idx] != 0 {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(ap / total_pos as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub episodes: usize,
    pub accuracy: f64,
    /// Accuracy restricted to episodes whose planted evidence lives in the
    /// named stream.
    pub per_stream_accuracy: BTreeMap<String, f64>,
    /// Average precision of local gate scores (ground-truth hypothesis)
    /// against the span labels, pooled over the split.
    pub frame_ap: Option<f64>,
    pub frame_stats: FrameScoreStats,
    pub loss_cls_mean: f64,
    pub loss_frame_mean: Option<f64>,
    pub loss_io_mean: Option<f64>,
}

/// Deterministic eval-mode pass over a split.
pub fn evaluate<F: Scalar>(
    model: &Model<F>,
    episodes: &[Episode],
    split: &str,
    flags: LossFlags,
) -> TrainResult<EvalReport> {
    let mut correct = 0usize;
    let mut stream_counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut all_scores: Vec<f64> = Vec::new();
    let mut all_labels: Vec<u8> = Vec::new();
    let mut cls_sum = 0.0;
    let mut frame_sum = 0.0;
    let mut io_sum = 0.0;
    let mut frame_n = 0usize;
    let mut io_n = 0usize;
    for ep in episodes {
        let mut ctx = RunCtx::eval();
        let (_, breakdown) = model.batch_loss(std::slice::from_ref(ep), flags, &mut ctx)?;
        cls_sum += breakdown.cls;
        if let Some(f) = breakdown.frame {
            frame_sum += f;
            frame_n += 1;
        }
        if let Some(io) = breakdown.io {
            io_sum += io;
            io_n += 1;
        }
        let out = model.forward(ep, &mut ctx, None)?;
        let pred = predicted_answer(&out.logits);
        let hit = pred == ep.gt_answer;
        correct += hit as usize;
        let entry = stream_counts.entry(ep.evidence_stream.name().to_string()).or_default();
        entry.0 += hit as usize;
        entry.1 += 1;
        let labels = model.frame_labels(ep)?;
        let scores: Vec<f64> =
            out.gates[ep.gt_answer].gate_local.values().iter().map(|v| v.to_f64_val()).collect();
        all_scores.extend_from_slice(&scores);
        all_labels.extend_from_slice(&labels.labels);
    }
    let n = episodes.len().max(1);
    Ok(EvalReport {
        split: split.to_string(),
        episodes: episodes.len(),
        accuracy: correct as f64 / n as f64,
        per_stream_accuracy: stream_counts
            .into_iter()
            .map(|(k, (c, t))| (k, c as f64 / t.max(1) as f64))
            .collect(),
        frame_ap: average_precision(&all_scores, &all_labels),
        frame_stats: frame_score_stats(&all_scores, &all_labels),
        loss_cls_mean: cls_sum / n as f64,
        loss_frame_mean: (frame_n > 0).then(|| frame_sum / frame_n as f64),
        loss_io_mean: (io_n > 0).then(|| io_sum / io_n as f64),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_cls_loss: f64,
    pub train_frame_loss: Option<f64>,
    pub train_io_loss: Option<f64>,
    pub val_accuracy: f64,
    pub val_frame_ap: Option<f64>,
    pub skipped_steps: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub epoch: usize,
    pub best_val_accuracy: f64,
    pub optimizer: AdamState,
    pub history: Vec<EpochRecord>,
    #[serde(skip)]
    pub store: ParamStore<f32>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Full training loop: shuffled mini-batches, Adam with the step learning-rate
/// schedule, per-epoch validation, early stopping on validation accuracy, and
/// best-validation parameter retention. If `metrics_log` is given, one JSON
/// line per epoch is appended to it.
/// Copy each object's name-token embedding row over its object embedding row
/// (see [`TrainConfig::object_name_offset`]). The rows train independently
/// afterwards; only the starting point is shared.
pub fn tie_object_embedding_init<F: crate::tensor::Scalar>(
    store: &mut ParamStore<F>,
    offset: usize,
) -> TrainResult<()> {
    let token = store
        .get("embeddings.token")
        .ok_or_else(|| TrainError::Config("store has no token embedding".into()))?
        .clone();
    let d = token.shape[1];
    let vocab_rows = token.shape[0];
    let object = store
        .entries
        .iter_mut()
        .find(|e| e.name == "embeddings.object")
        .ok_or_else(|| TrainError::Config("store has no object embedding".into()))?;
    let codebook = object.shape[0];
    if offset + codebook > vocab_rows {
        return Err(TrainError::Config(format!(
            "object name rows {offset}..{} exceed the token table ({vocab_rows} rows)",
            offset + codebook
        )));
    }
    for k in 0..codebook {
        let src = &token.values[(offset + k) * d..(offset + k + 1) * d];
        object.values[k * d..(k + 1) * d].copy_from_slice(src);
    }
    Ok(())
}

pub fn train(
    cfg: &TrainConfig,
    train_set: &[Episode],
    val_set: &[Episode],
    metrics_log: Option<&Path>,
) -> TrainResult<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Config("train and val splits must be non-empty".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store: ParamStore<f32> = Model::<f32>::init(&cfg.model, &mut init_rng)?;
    if let Some(offset) = cfg.object_name_offset {
        tie_object_embedding_init(&mut store, offset)?;
    }
    let model = Model::bind(&cfg.model, &store)?;
    let mut opt = AdamState::new(&model.named_params);
    let mut run_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));

    let mut best_acc = f64::NEG_INFINITY;
    let mut best_store = model.to_store();
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut log_file = match metrics_log {
        Some(p) => Some(std::fs::OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_for_epoch(epoch);
        order.shuffle(&mut run_rng);
        let mut loss_sum = 0.0;
        let mut cls_sum = 0.0;
        let mut frame_sum = 0.0;
        let mut io_sum = 0.0;
        let mut frame_batches = 0usize;
        let mut io_batches = 0usize;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Episode> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            model.zero_grads();
            let mut ctx = RunCtx::train(cfg.model.dropout, &mut run_rng);
            let (loss, breakdown) = match model.batch_loss(&batch, cfg.losses, &mut ctx) {
                Ok(r) => r,
                Err(crate::tensor::TensorError::NonFinite(_)) => {
                    return Err(TrainError::NanLoss {
                        epoch,
                        batch: batch_idx,
                        first: batch.first().map(|e| e.id.clone()).unwrap_or_default(),
                        last: batch.last().map(|e| e.id.clone()).unwrap_or_default(),
                    })
                }
                Err(e) => return Err(e.into()),
            };
            loss.backward()?;
            adam_step(&model.named_params, &mut opt, lr);
            loss_sum += breakdown.total;
            cls_sum += breakdown.cls;
            if let Some(f) = breakdown.frame {
                frame_sum += f;
                frame_batches += 1;
            }
            if let Some(io) = breakdown.io {
                io_sum += io;
                io_batches += 1;
            }
            batches += 1;
        }
        let val = evaluate(&model, val_set, "val", cfg.losses)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            train_cls_loss: cls_sum / batches as f64,
            train_frame_loss: (frame_batches > 0).then(|| frame_sum / frame_batches as f64),
            train_io_loss: (io_batches > 0).then(|| io_sum / io_batches as f64),
            val_accuracy: val.accuracy,
            val_frame_ap: val.frame_ap,
            skipped_steps: opt.skipped_steps,
        };
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(&record)
                .map_err(|e| TrainError::Config(format!("metrics serialization: {e}")))?;
            writeln!(f, "{line}")?;
        }
        history.push(record);
        if val.accuracy > best_acc {
            best_acc = val.accuracy;
            best_store = model.to_store();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        epoch: best_epoch,
        best_val_accuracy: best_acc,
        optimizer: opt,
        history: history.clone(),
        store: best_store,
    };
    Ok(TrainOutcome { checkpoint, history, stopped_early })
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of this tensor's values within the blob section.
    offset: u64,
    values: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    best_val_accuracy: f64,
    optimizer: AdamState,
    history: Vec<EpochRecord>,
    tensors: Vec<ManifestEntry>,
}

fn blob_names(param: &str) -> (String, String) {
    (format!("optimizer.m.{param}"), format!("optimizer.v.{param}"))
}

impl Checkpoint {
    /// Layout: magic "FGQA", u32 LE version, u64 LE header length, JSON
    /// header (config + tensor manifest), then raw LE f32 value blobs at the
    /// manifest offsets.
    pub fn save(&self, path: &Path) -> TrainResult<()> {
        let mut tensors = Vec::new();
        let mut blobs: Vec<&[f32]> = Vec::new();
        let mut offset = 0u64;
        let mut push = |name: String, shape: Vec<usize>, data: &'_ [f32]| -> ManifestEntry {
            let e = ManifestEntry { name, shape, offset, values: data.len() as u64 };
            offset += 4 * data.len() as u64;
            e
        };
        let m32: Vec<Vec<f32>> =
            self.optimizer.m.iter().map(|v| v.iter().map(|&x| x as f32).collect()).collect();
        let v32: Vec<Vec<f32>> =
            self.optimizer.v.iter().map(|v| v.iter().map(|&x| x as f32).collect()).collect();
        for (i, entry) in self.store.entries.iter().enumerate() {
            tensors.push(push(entry.name.clone(), entry.shape.clone(), &entry.values));
            blobs.push(&entry.values);
            if i < m32.len() {
                let (mn, vn) = blob_names(&entry.name);
                tensors.push(push(mn, entry.shape.clone(), &m32[i]));
                blobs.push(&m32[i]);
                tensors.push(push(vn, entry.shape.clone(), &v32[i]));
                blobs.push(&v32[i]);
            }
        }
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            best_val_accuracy: self.best_val_accuracy,
            optimizer: AdamState {
                step: self.optimizer.step,
                skipped_steps: self.optimizer.skipped_steps,
                ..Default::default()
            },
            history: self.history.clone(),
            tensors,
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| TrainError::Checkpoint { path: path.display().to_string(), msg: e.to_string() })?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&self.version.to_le_bytes())?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        for blob in blobs {
            for x in blob {
                f.write_all(&x.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> TrainResult<Checkpoint> {
        let bad = |msg: String| TrainError::Checkpoint { path: path.display().to_string(), msg };
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic bytes {magic:?}")));
        }
        let mut word = [0u8; 4];
        f.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut len8 = [0u8; 8];
        f.read_exact(&mut len8)?;
        let header_len = u64::from_le_bytes(len8) as usize;
        let mut header_bytes = vec![0u8; header_len];
        f.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes).map_err(|e| bad(e.to_string()))?;
        let mut body = Vec::new();
        f.read_to_end(&mut body)?;

        let read_blob = |e: &ManifestEntry| -> TrainResult<Vec<f32>> {
            let start = e.offset as usize;
            let end = start + 4 * e.values as usize;
            if end > body.len() {
                return Err(bad(format!("tensor {} overruns blob section", e.name)));
            }
            Ok(body[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };

        let mut store = ParamStore { entries: Vec::new() };
        let mut optimizer = AdamState {
            step: header.optimizer.step,
            skipped_steps: header.optimizer.skipped_steps,
            m: Vec::new(),
            v: Vec::new(),
        };
        let by_name: BTreeMap<&str, &ManifestEntry> =
            header.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
        for e in &header.tensors {
            if e.name.starts_with("optimizer.") {
                continue;
            }
            let expected: usize = e.shape.iter().product();
            if expected as u64 != e.values {
                return Err(bad(format!("tensor {} shape/value-count mismatch", e.name)));
            }
            store.entries.push(StoreEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                values: read_blob(e)?,
            });
            let (mn, vn) = blob_names(&e.name);
            match (by_name.get(mn.as_str()), by_name.get(vn.as_str())) {
                (Some(me), Some(ve)) => {
                    optimizer.m.push(read_blob(me)?.iter().map(|&x| x as f64).collect());
                    optimizer.v.push(read_blob(ve)?.iter().map(|&x| x as f64).collect());
                }
                _ => return Err(bad(format!("missing optimizer moments for {}", e.name))),
            }
        }
        if store.entries.is_empty() {
            return Err(bad("checkpoint carries no parameter tensors".into()));
        }
        Ok(Checkpoint {
            version,
            config: header.config,
            epoch: header.epoch,
            best_val_accuracy: header.best_val_accuracy,
            optimizer,
            history: header.history,
            store,
        })
    }

    pub fn model(&self) -> TrainResult<Model<f32>> {
        Ok(Model::bind(&self.config.model, &self.store)?)
    }
}

/// Accuracy breakdown used by the ablation significance test: per-episode
/// correctness indicators in split order.
pub fn correctness_vector<F: Scalar>(model: &Model<F>, episodes: &[Episode]) -> TrainResult<Vec<bool>> {
    let mut out = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let mut ctx = RunCtx::eval();
        let fwd = model.forward(ep, &mut ctx, None)?;
        out.push(predicted_answer(&fwd.logits) == ep.gt_answer);
    }
    Ok(out)
}

pub fn stream_of(ep: &Episode) -> Stream {
    ep.evidence_stream
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, CorpusConfig};

    fn tiny_corpus(seed: u64) -> crate::data::Corpus {
        generate_corpus(&CorpusConfig {
            train_episodes: 10,
            val_episodes: 10,
            test_episodes: 5,
            frames: 6,
            objects_per_frame: 4,
            subtitle_len_min: 3,
            subtitle_len_max: 5,
            span_len_min: 2,
            span_len_max: 3,
            seed,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    fn tiny_train_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                d: 16,
                heads: 2,
                conv_layers: 1,
                blocks: 1,
                dropout: 0.0,
                ..ModelConfig::default()
            },
            batch_size: 10,
            epochs: 2,
            patience: 100,
            seed,
            ..TrainConfig::default()
        }
    }

    fn one_param(values: Vec<f32>) -> Vec<(String, Tensor<f32>)> {
        vec![("p".to_string(), Tensor::param(vec![values.len()], values).unwrap())]
    }

    #[test]
    fn adam_ignores_parameters_with_zero_gradient() {
        let params = one_param(vec![1.0, -2.0]);
        let mut state = AdamState::new(&params);
        params[0].1.zero_grad();
        assert!(adam_step(&params, &mut state, 0.1));
        assert_eq!(params[0].1.values(), vec![1.0, -2.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_the_learning_rate() {
        // Bias correction makes the first update lr * g / (|g| + eps) = lr * sign(g).
        let params = one_param(vec![0.5]);
        let mut state = AdamState::new(&params);
        let x = &params[0].1;
        x.mul(x).unwrap().sum_all().backward().unwrap(); // d(x^2)/dx = 1.0 at 0.5
        assert!(adam_step(&params, &mut state, 0.01));
        assert!((params[0].1.values()[0] - 0.49).abs() < 1e-6);
    }

    #[test]
    fn adam_skips_whole_step_on_non_finite_gradient() {
        let params = one_param(vec![0.3, 0.4]);
        let mut state = AdamState::new(&params);
        params[0].1.set_grad(vec![f32::NAN, 1.0]).unwrap();
        assert!(!adam_step(&params, &mut state, 0.1));
        assert_eq!(params[0].1.values(), vec![0.3, 0.4]);
        assert_eq!(state.step, 0);
        assert_eq!(state.skipped_steps, 1);
        assert!(state.m[0].iter().all(|&m| m == 0.0));
    }

    #[test]
    fn learning_rate_drops_after_the_configured_epoch() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_for_epoch(1), 0.001);
        assert_eq!(cfg.lr_for_epoch(10), 0.001);
        assert_eq!(cfg.lr_for_epoch(11), 0.0002);
        assert_eq!(cfg.lr_for_epoch(30), 0.0002);
    }

    #[test]
    fn average_precision_oracles() {
        // Perfect ranking -> 1.0.
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[1, 1, 0]), Some(1.0));
        // No positives -> undefined.
        assert_eq!(average_precision(&[0.9, 0.8], &[0, 0]), None);
        // Positives at ranks 1 and 3: (1/1 + 2/3) / 2 = 5/6.
        let ap = average_precision(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        // Ties break by index, deterministically.
        let a = average_precision(&[0.5, 0.5, 0.5], &[0, 1, 0]).unwrap();
        let b = average_precision(&[0.5, 0.5, 0.5], &[0, 1, 0]).unwrap();
        assert_eq!(a, b);
        assert!((a - 0.5).abs() < 1e-12);
    }

    #[test]
    fn invalid_train_configs_are_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.lr_initial = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.model.d = 7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let corpus = tiny_corpus(3);
        let cfg = tiny_train_cfg(5);
        let a = train(&cfg, &corpus.train, &corpus.val, None).unwrap();
        let b = train(&cfg, &corpus.train, &corpus.val, None).unwrap();
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.train_loss, y.train_loss);
            assert_eq!(x.val_accuracy, y.val_accuracy);
        }
        assert_eq!(a.checkpoint.store, b.checkpoint.store);
    }

    #[test]
    fn training_loss_decreases_on_a_tiny_fixed_batch() {
        let corpus = tiny_corpus(1);
        let mut cfg = tiny_train_cfg(0);
        cfg.epochs = 12;
        let out = train(&cfg, &corpus.train, &corpus.val, None).unwrap();
        let first = out.history.first().unwrap().train_loss;
        let last = out.history.last().unwrap().train_loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn untrained_model_is_at_chance_on_a_balanced_split() {
        let corpus = tiny_corpus(2);
        let cfg = tiny_train_cfg(0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let store: ParamStore<f32> = Model::<f32>::init(&cfg.model, &mut rng).unwrap();
        let model = Model::bind(&cfg.model, &store).unwrap();
        // 100 episodes via repeated splits to tighten the binomial noise.
        let mut eps = corpus.train.clone();
        eps.extend(corpus.val.iter().cloned());
        let report = evaluate(&model, &eps, "mixed", LossFlags::default()).unwrap();
        assert!(report.accuracy <= 0.6, "untrained accuracy suspiciously high: {}", report.accuracy);
        assert!(report.frame_ap.is_some());
    }

    #[test]
    fn gradients_reach_every_parameter_except_the_shared_logit_bias() {
        let corpus = tiny_corpus(4);
        let cfg = tiny_train_cfg(0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let store: ParamStore<f32> = Model::<f32>::init(&cfg.model, &mut rng).unwrap();
        let model = Model::bind(&cfg.model, &store).unwrap();
        let mut touched = vec![false; model.named_params.len()];
        // Take real optimizer steps between batches: the fusion block starts
        // as an exact identity (zero output projection), so its q/k/v weights
        // only receive gradient once the projection has moved off zero.
        let mut opt = AdamState::new(&model.named_params);
        for _ in 0..3 {
            for batch in corpus.train.chunks(5) {
                model.zero_grads();
                let mut ctx = RunCtx::eval();
                let (loss, _) = model.batch_loss(batch, LossFlags::default(), &mut ctx).unwrap();
                loss.backward().unwrap();
                for (i, (_, p)) in model.named_params.iter().enumerate() {
                    if let Some(g) = p.grad() {
                        if g.iter().any(|v| v.abs() > 0.0) {
                            touched[i] = true;
                        }
                    }
                }
                adam_step(&model.named_params, &mut opt, 1e-3);
            }
        }
        for (i, (name, _)) in model.named_params.iter().enumerate() {
            // The classifier's second bias is shared by all five logits, so its
            // gradient cancels exactly in the answer softmax.
            if name == "gates.classifier.b2" {
                continue;
            }
            assert!(touched[i], "no gradient ever reached {name}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact_and_reproduces_logits() {
        let corpus = tiny_corpus(6);
        let cfg = tiny_train_cfg(1);
        let out = train(&cfg, &corpus.train, &corpus.val, None).unwrap();
        let path = std::env::temp_dir().join(format!("ckpt-rt-{}.bin", std::process::id()));
        out.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.store, out.checkpoint.store);
        assert_eq!(loaded.optimizer.step, out.checkpoint.optimizer.step);
        // Adam moments are written to disk as f32 blobs; the round trip is
        // exact up to that quantization.
        for (lm, om) in loaded.optimizer.m.iter().zip(&out.checkpoint.optimizer.m) {
            for (l, o) in lm.iter().zip(om) {
                assert_eq!(*l, *o as f32 as f64);
            }
        }
        for (lv, ov) in loaded.optimizer.v.iter().zip(&out.checkpoint.optimizer.v) {
            for (l, o) in lv.iter().zip(ov) {
                assert_eq!(*l, *o as f32 as f64);
            }
        }
        assert_eq!(loaded.epoch, out.checkpoint.epoch);
        assert_eq!(loaded.history.len(), out.checkpoint.history.len());

        let m1 = out.checkpoint.model().unwrap();
        let m2 = loaded.model().unwrap();
        let ep = &corpus.test[0];
        let l1 = m1.forward(ep, &mut RunCtx::eval(), None).unwrap().logits.values();
        let l2 = m2.forward(ep, &mut RunCtx::eval(), None).unwrap().logits.values();
        assert_eq!(l1, l2);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn checkpoint_rejects_corrupted_files() {
        let path = std::env::temp_dir().join(format!("ckpt-bad-{}.bin", std::process::id()));
        std::fs::write(&path, b"NOPE123456").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(TrainError::Checkpoint { .. })));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn early_stopping_respects_patience() {
        let corpus = tiny_corpus(8);
        let mut cfg = tiny_train_cfg(2);
        cfg.epochs = 30;
        cfg.patience = 2;
        let out = train(&cfg, &corpus.train, &corpus.val, None).unwrap();
        assert!(out.history.len() < 30, "training never stopped early");
        assert!(out.stopped_early);
    }

    #[test]
    fn correctness_vector_matches_evaluate_accuracy() {
        let corpus = tiny_corpus(9);
        let cfg = tiny_train_cfg(0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let store: ParamStore<f32> = Model::<f32>::init(&cfg.model, &mut rng).unwrap();
        let model = Model::bind(&cfg.model, &store).unwrap();
        let v = correctness_vector(&model, &corpus.val).unwrap();
        let report = evaluate(&model, &corpus.val, "val", LossFlags::default()).unwrap();
        let acc = v.iter().filter(|&&b| b).count() as f64 / v.len() as f64;
        assert!((acc - report.accuracy).abs() < 1e-12);
    }
}
