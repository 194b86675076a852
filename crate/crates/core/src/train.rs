//! AdamW optimization of the combined model with seeded shuffling,
//! per-epoch validation, checkpoints and exact resume.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::PatchDataset;
use crate::error::{Error, Result};
use crate::metrics::EvalRecord;
use crate::model::SpairSwin;
use crate::nn::{Forward, Mode, ParamStore};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Write `epoch_<n>.ckpt` every this many epochs; 0 disables.
    pub checkpoint_interval: usize,
    /// Stop after this many optimizer steps in total (the state is saved).
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            checkpoint_interval: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.lr >= 0.0) {
            return bad(format!("learning rate must be ≥ 0, got {}", self.lr));
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{n} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if self.batch_size == 0 {
            return bad("batch size must be ≥ 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be ≥ 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// First and second moments for every trainable parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .trainable_ids()
            .into_iter()
            .map(|id| Tensor::zeros(store.get(id).shape().to_vec()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update of a flat parameter at 1-based step `t`: decoupled decay
/// `p ← p·(1 − lr·wd)`, then the bias-corrected Adam step.
pub fn adamw_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &TrainConfig) {
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..p.len() {
        p[i] *= decay;
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Applies one AdamW step to every trainable parameter. `grads` holds one
/// tensor per trainable parameter in store order. Nothing is modified when
/// any gradient is non-finite.
pub fn adamw_step(store: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    let ids = store.trainable_ids();
    if grads.len() != ids.len() || state.m.len() != ids.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients and {} moment tensors for {} trainable parameters",
            grads.len(),
            state.m.len(),
            ids.len()
        )));
    }
    for (id, g) in ids.iter().zip(grads) {
        if g.shape() != store.get(*id).shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("gradient {:?} for `{}`", g.shape(), store.param(*id).name),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(store.param(*id).name.clone()));
        }
    }
    state.step += 1;
    for (i, (id, g)) in ids.iter().zip(grads).enumerate() {
        let mut p = store.get(*id).clone();
        adamw_update(
            p.data_mut(),
            g.data(),
            state.m[i].data_mut(),
            state.v[i].data_mut(),
            state.step,
            cfg,
        );
        store.set(*id, p)?;
    }
    Ok(())
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    pub epoch: usize,
    /// Next batch index within `epoch`.
    pub batch: usize,
    pub epoch_loss_sum: f64,
    pub epoch_examples: usize,
    pub best_val_pla: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StateMeta {
    step: u64,
    epoch: usize,
    batch: usize,
    epoch_loss_sum: f64,
    epoch_examples: usize,
    best_val_pla: Option<f64>,
    rng: String,
}

impl TrainState {
    pub fn new(store: &ParamStore) -> Self {
        TrainState {
            adam: AdamState::new(store),
            epoch: 0,
            batch: 0,
            epoch_loss_sum: 0.0,
            epoch_examples: 0,
            best_val_pla: None,
        }
    }

    /// Model checkpoint with optimizer moments (`optim.m.*`, `optim.v.*`)
    /// and loop position in the metadata.
    pub fn checkpoint(&self, model: &SpairSwin, cfg: &TrainConfig, run: &serde_json::Value) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "train_config": cfg,
            "run": run,
            "train_state": StateMeta {
                step: self.adam.step,
                epoch: self.epoch,
                batch: self.batch,
                epoch_loss_sum: self.epoch_loss_sum,
                epoch_examples: self.epoch_examples,
                best_val_pla: self.best_val_pla,
                rng: "chacha8; shuffle stream = epoch, dropout stream = step".into(),
            },
        });
        let mut ckpt = model.to_checkpoint(meta);
        for (i, id) in model.store.trainable_ids().into_iter().enumerate() {
            let name = &model.store.param(id).name;
            ckpt.tensors.push((format!("optim.m.{name}"), self.adam.m[i].clone()));
            ckpt.tensors.push((format!("optim.v.{name}"), self.adam.v[i].clone()));
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, model: &SpairSwin) -> Result<Self> {
        let meta: StateMeta = serde_json::from_value(
            ckpt.meta
                .get("train_state")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("no optimizer state in checkpoint".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("bad train state: {e}")))?;
        let mut adam = AdamState::new(&model.store);
        adam.step = meta.step;
        for (i, id) in model.store.trainable_ids().into_iter().enumerate() {
            let name = &model.store.param(id).name;
            let get = |prefix: &str| {
                ckpt.get(&format!("{prefix}{name}"))
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}{name}")))
            };
            adam.m[i] = get("optim.m.")?;
            adam.v[i] = get("optim.v.")?;
        }
        Ok(TrainState {
            adam,
            epoch: meta.epoch,
            batch: meta.batch,
            epoch_loss_sum: meta.epoch_loss_sum,
            epoch_examples: meta.epoch_examples,
            best_val_pla: meta.best_val_pla,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_pla: Option<f64>,
    pub wall_ms: u128,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
    /// Whether `epochs` were completed (false when stopped by `max_steps`).
    pub finished: bool,
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
    /// Provenance stored in every checkpoint header.
    pub run: serde_json::Value,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";

/// Shuffled example order of `epoch`: Fisher-Yates driven by ChaCha8 seeded
/// with `seed`, stream `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn dropout_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d0d0_5eed_d0d0);
    rng.set_stream(step);
    rng
}

/// Loss, gradients (one per trainable parameter) and running-stat updates
/// for one batch.
pub fn train_batch(model: &SpairSwin, images: Tensor, labels: &[usize], rng: ChaCha8Rng) -> Result<(f64, Vec<Tensor>, Vec<crate::nn::StatsUpdate>)> {
    let mut g = Graph::new();
    let mut cx = Forward::new(&mut g, &model.store, Mode::Train).with_rng(rng);
    let x = cx.constant(images)?;
    let logits = model.forward(&mut cx, x)?;
    let loss = cx.graph.cross_entropy(logits, labels)?;
    let updates = cx.take_updates();
    let bound = cx.bound();
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    let out = model
        .store
        .trainable_ids()
        .into_iter()
        .map(|id| match bound.iter().find(|(b, _)| *b == id) {
            Some((_, var)) => grads.get_or_zeros(*var),
            None => Tensor::zeros(model.store.get(id).shape().to_vec()),
        })
        .collect();
    Ok((value, out, updates))
}

/// Class probabilities for every example, evaluated in chunks of `batch`
/// across `workers` threads. Results are in dataset order.
pub fn predict(model: &SpairSwin, data: &PatchDataset, batch: usize, workers: usize) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(batch.max(1))
        .map(|c| c.to_vec())
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    let parts: Vec<Result<Vec<Vec<f64>>>> = pool.install(|| {
        chunks
            .par_iter()
            .map(|idx| {
                let probs = model.predict_proba(&data.batch(idx))?;
                let k = probs.shape()[1];
                Ok(probs.data().chunks(k).map(|r| r.to_vec()).collect())
            })
            .collect()
    });
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Index of the largest entry; the first wins on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-patch evaluation records.
pub fn eval_records(model: &SpairSwin, data: &PatchDataset, batch: usize, workers: usize) -> Result<Vec<EvalRecord>> {
    let probs = predict(model, data, batch, workers)?;
    Ok(probs
        .into_iter()
        .enumerate()
        .map(|(i, p)| EvalRecord {
            image_id: data.image_ids[i].clone(),
            patch_index: data.patch_index[i],
            label: data.labels[i],
            predicted: argmax(&p),
            probs: Some(p),
        })
        .collect())
}

fn check_labels(data: &PatchDataset, classes: usize, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Dataset(format!("{what} set is empty")));
    }
    if let Some(&label) = data.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn append_log(path: &Path, row: &LogRow) -> Result<()> {
    let new = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if new {
        text.push_str("epoch,step,train_loss,val_pla,wall_ms\n");
    }
    let val = row.val_pla.map(|v| v.to_string()).unwrap_or_default();
    text.push_str(&format!(
        "{},{},{},{},{}\n",
        row.epoch, row.step, row.train_loss, val, row.wall_ms
    ));
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Runs (or continues, given `state`) the epoch loop. Epochs are 0-based in
/// the state and reported 1-based in the log.
pub fn train(
    model: &mut SpairSwin,
    train_set: &PatchDataset,
    val_set: Option<&PatchDataset>,
    cfg: &TrainConfig,
    state: Option<TrainState>,
    output: Option<&TrainOutput>,
    workers: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let classes = model.num_classes();
    check_labels(train_set, classes, "training")?;
    if let Some(v) = val_set {
        check_labels(v, classes, "validation")?;
    }
    if train_set.size != model.input_size() {
        return Err(Error::Config(format!(
            "patches are {0}x{0} but the model expects {1}x{1}",
            train_set.size,
            model.input_size()
        )));
    }
    if let Some(o) = output {
        std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
    }
    let run = output.map(|o| o.run.clone()).unwrap_or(serde_json::Value::Null);
    let mut state = state.unwrap_or_else(|| TrainState::new(&model.store));
    let start = Instant::now();
    let mut log = Vec::new();
    let n = train_set.len();
    let batches = n.div_ceil(cfg.batch_size);

    while state.epoch < cfg.epochs {
        let order = epoch_order(n, cfg.seed, state.epoch);
        while state.batch < batches {
            if cfg.max_steps.is_some_and(|m| state.adam.step >= m) {
                if let Some(o) = output {
                    state.checkpoint(model, cfg, &run)?.save(&o.dir.join(LAST_CKPT))?;
                }
                return Ok(TrainOutcome {
                    state,
                    log,
                    finished: false,
                });
            }
            let lo = state.batch * cfg.batch_size;
            let idx = &order[lo..(lo + cfg.batch_size).min(n)];
            let (loss, grads, updates) = train_batch(
                model,
                train_set.batch(idx),
                &train_set.batch_labels(idx),
                dropout_rng(cfg.seed, state.adam.step),
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteGradient(format!(
                    "loss is {loss} at step {}",
                    state.adam.step
                )));
            }
            adamw_step(&mut model.store, &grads, &mut state.adam, cfg)?;
            model.apply_stats(&updates)?;
            state.epoch_loss_sum += loss * idx.len() as f64;
            state.epoch_examples += idx.len();
            state.batch += 1;
        }

        let val_pla = match val_set {
            Some(v) => {
                let records = eval_records(model, v, 64, workers)?;
                Some(crate::metrics::pla(&records)?)
            }
            None => None,
        };
        let row = LogRow {
            epoch: state.epoch + 1,
            step: state.adam.step,
            train_loss: state.epoch_loss_sum / state.epoch_examples.max(1) as f64,
            val_pla,
            wall_ms: start.elapsed().as_millis(),
        };
        log::info!(
            "epoch {} step {} loss {:.4} val_pla {:?}",
            row.epoch,
            row.step,
            row.train_loss,
            row.val_pla
        );
        state.epoch += 1;
        state.batch = 0;
        state.epoch_loss_sum = 0.0;
        state.epoch_examples = 0;
        let improved = match (val_pla, state.best_val_pla) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            state.best_val_pla = val_pla;
        }
        if let Some(o) = output {
            append_log(&o.dir.join(LOG_FILE), &row)?;
            let ckpt = state.checkpoint(model, cfg, &run)?;
            if improved {
                ckpt.save(&o.dir.join(BEST_CKPT))?;
            }
            if cfg.checkpoint_interval > 0 && state.epoch.is_multiple_of(cfg.checkpoint_interval) {
                ckpt.save(&o.dir.join(format!("epoch_{}.ckpt", state.epoch)))?;
            }
            ckpt.save(&o.dir.join(LAST_CKPT))?;
        }
        log.push(row);
    }
    Ok(TrainOutcome {
        state,
        log,
        finished: true,
    })
}

/// Softmax cross-entropy of raw logits, for callers outside a tape.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.leaf(logits.clone())?;
    let l = g.cross_entropy(x, labels)?;
    g.value(l).item()
}
