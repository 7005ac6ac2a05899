//! Two-phase training loop, whole-sequence evaluation, and the ablation
//! driver.
//!
//! Phase 1 trains the backbone through the mean-pooled classifier plus the
//! pose head. Between phases the distance metric is set to the inverse
//! covariance of glimpse features collected under the current model. Phase 2
//! drops the pooled classifier from the trainable set and optimizes the full
//! objective through the glimpse pipeline. The pooled baseline variant stays
//! in phase 1 for its whole budget.
//!
//! Every random draw comes from a ChaCha stream derived from the run seed
//! and the epoch number, so training can resume from any epoch boundary and
//! reproduce the uninterrupted run bit for bit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use saccade::loss::{self, LossBreakdown, LossWeights};
use saccade::memory::inverse_covariance;
use saccade::model::{
    average_logits, forward_glimpse, forward_pooled, init_model, ModelConfig, Variant,
};
use saccade::params::ParamStore;
use saccade::scalar::Scalar;
use saccade::tape::Tape;
use saccade::tensor::Tensor;
use saccade::{Error, Result};
use saccade_data::{sample_subsequences, DiskDataset, Manifest, Split, SubseqMode, WindowSample};

use crate::adam::Adam;
use crate::config::RunConfig;
use crate::metrics::{self, MetricsRecord};

const EPOCH_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;
const PRETRAIN_SALT: u64 = 0xD157_ACE5_EED5_A17u64;
const EVAL_SALT: u64 = 0x5EED_E7A1;

/// One window turned into model inputs and loss targets.
struct Example<S: Scalar> {
    video: Tensor<S>,
    /// Per frame [2J]: interleaved (x, y) per joint, range [-1, 1].
    pose_targets: Vec<Tensor<S>>,
    /// Per frame [2J]: 1 where the joint is annotated, else 0.
    pose_masks: Vec<Tensor<S>>,
    /// Per frame: the visible joints as [2] points, attraction targets for
    /// glimpse placement.
    anchors: Vec<Vec<Tensor<S>>>,
    label: usize,
}

/// Channel-normalizes the window with the manifest statistics and splits
/// the annotations into per-frame tensors.
fn tensorize<S: Scalar>(w: &WindowSample, man: &Manifest) -> Result<Example<S>> {
    let cfg = &man.config;
    let frame_values = cfg.height * cfg.width * 3;
    let t_len = w.video.len() / frame_values;
    let mut scale = [0.0f64; 3];
    for c in 0..3 {
        scale[c] = if man.std[c] > 0.0 { man.std[c] } else { 1.0 };
    }
    let mut vid = Vec::with_capacity(w.video.len());
    for (i, &v) in w.video.iter().enumerate() {
        let c = i % 3;
        vid.push(S::lit((v - man.mean[c]) / scale[c]));
    }
    let video = Tensor::from_vec(&[t_len, cfg.height, cfg.width, 3], vid)?;

    let j = cfg.entities;
    let mut pose_targets = Vec::with_capacity(t_len);
    let mut pose_masks = Vec::with_capacity(t_len);
    let mut anchors = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let kp = &w.keypoints[t * j * 2..(t + 1) * j * 2];
        let mk = &w.mask[t * j..(t + 1) * j];
        let target: Vec<S> = kp.iter().map(|&v| S::lit(v)).collect();
        let mask: Vec<S> = mk
            .iter()
            .flat_map(|&m| {
                let v = if m { S::one() } else { S::zero() };
                [v, v]
            })
            .collect();
        let mut frame_anchors = Vec::new();
        for (e, &m) in mk.iter().enumerate() {
            if m {
                frame_anchors.push(Tensor::from_vec(
                    &[2],
                    vec![S::lit(kp[e * 2]), S::lit(kp[e * 2 + 1])],
                )?);
            }
        }
        pose_targets.push(Tensor::from_vec(&[2 * j], target)?);
        pose_masks.push(Tensor::from_vec(&[2 * j], mask)?);
        anchors.push(frame_anchors);
    }
    Ok(Example {
        video,
        pose_targets,
        pose_masks,
        anchors,
        label: w.label,
    })
}

struct ItemOut<S: Scalar> {
    breakdown: LossBreakdown<S>,
    logits: Tensor<S>,
}

/// Forward plus the weighted loss for one example. `pooled` selects the
/// mean-pooled path (phase 1 and the pooled baseline); otherwise the
/// glimpse path runs and the placement terms are summed over frames.
fn item_forward_loss<S: Scalar>(
    tape: &Tape<S>,
    store: &ParamStore<S>,
    model: &ModelConfig,
    weights: &LossWeights,
    ex: &Example<S>,
    pooled: bool,
    rng: Option<&mut dyn RngCore>,
) -> Result<ItemOut<S>> {
    if pooled {
        let out = forward_pooled(tape, store, model, &ex.video)?;
        let ce = loss::cross_entropy(tape, &out.probs, ex.label)?;
        let pose = loss::pose_loss(tape, &out.pose, &ex.pose_targets, &ex.pose_masks)?;
        let zero = Tensor::zeros(&[1]);
        let breakdown = loss::combine(tape, weights, &ce, &pose, &zero, &zero)?;
        Ok(ItemOut {
            breakdown,
            logits: out.logits,
        })
    } else {
        let out = forward_glimpse(tape, store, model, &ex.video, rng)?;
        let ce = loss::cross_entropy(tape, &out.probs, ex.label)?;
        let pose = loss::pose_loss(tape, &out.pose, &ex.pose_targets, &ex.pose_masks)?;
        let mut spreads = Vec::with_capacity(out.locations.len());
        let mut attracts = Vec::with_capacity(out.locations.len());
        for (t, ls) in out.locations.iter().enumerate() {
            spreads.push(loss::glimpse_spread(tape, ls)?);
            attracts.push(loss::glimpse_anchor(tape, ls, &ex.anchors[t])?);
        }
        let spread_refs: Vec<&Tensor<S>> = spreads.iter().collect();
        let attract_refs: Vec<&Tensor<S>> = attracts.iter().collect();
        let spread = tape.add_many(&spread_refs)?;
        let anchor = tape.add_many(&attract_refs)?;
        let breakdown = loss::combine(tape, weights, &ce, &pose, &spread, &anchor)?;
        Ok(ItemOut {
            breakdown,
            logits: out.logits,
        })
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn scalar_f64<S: Scalar>(t: &Tensor<S>) -> f64 {
    t.data()[0].to_f64_lossy()
}

#[derive(Default)]
struct EpochStats {
    classify: f64,
    pose: f64,
    spread: f64,
    anchor: f64,
    total: f64,
    hits: usize,
    count: usize,
}

impl EpochStats {
    fn add<S: Scalar>(&mut self, out: &ItemOut<S>, label: usize) {
        self.classify += scalar_f64(&out.breakdown.classify);
        self.pose += scalar_f64(&out.breakdown.pose);
        self.spread += scalar_f64(&out.breakdown.spread);
        self.anchor += scalar_f64(&out.breakdown.anchor);
        self.total += scalar_f64(&out.breakdown.total);
        let logits: Vec<f64> = out.logits.data().iter().map(|v| v.to_f64_lossy()).collect();
        if argmax(&logits) == label {
            self.hits += 1;
        }
        self.count += 1;
    }

    fn mean(&self, v: f64) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            v / self.count as f64
        }
    }
}

/// One pass over the shuffled training split: per batch, accumulate the
/// 1/batch-scaled gradients item by item, then apply one Adam step.
fn train_one_epoch<S: Scalar>(
    store: &mut ParamStore<S>,
    adam: &mut Adam<S>,
    cfg: &RunConfig,
    weights: &LossWeights,
    trainable: &[String],
    ds: &DiskDataset,
    pooled: bool,
    epoch: usize,
) -> Result<EpochStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed
            .wrapping_add((epoch as u64).wrapping_mul(EPOCH_STRIDE)),
    );
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    let mut stats = EpochStats::default();
    for batch in order.chunks(cfg.batch) {
        let scale = S::lit(1.0 / batch.len() as f64);
        for &idx in batch {
            let seq = ds.load(idx)?;
            let w = sample_subsequences(
                &seq,
                &ds.manifest().config,
                cfg.window,
                1,
                SubseqMode::Train,
                &mut rng,
            )?
            .remove(0);
            let ex: Example<S> = tensorize(&w, ds.manifest())?;
            let tape = Tape::new();
            let out = item_forward_loss(
                &tape,
                store,
                &cfg.model,
                weights,
                &ex,
                pooled,
                Some(&mut rng),
            )?;
            let scaled = tape.affine(&out.breakdown.total, scale, S::zero());
            tape.backward(&scaled)?;
            stats.add(&out, ex.label);
        }
        adam.step(store, trainable)?;
        store.zero_grads();
    }
    Ok(stats)
}

/// Replaces the distance metric with the inverse covariance of glimpse
/// features collected from training windows under the current parameters.
fn pretrain_distance<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &RunConfig,
    ds: &DiskDataset,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PRETRAIN_SALT);
    let items = cfg.pretrain_items.min(ds.len());
    let mut feats: Vec<Vec<S>> = Vec::new();
    for idx in 0..items {
        let seq = ds.load(idx)?;
        let w = sample_subsequences(
            &seq,
            &ds.manifest().config,
            cfg.window,
            1,
            SubseqMode::Train,
            &mut rng,
        )?
        .remove(0);
        let ex: Example<S> = tensorize(&w, ds.manifest())?;
        let tape = Tape::no_grad();
        let out = forward_glimpse(&tape, store, &cfg.model, &ex.video, Some(&mut rng))?;
        for frame in &out.glimpse_features {
            for v in frame {
                feats.push(v.data().to_vec());
            }
        }
    }
    let d = inverse_covariance(&feats, 1e-3)?;
    store.get_mut("dist.d")?.data_mut().copy_from_slice(&d);
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalItem {
    pub index: usize,
    pub label: usize,
    pub pred: usize,
    /// Window-averaged pre-softmax scores.
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: f64,
    pub hits: usize,
    pub total: usize,
    /// Per-class accuracy, indexed by class.
    pub per_class: Vec<f64>,
    pub class_counts: Vec<usize>,
    pub items: Vec<EvalItem>,
}

impl EvalReport {
    pub fn summary(&self, classes: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "accuracy={} ({}/{})", self.accuracy, self.hits, self.total);
        for (c, name) in classes.iter().enumerate() {
            let _ = writeln!(
                s,
                "class.{}={} ({}/{})",
                name,
                self.per_class[c],
                (self.per_class[c] * self.class_counts[c] as f64).round() as usize,
                self.class_counts[c]
            );
        }
        s
    }
}

/// Whole-split evaluation: deterministic evenly spaced windows per
/// sequence, pre-softmax logits averaged, argmax against the label.
/// Annotations are never consulted.
fn eval_split<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &RunConfig,
    ds: &DiskDataset,
    pooled: bool,
    zero_keypoints: bool,
) -> Result<EvalReport> {
    let man = ds.manifest();
    let classes = man.classes.len();
    let mut class_counts = vec![0usize; classes];
    let mut class_hits = vec![0usize; classes];
    let mut items = Vec::with_capacity(ds.len());
    let mut dummy = ChaCha8Rng::seed_from_u64(0);
    for idx in 0..ds.len() {
        let mut seq = ds.load(idx)?;
        if zero_keypoints {
            for v in seq.keypoints.iter_mut() {
                *v = 0.0;
            }
        }
        let windows = sample_subsequences(
            &seq,
            &man.config,
            cfg.window,
            cfg.eval_windows,
            SubseqMode::Eval,
            &mut dummy,
        )?;
        let mut item_rng =
            ChaCha8Rng::seed_from_u64(EVAL_SALT ^ (idx as u64).wrapping_mul(EPOCH_STRIDE));
        let mut window_logits = Vec::with_capacity(windows.len());
        for w in &windows {
            let ex: Example<S> = tensorize(w, man)?;
            let tape = Tape::no_grad();
            let logits = if pooled {
                forward_pooled(&tape, store, &cfg.model, &ex.video)?.logits
            } else {
                forward_glimpse(&tape, store, &cfg.model, &ex.video, Some(&mut item_rng))?.logits
            };
            window_logits.push(logits);
        }
        let tape = Tape::no_grad();
        let avg = average_logits(&tape, &window_logits)?;
        let logits: Vec<f64> = avg.data().iter().map(|v| v.to_f64_lossy()).collect();
        let pred = argmax(&logits);
        class_counts[seq.label] += 1;
        if pred == seq.label {
            class_hits[seq.label] += 1;
        }
        items.push(EvalItem {
            index: idx,
            label: seq.label,
            pred,
            logits,
        });
    }
    let hits: usize = class_hits.iter().sum();
    let total = ds.len();
    let per_class: Vec<f64> = class_hits
        .iter()
        .zip(&class_counts)
        .map(|(&h, &n)| if n == 0 { 0.0 } else { h as f64 / n as f64 })
        .collect();
    Ok(EvalReport {
        accuracy: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        hits,
        total,
        per_class,
        class_counts,
        items,
    })
}

/// Names updated in the given phase. The pooled classifier trains only
/// while it is the active head; everything else trains in phase 2.
fn trainable_names<S: Scalar>(store: &ParamStore<S>, phase2: bool, global: bool) -> Vec<String> {
    store
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| {
            if phase2 {
                n.as_str() != "gap.w"
            } else if global {
                n.starts_with("backbone.") || n.as_str() == "gap.w"
            } else {
                n.starts_with("backbone.") || n.as_str() == "gap.w" || n.as_str() == "pose.w"
            }
        })
        .collect()
}

fn meta_int<S: Scalar>(store: &ParamStore<S>, name: &str) -> Result<usize> {
    let raw = scalar_f64(store.get(name)?);
    if !(raw.is_finite() && raw >= 0.0 && raw.fract() == 0.0) {
        return Err(Error::checkpoint(format!("bad {} value {}", name, raw)));
    }
    Ok(raw as usize)
}

/// Everything a checkpoint holds: model parameters plus optimizer moments
/// and progress counters under reserved name prefixes.
fn save_checkpoint<S: Scalar>(
    path: &Path,
    store: &ParamStore<S>,
    adam: &Adam<S>,
    epoch: usize,
    best_hits: usize,
    best_epoch: usize,
) -> Result<()> {
    let mut out = ParamStore::<S>::new();
    for (name, t) in store.iter() {
        out.insert_values(name, t.shape(), t.data().to_vec())?;
    }
    for (name, vals) in adam.state_entries() {
        let n = vals.len();
        out.insert_values(&name, &[n], vals)?;
    }
    out.insert_values("meta.epoch", &[1], vec![S::lit(epoch as f64)])?;
    out.insert_values("meta.best_hits", &[1], vec![S::lit(best_hits as f64)])?;
    out.insert_values("meta.best_epoch", &[1], vec![S::lit(best_epoch as f64)])?;
    out.save(path)
}

struct LoadedCheckpoint<S: Scalar> {
    model: ParamStore<S>,
    adam_entries: Vec<(String, Vec<S>)>,
    epoch: usize,
    best_hits: usize,
    best_epoch: usize,
}

fn load_checkpoint_full<S: Scalar>(path: &Path) -> Result<LoadedCheckpoint<S>> {
    let mut loaded = ParamStore::<S>::load(path)?;
    for key in ["meta.epoch", "meta.best_hits", "meta.best_epoch"] {
        if !loaded.contains(key) {
            return Err(Error::checkpoint(format!(
                "{} has no {}; cannot resume",
                path.display(),
                key
            )));
        }
    }
    let epoch = meta_int(&loaded, "meta.epoch")?;
    let best_hits = meta_int(&loaded, "meta.best_hits")?;
    let best_epoch = meta_int(&loaded, "meta.best_epoch")?;
    let names: Vec<String> = loaded.iter().map(|(n, _)| n.clone()).collect();
    let mut adam_entries = Vec::new();
    let mut model = ParamStore::new();
    for name in names {
        let t = loaded.remove(&name).expect("listed name");
        if name.starts_with("opt.") {
            adam_entries.push((name, t.data().to_vec()));
        } else if name.starts_with("meta.") {
            // consumed above
        } else {
            model.insert(&name, t)?;
        }
    }
    Ok(LoadedCheckpoint {
        model,
        adam_entries,
        epoch,
        best_hits,
        best_epoch,
    })
}

/// The loaded parameters must agree with a fresh initialization of the
/// configured model in names and shapes; anything else means the checkpoint
/// belongs to a different configuration.
fn verify_model_names<S: Scalar>(
    loaded: &ParamStore<S>,
    reference: &ParamStore<S>,
) -> Result<()> {
    for (name, t) in reference.iter() {
        match loaded.get(name) {
            Err(_) => {
                return Err(Error::checkpoint(format!(
                    "checkpoint is missing parameter {:?}; it does not match the configured model",
                    name
                )))
            }
            Ok(l) => {
                if l.shape() != t.shape() {
                    return Err(Error::checkpoint(format!(
                        "parameter {:?} has shape {:?} in the checkpoint but the configured model expects {:?}",
                        name,
                        l.shape(),
                        t.shape()
                    )));
                }
            }
        }
    }
    for (name, _) in loaded.iter() {
        if reference.get(name).is_err() {
            return Err(Error::checkpoint(format!(
                "checkpoint has unexpected parameter {:?}; it does not match the configured model",
                name
            )));
        }
    }
    Ok(())
}

/// Loads just the model parameters from a checkpoint, verified against the
/// configured architecture.
pub fn load_model_store<S: Scalar>(path: &Path, model: &ModelConfig) -> Result<ParamStore<S>> {
    let mut loaded = ParamStore::<S>::load(path)?;
    let extras: Vec<String> = loaded
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| n.starts_with("opt.") || n.starts_with("meta."))
        .collect();
    for n in extras {
        loaded.remove(&n);
    }
    let mut reference = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    init_model(&mut reference, model, &mut rng)?;
    verify_model_names(&loaded, &reference)?;
    Ok(loaded)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    /// Epoch whose validation accuracy is checkpointed as best; 0 when no
    /// best-tracked epoch has run yet.
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub last_epoch: usize,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    writeln!(f, "{}", line)?;
    Ok(())
}

pub fn train<S: Scalar>(
    cfg: &RunConfig,
    data_root: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.finalize().map_err(|e| Error::config(e.to_string()))?;
    let train_ds = DiskDataset::open(data_root, Split::Train)?;
    let val_ds = DiskDataset::open(data_root, Split::Val)?;
    if train_ds.manifest().config != cfg.data {
        return Err(Error::data(format!(
            "dataset at {} was generated with a different data configuration",
            data_root.display()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.txt"), cfg.echo())?;

    let variant = cfg.model.variant;
    let global = variant == Variant::Global;
    let weights = variant.apply_to_weights(cfg.weights);
    let total_epochs = cfg.phase1_epochs + cfg.phase2_epochs;

    let mut store = ParamStore::<S>::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_model(&mut store, &cfg.model, &mut init_rng)?;

    let mut adam = Adam::<S>::new(cfg.lr)?;
    let mut start_epoch = 0usize;
    let mut best_hits = 0usize;
    let mut best_epoch = 0usize;

    if let Some(ckpt) = resume {
        let loaded = load_checkpoint_full::<S>(ckpt)?;
        verify_model_names(&loaded.model, &store)?;
        if loaded.epoch > total_epochs {
            return Err(Error::config(format!(
                "checkpoint is at epoch {} but the config trains only {}",
                loaded.epoch, total_epochs
            )));
        }
        store = loaded.model;
        adam.restore(&loaded.adam_entries)?;
        start_epoch = loaded.epoch;
        best_hits = loaded.best_hits;
        best_epoch = loaded.best_epoch;
    }

    let log_path = out_dir.join("metrics.log");
    let mut records: Vec<MetricsRecord> = if resume.is_some() && log_path.exists() {
        metrics::read_log(&log_path)?
            .into_iter()
            .filter(|r| r.epoch <= start_epoch)
            .collect()
    } else {
        Vec::new()
    };
    let mut log_text = String::new();
    for r in &records {
        let _ = writeln!(log_text, "{}", r);
    }
    std::fs::write(&log_path, log_text)?;

    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");

    // A run configured with zero phase-1 epochs needs its distance metric
    // set before the first glimpse epoch.
    if start_epoch == 0
        && cfg.phase1_epochs == 0
        && cfg.phase2_epochs > 0
        && variant.uses_workers()
    {
        pretrain_distance(&mut store, &cfg, &train_ds)?;
    }

    for epoch in start_epoch + 1..=total_epochs {
        let timer = Instant::now();
        let phase2 = !global && epoch > cfg.phase1_epochs;
        if !global && epoch == cfg.phase1_epochs + 1 {
            // The objective and trainable set both change here; stale
            // moments from phase 1 would steer the new parameters.
            adam = Adam::new(cfg.lr)?;
        }
        let trainable = trainable_names(&store, phase2, global);
        let stats = train_one_epoch(
            &mut store,
            &mut adam,
            &cfg,
            &weights,
            &trainable,
            &train_ds,
            !phase2,
            epoch,
        )?;
        let report = eval_split(&store, &cfg, &val_ds, !phase2, false)?;

        let track_best = phase2 || global;
        if track_best && (best_epoch == 0 || report.hits > best_hits) {
            best_hits = report.hits;
            best_epoch = epoch;
            save_checkpoint(&best_path, &store, &adam, epoch, best_hits, best_epoch)?;
        }

        let record = MetricsRecord {
            epoch,
            phase: if phase2 { 2 } else { 1 },
            loss_total: stats.mean(stats.total),
            loss_classify: stats.mean(stats.classify),
            loss_pose: stats.mean(stats.pose),
            loss_spread: stats.mean(stats.spread),
            loss_anchor: stats.mean(stats.anchor),
            train_acc: if stats.count == 0 {
                0.0
            } else {
                stats.hits as f64 / stats.count as f64
            },
            val_acc: report.accuracy,
            wall_secs: timer.elapsed().as_secs_f64(),
        };
        append_line(&log_path, &record.to_string())?;
        records.push(record);

        if !global && epoch == cfg.phase1_epochs && cfg.phase2_epochs > 0 && variant.uses_workers()
        {
            pretrain_distance(&mut store, &cfg, &train_ds)?;
        }
        save_checkpoint(&last_path, &store, &adam, epoch, best_hits, best_epoch)?;
    }

    let val_total = val_ds.len();
    Ok(TrainOutcome {
        records,
        best_epoch,
        best_val_acc: if best_epoch == 0 || val_total == 0 {
            0.0
        } else {
            best_hits as f64 / val_total as f64
        },
        last_epoch: total_epochs,
        best_path,
        last_path,
    })
}

/// Evaluates a checkpoint on one split. Keypoints can be zeroed after
/// loading to demonstrate that predictions never depend on them.
pub fn evaluate<S: Scalar>(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_root: &Path,
    split: Split,
    zero_keypoints: bool,
) -> Result<EvalReport> {
    let mut cfg = cfg.clone();
    cfg.finalize().map_err(|e| Error::config(e.to_string()))?;
    let ds = DiskDataset::open(data_root, split)?;
    if ds.manifest().config != cfg.data {
        return Err(Error::data(format!(
            "dataset at {} was generated with a different data configuration",
            data_root.display()
        )));
    }
    let store = load_model_store::<S>(checkpoint, &cfg.model)?;
    let pooled = !cfg.model.variant.uses_glimpses();
    eval_split(&store, &cfg, &ds, pooled, zero_keypoints)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    /// Test accuracy per seed, in request order.
    pub accuracies: Vec<f64>,
    pub median: f64,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite accuracy"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains every requested variant on the same dataset and seed list, then
/// reports test accuracy per variant. Rows keep the request order.
pub fn run_ablation<S: Scalar>(
    base: &RunConfig,
    data_root: &Path,
    out_dir: &Path,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::parameter(
            "ablation",
            "needs at least one variant and one seed",
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for &variant in variants {
        let mut accuracies = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.model.variant = variant;
            cfg.seed = seed;
            let run_dir = out_dir.join(format!("{}_seed{}", variant, seed));
            let outcome = train::<S>(&cfg, data_root, &run_dir, None)?;
            let ckpt = if outcome.best_epoch > 0 {
                outcome.best_path
            } else {
                outcome.last_path
            };
            let report = evaluate::<S>(&cfg, &ckpt, data_root, Split::Test, false)?;
            accuracies.push(report.accuracy);
        }
        rows.push(AblationRow {
            variant,
            median: median(&accuracies),
            accuracies,
        });
    }
    let mut table = String::from("variant             median  per-seed\n");
    for row in &rows {
        let accs: Vec<String> = row.accuracies.iter().map(|a| format!("{:.4}", a)).collect();
        let _ = writeln!(
            table,
            "{:<19} {:.4}  {}",
            row.variant.as_str(),
            row.median,
            accs.join(" ")
        );
    }
    std::fs::write(out_dir.join("ablation.txt"), table)?;
    Ok(rows)
}
