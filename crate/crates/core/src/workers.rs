//! Soft-tracking workers: each frame's glimpses are scored against the
//! memory bank, softly assigned to per-worker convex combinations, consumed
//! by disjoint recurrent cells, and finally voted into shared logits.

use rand::Rng;

use crate::attention::GlimpseOut;
use crate::error::{Error, Result};
use crate::gru::{gru_cell, gru_from_store, init_gru};
use crate::memory::MemoryBank;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    /// Worker count C.
    pub workers: usize,
    /// Hidden width of each worker's recurrent cell.
    pub hidden: usize,
    /// Memory capacity K.
    pub capacity: usize,
    /// Assignment softmax temperature.
    pub alpha: f64,
    /// Memory age decay rate.
    pub lambda_decay: f64,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        WorkerConfig {
            workers: 3,
            hidden: 512,
            capacity: 8,
            alpha: 0.5,
            lambda_decay: 0.5,
        }
    }
}

impl WorkerConfig {
    pub fn validate(&self, glimpses_per_frame: usize) -> Result<()> {
        if self.workers == 0 || self.hidden == 0 {
            return Err(Error::parameter(
                "workers",
                "worker count and hidden width must be positive",
            ));
        }
        if glimpses_per_frame > self.capacity {
            return Err(Error::parameter(
                "workers",
                format!(
                    "one frame's {} glimpses cannot fit a {}-slot memory",
                    glimpses_per_frame, self.capacity
                ),
            ));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::parameter("workers", "alpha must be > 0"));
        }
        if self.lambda_decay < 0.0 {
            return Err(Error::parameter("workers", "lambda_decay must be >= 0"));
        }
        Ok(())
    }
}

/// Registers the per-worker recurrent cells and classifier heads, plus the
/// distance matrix (identity until pretraining replaces it).
pub fn init_workers<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &WorkerConfig,
    feature_dim: usize,
    classes: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    for c in 0..cfg.workers {
        init_gru(store, &format!("worker{}.gru", c), cfg.hidden, feature_dim, rng)?;
        store.init_uniform(
            &format!("worker{}.cls.w", c),
            &[classes, cfg.hidden],
            cfg.hidden,
            rng,
        )?;
    }
    let mut eye = vec![S::zero(); feature_dim * feature_dim];
    for i in 0..feature_dim {
        eye[i * feature_dim + i] = S::one();
    }
    store.insert_values("dist.d", &[feature_dim, feature_dim], eye)?;
    Ok(())
}

pub fn zero_worker_states<S: Scalar>(cfg: &WorkerConfig) -> Vec<Tensor<S>> {
    (0..cfg.workers)
        .map(|_| Tensor::zeros(&[cfg.hidden]))
        .collect()
}

/// Per-worker distributions over the frame's glimpses, with the pre-softmax
/// scores kept for inspection.
pub struct Assignment<S: Scalar> {
    pub probs: Vec<Tensor<S>>,
    pub scores: Vec<Tensor<S>>,
}

/// Scores each glimpse for each worker against the pre-write bank:
/// score_c(g) = sum_k exp(-lambda (t - t_k)) w_ck (1 - phi_hat(g,k)), with
/// phi_hat the min-max-normalized distances over all (g,k) pairs of this
/// frame. An empty bank yields uniform rows. Both the stored features and
/// the stored importances w_ck stay on the tape, so scoring backpropagates
/// into the frames that wrote the bank.
pub fn assign<S: Scalar>(
    tape: &Tape<S>,
    store: &ParamStore<S>,
    cfg: &WorkerConfig,
    glimpses: &[GlimpseOut<S>],
    bank: &MemoryBank<S>,
    t: usize,
) -> Result<Assignment<S>> {
    let g_count = glimpses.len();
    if g_count == 0 {
        return Err(Error::parameter("assign", "no glimpses at this frame"));
    }
    if bank.is_empty() {
        let uniform = S::one() / S::from_usize(g_count).expect("fits scalar");
        let probs = (0..cfg.workers)
            .map(|_| Tensor::filled(&[g_count], uniform))
            .collect();
        let scores = (0..cfg.workers)
            .map(|_| Tensor::zeros(&[g_count]))
            .collect();
        return Ok(Assignment { probs, scores });
    }
    let d = store.get("dist.d")?;
    let k_count = bank.len();
    // Slot-major stacking so each slot's per-glimpse affinities form one
    // contiguous slice. The normalization is order-invariant.
    let mut dists = Vec::with_capacity(g_count * k_count);
    for slot in bank.slots() {
        for glimpse in glimpses {
            dists.push(tape.quad_dist(&glimpse.v, &slot.feature, d)?);
        }
    }
    let dist_refs: Vec<&Tensor<S>> = dists.iter().collect();
    let stacked = tape.concat1d(&dist_refs)?;
    let phi_hat = tape.minmax_normalize(&stacked)?;
    let affinity = tape.affine(&phi_hat, -S::one(), S::one());
    let mut cols = Vec::with_capacity(k_count);
    for k in 0..k_count {
        cols.push(tape.slice(&affinity, k * g_count, &[g_count])?);
    }
    let col_refs: Vec<&Tensor<S>> = cols.iter().collect();

    let mut probs = Vec::with_capacity(cfg.workers);
    let mut scores = Vec::with_capacity(cfg.workers);
    for c in 0..cfg.workers {
        // Per-slot coefficients decay_k * w_ck, tracked through w_ck.
        let mut coeffs = Vec::with_capacity(k_count);
        for slot in bank.slots() {
            let age = t.saturating_sub(slot.timestamp) as f64;
            let decay = S::lit((-cfg.lambda_decay * age).exp());
            let w_ck = tape.slice(&slot.importance, c, &[1])?;
            coeffs.push(tape.affine(&w_ck, decay, S::zero()));
        }
        let coeff_refs: Vec<&Tensor<S>> = coeffs.iter().collect();
        let slot_weights = tape.concat1d(&coeff_refs)?;
        let score = tape.weighted_sum_vecs(&slot_weights, &col_refs)?;
        let p = tape.softmax_temp(&score, S::lit(cfg.alpha))?;
        probs.push(p);
        scores.push(score);
    }
    Ok(Assignment { probs, scores })
}

/// Convex combination of the frame's fused glimpse features under one
/// worker's assignment row.
pub fn worker_input<S: Scalar>(
    tape: &Tape<S>,
    glimpses: &[GlimpseOut<S>],
    p_row: &Tensor<S>,
) -> Result<Tensor<S>> {
    let vs: Vec<&Tensor<S>> = glimpses.iter().map(|g| &g.v).collect();
    tape.weighted_sum_vecs(p_row, &vs)
}

/// Elementwise sum of the workers' states.
pub fn aggregate_state<S: Scalar>(tape: &Tape<S>, states: &[Tensor<S>]) -> Result<Tensor<S>> {
    let refs: Vec<&Tensor<S>> = states.iter().collect();
    tape.add_many(&refs)
}

/// Shared logits: the sum of each worker's classifier output on its own
/// final state, and the probabilities after softmax.
pub fn classify<S: Scalar>(
    tape: &Tape<S>,
    store: &ParamStore<S>,
    cfg: &WorkerConfig,
    states: &[Tensor<S>],
) -> Result<(Tensor<S>, Tensor<S>)> {
    if states.len() != cfg.workers {
        return Err(Error::parameter(
            "classify",
            format!("{} states for {} workers", states.len(), cfg.workers),
        ));
    }
    let mut qs = Vec::with_capacity(cfg.workers);
    for (c, r) in states.iter().enumerate() {
        qs.push(tape.linear(store.get(&format!("worker{}.cls.w", c))?, r, None)?);
    }
    let q_refs: Vec<&Tensor<S>> = qs.iter().collect();
    let logits = tape.add_many(&q_refs)?;
    let probs = tape.softmax_temp(&logits, S::one())?;
    Ok((logits, probs))
}

/// One frame of the worker pipeline: assignment against the pre-write bank,
/// per-worker recurrence, state aggregation, then the memory writes for this
/// frame's glimpses. Writes store the live tensors, so later frames' reads
/// reach back into this one during backward.
pub fn process_frame<S: Scalar>(
    tape: &Tape<S>,
    store: &ParamStore<S>,
    cfg: &WorkerConfig,
    glimpses: &[GlimpseOut<S>],
    bank: &mut MemoryBank<S>,
    states: &[Tensor<S>],
    t: usize,
) -> Result<(Vec<Tensor<S>>, Tensor<S>, Assignment<S>)> {
    let assignment = assign(tape, store, cfg, glimpses, bank, t)?;
    let mut new_states = Vec::with_capacity(cfg.workers);
    for c in 0..cfg.workers {
        let v_tilde = worker_input(tape, glimpses, &assignment.probs[c])?;
        let gru = gru_from_store(store, &format!("worker{}.gru", c))?;
        new_states.push(gru_cell(tape, &states[c], &v_tilde, &gru)?);
    }
    let r_t = aggregate_state(tape, &new_states)?;
    for (g, glimpse) in glimpses.iter().enumerate() {
        let mut rows = Vec::with_capacity(cfg.workers);
        for p in &assignment.probs {
            rows.push(tape.slice(p, g, &[1])?);
        }
        let row_refs: Vec<&Tensor<S>> = rows.iter().collect();
        let importance = tape.concat1d(&row_refs)?;
        bank.write(glimpse.v.clone(), importance, t);
    }
    Ok((new_states, r_t, assignment))
}
