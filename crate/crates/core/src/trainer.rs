//! Training: chain-of-depths example construction, full and segmented
//! forward-backward steps, Adam with a linear warmup/decay schedule, and the
//! target / drafter training loops.
//!
//! The central correctness property is that within-sequence gradient
//! accumulation is exact: running a sequence through its segment plan and
//! summing the per-segment gradients reproduces the single full-sequence
//! gradient to floating-point accumulation accuracy. Context rows are
//! recomputed in later segments but excluded from their loss, so every slot
//! contributes to the loss exactly once.

use std::fmt;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::maskgen::{rect_mask, BlockMaskSet, LayoutSample, MaskError, Slot};
use crate::model::{DraftBatch, Drafter, ModelError, TargetModel, Variant};
use crate::numerics::{
    argmax_row, tensor, Gradients, NumericsError, ParamId, ParamStore, Tape, Tensor2D,
};
use crate::partition::{PartitionError, SegmentPlan};

#[derive(Debug)]
pub enum TrainerError {
    /// No loss-bearing slots where at least one is required.
    EmptyLoss,
    /// A full-sequence forward exceeds the configured slot budget.
    BudgetExceeded { slots: usize, budget: usize },
    /// A plan, sample, or config does not belong to the inputs it is used with.
    Mismatch(String),
    Model(ModelError),
    Mask(MaskError),
    Partition(PartitionError),
    Numerics(NumericsError),
}

impl fmt::Display for TrainerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainerError::EmptyLoss => write!(f, "no loss-bearing slots"),
            TrainerError::BudgetExceeded { slots, budget } => write!(
                f,
                "{slots} slots exceed the full-pass budget of {budget}; use a segmented step"
            ),
            TrainerError::Mismatch(m) => write!(f, "mismatched training inputs: {m}"),
            TrainerError::Model(e) => write!(f, "{e}"),
            TrainerError::Mask(e) => write!(f, "{e}"),
            TrainerError::Partition(e) => write!(f, "{e}"),
            TrainerError::Numerics(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainerError {}

impl From<ModelError> for TrainerError {
    fn from(e: ModelError) -> Self {
        TrainerError::Model(e)
    }
}

impl From<MaskError> for TrainerError {
    fn from(e: MaskError) -> Self {
        TrainerError::Mask(e)
    }
}

impl From<PartitionError> for TrainerError {
    fn from(e: PartitionError) -> Self {
        TrainerError::Partition(e)
    }
}

impl From<NumericsError> for TrainerError {
    fn from(e: NumericsError) -> Self {
        TrainerError::Numerics(e)
    }
}

pub type Result<T> = std::result::Result<T, TrainerError>;

fn default_batch() -> usize {
    8
}

/// Drafter training configuration; architecture fields live in
/// [`crate::model::DrafterConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k_train: usize,
    pub cod_ratio: f64,
    pub max_seq_len: usize,
    pub segments: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    /// Sequences accumulated (in fixed order) into one optimizer step.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_train == 0
            || self.max_seq_len == 0
            || self.segments == 0
            || self.epochs == 0
            || self.batch_size == 0
        {
            return Err(TrainerError::Mismatch("config fields must be positive".into()));
        }
        if !(0.0 < self.cod_ratio && self.cod_ratio <= 1.0) {
            return Err(TrainerError::Mismatch("cod_ratio must lie in (0, 1]".into()));
        }
        if !(self.peak_lr > 0.0) || !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(TrainerError::Mismatch("bad learning-rate schedule".into()));
        }
        Ok(())
    }
}

/// Optimizer/schedule settings for plain next-token target training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
}

/// One training example: the sampled layout plus the assembled batch.
pub struct TrainExample {
    pub sample: LayoutSample,
    pub batch: DraftBatch,
    /// Loss-bearing slot count M; the batch's `loss_scale` is 1/M.
    pub loss_slots: usize,
}

/// Derives a per-example dropout stream key; factors depend only on
/// (example seed, slot position, slot depth), so a slot draws the same mask
/// no matter which segment or batch it appears in.
fn slot_stream_seed(example_seed: u64, pos: usize, depth: usize) -> u64 {
    let mut z = example_seed
        ^ (pos as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (depth as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sample a chain-of-depths layout for `tokens` and assemble the training
/// batch: real tokens at depth 0, mask tokens deeper, labels t_{p+1} with
/// the final position excluded, and the attention mask gathered from the
/// precomputed blocks. Sequences shorter than `k_train` clamp their depth
/// count with a warning.
pub fn build_example(
    drafter: &Drafter,
    tokens: &[usize],
    fused: Tensor2D,
    cfg: &TrainConfig,
    example_seed: u64,
    masks: &BlockMaskSet,
) -> Result<TrainExample> {
    if cfg.k_train != drafter.cfg().k_train {
        return Err(TrainerError::Mismatch(format!(
            "config k_train {} but drafter was built with {}",
            cfg.k_train,
            drafter.cfg().k_train
        )));
    }
    let n = tokens.len();
    if n == 0 || n > cfg.max_seq_len {
        return Err(TrainerError::Mismatch(format!(
            "sequence length {n} outside 1..={}",
            cfg.max_seq_len
        )));
    }
    let mut depths = cfg.k_train;
    if n < depths {
        eprintln!("warning: sequence of {n} tokens clamps depth count {depths} to {n}");
        depths = n;
    }
    let sample = LayoutSample::sample(n, depths, cfg.cod_ratio, example_seed)?;
    let assembled = masks.gather(&sample)?;
    let slots = assembled.order().to_vec();
    let mask_token = drafter.mask_token();
    let slot_tokens: Vec<usize> = slots
        .iter()
        .map(|s| if s.depth == 0 { tokens[s.pos] } else { mask_token })
        .collect();
    let labels: Vec<i64> = slots
        .iter()
        .map(|s| if s.pos + 1 < n { tokens[s.pos + 1] as i64 } else { -1 })
        .collect();
    let loss_slots = labels.iter().filter(|&&l| l >= 0).count();
    let loss_scale = if loss_slots > 0 { 1.0 / loss_slots as f64 } else { 0.0 };
    let dropout = matches!(drafter.cfg().variant, Variant::Regularized)
        .then(|| dropout_factors(drafter, &slots, example_seed));
    let batch = DraftBatch {
        tokens: slot_tokens,
        fused,
        mask: assembled.bits().clone(),
        labels,
        loss_scale,
        dropout,
        slots,
    };
    Ok(TrainExample { sample, batch, loss_slots })
}

/// Inverted-dropout keep factors for the regularized variant's injection
/// term: 0 with probability `dropout_rate`, else 1/keep. Depth-0 rows have
/// no injection term and keep factor 1.
fn dropout_factors(drafter: &Drafter, slots: &[Slot], example_seed: u64) -> Tensor2D {
    let d = drafter.cfg().dim;
    let rate = drafter.cfg().dropout_rate;
    let keep = 1.0 - rate;
    let mut out = Tensor2D::zeros(slots.len(), d);
    for (i, slot) in slots.iter().enumerate() {
        let row = out.row_mut(i);
        if slot.depth == 0 || rate == 0.0 {
            row.fill(1.0);
        } else {
            let mut rng =
                ChaCha8Rng::seed_from_u64(slot_stream_seed(example_seed, slot.pos, slot.depth));
            for x in row.iter_mut() {
                *x = if rng.gen_bool(rate) { 0.0 } else { 1.0 / keep };
            }
        }
    }
    out
}

/// Mean cross-entropy over loss-bearing rows (label ≥ 0).
pub fn loss_of(logits: &Tensor2D, labels: &[i64]) -> Result<f64> {
    let m = labels.iter().filter(|&&l| l >= 0).count();
    if m == 0 {
        return Err(TrainerError::EmptyLoss);
    }
    Ok(tensor::cross_entropy_scaled(logits, labels, 1.0 / m as f64)?)
}

/// Gradients plus bookkeeping from one forward-backward step.
#[derive(Debug)]
pub struct StepOut {
    pub grads: Gradients,
    pub loss: f64,
    /// (correct, loss-bearing) argmax counts per depth.
    pub per_depth: Vec<(usize, usize)>,
    /// Largest slot count held by a single forward pass.
    pub peak_slots: usize,
}

fn tally(per_depth: &mut Vec<(usize, usize)>, logits: &Tensor2D, batch: &DraftBatch) {
    for (i, slot) in batch.slots.iter().enumerate() {
        let label = batch.labels[i];
        if label < 0 {
            continue;
        }
        if per_depth.len() <= slot.depth {
            per_depth.resize(slot.depth + 1, (0, 0));
        }
        let e = &mut per_depth[slot.depth];
        e.1 += 1;
        if argmax_row(logits, i) == label as usize {
            e.0 += 1;
        }
    }
}

/// One forward-backward pass over all slots of the example at once.
/// `slot_budget` mimics a memory ceiling: an example with more slots is
/// rejected and should go through [`step_segmented`] instead.
pub fn step_full(
    drafter: &Drafter,
    store: &ParamStore,
    batch: &DraftBatch,
    slot_budget: Option<usize>,
) -> Result<StepOut> {
    if let Some(budget) = slot_budget {
        if batch.slots.len() > budget {
            return Err(TrainerError::BudgetExceeded { slots: batch.slots.len(), budget });
        }
    }
    let mut per_depth = Vec::new();
    if batch.labels.iter().all(|&l| l < 0) {
        return Ok(StepOut {
            grads: Gradients::zeros(store.len()),
            loss: 0.0,
            per_depth,
            peak_slots: batch.slots.len(),
        });
    }
    let mut tape = Tape::new(store);
    let logits = drafter.forward_tape(&mut tape, batch)?;
    let loss =
        tape.cross_entropy(logits, std::rc::Rc::new(batch.labels.clone()), batch.loss_scale)?;
    let loss_val = tape.value(loss).get(0, 0);
    tally(&mut per_depth, tape.value(logits), batch);
    let grads = tape.backward(loss)?;
    Ok(StepOut { grads, loss: loss_val, per_depth, peak_slots: batch.slots.len() })
}

/// Forward-backward the example one segment at a time in segment order,
/// summing gradients. Context rows repeat earlier depth-0 slots with their
/// labels cleared, so the sum equals the full-sequence gradient.
pub fn step_segmented(
    drafter: &Drafter,
    store: &ParamStore,
    example: &TrainExample,
    plan: &SegmentPlan,
) -> Result<StepOut> {
    let fresh = SegmentPlan::partition(&example.sample, plan.segments())?;
    if &fresh != plan {
        return Err(TrainerError::Mismatch(
            "segment plan does not belong to this example's layout".into(),
        ));
    }
    let full = &example.batch;
    let mut grads = Gradients::zeros(store.len());
    let mut loss = 0.0;
    let mut per_depth = Vec::new();
    let mut peak_slots = 0;
    for s in 0..plan.segments() {
        let seg = plan.segment_slots(&example.sample, s);
        peak_slots = peak_slots.max(seg.len());
        let mut slots = Vec::with_capacity(seg.len());
        let mut tokens = Vec::with_capacity(seg.len());
        let mut labels = Vec::with_capacity(seg.len());
        let mut rows: Vec<usize> = Vec::with_capacity(seg.len());
        for ss in &seg {
            let i = full
                .slots
                .binary_search(&ss.slot)
                .map_err(|_| TrainerError::Mismatch(format!("slot {} not in batch", ss.slot)))?;
            slots.push(ss.slot);
            tokens.push(full.tokens[i]);
            labels.push(if ss.loss_bearing { full.labels[i] } else { -1 });
            rows.push(i);
        }
        if labels.iter().all(|&l| l < 0) {
            continue;
        }
        let dropout = full.dropout.as_ref().map(|f| {
            Tensor2D::from_fn(rows.len(), f.cols(), |i, j| f.get(rows[i], j))
        });
        let mask = rect_mask(&slots, &slots)?;
        let sub = DraftBatch {
            slots,
            tokens,
            fused: full.fused.clone(),
            mask,
            labels,
            loss_scale: full.loss_scale,
            dropout,
        };
        let out = step_full(drafter, store, &sub, None)?;
        grads.add_assign(&out.grads)?;
        loss += out.loss;
        for (d, &(c, t)) in out.per_depth.iter().enumerate() {
            if per_depth.len() <= d {
                per_depth.resize(d + 1, (0, 0));
            }
            per_depth[d].0 += c;
            per_depth[d].1 += t;
        }
    }
    Ok(StepOut { grads, loss, per_depth, peak_slots })
}

/// Adam with standard moment defaults.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    m: Vec<Option<Tensor2D>>,
    v: Vec<Option<Tensor2D>>,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: (0..n_params).map(|_| None).collect(),
            v: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let shape = store.get(id).shape();
            let m = self.m[id.0].get_or_insert_with(|| Tensor2D::zeros(shape.0, shape.1));
            let v = self.v[id.0].get_or_insert_with(|| Tensor2D::zeros(shape.0, shape.1));
            let p = store.get_mut(id);
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Linear schedule: ramp to `peak` over the warmup fraction, then decay
/// linearly toward zero at `total` steps.
pub fn linear_lr(step: usize, total: usize, peak: f64, warmup_ratio: f64) -> f64 {
    assert!(total > 0);
    let warmup = ((total as f64 * warmup_ratio).ceil() as usize).min(total);
    if step < warmup {
        peak * (step + 1) as f64 / warmup as f64
    } else if total == warmup {
        peak
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    }
}

/// One metrics line per optimizer step. Timestamps are wall-clock and are
/// the only nondeterministic field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub per_depth_acc: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub timestamp: f64,
}

/// Outcome of a training run. On divergence the parameters are rolled back
/// to the most recent epoch checkpoint and `diverged_at` records the step.
pub struct TrainReport {
    pub metrics: Vec<MetricsRecord>,
    pub diverged_at: Option<usize>,
    pub wall_time_secs: f64,
    pub peak_slots: usize,
    pub final_checksum: u64,
}

fn now_secs() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn snapshot(store: &ParamStore) -> Vec<(ParamId, Tensor2D)> {
    store.ids().map(|id| (id, store.get(id).clone())).collect()
}

fn restore(store: &mut ParamStore, snap: &[(ParamId, Tensor2D)]) {
    for (id, t) in snap {
        *store.get_mut(*id) = t.clone();
    }
}

fn acc_vec(per_depth: &[(usize, usize)]) -> Vec<f64> {
    per_depth
        .iter()
        .map(|&(c, t)| if t > 0 { c as f64 / t as f64 } else { 0.0 })
        .collect()
}

/// Train the target on next-token prediction over the corpus.
pub fn train_target(
    target: &TargetModel,
    store: &mut ParamStore,
    corpus: &[Vec<usize>],
    opt: &OptimConfig,
) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(TrainerError::Mismatch("empty corpus".into()));
    }
    let started = Instant::now();
    let steps_per_epoch = corpus.len().div_ceil(opt.batch_size);
    let total_steps = steps_per_epoch * opt.epochs;
    let mut adam = Adam::new(store.len());
    let mut metrics = Vec::new();
    let mut diverged_at = None;
    let mut peak_slots = 0;
    let mut step = 0;
    let mut checkpoint = snapshot(store);
    'epochs: for epoch in 0..opt.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(opt.seed ^ (epoch as u64) << 32);
        order.shuffle(&mut rng);
        for chunk in order.chunks(opt.batch_size) {
            let mut grads = Gradients::zeros(store.len());
            let mut loss_sum = 0.0;
            let mut per_depth = vec![(0usize, 0usize)];
            for &ei in chunk {
                let tokens = &corpus[ei];
                if tokens.len() < 2 {
                    continue;
                }
                peak_slots = peak_slots.max(tokens.len());
                let mut labels: Vec<i64> = tokens[1..].iter().map(|&t| t as i64).collect();
                labels.push(-1);
                let m = tokens.len() - 1;
                let mut tape = Tape::new(store);
                let logits = target.forward_tape(&mut tape, tokens)?;
                let loss = tape.cross_entropy(
                    logits,
                    std::rc::Rc::new(labels.clone()),
                    1.0 / m as f64,
                )?;
                loss_sum += tape.value(loss).get(0, 0);
                let lv = tape.value(logits);
                for (i, &label) in labels.iter().enumerate() {
                    if label >= 0 {
                        per_depth[0].1 += 1;
                        if argmax_row(lv, i) == label as usize {
                            per_depth[0].0 += 1;
                        }
                    }
                }
                grads.add_assign(&tape.backward(loss)?)?;
            }
            let scale = 1.0 / chunk.len() as f64;
            grads.scale_in_place(scale);
            let loss = loss_sum * scale;
            if !loss.is_finite() {
                restore(store, &checkpoint);
                diverged_at = Some(step);
                break 'epochs;
            }
            adam.step(store, &grads, linear_lr(step, total_steps, opt.peak_lr, opt.warmup_ratio));
            metrics.push(MetricsRecord {
                step,
                loss,
                per_depth_acc: acc_vec(&per_depth),
                alpha: None,
                timestamp: now_secs(),
            });
            step += 1;
        }
        checkpoint = snapshot(store);
    }
    Ok(TrainReport {
        metrics,
        diverged_at,
        wall_time_secs: started.elapsed().as_secs_f64(),
        peak_slots,
        final_checksum: store.checksum(),
    })
}

/// Train the drafter against a frozen target. Fused hidden states are
/// computed on the fly; each sequence runs through its segment plan and
/// micro-batch gradients accumulate in fixed order.
pub fn train_drafter(
    drafter: &Drafter,
    store: &mut ParamStore,
    target: &TargetModel,
    target_store: &ParamStore,
    corpus: &[Vec<usize>],
    cfg: &TrainConfig,
    masks: &BlockMaskSet,
) -> Result<TrainReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainerError::Mismatch("empty corpus".into()));
    }
    if masks.n_max() < cfg.max_seq_len.min(corpus.iter().map(Vec::len).max().unwrap()) {
        return Err(TrainerError::Mismatch(format!(
            "mask blocks cover {} positions, corpus needs more",
            masks.n_max()
        )));
    }
    let started = Instant::now();
    let steps_per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut adam = Adam::new(store.len());
    let mut metrics = Vec::new();
    let mut diverged_at = None;
    let mut peak_slots = 0;
    let mut step = 0;
    let mut checkpoint = snapshot(store);
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64) << 32);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros(store.len());
            let mut loss_sum = 0.0;
            let mut per_depth: Vec<(usize, usize)> = Vec::new();
            for &ei in chunk {
                let tokens: Vec<usize> = corpus[ei]
                    .iter()
                    .copied()
                    .take(cfg.max_seq_len)
                    .collect();
                if tokens.len() < 2 {
                    continue;
                }
                let (_, fused) = target.forward_full(target_store, &tokens)?;
                let example_seed = slot_stream_seed(cfg.seed, ei, epoch);
                let ex = build_example(drafter, &tokens, fused, cfg, example_seed, masks)?;
                if ex.loss_slots == 0 {
                    continue;
                }
                let plan = SegmentPlan::partition(&ex.sample, cfg.segments.min(ex.sample.n()))?;
                let out = step_segmented(drafter, store, &ex, &plan)?;
                peak_slots = peak_slots.max(out.peak_slots);
                loss_sum += out.loss;
                for (d, &(c, t)) in out.per_depth.iter().enumerate() {
                    if per_depth.len() <= d {
                        per_depth.resize(d + 1, (0, 0));
                    }
                    per_depth[d].0 += c;
                    per_depth[d].1 += t;
                }
                grads.add_assign(&out.grads)?;
            }
            let scale = 1.0 / chunk.len() as f64;
            grads.scale_in_place(scale);
            let loss = loss_sum * scale;
            if !loss.is_finite() {
                restore(store, &checkpoint);
                diverged_at = Some(step);
                break 'epochs;
            }
            adam.step(store, &grads, linear_lr(step, total_steps, cfg.peak_lr, cfg.warmup_ratio));
            metrics.push(MetricsRecord {
                step,
                loss,
                per_depth_acc: acc_vec(&per_depth),
                alpha: drafter.alpha_value(store),
                timestamp: now_secs(),
            });
            step += 1;
        }
        checkpoint = snapshot(store);
    }
    Ok(TrainReport {
        metrics,
        diverged_at,
        wall_time_secs: started.elapsed().as_secs_f64(),
        peak_slots,
        final_checksum: store.checksum(),
    })
}
