//! Parallel drafter: one forward pass predicts several future tokens.
//!
//! Depth-0 slots pair a real token embedding with the projected fused target
//! hidden produced after the previous token, exactly as an autoregressive
//! EAGLE-style drafter would. Deeper slots stand in for tokens that do not
//! exist yet: they combine the reserved mask-token embedding with a learned
//! shared hidden state, optionally adjusted per variant (depth embedding,
//! projected last real hidden, or a regularized mix of both).

use std::rc::Rc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::target::TargetModel;
use super::{
    block_infer, block_tape, register_block, xavier, AttnGeom, BlockIds, ModelError, Result,
    RowBuf,
};
use crate::maskgen::{rect_mask, Slot};
use crate::numerics::{tensor, BitMatrix, ParamId, ParamStore, Tape, Tensor2D, ValueId};

/// Hidden-state construction used for depth ≥ 1 slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Shared,
    DepthEmbed,
    NtpProjDepth,
    NtpProj,
    Regularized,
}

impl Variant {
    fn has_depth_table(self) -> bool {
        matches!(self, Variant::DepthEmbed | Variant::NtpProjDepth)
    }

    fn has_proj(self) -> bool {
        matches!(self, Variant::NtpProj | Variant::NtpProjDepth | Variant::Regularized)
    }
}

fn default_true() -> bool {
    true
}

fn default_dropout() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DrafterConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub rope_base: f64,
    pub k_train: usize,
    pub variant: Variant,
    #[serde(default = "default_true")]
    pub unfreeze_embeddings: bool,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default)]
    pub separate_mtp_combiner: bool,
}

impl DrafterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(ModelError::Config("drafter needs at least one layer".into()));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "dim {} not divisible into {} heads",
                self.dim, self.heads
            )));
        }
        if (self.dim / self.heads) % 2 != 0 {
            return Err(ModelError::Config("head dim must be even for rotations".into()));
        }
        if self.k_train == 0 {
            return Err(ModelError::Config("k_train must be positive".into()));
        }
        if !(self.rope_base > 1.0) {
            return Err(ModelError::Config("rope base must exceed 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config("dropout rate must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One training micro-batch: an ordered slot list plus everything the
/// forward pass needs. `fused` holds the target's fused hidden rows for the
/// whole sequence; slots index into it by position. `labels` use -1 for
/// rows excluded from the loss, and `loss_scale` multiplies the summed
/// cross-entropy so segment losses add up to the full-sequence loss.
#[derive(Debug, Clone)]
pub struct DraftBatch {
    pub slots: Vec<Slot>,
    pub tokens: Vec<usize>,
    pub fused: Tensor2D,
    pub mask: BitMatrix,
    pub labels: Vec<i64>,
    pub loss_scale: f64,
    /// Per-slot inverted-dropout keep factors (train only, regularized).
    pub dropout: Option<Tensor2D>,
}

/// Result of an inference forward: per-slot logits, the pre-head hidden
/// rows (fed back by the autoregressive baseline), and the per-layer
/// key/value rows in case the caller wants to cache some of them.
pub struct InferOut {
    pub logits: Tensor2D,
    pub hidden: Tensor2D,
    pub kv: Vec<(Tensor2D, Tensor2D)>,
}

/// Depth-0 key/value rows at contiguous positions `0..len`.
#[derive(Clone)]
pub struct DrafterCache {
    k: Vec<RowBuf>,
    v: Vec<RowBuf>,
    len: usize,
}

impl DrafterCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Append the selected rows of a forward's key/value output. Only
    /// depth-0 rows at the next contiguous positions are admissible; mask
    /// slots never enter the cache.
    pub fn push_rows(
        &mut self,
        slots: &[Slot],
        kv: &[(Tensor2D, Tensor2D)],
        rows: &[usize],
    ) -> Result<()> {
        if kv.len() != self.k.len() {
            return Err(ModelError::Integrity(format!(
                "kv for {} layers, cache has {}",
                kv.len(),
                self.k.len()
            )));
        }
        for &r in rows {
            let slot = *slots.get(r).ok_or_else(|| {
                ModelError::Integrity(format!("row {r} outside batch of {}", slots.len()))
            })?;
            if slot.depth != 0 {
                return Err(ModelError::Integrity(format!(
                    "only depth-0 rows may be cached, got {slot}"
                )));
            }
            if slot.pos != self.len {
                return Err(ModelError::Integrity(format!(
                    "cache expects position {}, got {slot}",
                    self.len
                )));
            }
            for (l, (bk, bv)) in kv.iter().enumerate() {
                self.k[l].push_row(bk.row(r));
                self.v[l].push_row(bv.row(r));
            }
            self.len += 1;
        }
        Ok(())
    }
}

pub struct Drafter {
    cfg: DrafterConfig,
    vocab: usize,
    mask_token: usize,
    fused_width: usize,
    emb: ParamId,
    fuse: ParamId,
    comb: ParamId,
    comb_mtp: Option<ParamId>,
    h_shared: ParamId,
    blocks: Vec<BlockIds>,
    final_norm: ParamId,
    head: ParamId,
    e_depth: Option<ParamId>,
    np_proj: Option<ParamId>,
    alpha: Option<ParamId>,
}

impl Drafter {
    /// Register a fresh drafter in `store`, inheriting the token embedding
    /// and LM head values from the target (which pins the drafter dim to the
    /// target dim). Variant- and toggle-specific extras are registered last
    /// so that every configuration draws identical core weights from the
    /// same seed.
    pub fn new(
        cfg: DrafterConfig,
        target: &TargetModel,
        target_store: &ParamStore,
        store: &mut ParamStore,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let tcfg = target.cfg();
        if cfg.dim != tcfg.dim {
            return Err(ModelError::Config(format!(
                "drafter dim {} must match target dim {} to share embeddings",
                cfg.dim, tcfg.dim
            )));
        }
        let d = cfg.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = store.add("drafter.emb", target_store.get(target.emb_id()).clone());
        let fuse = store.add("drafter.fuse", xavier(&mut rng, target.fused_width(), d));
        let comb = store.add("drafter.comb", xavier(&mut rng, 2 * d, d));
        let h_shared = store.add("drafter.h_shared", xavier(&mut rng, 1, d));
        let blocks = (0..cfg.layers)
            .map(|l| register_block(store, &mut rng, &format!("drafter.blk{l}"), d))
            .collect();
        let final_norm =
            store.add("drafter.final_norm", Tensor2D::from_vec(1, d, vec![1.0; d]));
        let head = store.add("drafter.head", target_store.get(target.head_id()).clone());
        let e_depth = cfg
            .variant
            .has_depth_table()
            .then(|| store.add("drafter.e_depth", Tensor2D::zeros(cfg.k_train, d)));
        let np_proj = cfg
            .variant
            .has_proj()
            .then(|| store.add("drafter.np_proj", xavier(&mut rng, d, d)));
        let alpha = matches!(cfg.variant, Variant::Regularized)
            .then(|| store.add("drafter.alpha", Tensor2D::from_vec(1, 1, vec![0.1])));
        let comb_mtp = cfg
            .separate_mtp_combiner
            .then(|| store.add("drafter.comb_mtp", xavier(&mut rng, 2 * d, d)));
        Ok(Drafter {
            vocab: tcfg.vocab,
            mask_token: tcfg.vocab - 1,
            fused_width: target.fused_width(),
            cfg,
            emb,
            fuse,
            comb,
            comb_mtp,
            h_shared,
            blocks,
            final_norm,
            head,
            e_depth,
            np_proj,
            alpha,
        })
    }

    pub fn cfg(&self) -> &DrafterConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn mask_token(&self) -> usize {
        self.mask_token
    }

    pub fn fused_width(&self) -> usize {
        self.fused_width
    }

    /// Current mixing coefficient of the regularized variant, if any.
    pub fn alpha_value(&self, store: &ParamStore) -> Option<f64> {
        self.alpha.map(|a| store.get(a).get(0, 0))
    }

    fn geom(&self) -> AttnGeom {
        AttnGeom {
            heads: self.cfg.heads,
            head_dim: self.cfg.dim / self.cfg.heads,
            rope_base: self.cfg.rope_base,
        }
    }

    pub fn new_cache(&self) -> DrafterCache {
        DrafterCache {
            k: (0..self.cfg.layers).map(|_| RowBuf::new(self.cfg.dim)).collect(),
            v: (0..self.cfg.layers).map(|_| RowBuf::new(self.cfg.dim)).collect(),
            len: 0,
        }
    }

    fn check_slot_inputs(&self, slots: &[Slot], tokens: &[usize]) -> Result<()> {
        if slots.len() != tokens.len() {
            return Err(ModelError::Integrity(format!(
                "{} slots with {} tokens",
                slots.len(),
                tokens.len()
            )));
        }
        for (slot, &tok) in slots.iter().zip(tokens) {
            if tok >= self.vocab {
                return Err(ModelError::Vocab { id: tok, vocab: self.vocab });
            }
            if slot.depth > 0 {
                if tok != self.mask_token {
                    return Err(ModelError::Integrity(format!(
                        "slot {slot} must carry the mask token {}",
                        self.mask_token
                    )));
                }
                if self.e_depth.is_some() && slot.depth >= self.cfg.k_train {
                    return Err(ModelError::DepthRange {
                        depth: slot.depth,
                        k_train: self.cfg.k_train,
                    });
                }
            }
        }
        Ok(())
    }

    fn validate_batch(&self, batch: &DraftBatch) -> Result<()> {
        self.check_slot_inputs(&batch.slots, &batch.tokens)?;
        let t = batch.slots.len();
        if t == 0 {
            return Err(ModelError::Integrity("empty batch".into()));
        }
        if batch.labels.len() != t {
            return Err(ModelError::Integrity(format!(
                "{} labels for {t} slots",
                batch.labels.len()
            )));
        }
        if batch.mask.rows() != t || batch.mask.cols() != t {
            return Err(ModelError::Integrity(format!(
                "mask {}x{} for {t} slots",
                batch.mask.rows(),
                batch.mask.cols()
            )));
        }
        if batch.fused.cols() != self.fused_width {
            return Err(ModelError::Integrity(format!(
                "fused width {} but projection expects {}",
                batch.fused.cols(),
                self.fused_width
            )));
        }
        for slot in &batch.slots {
            if slot.pos > batch.fused.rows() {
                return Err(ModelError::Integrity(format!(
                    "slot {slot} beyond {} fused rows",
                    batch.fused.rows()
                )));
            }
        }
        if let Some(f) = &batch.dropout {
            if f.shape() != (t, self.cfg.dim) {
                return Err(ModelError::Integrity(format!(
                    "dropout factors {:?} for {t} slots of dim {}",
                    f.shape(),
                    self.cfg.dim
                )));
            }
        }
        Ok(())
    }

    /// Per-slot gather indices into the projected fused rows and the
    /// auxiliary tables; -1 selects a zero row.
    fn slot_indices(slots: &[Slot]) -> (Vec<i64>, Vec<i64>, Vec<i64>, Vec<i64>) {
        let t = slots.len();
        let mut idx_ntp = vec![-1i64; t];
        let mut idx_shared = vec![-1i64; t];
        let mut idx_hntp = vec![-1i64; t];
        let mut idx_depth = vec![-1i64; t];
        for (i, s) in slots.iter().enumerate() {
            if s.depth == 0 {
                idx_ntp[i] = s.pos as i64 - 1;
            } else {
                idx_shared[i] = 0;
                idx_hntp[i] = s.anchor() as i64 - 1;
                idx_depth[i] = s.depth as i64;
            }
        }
        (idx_ntp, idx_shared, idx_hntp, idx_depth)
    }

    /// Differentiable forward pass; returns per-slot logits.
    pub fn forward_tape(&self, tape: &mut Tape<'_>, batch: &DraftBatch) -> Result<ValueId> {
        self.validate_batch(batch)?;
        let (idx_ntp, idx_shared, idx_hntp, idx_depth) = Self::slot_indices(&batch.slots);

        let fused_c = tape.constant(batch.fused.clone());
        let w_fuse = tape.param(self.fuse);
        let fused_proj = tape.matmul(fused_c, w_fuse)?;
        let sel_ntp = tape.select_rows(fused_proj, Rc::new(idx_ntp))?;
        let hsh = tape.param(self.h_shared);
        let sel_shared = tape.select_rows(hsh, Rc::new(idx_shared))?;
        let mut hidden = tape.add(sel_ntp, sel_shared)?;
        if self.cfg.variant.has_proj() {
            let src = tape.select_rows(fused_proj, Rc::new(idx_hntp))?;
            let proj = tape.param(self.np_proj.unwrap());
            let mut term = tape.matmul(src, proj)?;
            if matches!(self.cfg.variant, Variant::Regularized) {
                if let Some(f) = &batch.dropout {
                    term = tape.dropout(term, f.clone())?;
                }
                let a = tape.param(self.alpha.unwrap());
                term = tape.mul_scalar(term, a)?;
            }
            hidden = tape.add(hidden, term)?;
        }
        if self.cfg.variant.has_depth_table() {
            let table = tape.param(self.e_depth.unwrap());
            let sel_depth = tape.select_rows(table, Rc::new(idx_depth))?;
            hidden = tape.add(hidden, sel_depth)?;
        }

        let emb_table = if self.cfg.unfreeze_embeddings {
            tape.param(self.emb)
        } else {
            tape.param_frozen(self.emb)
        };
        let tok_rows = tape.embedding(emb_table, Rc::new(batch.tokens.clone()))?;
        let cat = tape.concat_cols(tok_rows, hidden)?;
        let comb = tape.param(self.comb);
        let mut x = tape.matmul(cat, comb)?;
        if let Some(cm) = self.comb_mtp {
            let (m_ntp, m_mtp) = self.combiner_masks(&batch.slots);
            let comb_mtp = tape.param(cm);
            let x2 = tape.matmul(cat, comb_mtp)?;
            let m1 = tape.constant(m_ntp);
            let m2 = tape.constant(m_mtp);
            let h1 = tape.hadamard(x, m1)?;
            let h2 = tape.hadamard(x2, m2)?;
            x = tape.add(h1, h2)?;
        }

        let positions = Rc::new(batch.slots.iter().map(|s| s.pos).collect::<Vec<_>>());
        let geom = self.geom();
        for ids in &self.blocks {
            x = block_tape(tape, ids, &geom, x, positions.clone(), &batch.mask)?;
        }
        let gain = tape.param(self.final_norm);
        let xf = tape.rms_norm(x, gain)?;
        let head = tape.param(self.head);
        Ok(tape.matmul(xf, head)?)
    }

    /// 0/1 row masks routing depth-0 rows through `comb` and mask-slot rows
    /// through `comb_mtp`.
    fn combiner_masks(&self, slots: &[Slot]) -> (Tensor2D, Tensor2D) {
        let d = self.cfg.dim;
        let ntp = Tensor2D::from_fn(slots.len(), d, |i, _| {
            if slots[i].depth == 0 {
                1.0
            } else {
                0.0
            }
        });
        let mtp = Tensor2D::from_fn(slots.len(), d, |i, _| {
            if slots[i].depth == 0 {
                0.0
            } else {
                1.0
            }
        });
        (ntp, mtp)
    }

    /// Inference forward over `slots` whose keys are the cached depth-0
    /// rows followed by the slots themselves. `hidden` carries one
    /// pre-combiner hidden row per slot (see [`Drafter::project_fused`] and
    /// [`Drafter::variant_hidden`]); attention obeys the visibility
    /// predicate over (position, depth) pairs.
    pub fn forward_infer(
        &self,
        store: &ParamStore,
        cache: &DrafterCache,
        slots: &[Slot],
        tokens: &[usize],
        hidden: &Tensor2D,
    ) -> Result<InferOut> {
        self.check_slot_inputs(slots, tokens)?;
        if slots.is_empty() {
            return Err(ModelError::Integrity("empty slot batch".into()));
        }
        if hidden.shape() != (slots.len(), self.cfg.dim) {
            return Err(ModelError::Integrity(format!(
                "hidden rows {:?} for {} slots of dim {}",
                hidden.shape(),
                slots.len(),
                self.cfg.dim
            )));
        }
        let mut keys: Vec<Slot> = Vec::with_capacity(cache.len + slots.len());
        for p in 0..cache.len {
            keys.push(Slot::new(p, 0)?);
        }
        keys.extend_from_slice(slots);
        let mask = rect_mask(slots, &keys)?;

        let tok_rows = tensor::embedding(store.get(self.emb), tokens)?;
        let cat = tensor::concat_cols(&tok_rows, hidden)?;
        let mut x = tensor::matmul(&cat, store.get(self.comb))?;
        if let Some(cm) = self.comb_mtp {
            let (m_ntp, m_mtp) = self.combiner_masks(slots);
            let x2 = tensor::matmul(&cat, store.get(cm))?;
            let h1 = tensor::hadamard(&x, &m_ntp)?;
            let h2 = tensor::hadamard(&x2, &m_mtp)?;
            x = tensor::add(&h1, &h2)?;
        }

        let positions: Vec<usize> = slots.iter().map(|s| s.pos).collect();
        let geom = self.geom();
        let mut kv = Vec::with_capacity(self.blocks.len());
        for (l, ids) in self.blocks.iter().enumerate() {
            let cached = if cache.len > 0 {
                Some((cache.k[l].to_tensor(), cache.v[l].to_tensor()))
            } else {
                None
            };
            let out = block_infer(
                store,
                ids,
                &geom,
                &x,
                &positions,
                cached.as_ref().map(|(k, v)| (k, v)),
                &mask,
            )?;
            kv.push((out.k, out.v));
            x = out.x;
        }
        let hidden_out = tensor::rms_norm(&x, store.get(self.final_norm))?.0;
        let logits = tensor::matmul(&hidden_out, store.get(self.head))?;
        Ok(InferOut { logits, hidden: hidden_out, kv })
    }

    /// Project raw fused target rows into the drafter dimension.
    pub fn project_fused(&self, store: &ParamStore, fused: &Tensor2D) -> Result<Tensor2D> {
        if fused.cols() != self.fused_width {
            return Err(ModelError::Integrity(format!(
                "fused width {} but projection expects {}",
                fused.cols(),
                self.fused_width
            )));
        }
        Ok(tensor::matmul(fused, store.get(self.fuse))?)
    }

    /// Hidden row for one mask slot at `depth`, built from the learned
    /// shared state plus the variant's adjustment. `h_ntp` is the projected
    /// fused row of the last real token before the anchor; it is required
    /// by (and only by) the projection variants. No dropout is applied.
    pub fn variant_hidden(
        &self,
        store: &ParamStore,
        h_ntp: Option<&[f64]>,
        depth: usize,
    ) -> Result<Tensor2D> {
        if depth == 0 {
            return Err(ModelError::Integrity(
                "depth-0 rows take the projected fused hidden directly".into(),
            ));
        }
        if self.e_depth.is_some() && depth >= self.cfg.k_train {
            return Err(ModelError::DepthRange { depth, k_train: self.cfg.k_train });
        }
        let d = self.cfg.dim;
        let zero = Tensor2D::zeros(1, d);
        let mut h = tensor::add(&zero, store.get(self.h_shared))?;
        if self.cfg.variant.has_proj() {
            let hn = h_ntp.ok_or_else(|| {
                ModelError::Integrity("projection variant needs the last real hidden".into())
            })?;
            if hn.len() != d {
                return Err(ModelError::Integrity(format!(
                    "h_ntp width {} for dim {d}",
                    hn.len()
                )));
            }
            let hn = Tensor2D::from_vec(1, d, hn.to_vec());
            let mut term = tensor::matmul(&hn, store.get(self.np_proj.unwrap()))?;
            if matches!(self.cfg.variant, Variant::Regularized) {
                term = tensor::scale(&term, store.get(self.alpha.unwrap()).get(0, 0));
            }
            h = tensor::add(&h, &term)?;
        }
        if self.cfg.variant.has_depth_table() {
            let sel = tensor::select_rows(store.get(self.e_depth.unwrap()), &[depth as i64])?;
            h = tensor::add(&h, &sel)?;
        }
        Ok(h)
    }

    /// Pre-combiner hidden rows for every slot of a batch, assembled with
    /// the inference kernels in the same operation order as
    /// [`Drafter::forward_tape`], so the two paths agree bit for bit.
    pub fn batch_input_hidden(&self, store: &ParamStore, batch: &DraftBatch) -> Result<Tensor2D> {
        self.validate_batch(batch)?;
        let (idx_ntp, idx_shared, idx_hntp, idx_depth) = Self::slot_indices(&batch.slots);
        let fused_proj = tensor::matmul(&batch.fused, store.get(self.fuse))?;
        let sel_ntp = tensor::select_rows(&fused_proj, &idx_ntp)?;
        let sel_shared = tensor::select_rows(store.get(self.h_shared), &idx_shared)?;
        let mut hidden = tensor::add(&sel_ntp, &sel_shared)?;
        if self.cfg.variant.has_proj() {
            let src = tensor::select_rows(&fused_proj, &idx_hntp)?;
            let mut term = tensor::matmul(&src, store.get(self.np_proj.unwrap()))?;
            if matches!(self.cfg.variant, Variant::Regularized) {
                if let Some(f) = &batch.dropout {
                    term = tensor::hadamard(&term, f)?;
                }
                term = tensor::scale(&term, store.get(self.alpha.unwrap()).get(0, 0));
            }
            hidden = tensor::add(&hidden, &term)?;
        }
        if self.cfg.variant.has_depth_table() {
            let sel = tensor::select_rows(store.get(self.e_depth.unwrap()), &idx_depth)?;
            hidden = tensor::add(&hidden, &sel)?;
        }
        Ok(hidden)
    }
}
