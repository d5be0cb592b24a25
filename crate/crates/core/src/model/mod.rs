//! Toy decoder-only target model and the parallel drafter.
//!
//! Both models are pre-norm transformer stacks: RMSNorm, bias-free
//! multi-head attention with rotary embeddings, SwiGLU MLP. The building
//! blocks live here in two flavors sharing the same kernels — a tape form
//! for training and a cache-based incremental form for decoding — so the two
//! paths produce bit-identical activations row for row.

mod drafter;
mod target;

pub use drafter::{
    DraftBatch, Drafter, DrafterCache, DrafterConfig, InferOut, Variant,
};
pub use target::{TargetCache, TargetConfig, TargetModel};

use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::maskgen::MaskError;
use crate::numerics::{
    tensor, BitMatrix, NumericsError, ParamId, ParamStore, Tape, Tensor2D, ValueId,
};

#[derive(Debug)]
pub enum ModelError {
    /// Token id at or above the vocabulary size.
    Vocab { id: usize, vocab: usize },
    /// Configuration violates a structural requirement.
    Config(String),
    /// Inputs handed to a forward pass are mutually inconsistent.
    Integrity(String),
    /// Prediction depth outside the depth-embedding table.
    DepthRange { depth: usize, k_train: usize },
    Numerics(NumericsError),
    Mask(MaskError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Vocab { id, vocab } => {
                write!(f, "token id {id} outside vocabulary of {vocab}")
            }
            ModelError::Config(m) => write!(f, "bad model config: {m}"),
            ModelError::Integrity(m) => write!(f, "inconsistent forward inputs: {m}"),
            ModelError::DepthRange { depth, k_train } => {
                write!(f, "depth {depth} outside depth table of {k_train}")
            }
            ModelError::Numerics(e) => write!(f, "model numerics: {e}"),
            ModelError::Mask(e) => write!(f, "model mask: {e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<NumericsError> for ModelError {
    fn from(e: NumericsError) -> Self {
        ModelError::Numerics(e)
    }
}

impl From<MaskError> for ModelError {
    fn from(e: MaskError) -> Self {
        ModelError::Mask(e)
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Attention geometry shared by every block of a model.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnGeom {
    pub heads: usize,
    pub head_dim: usize,
    pub rope_base: f64,
}

impl AttnGeom {
    fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

/// Parameter ids of one decoder block.
#[derive(Debug, Clone)]
pub(crate) struct BlockIds {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    mlp_norm: ParamId,
    w_gate: ParamId,
    w_up: ParamId,
    w_down: ParamId,
}

/// Uniform Xavier initialization.
pub(crate) fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor2D::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

pub(crate) fn register_block(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim: usize,
) -> BlockIds {
    let dff = 2 * dim;
    let ones = Tensor2D::from_vec(1, dim, vec![1.0; dim]);
    BlockIds {
        attn_norm: store.add(&format!("{prefix}.attn_norm"), ones.clone()),
        wq: store.add(&format!("{prefix}.wq"), xavier(rng, dim, dim)),
        wk: store.add(&format!("{prefix}.wk"), xavier(rng, dim, dim)),
        wv: store.add(&format!("{prefix}.wv"), xavier(rng, dim, dim)),
        wo: store.add(&format!("{prefix}.wo"), xavier(rng, dim, dim)),
        mlp_norm: store.add(&format!("{prefix}.mlp_norm"), ones),
        w_gate: store.add(&format!("{prefix}.w_gate"), xavier(rng, dim, dff)),
        w_up: store.add(&format!("{prefix}.w_up"), xavier(rng, dim, dff)),
        w_down: store.add(&format!("{prefix}.w_down"), xavier(rng, dff, dim)),
    }
}

pub(crate) struct BlockOut {
    pub x: Tensor2D,
    /// Rotary-encoded key rows for the new positions, ready to cache.
    pub k: Tensor2D,
    pub v: Tensor2D,
}

/// One decoder block over `m` new rows whose keys are `cache ++ new`.
///
/// `mask` has `m` rows and `cache_len + m` columns; key column order is the
/// cache rows followed by the new rows, which every caller must preserve.
pub(crate) fn block_infer(
    store: &ParamStore,
    ids: &BlockIds,
    g: &AttnGeom,
    x: &Tensor2D,
    positions: &[usize],
    cache: Option<(&Tensor2D, &Tensor2D)>,
    mask: &BitMatrix,
) -> Result<BlockOut> {
    let xn = tensor::rms_norm(x, store.get(ids.attn_norm))?.0;
    let q = tensor::rope(
        &tensor::matmul(&xn, store.get(ids.wq))?,
        positions,
        g.head_dim,
        g.rope_base,
        false,
    )?;
    let k_new = tensor::rope(
        &tensor::matmul(&xn, store.get(ids.wk))?,
        positions,
        g.head_dim,
        g.rope_base,
        false,
    )?;
    let v_new = tensor::matmul(&xn, store.get(ids.wv))?;
    let (k_all, v_all) = match cache {
        Some((ck, cv)) => (
            tensor::concat_rows(ck, &k_new)?,
            tensor::concat_rows(cv, &v_new)?,
        ),
        None => (k_new.clone(), v_new.clone()),
    };
    if mask.rows() != x.rows() || mask.cols() != k_all.rows() {
        return Err(ModelError::Integrity(format!(
            "mask {}x{} for {} queries, {} keys",
            mask.rows(),
            mask.cols(),
            x.rows(),
            k_all.rows()
        )));
    }
    let mut heads_out: Option<Tensor2D> = None;
    for h in 0..g.heads {
        let qh = tensor::slice_cols(&q, h * g.head_dim, g.head_dim)?;
        let kh = tensor::slice_cols(&k_all, h * g.head_dim, g.head_dim)?;
        let vh = tensor::slice_cols(&v_all, h * g.head_dim, g.head_dim)?;
        let scores = tensor::scale(&tensor::matmul_nt(&qh, &kh)?, g.scale());
        let probs = tensor::softmax_masked(&scores, mask)?;
        let oh = tensor::matmul(&probs, &vh)?;
        heads_out = Some(match heads_out {
            Some(acc) => tensor::concat_cols(&acc, &oh)?,
            None => oh,
        });
    }
    let attn = tensor::matmul(&heads_out.unwrap(), store.get(ids.wo))?;
    let x1 = tensor::add(x, &attn)?;
    let yn = tensor::rms_norm(&x1, store.get(ids.mlp_norm))?.0;
    let gate = tensor::silu(&tensor::matmul(&yn, store.get(ids.w_gate))?);
    let up = tensor::matmul(&yn, store.get(ids.w_up))?;
    let act = tensor::hadamard(&gate, &up)?;
    let x2 = tensor::add(&x1, &tensor::matmul(&act, store.get(ids.w_down))?)?;
    Ok(BlockOut { x: x2, k: k_new, v: v_new })
}

/// Tape twin of [`block_infer`] for square self-attention over all rows.
/// Ops are issued in the same order with the same kernels, so activations
/// match the inference path bit for bit.
pub(crate) fn block_tape(
    tape: &mut Tape<'_>,
    ids: &BlockIds,
    g: &AttnGeom,
    x: ValueId,
    positions: Rc<Vec<usize>>,
    mask: &BitMatrix,
) -> Result<ValueId> {
    let attn_gain = tape.param(ids.attn_norm);
    let xn = tape.rms_norm(x, attn_gain)?;
    let wq = tape.param(ids.wq);
    let wk = tape.param(ids.wk);
    let wv = tape.param(ids.wv);
    let q0 = tape.matmul(xn, wq)?;
    let q = tape.rope(q0, positions.clone(), g.head_dim, g.rope_base)?;
    let k0 = tape.matmul(xn, wk)?;
    let k = tape.rope(k0, positions, g.head_dim, g.rope_base)?;
    let v = tape.matmul(xn, wv)?;
    let mut heads_out: Option<ValueId> = None;
    for h in 0..g.heads {
        let qh = tape.slice_cols(q, h * g.head_dim, g.head_dim)?;
        let kh = tape.slice_cols(k, h * g.head_dim, g.head_dim)?;
        let vh = tape.slice_cols(v, h * g.head_dim, g.head_dim)?;
        let s0 = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(s0, g.scale());
        let probs = tape.softmax_masked(scores, mask)?;
        let oh = tape.matmul(probs, vh)?;
        heads_out = Some(match heads_out {
            Some(acc) => tape.concat_cols(acc, oh)?,
            None => oh,
        });
    }
    let wo = tape.param(ids.wo);
    let attn = tape.matmul(heads_out.unwrap(), wo)?;
    let x1 = tape.add(x, attn)?;
    let mlp_gain = tape.param(ids.mlp_norm);
    let yn = tape.rms_norm(x1, mlp_gain)?;
    let w_gate = tape.param(ids.w_gate);
    let w_up = tape.param(ids.w_up);
    let w_down = tape.param(ids.w_down);
    let g0 = tape.matmul(yn, w_gate)?;
    let gate = tape.silu(g0);
    let up = tape.matmul(yn, w_up)?;
    let act = tape.hadamard(gate, up)?;
    let down = tape.matmul(act, w_down)?;
    Ok(tape.add(x1, down)?)
}

/// Growable row buffer backing the KV and fused-state caches.
#[derive(Debug, Clone)]
pub(crate) struct RowBuf {
    cols: usize,
    data: Vec<f64>,
}

impl RowBuf {
    pub fn new(cols: usize) -> Self {
        RowBuf { cols, data: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.cols
    }

    pub fn push(&mut self, rows: &Tensor2D) {
        assert_eq!(rows.cols(), self.cols, "row width mismatch");
        self.data.extend_from_slice(rows.data());
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols, "row width mismatch");
        self.data.extend_from_slice(row);
    }

    pub fn truncate(&mut self, rows: usize) {
        assert!(rows <= self.len(), "cannot grow by truncation");
        self.data.truncate(rows * self.cols);
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_tensor(&self) -> Tensor2D {
        Tensor2D::from_vec(self.len(), self.cols, self.data.clone())
    }
}
