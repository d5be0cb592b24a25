//! Decoder-only target model with a fused multi-layer hidden state.
//!
//! Besides next-token logits, the target exposes a per-position fused state:
//! the concatenation of the post-residual outputs of a fixed set of tap
//! layers. The drafter consumes these fused rows as its view of the target's
//! internals, so the incremental cache stores them alongside the per-layer
//! keys and values.

use std::rc::Rc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    block_infer, block_tape, register_block, xavier, AttnGeom, BlockIds, ModelError, Result,
    RowBuf,
};
use crate::numerics::{tensor, BitMatrix, ParamId, ParamStore, Tape, Tensor2D, ValueId};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetConfig {
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub rope_base: f64,
}

impl TargetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(ModelError::Config("vocab must be at least 2".into()));
        }
        if self.layers < 3 {
            return Err(ModelError::Config("need at least 3 layers for taps".into()));
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
        if !(self.rope_base > 1.0) {
            return Err(ModelError::Config("rope base must exceed 1".into()));
        }
        Ok(())
    }
}

/// Tap layers whose outputs are fused: {2, L/2, L-1}, deduplicated.
fn taps_for(layers: usize) -> Vec<usize> {
    let mut t = vec![2, layers / 2, layers - 1];
    t.sort_unstable();
    t.dedup();
    t
}

pub struct TargetModel {
    cfg: TargetConfig,
    emb: ParamId,
    blocks: Vec<BlockIds>,
    final_norm: ParamId,
    head: ParamId,
    taps: Vec<usize>,
}

impl TargetModel {
    pub fn new(cfg: TargetConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = store.add("target.emb", xavier(&mut rng, cfg.vocab, cfg.dim));
        let blocks = (0..cfg.layers)
            .map(|l| register_block(store, &mut rng, &format!("target.blk{l}"), cfg.dim))
            .collect();
        let final_norm = store.add(
            "target.final_norm",
            Tensor2D::from_vec(1, cfg.dim, vec![1.0; cfg.dim]),
        );
        let head = store.add("target.head", xavier(&mut rng, cfg.dim, cfg.vocab));
        let taps = taps_for(cfg.layers);
        Ok(TargetModel { cfg, emb, blocks, final_norm, head, taps })
    }

    pub fn cfg(&self) -> &TargetConfig {
        &self.cfg
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    /// Width of one fused hidden row.
    pub fn fused_width(&self) -> usize {
        self.taps.len() * self.cfg.dim
    }

    pub(crate) fn emb_id(&self) -> ParamId {
        self.emb
    }

    pub(crate) fn head_id(&self) -> ParamId {
        self.head
    }

    fn geom(&self) -> AttnGeom {
        AttnGeom {
            heads: self.cfg.heads,
            head_dim: self.cfg.dim / self.cfg.heads,
            rope_base: self.cfg.rope_base,
        }
    }

    pub fn new_cache(&self) -> TargetCache {
        TargetCache {
            k: (0..self.cfg.layers).map(|_| RowBuf::new(self.cfg.dim)).collect(),
            v: (0..self.cfg.layers).map(|_| RowBuf::new(self.cfg.dim)).collect(),
            fused: RowBuf::new(self.fused_width()),
            len: 0,
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(ModelError::Integrity("empty token batch".into()));
        }
        for &t in tokens {
            if t >= self.cfg.vocab {
                return Err(ModelError::Vocab { id: t, vocab: self.cfg.vocab });
            }
        }
        Ok(())
    }

    /// Extend the cache with `tokens` at the next positions and return their
    /// next-token logits. The fused rows for the new positions are appended
    /// to the cache as a side effect.
    pub fn forward_incremental(
        &self,
        store: &ParamStore,
        cache: &mut TargetCache,
        tokens: &[usize],
    ) -> Result<Tensor2D> {
        self.check_tokens(tokens)?;
        let m = tokens.len();
        let start = cache.len;
        let positions: Vec<usize> = (start..start + m).collect();
        let mask = BitMatrix::causal_suffix(m, start + m);
        let geom = self.geom();

        let mut x = tensor::embedding(store.get(self.emb), tokens)?;
        let mut fused: Option<Tensor2D> = None;
        for (l, ids) in self.blocks.iter().enumerate() {
            let cached = if start > 0 {
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
            cache.k[l].push(&out.k);
            cache.v[l].push(&out.v);
            x = out.x;
            if self.taps.contains(&l) {
                fused = Some(match fused {
                    Some(acc) => tensor::concat_cols(&acc, &x)?,
                    None => x.clone(),
                });
            }
        }
        cache.fused.push(&fused.unwrap());
        cache.len += m;

        let xf = tensor::rms_norm(&x, store.get(self.final_norm))?.0;
        Ok(tensor::matmul(&xf, store.get(self.head))?)
    }

    /// Single-shot forward over a whole sequence; returns next-token logits
    /// and the fused hidden rows, one per position.
    pub fn forward_full(
        &self,
        store: &ParamStore,
        tokens: &[usize],
    ) -> Result<(Tensor2D, Tensor2D)> {
        let mut cache = self.new_cache();
        let logits = self.forward_incremental(store, &mut cache, tokens)?;
        Ok((logits, cache.fused.to_tensor()))
    }

    /// Differentiable forward over a whole sequence; returns the logits node.
    pub fn forward_tape(&self, tape: &mut Tape<'_>, tokens: &[usize]) -> Result<ValueId> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let mask = BitMatrix::causal(n);
        let positions = Rc::new((0..n).collect::<Vec<usize>>());
        let geom = self.geom();

        let table = tape.param(self.emb);
        let mut x = tape.embedding(table, Rc::new(tokens.to_vec()))?;
        for ids in &self.blocks {
            x = block_tape(tape, ids, &geom, x, positions.clone(), &mask)?;
        }
        let gain = tape.param(self.final_norm);
        let xf = tape.rms_norm(x, gain)?;
        let head = tape.param(self.head);
        Ok(tape.matmul(xf, head)?)
    }
}

/// Incremental state: per-layer rotary keys and values plus fused rows.
pub struct TargetCache {
    k: Vec<RowBuf>,
    v: Vec<RowBuf>,
    fused: RowBuf,
    len: usize,
}

impl TargetCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Drop every cached row at position `rows` and beyond.
    pub fn truncate(&mut self, rows: usize) {
        assert!(rows <= self.len, "cannot grow a cache by truncation");
        for b in self.k.iter_mut().chain(self.v.iter_mut()) {
            b.truncate(rows);
        }
        self.fused.truncate(rows);
        self.len = rows;
    }

    pub fn fused_row(&self, i: usize) -> &[f64] {
        self.fused.row(i)
    }

    pub fn fused_rows(&self) -> Tensor2D {
        self.fused.to_tensor()
    }
}
