//! Reverse-mode differentiation over a linear tape of tensor ops.
//!
//! A [`Tape`] records primitive ops as they execute; [`Tape::backward`] walks
//! the nodes in reverse and accumulates gradients for every parameter leaf.
//! Node order is the recording order, and gradient accumulation follows the
//! reverse of it, so gradients are bit-identical across runs.

use std::collections::HashMap;
use std::rc::Rc;

use super::bits::BitMatrix;
use super::tensor::{self, Tensor2D};
use super::{NumericsError, Result};

/// Index of a named parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors for one model. Ids are assigned in registration
/// order and stay stable for the lifetime of the store, which is what the
/// optimizer and the checkpoint format key on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor2D>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor2D) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor2D {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2D {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.rows() * t.cols()).sum()
    }

    /// Order-insensitive fingerprint of all parameter bytes, for determinism
    /// checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Handle to a value produced on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

enum Op {
    Const,
    Param(ParamId),
    Matmul(ValueId, ValueId),
    MatmulNT(ValueId, ValueId),
    Add(ValueId, ValueId),
    Hadamard(ValueId, ValueId),
    Scale(ValueId, f64),
    /// Elementwise multiply by a 1x1 tensor (a learnable scalar).
    MulScalar { x: ValueId, s: ValueId },
    RmsNorm { x: ValueId, gain: ValueId, inv_rms: Vec<f64> },
    Silu(ValueId),
    SoftmaxMasked { x: ValueId },
    Rope { x: ValueId, positions: Rc<Vec<usize>>, head_dim: usize, base: f64 },
    Embedding { table: ValueId, ids: Rc<Vec<usize>> },
    ConcatCols(ValueId, ValueId),
    ConcatRows(ValueId, ValueId),
    SliceCols { x: ValueId, start: usize },
    SelectRows { x: ValueId, idx: Rc<Vec<i64>> },
    BroadcastRows { row: ValueId },
    /// Elementwise multiply by fixed keep factors (0 or 1/keep_prob).
    Dropout { x: ValueId, factors: Rc<Tensor2D> },
    CrossEntropy { logits: ValueId, labels: Rc<Vec<i64>>, scale: f64 },
}

struct Node {
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by [`ParamId`]; parameters never touched by the recorded
/// computation have no entry and read as zero.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor2D>>,
}

impl Gradients {
    pub fn zeros(n_params: usize) -> Self {
        Gradients { grads: vec![None; n_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor2D> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Dense read: zeros for untouched parameters.
    pub fn dense(&self, id: ParamId, shape: (usize, usize)) -> Tensor2D {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor2D::zeros(shape.0, shape.1),
        }
    }

    /// Adds `other` into `self`, entry by entry, in id order.
    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "gradients_add",
                left: (self.grads.len(), 0),
                right: (other.grads.len(), 0),
            });
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(s) = src {
                match dst {
                    Some(d) => *d = tensor::add(d, s)?,
                    None => *dst = Some(s.clone()),
                }
            }
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .fold(0.0, |m, g| m.max(g.max_abs()))
    }
}

/// Records a computation over tensors borrowed from one [`ParamStore`].
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    values: Vec<Tensor2D>,
    param_cache: HashMap<ParamId, ValueId>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            values: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    pub fn value(&self, id: ValueId) -> &Tensor2D {
        &self.values[id.0]
    }

    /// Owned copy of a value, for use outside the tape (KV caches, metrics).
    pub fn detach(&self, id: ValueId) -> Tensor2D {
        self.values[id.0].clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor2D) -> ValueId {
        let needs_grad = match &op {
            Op::Const => false,
            Op::Param(_) => true,
            op => self.inputs_of(op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { op, needs_grad });
        self.values.push(value);
        ValueId(self.nodes.len() - 1)
    }

    fn inputs_of(&self, op: &Op) -> Vec<ValueId> {
        match op {
            Op::Const | Op::Param(_) => vec![],
            Op::Matmul(a, b)
            | Op::MatmulNT(a, b)
            | Op::Add(a, b)
            | Op::Hadamard(a, b)
            | Op::ConcatCols(a, b)
            | Op::ConcatRows(a, b) => vec![*a, *b],
            Op::MulScalar { x, s } => vec![*x, *s],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::Scale(x, _)
            | Op::Silu(x)
            | Op::SoftmaxMasked { x }
            | Op::Rope { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SelectRows { x, .. }
            | Op::Dropout { x, .. } => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::BroadcastRows { row } => vec![*row],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Enters a tensor with no gradient path.
    pub fn constant(&mut self, t: Tensor2D) -> ValueId {
        self.push(Op::Const, t)
    }

    /// Enters a store parameter as a differentiable leaf. Repeated calls for
    /// the same parameter return the same node.
    pub fn param(&mut self, id: ParamId) -> ValueId {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = self.push(Op::Param(id), t);
        self.param_cache.insert(id, v);
        v
    }

    /// Enters a store parameter as a frozen constant (no gradient).
    pub fn param_frozen(&mut self, id: ParamId) -> ValueId {
        self.constant(self.store.get(id).clone())
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), v))
    }

    /// a * b^T.
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatmulNT(a, b), v))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn hadamard(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = tensor::hadamard(self.value(a), self.value(b))?;
        Ok(self.push(Op::Hadamard(a, b), v))
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        let v = tensor::scale(self.value(x), c);
        self.push(Op::Scale(x, c), v)
    }

    /// x * s where s is 1x1 (a learnable scalar such as a gate coefficient).
    pub fn mul_scalar(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        let st = self.value(s);
        if st.shape() != (1, 1) {
            return Err(NumericsError::ShapeMismatch {
                op: "mul_scalar",
                left: self.value(x).shape(),
                right: st.shape(),
            });
        }
        let c = st.get(0, 0);
        let v = tensor::scale(self.value(x), c);
        Ok(self.push(Op::MulScalar { x, s }, v))
    }

    pub fn rms_norm(&mut self, x: ValueId, gain: ValueId) -> Result<ValueId> {
        let (v, inv_rms) = tensor::rms_norm(self.value(x), self.value(gain))?;
        Ok(self.push(Op::RmsNorm { x, gain, inv_rms }, v))
    }

    pub fn silu(&mut self, x: ValueId) -> ValueId {
        let v = tensor::silu(self.value(x));
        self.push(Op::Silu(x), v)
    }

    pub fn softmax_masked(&mut self, x: ValueId, mask: &BitMatrix) -> Result<ValueId> {
        let v = tensor::softmax_masked(self.value(x), mask)?;
        Ok(self.push(Op::SoftmaxMasked { x }, v))
    }

    pub fn rope(
        &mut self,
        x: ValueId,
        positions: Rc<Vec<usize>>,
        head_dim: usize,
        base: f64,
    ) -> Result<ValueId> {
        let v = tensor::rope(self.value(x), &positions, head_dim, base, false)?;
        Ok(self.push(Op::Rope { x, positions, head_dim, base }, v))
    }

    pub fn embedding(&mut self, table: ValueId, ids: Rc<Vec<usize>>) -> Result<ValueId> {
        let v = tensor::embedding(self.value(table), &ids)?;
        Ok(self.push(Op::Embedding { table, ids }, v))
    }

    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = tensor::concat_cols(self.value(a), self.value(b))?;
        Ok(self.push(Op::ConcatCols(a, b), v))
    }

    pub fn concat_rows(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let v = tensor::concat_rows(self.value(a), self.value(b))?;
        Ok(self.push(Op::ConcatRows(a, b), v))
    }

    pub fn slice_cols(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let v = tensor::slice_cols(self.value(x), start, len)?;
        Ok(self.push(Op::SliceCols { x, start }, v))
    }

    pub fn select_rows(&mut self, x: ValueId, idx: Rc<Vec<i64>>) -> Result<ValueId> {
        let v = tensor::select_rows(self.value(x), &idx)?;
        Ok(self.push(Op::SelectRows { x, idx }, v))
    }

    pub fn broadcast_rows(&mut self, row: ValueId, n: usize) -> Result<ValueId> {
        let v = tensor::broadcast_rows(self.value(row), n)?;
        Ok(self.push(Op::BroadcastRows { row }, v))
    }

    /// Elementwise multiply by precomputed dropout keep factors (each entry 0
    /// or 1/keep_prob). The caller derives the factors deterministically.
    pub fn dropout(&mut self, x: ValueId, factors: Tensor2D) -> Result<ValueId> {
        if factors.shape() != self.value(x).shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "dropout",
                left: self.value(x).shape(),
                right: factors.shape(),
            });
        }
        let v = tensor::hadamard(self.value(x), &factors)?;
        Ok(self.push(Op::Dropout { x, factors: Rc::new(factors) }, v))
    }

    /// Scaled summed cross-entropy over rows with label >= 0, producing a
    /// 1x1 value. `scale` is typically 1/(global loss row count).
    pub fn cross_entropy(
        &mut self,
        logits: ValueId,
        labels: Rc<Vec<i64>>,
        scale: f64,
    ) -> Result<ValueId> {
        let l = tensor::cross_entropy_scaled(self.value(logits), &labels, scale)?;
        let v = Tensor2D::from_vec(1, 1, vec![l]);
        Ok(self.push(Op::CrossEntropy { logits, labels, scale }, v))
    }

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// parameter that participated; untouched parameters read as zero.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(NumericsError::ShapeMismatch {
                op: "backward",
                left: self.value(loss).shape(),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Tensor2D>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor2D::from_vec(1, 1, vec![1.0]));
        let mut out = Gradients::zeros(self.store.len());

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(pid) => {
                    let slot = &mut out.grads[pid.0];
                    match slot {
                        Some(acc) => *acc = tensor::add(acc, &g)?,
                        None => *slot = Some(g),
                    }
                }
                Op::Matmul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let da = tensor::matmul_nt(&g, self.value(*b))?;
                        accumulate(&mut grads, *a, da)?;
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = tensor::matmul_tn(self.value(*a), &g)?;
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::MatmulNT(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let da = tensor::matmul(&g, self.value(*b))?;
                        accumulate(&mut grads, *a, da)?;
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = tensor::matmul_tn(&g, self.value(*a))?;
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::Hadamard(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let da = tensor::hadamard(&g, self.value(*b))?;
                        accumulate(&mut grads, *a, da)?;
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = tensor::hadamard(&g, self.value(*a))?;
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, *x, tensor::scale(&g, *c))?;
                }
                Op::MulScalar { x, s } => {
                    let sv = self.value(*s).get(0, 0);
                    if self.nodes[x.0].needs_grad {
                        accumulate(&mut grads, *x, tensor::scale(&g, sv))?;
                    }
                    if self.nodes[s.0].needs_grad {
                        let dot: f64 = g
                            .data()
                            .iter()
                            .zip(self.value(*x).data())
                            .map(|(a, b)| a * b)
                            .sum();
                        accumulate(&mut grads, *s, Tensor2D::from_vec(1, 1, vec![dot]))?;
                    }
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let (dx, dgain) = tensor::rms_norm_backward(
                        self.value(*x),
                        self.value(*gain),
                        inv_rms,
                        &g,
                    );
                    if self.nodes[x.0].needs_grad {
                        accumulate(&mut grads, *x, dx)?;
                    }
                    if self.nodes[gain.0].needs_grad {
                        accumulate(&mut grads, *gain, dgain)?;
                    }
                }
                Op::Silu(x) => {
                    accumulate(&mut grads, *x, tensor::silu_backward(self.value(*x), &g))?;
                }
                Op::SoftmaxMasked { x } => {
                    let dx = tensor::softmax_backward(&self.values[i], &g);
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Rope { x, positions, head_dim, base } => {
                    let dx = tensor::rope(&g, positions, *head_dim, *base, true)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Embedding { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Tensor2D::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        let src = g.row(r);
                        let dst = dt.row_mut(id);
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *table, dt)?;
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.value(*a).cols();
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, tensor::slice_cols(&g, 0, ac)?)?;
                    }
                    if self.nodes[b.0].needs_grad {
                        let bc = self.value(*b).cols();
                        accumulate(&mut grads, *b, tensor::slice_cols(&g, ac, bc)?)?;
                    }
                }
                Op::ConcatRows(a, b) => {
                    let ar = self.value(*a).rows();
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, g.rows_slice(0, ar))?;
                    }
                    if self.nodes[b.0].needs_grad {
                        let br = self.value(*b).rows();
                        accumulate(&mut grads, *b, g.rows_slice(ar, br))?;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xt = self.value(*x);
                    let mut dx = Tensor2D::zeros(xt.rows(), xt.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::SelectRows { x, idx } => {
                    let xt = self.value(*x);
                    let mut dx = Tensor2D::zeros(xt.rows(), xt.cols());
                    for (r, &src) in idx.iter().enumerate() {
                        if src < 0 {
                            continue;
                        }
                        let dst = dx.row_mut(src as usize);
                        for (d, s) in dst.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::BroadcastRows { row } => {
                    let mut dr = Tensor2D::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        let dst = dr.row_mut(0);
                        for (d, s) in dst.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *row, dr)?;
                }
                Op::Dropout { x, factors } => {
                    let dx = tensor::hadamard(&g, factors)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::CrossEntropy { logits, labels, scale } => {
                    let up = g.get(0, 0);
                    let mut dl =
                        tensor::cross_entropy_backward(self.value(*logits), labels, *scale);
                    if up != 1.0 {
                        dl = tensor::scale(&dl, up);
                    }
                    accumulate(&mut grads, *logits, dl)?;
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(
    grads: &mut [Option<Tensor2D>],
    id: ValueId,
    delta: Tensor2D,
) -> Result<()> {
    match &mut grads[id.0] {
        Some(g) => {
            *g = tensor::add(g, &delta)?;
        }
        slot @ None => {
            *slot = Some(delta);
        }
    }
    Ok(())
}
