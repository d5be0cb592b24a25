//! Per-example assembled masks.
//!
//! An assembled mask is the dense `T x T` visibility matrix over one
//! example's retained slots, rows and columns both in (pos, depth) order.
//! Two construction paths produce it: [`AssembledMask::from_slots`] evaluates
//! the predicate for every pair — the obvious quadratic route and the
//! reference the fast path is checked against — while [`BlockMaskSet::gather`]
//! selects bits out of the precomputed blocks with word-level operations.

use crate::numerics::BitMatrix;

use super::{allowed_between, BlockMaskSet, LayoutSample, MaskError, Result, Slot};

/// Dense per-example visibility mask with its slot order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledMask {
    order: Vec<Slot>,
    bits: BitMatrix,
}

impl AssembledMask {
    /// Builds the mask by evaluating the predicate for every slot pair.
    /// Slots must be strictly ascending in (pos, depth) order; this is the
    /// order every consumer (attention, loss, partitioning) indexes by.
    pub fn from_slots(slots: &[Slot]) -> Result<Self> {
        for (i, s) in slots.iter().enumerate() {
            if !s.is_valid() {
                return Err(MaskError::InvalidSlot { pos: s.pos, depth: s.depth });
            }
            if i > 0 && slots[i - 1] >= *s {
                return Err(MaskError::UnsortedSlots { index: i });
            }
        }
        let t = slots.len();
        let mut bits = BitMatrix::new(t, t);
        for (i, &q) in slots.iter().enumerate() {
            for (j, &k) in slots.iter().enumerate() {
                if allowed_between(q, k) {
                    bits.set(i, j);
                }
            }
        }
        Ok(AssembledMask { order: slots.to_vec(), bits })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[Slot] {
        &self.order
    }

    pub fn bits(&self) -> &BitMatrix {
        &self.bits
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.bits.get(row, col)
    }
}

impl BlockMaskSet {
    /// Assembles a layout's mask by selection from the precomputed blocks
    /// instead of per-pair predicate evaluation.
    ///
    /// In (pos, depth) order every column whose slot position is `<= a`
    /// precedes every column whose position is `> a`, and depth 0 retains
    /// all positions, so a query's depth-0 visibility — row `p` of block
    /// `(d, 0)`, a contiguous prefix ending at its anchor — becomes one
    /// word-wise AND of the depth-0 column map with a prefix mask. The
    /// remaining visible keys are the query's own chain, at most `k - 1`
    /// individual bits read straight out of the diagonal blocks.
    pub fn gather(&self, layout: &LayoutSample) -> Result<AssembledMask> {
        self.check_range(layout.n(), layout.depths())?;
        let order = layout.slots();
        let t = order.len();
        let n = layout.n();
        let words = t.div_ceil(64);

        // column index of each retained slot, addressed by (depth, pos)
        let mut col_of = vec![vec![usize::MAX; n]; layout.depths()];
        // cols_through[p]: how many columns hold slots at positions <= p
        let mut cols_through = vec![0usize; n];
        // bit j set iff column j is a depth-0 slot
        let mut d0_colmap = vec![0u64; words];
        for (j, s) in order.iter().enumerate() {
            col_of[s.depth][s.pos] = j;
            cols_through[s.pos] += 1;
            if s.depth == 0 {
                d0_colmap[j >> 6] |= 1u64 << (j & 63);
            }
        }
        let mut acc = 0;
        for c in cols_through.iter_mut() {
            acc += *c;
            *c = acc;
        }

        let mut bits = BitMatrix::new(t, t);
        for (i, q) in order.iter().enumerate() {
            let anchor = q.anchor();
            let prefix = cols_through[anchor];
            let full = prefix >> 6;
            let rem = prefix & 63;
            let row = bits.row_words_mut(i);
            row[..full].copy_from_slice(&d0_colmap[..full]);
            if rem != 0 {
                row[full] = d0_colmap[full] & ((1u64 << rem) - 1);
            }
            for dk in 1..=q.depth {
                let kp = anchor + dk;
                if self.block(q.depth, dk).get(q.pos, kp) {
                    let col = col_of[dk][kp];
                    debug_assert_ne!(col, usize::MAX, "chain slot missing from layout");
                    bits.set(i, col);
                }
            }
        }
        Ok(AssembledMask { order, bits })
    }

    /// Mask for full retention at length `n`: every valid slot `(p, d)` with
    /// `d < k`. Shorter sequences reuse the one precomputed set this way.
    pub fn slice_full(&self, n: usize) -> Result<AssembledMask> {
        if n == 0 {
            return Err(MaskError::EmptyDomain);
        }
        self.gather(&LayoutSample::full(n, self.k()))
    }
}

/// Rectangular predicate mask: rows are the query slots, columns the key
/// slots, in exactly the orders given. Decode-time verification and segment
/// forwards use this, where key order is fixed by a cache layout rather than
/// sorted.
pub fn rect_mask(queries: &[Slot], keys: &[Slot]) -> Result<BitMatrix> {
    for s in queries.iter().chain(keys) {
        if !s.is_valid() {
            return Err(MaskError::InvalidSlot { pos: s.pos, depth: s.depth });
        }
    }
    let mut bits = BitMatrix::new(queries.len(), keys.len());
    for (i, &q) in queries.iter().enumerate() {
        for (j, &k) in keys.iter().enumerate() {
            if allowed_between(q, k) {
                bits.set(i, j);
            }
        }
    }
    Ok(bits)
}
