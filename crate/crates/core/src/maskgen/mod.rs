//! Attention mask machinery for parallel drafting.
//!
//! A drafter slot is a pair `(pos, depth)`: the query sits at sequence
//! position `pos` and its real context ends `depth` tokens earlier. Depth 0
//! slots are ordinary next-token queries; deeper slots predict further ahead
//! and may only see the real prefix plus their own prediction chain. The
//! visibility rule depends only on position *differences*, so square blocks
//! of it can be precomputed once per depth pair ([`BlockMaskSet`]) and
//! per-example masks assembled by selection instead of predicate evaluation.

mod assemble;
mod blocks;
mod layout;

pub use assemble::{rect_mask, AssembledMask};
pub use blocks::{BlockMaskSet, DEFAULT_BUDGET_BYTES};
pub use layout::LayoutSample;

use std::fmt;

/// One drafter query slot: sequence position and look-ahead depth.
///
/// Ordering is position-major lexicographic, which is also the row/column
/// order of every assembled mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Slot {
    pub pos: usize,
    pub depth: usize,
}

impl Slot {
    /// A slot is valid when its chain fits in the sequence: `depth <= pos`.
    pub fn new(pos: usize, depth: usize) -> Result<Self> {
        if depth > pos {
            return Err(MaskError::InvalidSlot { pos, depth });
        }
        Ok(Slot { pos, depth })
    }

    pub fn is_valid(&self) -> bool {
        self.depth <= self.pos
    }

    /// Last real-context position this slot may rely on.
    pub fn anchor(&self) -> usize {
        self.pos - self.depth
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.pos, self.depth)
    }
}

/// Visibility predicate for two valid slots. A depth-0 query is plain causal
/// over depth-0 keys; a deeper query sees the real prefix up to its anchor
/// plus exactly the slots of its own prediction chain (including itself).
#[inline]
pub fn allowed_between(q: Slot, k: Slot) -> bool {
    if q.depth == 0 {
        k.depth == 0 && k.pos <= q.pos
    } else {
        let anchor = q.pos - q.depth;
        if k.depth == 0 {
            k.pos <= anchor
        } else {
            k.depth <= q.depth && k.pos == anchor + k.depth
        }
    }
}

/// Checked form of [`allowed_between`]: rejects invalid slots.
pub fn mask_allowed(q: Slot, k: Slot) -> Result<bool> {
    for s in [q, k] {
        if !s.is_valid() {
            return Err(MaskError::InvalidSlot { pos: s.pos, depth: s.depth });
        }
    }
    Ok(allowed_between(q, k))
}

#[derive(Debug)]
pub enum MaskError {
    /// depth > pos: the slot's chain would start before the sequence.
    InvalidSlot { pos: usize, depth: usize },
    /// Retention ratio outside (0, 1].
    InvalidRatio { ratio: f64 },
    /// Zero-length sequence or zero depths requested.
    EmptyDomain,
    /// A retained-position set violates layout invariants.
    BadLayout(String),
    /// Precomputation would exceed the configured byte budget.
    BudgetExceeded { required: u64, budget: u64 },
    /// Requested length or depth not covered by the precomputed blocks.
    OutOfPrecomputedRange {
        n: usize,
        k: usize,
        n_max: usize,
        k_max: usize,
    },
    /// Slot list handed to assembly is not sorted (pos, depth) or has
    /// duplicates.
    UnsortedSlots { index: usize },
    Io(std::io::Error),
    Format(String),
}

impl fmt::Display for MaskError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskError::InvalidSlot { pos, depth } => {
                write!(f, "invalid slot ({pos}, {depth}): depth exceeds position")
            }
            MaskError::InvalidRatio { ratio } => {
                write!(f, "retention ratio {ratio} outside (0, 1]")
            }
            MaskError::EmptyDomain => write!(f, "sequence length and depth count must be >= 1"),
            MaskError::BadLayout(m) => write!(f, "bad layout: {m}"),
            MaskError::BudgetExceeded { required, budget } => {
                write!(f, "mask precompute needs {required} bytes, budget is {budget}")
            }
            MaskError::OutOfPrecomputedRange { n, k, n_max, k_max } => write!(
                f,
                "requested n={n}, k={k} but blocks cover n_max={n_max}, k={k_max}"
            ),
            MaskError::UnsortedSlots { index } => {
                write!(f, "slot list not strictly (pos, depth)-sorted at index {index}")
            }
            MaskError::Io(e) => write!(f, "mask io: {e}"),
            MaskError::Format(m) => write!(f, "mask format: {m}"),
        }
    }
}

impl std::error::Error for MaskError {}

impl From<std::io::Error> for MaskError {
    fn from(e: std::io::Error) -> Self {
        MaskError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, MaskError>;
