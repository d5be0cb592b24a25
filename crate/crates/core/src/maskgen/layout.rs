//! Drop-token layout sampling.
//!
//! Training keeps every depth-0 slot but only a geometrically decaying subset
//! of deeper ones. Retention is chain-consistent: a slot can only be retained
//! if its immediate ancestor (one position back, one depth up) was, so every
//! retained slot has a full prediction chain to attend to.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use super::{MaskError, Result, Slot};

/// Retained slot positions per depth for one training example.
///
/// Invariants:
/// - `retained[0]` is always every position `0..n`;
/// - each `retained[d]` is strictly ascending;
/// - `p` in `retained[d]` implies `p-1` in `retained[d-1]` (chain
///   consistency), which also forces `p >= d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutSample {
    n: usize,
    retained: Vec<Vec<usize>>,
}

impl LayoutSample {
    /// Samples a layout with geometric retention decay: depth d keeps
    /// `max(1, floor(ratio * |previous|))` positions, drawn uniformly without
    /// replacement from the chain-consistent candidates. If fewer candidates
    /// exist than the target (tiny sequences), the whole candidate set is
    /// kept, possibly empty; sampling itself never fails for `n >= 1`.
    pub fn sample(n: usize, depths: usize, ratio: f64, seed: u64) -> Result<Self> {
        if n == 0 || depths == 0 {
            return Err(MaskError::EmptyDomain);
        }
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(MaskError::InvalidRatio { ratio });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut retained = Vec::with_capacity(depths);
        retained.push((0..n).collect::<Vec<_>>());
        for d in 1..depths {
            let prev = &retained[d - 1];
            let target = ((ratio * prev.len() as f64).floor() as usize).max(1);
            let mut candidates: Vec<usize> =
                prev.iter().map(|&p| p + 1).filter(|&p| p <= n - 1).collect();
            let take = target.min(candidates.len());
            // partial Fisher-Yates, then sort the chosen prefix
            for i in 0..take {
                let j = rng.gen_range(i..candidates.len());
                candidates.swap(i, j);
            }
            let mut chosen = candidates[..take].to_vec();
            chosen.sort_unstable();
            retained.push(chosen);
        }
        Ok(LayoutSample { n, retained })
    }

    /// Full retention: depth d keeps every valid position `d..n`.
    pub fn full(n: usize, depths: usize) -> Self {
        assert!(n >= 1 && depths >= 1);
        let retained = (0..depths).map(|d| (d.min(n)..n).collect()).collect();
        LayoutSample { n, retained }
    }

    /// Builds a layout from explicit per-depth sets and validates the
    /// invariants. Depth 0 may be omitted from the argument by passing the
    /// full range explicitly; it is still checked.
    pub fn from_sets(n: usize, sets: Vec<Vec<usize>>) -> Result<Self> {
        if n == 0 || sets.is_empty() {
            return Err(MaskError::EmptyDomain);
        }
        let s = LayoutSample { n, retained: sets };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let full: Vec<usize> = (0..self.n).collect();
        if self.retained[0] != full {
            return Err(MaskError::BadLayout(
                "depth 0 must retain every position".into(),
            ));
        }
        for d in 1..self.retained.len() {
            let set = &self.retained[d];
            for (i, &p) in set.iter().enumerate() {
                if i > 0 && set[i - 1] >= p {
                    return Err(MaskError::BadLayout(format!(
                        "depth {d} not strictly ascending at index {i}"
                    )));
                }
                if p >= self.n {
                    return Err(MaskError::BadLayout(format!(
                        "depth {d} retains position {p} >= n={}",
                        self.n
                    )));
                }
                if p == 0 || self.retained[d - 1].binary_search(&(p - 1)).is_err() {
                    return Err(MaskError::BadLayout(format!(
                        "depth {d} position {p} breaks chain consistency"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn depths(&self) -> usize {
        self.retained.len()
    }

    pub fn retained(&self, depth: usize) -> &[usize] {
        &self.retained[depth]
    }

    pub fn total_slots(&self) -> usize {
        self.retained.iter().map(|s| s.len()).sum()
    }

    /// All retained slots in (pos, depth) order.
    pub fn slots(&self) -> Vec<Slot> {
        let mut out = Vec::with_capacity(self.total_slots());
        for (d, set) in self.retained.iter().enumerate() {
            for &p in set {
                out.push(Slot { pos: p, depth: d });
            }
        }
        out.sort_unstable();
        out
    }
}
