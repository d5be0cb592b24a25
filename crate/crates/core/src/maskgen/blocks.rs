//! Precomputed position-invariant mask blocks.
//!
//! The visibility predicate depends only on the two depths and the position
//! offset, so for each depth pair `(dq, dk)` we can fill one `n_max x n_max`
//! bit block once and reuse it for every example. Block `(dq, 0)` holds
//! causal prefix rows (row p allows columns `0..=p-dq`); block `(dq, dk)` for
//! `1 <= dk <= dq` is a shifted diagonal (row p allows exactly column
//! `p-(dq-dk)`); blocks with `dk > dq` are empty. Rows whose slot would be
//! invalid (`p < dq`) are all zero.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::numerics::BitMatrix;

use super::{allowed_between, MaskError, Result, Slot};

const MAGIC: &[u8; 4] = b"PDMK";
const VERSION: u32 = 1;

/// Default cap on precomputed mask storage: 512 MB.
pub const DEFAULT_BUDGET_BYTES: u64 = 512 * 1024 * 1024;

/// K x K grid of precomputed `n_max x n_max` visibility blocks.
pub struct BlockMaskSet {
    n_max: usize,
    k: usize,
    blocks: Vec<BitMatrix>,
}

impl BlockMaskSet {
    /// Bit storage for a full block set, in bytes: `k^2 * ceil(n_max^2 / 8)`.
    /// This is the figure the budget guard checks before allocating.
    pub fn storage_bytes(n_max: usize, k: usize) -> u64 {
        let per_block = (n_max as u64 * n_max as u64).div_ceil(8);
        (k as u64) * (k as u64) * per_block
    }

    /// Fills all `k^2` blocks. Fails before allocating anything if the
    /// storage estimate exceeds `budget_bytes`.
    pub fn precompute(n_max: usize, k: usize, budget_bytes: u64) -> Result<Self> {
        if n_max == 0 || k == 0 {
            return Err(MaskError::EmptyDomain);
        }
        let required = Self::storage_bytes(n_max, k);
        if required > budget_bytes {
            return Err(MaskError::BudgetExceeded { required, budget: budget_bytes });
        }
        let mut blocks = Vec::with_capacity(k * k);
        for dq in 0..k {
            for dk in 0..k {
                let mut b = BitMatrix::new(n_max, n_max);
                if dk == 0 {
                    // causal prefix rows: row p allows 0..=p-dq
                    for p in dq..n_max {
                        let limit = p - dq + 1;
                        let row = b.row_words_mut(p);
                        for w in row.iter_mut().take(limit.div_ceil(64)) {
                            *w = u64::MAX;
                        }
                        b.truncate_row(p, limit);
                    }
                } else if dk <= dq {
                    // shifted diagonal: row p allows exactly p-(dq-dk)
                    for p in dq..n_max {
                        b.set(p, p - (dq - dk));
                    }
                }
                blocks.push(b);
            }
        }
        Ok(BlockMaskSet { n_max, k, blocks })
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn block(&self, dq: usize, dk: usize) -> &BitMatrix {
        &self.blocks[dq * self.k + dk]
    }

    /// Checks a query/key pair against the stored bit. Invalid slots read as
    /// false, matching the raw predicate on the full domain.
    pub fn lookup(&self, q: Slot, k: Slot) -> Result<bool> {
        if q.pos >= self.n_max || k.pos >= self.n_max || q.depth >= self.k || k.depth >= self.k {
            return Err(MaskError::OutOfPrecomputedRange {
                n: q.pos.max(k.pos) + 1,
                k: q.depth.max(k.depth) + 1,
                n_max: self.n_max,
                k_max: self.k,
            });
        }
        Ok(self.block(q.depth, k.depth).get(q.pos, k.pos))
    }

    pub(super) fn check_range(&self, n: usize, depths: usize) -> Result<()> {
        if n > self.n_max || depths > self.k {
            return Err(MaskError::OutOfPrecomputedRange {
                n,
                k: depths,
                n_max: self.n_max,
                k_max: self.k,
            });
        }
        Ok(())
    }

    /// Writes the blocks as raw little-endian words after a fixed header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.n_max as u64).to_le_bytes())?;
        w.write_all(&(self.k as u32).to_le_bytes())?;
        for b in &self.blocks {
            for word in b.words() {
                w.write_all(&word.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(MaskError::Format(format!("bad magic {magic:?}")));
        }
        let mut u32buf = [0u8; 4];
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != VERSION {
            return Err(MaskError::Format(format!("unsupported version {version}")));
        }
        r.read_exact(&mut u64buf)?;
        let n_max = u64::from_le_bytes(u64buf) as usize;
        r.read_exact(&mut u32buf)?;
        let k = u32::from_le_bytes(u32buf) as usize;
        if n_max == 0 || k == 0 {
            return Err(MaskError::Format("empty block set".into()));
        }
        let mut blocks = Vec::with_capacity(k * k);
        for _ in 0..k * k {
            let mut b = BitMatrix::new(n_max, n_max);
            for word in b.words_mut() {
                r.read_exact(&mut u64buf)?;
                *word = u64::from_le_bytes(u64buf);
            }
            blocks.push(b);
        }
        Ok(BlockMaskSet { n_max, k, blocks })
    }

    /// Exhaustive predicate agreement over a small prefix, used by tests and
    /// after loading from disk.
    pub fn verify_against_predicate(&self, n_limit: usize) -> Result<()> {
        let n = n_limit.min(self.n_max);
        for dq in 0..self.k {
            for dk in 0..self.k {
                let b = self.block(dq, dk);
                for p in 0..n {
                    for pk in 0..n {
                        let expect = p >= dq
                            && pk >= dk
                            && allowed_between(
                                Slot { pos: p, depth: dq },
                                Slot { pos: pk, depth: dk },
                            );
                        if b.get(p, pk) != expect {
                            return Err(MaskError::Format(format!(
                                "block ({dq},{dk}) wrong at ({p},{pk})"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn k1_block_is_plain_causal() {
        let bm = BlockMaskSet::precompute(32, 1, DEFAULT_BUDGET_BYTES).unwrap();
        assert_eq!(bm.block(0, 0), &BitMatrix::causal(32));
    }

    #[test]
    fn depth_zero_queries_never_see_deeper_keys() {
        let bm = BlockMaskSet::precompute(16, 3, DEFAULT_BUDGET_BYTES).unwrap();
        for dk in 1..3 {
            let b = bm.block(0, dk);
            for p in 0..16 {
                assert_eq!(b.count_row(p), 0);
            }
        }
    }

    #[test]
    fn spot_check_against_predicate() {
        let bm = BlockMaskSet::precompute(256, 8, DEFAULT_BUDGET_BYTES).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100_000 {
            let q = Slot { pos: rng.gen_range(0..256), depth: rng.gen_range(0..8) };
            let k = Slot { pos: rng.gen_range(0..256), depth: rng.gen_range(0..8) };
            let expect = q.is_valid() && k.is_valid() && allowed_between(q, k);
            assert_eq!(
                bm.block(q.depth, k.depth).get(q.pos, k.pos),
                expect,
                "q={q} k={k}"
            );
        }
    }

    #[test]
    fn storage_formula() {
        assert_eq!(BlockMaskSet::storage_bytes(2048, 8), 64 * 524_288);
        assert_eq!(BlockMaskSet::storage_bytes(100, 3), 9 * 1250);
    }

    #[test]
    fn budget_guard_fires_before_allocation() {
        let need = BlockMaskSet::storage_bytes(1 << 12, 8);
        match BlockMaskSet::precompute(1 << 12, 8, need - 1) {
            Err(MaskError::BudgetExceeded { required, budget }) => {
                assert_eq!(required, need);
                assert_eq!(budget, need - 1);
            }
            other => panic!("expected budget error, got {:?}", other.is_ok()),
        }
        assert!(BlockMaskSet::precompute(1 << 12, 8, need).is_ok());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = std::env::temp_dir().join("pdraft_mask_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("blocks.pdmk");
        let bm = BlockMaskSet::precompute(70, 4, DEFAULT_BUDGET_BYTES).unwrap();
        bm.save(&path).unwrap();
        let loaded = BlockMaskSet::load(&path).unwrap();
        assert_eq!(loaded.n_max(), 70);
        assert_eq!(loaded.k(), 4);
        for dq in 0..4 {
            for dk in 0..4 {
                assert_eq!(loaded.block(dq, dk), bm.block(dq, dk));
            }
        }
        loaded.verify_against_predicate(70).unwrap();
    }
}
