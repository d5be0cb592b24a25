//! Bit-packed boolean matrices.
//!
//! One bit per entry, rows padded to whole 64-bit words so every row starts
//! word-aligned. Used for attention masks: the masked softmax reads these
//! directly, and the mask precomputation stores one `BitMatrix` per depth
//! pair.

/// A rows x cols boolean matrix, bit-packed into `u64` words per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl BitMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        let words_per_row = cols.div_ceil(64);
        BitMatrix {
            rows,
            cols,
            words_per_row,
            words: vec![0; rows * words_per_row],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn words_mut(&mut self) -> &mut [u64] {
        &mut self.words
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        debug_assert!(i < self.rows && j < self.cols);
        let w = self.words[i * self.words_per_row + (j >> 6)];
        (w >> (j & 63)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize) {
        debug_assert!(i < self.rows && j < self.cols);
        self.words[i * self.words_per_row + (j >> 6)] |= 1u64 << (j & 63);
    }

    #[inline]
    pub fn row_words(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_row..(i + 1) * self.words_per_row]
    }

    #[inline]
    pub fn row_words_mut(&mut self, i: usize) -> &mut [u64] {
        &mut self.words[i * self.words_per_row..(i + 1) * self.words_per_row]
    }

    /// Copies row `src` of `from` into row `dst` of `self`. Column counts
    /// must match.
    pub fn copy_row_from(&mut self, dst: usize, from: &BitMatrix, src: usize) {
        debug_assert_eq!(self.words_per_row, from.words_per_row);
        let s = src * from.words_per_row;
        let d = dst * self.words_per_row;
        let wpr = self.words_per_row;
        self.words[d..d + wpr].copy_from_slice(&from.words[s..s + wpr]);
    }

    /// Clears every bit of row `i` at column >= `len` (keeps a prefix).
    pub fn truncate_row(&mut self, i: usize, len: usize) {
        debug_assert!(len <= self.cols);
        let full = len >> 6;
        let rem = len & 63;
        let row = self.row_words_mut(i);
        if rem != 0 {
            row[full] &= (1u64 << rem) - 1;
            for w in &mut row[full + 1..] {
                *w = 0;
            }
        } else {
            for w in &mut row[full..] {
                *w = 0;
            }
        }
    }

    pub fn count_row(&self, i: usize) -> usize {
        self.row_words(i).iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Iterator over the set column indices of row `i`, ascending.
    pub fn iter_row(&self, i: usize) -> SetBits<'_> {
        SetBits {
            words: self.row_words(i),
            word_idx: 0,
            current: if self.words_per_row == 0 {
                0
            } else {
                self.row_words(i)[0]
            },
        }
    }

    /// Square causal mask: row i allows columns j <= i.
    pub fn causal(n: usize) -> Self {
        let mut m = BitMatrix::new(n, n);
        for i in 0..n {
            for w in 0..=(i >> 6) {
                m.words[i * m.words_per_row + w] = u64::MAX;
            }
            m.truncate_row(i, i + 1);
        }
        m
    }

    /// Rectangular causal mask for incremental decoding: `q_rows` new query
    /// rows against `k_cols` total keys, where query row i sits at global
    /// position `k_cols - q_rows + i` and may attend keys at positions <= its
    /// own.
    pub fn causal_suffix(q_rows: usize, k_cols: usize) -> Self {
        assert!(q_rows <= k_cols);
        let mut m = BitMatrix::new(q_rows, k_cols);
        let offset = k_cols - q_rows;
        for i in 0..q_rows {
            let limit = offset + i + 1;
            for w in 0..limit.div_ceil(64) {
                m.words[i * m.words_per_row + w] = u64::MAX;
            }
            m.truncate_row(i, limit);
        }
        m
    }
}

/// Ascending iterator over set bit positions in one row.
pub struct SetBits<'a> {
    words: &'a [u64],
    word_idx: usize,
    current: u64,
}

impl Iterator for SetBits<'_> {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        while self.current == 0 {
            self.word_idx += 1;
            if self.word_idx >= self.words.len() {
                return None;
            }
            self.current = self.words[self.word_idx];
        }
        let bit = self.current.trailing_zeros() as usize;
        self.current &= self.current - 1;
        Some((self.word_idx << 6) + bit)
    }
}
