//! Within-sequence segment planning.
//!
//! Long examples are split into `S` segments processed by separate
//! forward-backward passes whose gradients are accumulated. The split must
//! keep every slot in the same segment as its prediction-chain ancestor:
//! bucketing slots by raw position would separate a deep slot from the
//! chain keys it attends to. Assignment therefore runs in three phases:
//! depths 0 and 1 are bucketed by position boundaries, every deeper slot
//! inherits its ancestor's segment, and each segment records the cumulative
//! depth-0 context it must recompute (loss-excluded) for its keys.

use std::fmt;

use serde::Serialize;

use crate::maskgen::{LayoutSample, MaskError, Slot};

#[derive(Debug)]
pub enum PartitionError {
    /// Segment count zero or larger than the sequence length.
    BadSegmentCount { segments: usize, length: usize },
    /// The layout handed in violates chain consistency.
    Inconsistent(String),
}

impl fmt::Display for PartitionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionError::BadSegmentCount { segments, length } => {
                write!(f, "segment count {segments} invalid for length {length}")
            }
            PartitionError::Inconsistent(m) => write!(f, "inconsistent layout: {m}"),
        }
    }
}

impl std::error::Error for PartitionError {}

impl From<MaskError> for PartitionError {
    fn from(e: MaskError) -> Self {
        PartitionError::Inconsistent(e.to_string())
    }
}

/// One slot of a segment's forward pass. Context rows are depth-0 slots
/// recomputed from earlier segments purely to serve as keys; they carry no
/// loss in this segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentSlot {
    pub slot: Slot,
    pub loss_bearing: bool,
}

/// Immutable segment assignment for one layout.
///
/// `assign[d][i]` is the segment of slot `(retained(d)[i], d)`; `context[s]`
/// is the cumulative depth-0 position set available to segment `s`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SegmentPlan {
    segments: usize,
    boundaries: Vec<usize>,
    assign: Vec<Vec<usize>>,
    context: Vec<Vec<usize>>,
}

impl SegmentPlan {
    /// Splits a layout's slots into `segments` groups.
    ///
    /// Boundaries sit at multiples of `floor(n / segments)` with the last
    /// segment absorbing the remainder. Depths 0 and 1 are bucketed by
    /// boundary; depth `d >= 2` inherits from `(p-1, d-1)`, which chain
    /// consistency guarantees is retained.
    pub fn partition(sample: &LayoutSample, segments: usize) -> Result<Self, PartitionError> {
        let n = sample.n();
        if segments == 0 || segments > n {
            return Err(PartitionError::BadSegmentCount { segments, length: n });
        }
        sample.validate()?;

        let width = n / segments;
        let mut boundaries: Vec<usize> = (0..segments).map(|s| s * width).collect();
        boundaries.push(n);
        let bucket = |p: usize| (p / width).min(segments - 1);

        let depths = sample.depths();
        let mut assign: Vec<Vec<usize>> = Vec::with_capacity(depths);
        // Phase 1: depths 0 and 1 by position bucket
        for d in 0..depths.min(2) {
            assign.push(sample.retained(d).iter().map(|&p| bucket(p)).collect());
        }
        // Phase 2: deeper slots inherit their ancestor's segment
        for d in 2..depths {
            let prev_set = sample.retained(d - 1);
            let prev_assign = &assign[d - 1];
            let row = sample
                .retained(d)
                .iter()
                .map(|&p| {
                    let i = prev_set.binary_search(&(p - 1)).map_err(|_| {
                        PartitionError::Inconsistent(format!(
                            "slot ({p}, {d}) has no retained ancestor"
                        ))
                    })?;
                    Ok(prev_assign[i])
                })
                .collect::<Result<Vec<usize>, PartitionError>>()?;
            assign.push(row);
        }
        // Phase 3: cumulative depth-0 context per segment
        let context = (0..segments)
            .map(|s| (0..boundaries[s + 1]).collect())
            .collect();

        Ok(SegmentPlan { segments, boundaries, assign, context })
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// Cumulative depth-0 positions available to segment `s` as keys.
    pub fn context_positions(&self, s: usize) -> &[usize] {
        &self.context[s]
    }

    /// Segment owning a retained slot, or `None` if the slot is not in the
    /// layout the plan was built from.
    pub fn assignment(&self, sample: &LayoutSample, slot: Slot) -> Option<usize> {
        if slot.depth >= self.assign.len() {
            return None;
        }
        let i = sample.retained(slot.depth).binary_search(&slot.pos).ok()?;
        Some(self.assign[slot.depth][i])
    }

    /// All slots of segment `s`'s forward pass in (pos, depth) order: the
    /// slots assigned to `s` plus earlier segments' depth-0 context rows.
    pub fn segment_slots(&self, sample: &LayoutSample, s: usize) -> Vec<SegmentSlot> {
        let mut out = Vec::new();
        // context-only rows: depth-0 positions before this segment's bucket
        for &p in &self.context[s] {
            if p < self.boundaries[s] {
                out.push(SegmentSlot { slot: Slot { pos: p, depth: 0 }, loss_bearing: false });
            }
        }
        for (d, row) in self.assign.iter().enumerate() {
            for (i, &seg) in row.iter().enumerate() {
                if seg == s {
                    let pos = sample.retained(d)[i];
                    out.push(SegmentSlot { slot: Slot { pos, depth: d }, loss_bearing: true });
                }
            }
        }
        out.sort_unstable_by_key(|e| e.slot);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskgen::allowed_between;
    use proptest::prelude::*;

    fn hand_layout() -> LayoutSample {
        LayoutSample::from_sets(
            16,
            vec![
                (0..16).collect(),
                vec![1, 3, 4, 6, 7, 9, 10, 12, 14, 15],
                vec![2, 5, 7, 8, 11, 13, 15],
                vec![3, 6, 9, 12, 14],
            ],
        )
        .unwrap()
    }

    /// Independent oracle: a slot's segment is the bucket of the depth-1 (or
    /// depth-0) end of its chain, found by walking ancestors one at a time.
    fn chain_walk_segment(slot: Slot, n: usize, segments: usize) -> usize {
        let (mut p, mut d) = (slot.pos, slot.depth);
        while d >= 2 {
            p -= 1;
            d -= 1;
        }
        (p / (n / segments)).min(segments - 1)
    }

    #[test]
    fn single_segment_owns_everything() {
        let layout = hand_layout();
        let plan = SegmentPlan::partition(&layout, 1).unwrap();
        assert_eq!(plan.boundaries(), &[0, 16]);
        assert_eq!(plan.context_positions(0), (0..16).collect::<Vec<_>>());
        let slots = plan.segment_slots(&layout, 0);
        assert_eq!(slots.len(), 38);
        assert!(slots.iter().all(|e| e.loss_bearing));
    }

    #[test]
    fn fixture_trace_matches_hand_run() {
        let layout = hand_layout();
        let plan = SegmentPlan::partition(&layout, 2).unwrap();
        assert_eq!(plan.boundaries(), &[0, 8, 16]);
        assert_eq!(plan.context_positions(0), (0..8).collect::<Vec<_>>());
        assert_eq!(plan.context_positions(1), (0..16).collect::<Vec<_>>());

        // (8,2) inherits segment 0 from (7,1); raw bucketing would say 1
        let deep = Slot::new(8, 2).unwrap();
        let ancestor = Slot::new(7, 1).unwrap();
        assert_eq!(plan.assignment(&layout, deep), Some(0));
        assert_eq!(plan.assignment(&layout, ancestor), Some(0));
        assert_eq!(8 / (16 / 2), 1, "naive position bucket would split the chain");

        // segment 0's per-depth owned sets, straight from the hand trace
        let owned: Vec<Vec<usize>> = (0..4)
            .map(|d| {
                layout
                    .retained(d)
                    .iter()
                    .copied()
                    .filter(|&p| plan.assignment(&layout, Slot { pos: p, depth: d }) == Some(0))
                    .collect()
            })
            .collect();
        assert_eq!(owned[0], (0..8).collect::<Vec<_>>());
        assert_eq!(owned[1], vec![1, 3, 4, 6, 7]);
        assert_eq!(owned[2], vec![2, 5, 7, 8]);
        assert_eq!(owned[3], vec![3, 6, 9]);

        let s0 = plan.segment_slots(&layout, 0);
        let s1 = plan.segment_slots(&layout, 1);
        assert_eq!(s0.len(), 20);
        assert_eq!(s0.iter().filter(|e| e.loss_bearing).count(), 20);
        assert_eq!(s1.iter().filter(|e| e.loss_bearing).count(), 18);
        assert_eq!(s1.len(), 26, "18 owned + 8 recomputed context rows");
        let ctx: Vec<Slot> =
            s1.iter().filter(|e| !e.loss_bearing).map(|e| e.slot).collect();
        let expect: Vec<Slot> = (0..8).map(|p| Slot { pos: p, depth: 0 }).collect();
        assert_eq!(ctx, expect);
    }

    #[test]
    fn matches_chain_walk_oracle_on_random_layouts() {
        for seed in 0..30u64 {
            let n = 8 + (seed as usize * 13) % 120;
            let k = 1 + (seed as usize) % 6;
            let layout = LayoutSample::sample(n, k, 0.75, seed).unwrap();
            for segments in [1usize, 2, 3, 5] {
                if segments > n {
                    continue;
                }
                let plan = SegmentPlan::partition(&layout, segments).unwrap();
                for slot in layout.slots() {
                    assert_eq!(
                        plan.assignment(&layout, slot),
                        Some(chain_walk_segment(slot, n, segments)),
                        "slot {slot} n={n} S={segments}"
                    );
                }
            }
        }
    }

    #[test]
    fn loss_bearing_slots_partition_the_layout() {
        let layout = LayoutSample::sample(97, 5, 0.8, 7).unwrap();
        let plan = SegmentPlan::partition(&layout, 4).unwrap();
        let mut seen = Vec::new();
        for s in 0..4 {
            for e in plan.segment_slots(&layout, s) {
                if e.loss_bearing {
                    seen.push(e.slot);
                }
            }
        }
        seen.sort_unstable();
        assert_eq!(seen, layout.slots());
    }

    #[test]
    fn every_visible_retained_key_is_present_in_segment() {
        for seed in [3u64, 11, 19] {
            let n = 64;
            let layout = LayoutSample::sample(n, 4, 0.7, seed).unwrap();
            let retained = layout.slots();
            for segments in [2usize, 3] {
                let plan = SegmentPlan::partition(&layout, segments).unwrap();
                for s in 0..segments {
                    let present = plan.segment_slots(&layout, s);
                    for q in present.iter().filter(|e| e.loss_bearing) {
                        for &k in &retained {
                            if allowed_between(q.slot, k) {
                                assert!(
                                    present.iter().any(|e| e.slot == k),
                                    "segment {s}: {} needs key {k}",
                                    q.slot
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn segment_row_counts_obey_memory_bound() {
        for seed in [0u64, 1, 2, 3, 4] {
            let n = 256;
            let layout = LayoutSample::sample(n, 8, 0.8, seed).unwrap();
            let total = layout.total_slots();
            for segments in [2usize, 4, 8] {
                let plan = SegmentPlan::partition(&layout, segments).unwrap();
                let peak = (0..segments)
                    .map(|s| plan.segment_slots(&layout, s).len())
                    .max()
                    .unwrap();
                assert!(
                    peak <= total / segments + n,
                    "peak {peak} > {}/{segments} + {n}",
                    total
                );
            }
        }
    }

    #[test]
    fn bad_segment_counts_are_rejected() {
        let layout = hand_layout();
        assert!(matches!(
            SegmentPlan::partition(&layout, 0),
            Err(PartitionError::BadSegmentCount { .. })
        ));
        assert!(matches!(
            SegmentPlan::partition(&layout, 17),
            Err(PartitionError::BadSegmentCount { .. })
        ));
    }

    #[test]
    fn plan_serializes_to_json() {
        let layout = hand_layout();
        let plan = SegmentPlan::partition(&layout, 2).unwrap();
        let doc: serde_json::Value = serde_json::from_str(&plan.to_json()).unwrap();
        assert_eq!(doc["boundaries"], serde_json::json!([0, 8, 16]));
        assert_eq!(doc["segments"], serde_json::json!(2));
    }

    proptest! {
        /// Depth >= 2 slots always share their ancestor's segment; depth-1
        /// slots may straddle a boundary from their depth-0 ancestor, whose
        /// key the cumulative context provides instead.
        #[test]
        fn dependency_preservation_holds(
            n in 2usize..256,
            k in 1usize..8,
            seed in 0u64..1_000_000,
            segments in 1usize..8,
            ratio in 0.3f64..1.0,
        ) {
            let segments = segments.min(n);
            let layout = LayoutSample::sample(n, k, ratio, seed).unwrap();
            let plan = SegmentPlan::partition(&layout, segments).unwrap();
            for slot in layout.slots() {
                match slot.depth {
                    0 => {}
                    1 => {
                        let s = plan.assignment(&layout, slot).unwrap();
                        prop_assert!(
                            plan.context_positions(s).binary_search(&(slot.pos - 1)).is_ok(),
                            "slot {} missing depth-0 context", slot
                        );
                    }
                    _ => {
                        let ancestor = Slot { pos: slot.pos - 1, depth: slot.depth - 1 };
                        prop_assert_eq!(
                            plan.assignment(&layout, slot),
                            plan.assignment(&layout, ancestor),
                            "slot {} split from {}", slot, ancestor
                        );
                    }
                }
            }
        }
    }
}
