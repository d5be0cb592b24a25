//! Greedy speculative decoding: parallel one-pass drafting, an
//! autoregressive drafting baseline, chain verification against the target,
//! and an analytic cost model.
//!
//! Verification is exact: the target accepts the longest draft prefix that
//! matches its own greedy argmax chain (ties broken by lowest token id), so
//! decoded output is identical to plain target decoding token for token,
//! whatever the drafter proposes.

use std::fmt;

use serde::Serialize;

use crate::maskgen::{MaskError, Slot};
use crate::model::{Drafter, DrafterCache, ModelError, TargetCache, TargetModel};
use crate::numerics::{argmax_row, ParamStore, Tensor2D};

#[derive(Debug)]
pub enum SpecdecError {
    EmptyPrompt,
    BadSpeculationDepth,
    /// A drafting mode was requested without a drafter.
    MissingDrafter,
    Model(ModelError),
    Mask(MaskError),
}

impl fmt::Display for SpecdecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecdecError::EmptyPrompt => write!(f, "decoding needs a nonempty prompt"),
            SpecdecError::BadSpeculationDepth => write!(f, "speculation depth must be positive"),
            SpecdecError::MissingDrafter => write!(f, "drafting mode requested without a drafter"),
            SpecdecError::Model(e) => write!(f, "{e}"),
            SpecdecError::Mask(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SpecdecError {}

impl From<ModelError> for SpecdecError {
    fn from(e: ModelError) -> Self {
        SpecdecError::Model(e)
    }
}

impl From<MaskError> for SpecdecError {
    fn from(e: MaskError) -> Self {
        SpecdecError::Mask(e)
    }
}

pub type Result<T> = std::result::Result<T, SpecdecError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Parallel,
    Ar,
    TargetOnly,
}

/// Committed tokens plus the caches that mirror them.
///
/// Invariants between iterations: the target cache holds rows for all but
/// the last committed token (its row appears during the next verification),
/// and the drafter cache holds a depth-0 row per committed token after each
/// proposal — mask slots never enter it, so it grows by exactly the newly
/// committed tokens, catch-up rows plus the one new next-token slot.
pub struct DecodeState {
    tokens: Vec<usize>,
    target_cache: TargetCache,
    drafter_cache: Option<DrafterCache>,
    prefill_passes: usize,
}

impl DecodeState {
    /// Prefill the target over the prompt (all but its last token, whose
    /// row the first verification provides) and set up empty drafter state.
    pub fn new(
        target: &TargetModel,
        tstore: &ParamStore,
        drafter: Option<&Drafter>,
        prompt: &[usize],
    ) -> Result<Self> {
        if prompt.is_empty() {
            return Err(SpecdecError::EmptyPrompt);
        }
        let mut target_cache = target.new_cache();
        let mut prefill_passes = 0;
        if prompt.len() > 1 {
            target.forward_incremental(tstore, &mut target_cache, &prompt[..prompt.len() - 1])?;
            prefill_passes = 1;
        }
        Ok(DecodeState {
            tokens: prompt.to_vec(),
            target_cache,
            drafter_cache: drafter.map(|d| d.new_cache()),
            prefill_passes,
        })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn drafter_cache_len(&self) -> usize {
        self.drafter_cache.as_ref().map_or(0, |c| c.len())
    }

    fn drafter_cache(&mut self) -> Result<&mut DrafterCache> {
        self.drafter_cache.as_mut().ok_or(SpecdecError::MissingDrafter)
    }
}

/// Build the depth-0 slot run `cache_len..=c` (committed tokens the drafter
/// has not yet processed, ending in the next-token slot) together with its
/// tokens and projected hidden rows.
fn catch_up_rows(
    state: &DecodeState,
    drafter: &Drafter,
    dstore: &ParamStore,
) -> Result<(Vec<Slot>, Vec<usize>, Tensor2D)> {
    let c = state.tokens.len() - 1;
    let start = state.drafter_cache_len();
    debug_assert!(start <= c, "drafter cache ahead of committed tokens");
    let m = c - start + 1;
    let mut raw = Tensor2D::zeros(m, drafter.fused_width());
    for (i, p) in (start..=c).enumerate() {
        if p > 0 {
            raw.row_mut(i).copy_from_slice(state.target_cache.fused_row(p - 1));
        }
    }
    let hidden = drafter.project_fused(dstore, &raw)?;
    let mut slots = Vec::with_capacity(m);
    let mut tokens = Vec::with_capacity(m);
    for p in start..=c {
        slots.push(Slot::new(p, 0)?);
        tokens.push(state.tokens[p]);
    }
    Ok((slots, tokens, hidden))
}

/// Draft `k` tokens in one drafter pass: the next-token slot at the last
/// committed position plus `k-1` mask slots at increasing depths, all
/// anchored there. Every depth-0 row (catch-up and next-token) is cached;
/// the mask slots are discarded.
pub fn propose_parallel(
    state: &mut DecodeState,
    drafter: &Drafter,
    dstore: &ParamStore,
    k: usize,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(SpecdecError::BadSpeculationDepth);
    }
    let c = state.tokens.len() - 1;
    let (mut slots, mut tokens, d0_hidden) = catch_up_rows(state, drafter, dstore)?;
    let n_d0 = slots.len();
    let h_ntp = d0_hidden.row(n_d0 - 1).to_vec();
    let mut hidden_rows: Vec<Vec<f64>> =
        (0..n_d0).map(|i| d0_hidden.row(i).to_vec()).collect();
    for depth in 1..k {
        slots.push(Slot::new(c + depth, depth)?);
        tokens.push(drafter.mask_token());
        let h = drafter.variant_hidden(dstore, Some(&h_ntp), depth)?;
        hidden_rows.push(h.row(0).to_vec());
    }
    let hidden = Tensor2D::from_rows(&hidden_rows);
    let cache = state.drafter_cache.as_ref().ok_or(SpecdecError::MissingDrafter)?;
    let out = drafter.forward_infer(dstore, cache, &slots, &tokens, &hidden)?;
    let keep: Vec<usize> = (0..n_d0).collect();
    state.drafter_cache()?.push_rows(&slots, &out.kv, &keep)?;
    debug_assert_eq!(state.drafter_cache_len(), state.tokens.len());
    Ok((n_d0 - 1..slots.len()).map(|i| argmax_row(&out.logits, i)).collect())
}

/// Draft `k` tokens with `k` sequential drafter passes, feeding each
/// predicted token and its pre-head hidden vector back in. Rows for the
/// speculative feedback steps stay local to the iteration; only the
/// canonical depth-0 rows (catch-up and next-token) are cached.
pub fn propose_ar(
    state: &mut DecodeState,
    drafter: &Drafter,
    dstore: &ParamStore,
    k: usize,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(SpecdecError::BadSpeculationDepth);
    }
    let c = state.tokens.len() - 1;
    let (slots, tokens, hidden) = catch_up_rows(state, drafter, dstore)?;
    let n_d0 = slots.len();
    let cache = state.drafter_cache.as_ref().ok_or(SpecdecError::MissingDrafter)?;
    let out = drafter.forward_infer(dstore, cache, &slots, &tokens, &hidden)?;
    let keep: Vec<usize> = (0..n_d0).collect();
    state.drafter_cache()?.push_rows(&slots, &out.kv, &keep)?;
    debug_assert_eq!(state.drafter_cache_len(), state.tokens.len());

    let mut drafts = vec![argmax_row(&out.logits, n_d0 - 1)];
    let mut feedback = out.hidden.row(n_d0 - 1).to_vec();
    let mut local = state.drafter_cache.as_ref().unwrap().clone();
    for step in 1..k {
        let slot = [Slot::new(c + step, 0)?];
        let tok = [drafts[step - 1]];
        let hidden = Tensor2D::from_vec(1, feedback.len(), feedback.clone());
        let out = drafter.forward_infer(dstore, &local, &slot, &tok, &hidden)?;
        local.push_rows(&slot, &out.kv, &[0])?;
        drafts.push(argmax_row(&out.logits, 0));
        feedback = out.hidden.row(0).to_vec();
    }
    Ok(drafts)
}

/// One target pass over the last committed token plus the drafts; accept
/// the longest prefix matching the target's own argmax chain and take the
/// target's token after it as a bonus. Returns (accepted, committed tokens
/// including the bonus); the caches end exactly as if the accepted tokens
/// had been decoded one by one.
pub fn verify_greedy(
    state: &mut DecodeState,
    target: &TargetModel,
    tstore: &ParamStore,
    drafts: &[usize],
) -> Result<(usize, Vec<usize>)> {
    if drafts.is_empty() {
        return Err(SpecdecError::BadSpeculationDepth);
    }
    let c = state.tokens.len() - 1;
    let mut feed = Vec::with_capacity(drafts.len() + 1);
    feed.push(state.tokens[c]);
    feed.extend_from_slice(drafts);
    let logits = target.forward_incremental(tstore, &mut state.target_cache, &feed)?;
    let mut accepted = 0;
    while accepted < drafts.len() && drafts[accepted] == argmax_row(&logits, accepted) {
        accepted += 1;
    }
    let bonus = argmax_row(&logits, accepted);
    let mut committed = drafts[..accepted].to_vec();
    committed.push(bonus);
    state.tokens.extend_from_slice(&committed);
    state.target_cache.truncate(state.tokens.len() - 1);
    Ok((accepted, committed))
}

/// One plain decoding step: feed the last committed token, commit the
/// argmax of its logits.
pub fn target_step(
    state: &mut DecodeState,
    target: &TargetModel,
    tstore: &ParamStore,
) -> Result<usize> {
    let last = *state.tokens.last().unwrap();
    let logits = target.forward_incremental(tstore, &mut state.target_cache, &[last])?;
    let next = argmax_row(&logits, 0);
    state.tokens.push(next);
    Ok(next)
}

/// Per-decode accounting.
#[derive(Debug, Clone, Serialize)]
pub struct SpecStats {
    pub iterations: usize,
    pub accepted_per_iter: Vec<usize>,
    pub generated: usize,
    /// Mean kept tokens per iteration (accepted drafts + bonus).
    pub acceptance_length: f64,
    pub drafter_passes: usize,
    pub target_passes: usize,
}

/// One decode-loop iteration for the JSON-lines trace.
#[derive(Debug, Clone, Serialize)]
pub struct IterTrace {
    pub drafts: Vec<usize>,
    pub accepted: usize,
    pub committed: Vec<usize>,
    pub total_tokens: usize,
}

/// Generate up to `max_new` tokens. Speculative modes propose and verify in
/// a loop; `TargetOnly` decodes one token per pass. Generation stops early
/// when `end_token` is committed, and a final iteration that overshoots
/// `max_new` is truncated, so reported counts always match the returned
/// tokens.
pub fn decode(
    target: &TargetModel,
    tstore: &ParamStore,
    drafter: Option<(&Drafter, &ParamStore)>,
    mode: DecodeMode,
    prompt: &[usize],
    k_infer: usize,
    max_new: usize,
    end_token: Option<usize>,
) -> Result<(Vec<usize>, SpecStats, Vec<IterTrace>)> {
    if mode != DecodeMode::TargetOnly && drafter.is_none() {
        return Err(SpecdecError::MissingDrafter);
    }
    if mode != DecodeMode::TargetOnly && k_infer == 0 {
        return Err(SpecdecError::BadSpeculationDepth);
    }
    let mut state = DecodeState::new(target, tstore, drafter.map(|(d, _)| d), prompt)?;
    let mut stats = SpecStats {
        iterations: 0,
        accepted_per_iter: Vec::new(),
        generated: 0,
        acceptance_length: 0.0,
        drafter_passes: 0,
        target_passes: state.prefill_passes,
    };
    let mut traces = Vec::new();
    let budget = prompt.len() + max_new;
    while state.tokens.len() < budget {
        let (drafts, accepted, mut committed) = match mode {
            DecodeMode::TargetOnly => {
                let tok = target_step(&mut state, target, tstore)?;
                stats.target_passes += 1;
                (Vec::new(), 0, vec![tok])
            }
            DecodeMode::Parallel | DecodeMode::Ar => {
                let (d, ds) = drafter.unwrap();
                let drafts = if mode == DecodeMode::Parallel {
                    stats.drafter_passes += 1;
                    propose_parallel(&mut state, d, ds, k_infer)?
                } else {
                    stats.drafter_passes += k_infer;
                    propose_ar(&mut state, d, ds, k_infer)?
                };
                let (accepted, committed) =
                    verify_greedy(&mut state, target, tstore, &drafts)?;
                stats.target_passes += 1;
                (drafts, accepted, committed)
            }
        };
        // Trim overshoot and anything past the end token, rolling the
        // committed suffix back so output and accounting agree.
        let mut keep = committed.len();
        if let Some(end) = end_token {
            if let Some(i) = committed.iter().position(|&t| t == end) {
                keep = keep.min(i + 1);
            }
        }
        let over = state.tokens.len().saturating_sub(budget);
        keep = keep.min(committed.len() - over.min(committed.len()));
        if keep < committed.len() {
            state.tokens.truncate(state.tokens.len() - (committed.len() - keep));
            committed.truncate(keep);
        }
        let recorded_accept = accepted.min(committed.len().saturating_sub(1));
        stats.iterations += 1;
        stats.accepted_per_iter.push(recorded_accept);
        stats.generated += committed.len();
        traces.push(IterTrace {
            drafts,
            accepted: recorded_accept,
            committed: committed.clone(),
            total_tokens: state.tokens.len(),
        });
        if committed.is_empty()
            || end_token.is_some_and(|e| committed.last() == Some(&e))
        {
            break;
        }
    }
    if stats.iterations > 0 {
        stats.acceptance_length = stats.generated as f64 / stats.iterations as f64;
    }
    Ok((state.tokens, stats, traces))
}

/// Analytic throughput model: per-pass costs instead of wall clock.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CostModel {
    pub t_target: f64,
    /// Drafter pass cost per layer; a pass of an N-layer drafter costs N
    /// times this.
    pub t_draft_per_layer: f64,
    pub overhead_per_token: f64,
}

impl CostModel {
    pub fn t_draft(&self, layers: usize) -> f64 {
        self.t_draft_per_layer * layers as f64
    }
}

/// Simulated tokens per unit time for a finished decode.
pub fn simulate_cost(stats: &SpecStats, cm: &CostModel, drafter_layers: usize) -> f64 {
    let time = stats.target_passes as f64 * cm.t_target
        + stats.drafter_passes as f64 * cm.t_draft(drafter_layers)
        + stats.generated as f64 * cm.overhead_per_token;
    if time > 0.0 {
        stats.generated as f64 / time
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DrafterConfig, TargetConfig, Variant};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn models(variant: Variant) -> (TargetModel, ParamStore, Drafter, ParamStore) {
        let tcfg = TargetConfig { vocab: 17, dim: 8, layers: 3, heads: 2, rope_base: 10000.0 };
        let mut tstore = ParamStore::new();
        let target = TargetModel::new(tcfg, &mut tstore, 3).unwrap();
        let dcfg = DrafterConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            rope_base: 10000.0,
            k_train: 5,
            variant,
            unfreeze_embeddings: true,
            dropout_rate: 0.1,
            separate_mtp_combiner: false,
        };
        let mut dstore = ParamStore::new();
        let drafter = Drafter::new(dcfg, &target, &tstore, &mut dstore, 11).unwrap();
        (target, tstore, drafter, dstore)
    }

    fn prompts(count: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let len = rng.gen_range(1..6);
                (0..len).map(|_| rng.gen_range(0..16)).collect()
            })
            .collect()
    }

    #[test]
    fn target_only_matches_full_recompute_decoding() {
        let (target, tstore, _, _) = models(Variant::Shared);
        for prompt in prompts(5, 2) {
            let (tokens, stats, _) = decode(
                &target,
                &tstore,
                None,
                DecodeMode::TargetOnly,
                &prompt,
                1,
                12,
                None,
            )
            .unwrap();
            // Oracle: recompute everything from scratch each step.
            let mut oracle = prompt.clone();
            for _ in 0..12 {
                let (logits, _) = target.forward_full(&tstore, &oracle).unwrap();
                oracle.push(argmax_row(&logits, oracle.len() - 1));
            }
            assert_eq!(tokens, oracle);
            assert_eq!(stats.generated, 12);
            assert_eq!(stats.acceptance_length, 1.0);
        }
    }

    #[test]
    fn speculative_output_is_lossless_in_both_modes() {
        for variant in [Variant::Shared, Variant::NtpProjDepth, Variant::Regularized] {
            let (target, tstore, drafter, dstore) = models(variant);
            for prompt in prompts(6, 9) {
                let (reference, _, _) = decode(
                    &target,
                    &tstore,
                    None,
                    DecodeMode::TargetOnly,
                    &prompt,
                    1,
                    10,
                    None,
                )
                .unwrap();
                for k in 1..=4 {
                    for mode in [DecodeMode::Parallel, DecodeMode::Ar] {
                        let (tokens, stats, _) = decode(
                            &target,
                            &tstore,
                            Some((&drafter, &dstore)),
                            mode,
                            &prompt,
                            k,
                            10,
                            None,
                        )
                        .unwrap();
                        assert_eq!(tokens, reference, "{variant:?} {mode:?} k={k}");
                        assert_eq!(stats.generated, 10);
                        assert!(stats.acceptance_length >= 1.0);
                        assert!(stats.acceptance_length <= (k + 1) as f64);
                        let total: usize =
                            stats.accepted_per_iter.iter().map(|a| a + 1).sum();
                        assert_eq!(total, stats.generated);
                    }
                }
            }
        }
    }

    #[test]
    fn pass_accounting_distinguishes_the_modes() {
        let (target, tstore, drafter, dstore) = models(Variant::Shared);
        let prompt = vec![1usize, 5, 2];
        let k = 3;
        let (_, par, _) = decode(
            &target,
            &tstore,
            Some((&drafter, &dstore)),
            DecodeMode::Parallel,
            &prompt,
            k,
            9,
            None,
        )
        .unwrap();
        assert_eq!(par.drafter_passes, par.iterations);
        assert_eq!(par.target_passes, par.iterations + 1);

        let (_, ar, _) = decode(
            &target,
            &tstore,
            Some((&drafter, &dstore)),
            DecodeMode::Ar,
            &prompt,
            k,
            9,
            None,
        )
        .unwrap();
        assert_eq!(ar.drafter_passes, k * ar.iterations);
    }

    #[test]
    fn first_draft_token_is_shared_between_modes() {
        let (target, tstore, drafter, dstore) = models(Variant::DepthEmbed);
        for prompt in prompts(4, 33) {
            let mut sa = DecodeState::new(&target, &tstore, Some(&drafter), &prompt).unwrap();
            let a = propose_parallel(&mut sa, &drafter, &dstore, 4).unwrap();
            let mut sb = DecodeState::new(&target, &tstore, Some(&drafter), &prompt).unwrap();
            let b = propose_ar(&mut sb, &drafter, &dstore, 4).unwrap();
            assert_eq!(a[0], b[0]);
            assert_eq!(a.len(), 4);
            assert_eq!(b.len(), 4);
            // Depth 1 speculation degenerates to the same single slot.
            let mut sc = DecodeState::new(&target, &tstore, Some(&drafter), &prompt).unwrap();
            let c = propose_parallel(&mut sc, &drafter, &dstore, 1).unwrap();
            let mut sd = DecodeState::new(&target, &tstore, Some(&drafter), &prompt).unwrap();
            let d = propose_ar(&mut sd, &drafter, &dstore, 1).unwrap();
            assert_eq!(c, d);
            assert_eq!(c[0], a[0]);
        }
    }

    #[test]
    fn drafter_cache_tracks_committed_tokens_only() {
        let (target, tstore, drafter, dstore) = models(Variant::Shared);
        let prompt = vec![3usize, 1, 4, 1, 5];
        let mut state = DecodeState::new(&target, &tstore, Some(&drafter), &prompt).unwrap();
        for _ in 0..4 {
            let before = state.tokens().len();
            let drafts = propose_parallel(&mut state, &drafter, &dstore, 3).unwrap();
            // Mask slots are never cached: the cache covers exactly the
            // committed tokens after every proposal.
            assert_eq!(state.drafter_cache_len(), before);
            verify_greedy(&mut state, &target, &tstore, &drafts).unwrap();
            assert!(state.tokens().len() > before);
        }
    }

    #[test]
    fn verification_accepts_exactly_the_greedy_prefix() {
        let (target, tstore, _, _) = models(Variant::Shared);
        let prompt = vec![2usize, 7, 1];
        // Build the target's own continuation as the oracle.
        let (cont, _, _) =
            decode(&target, &tstore, None, DecodeMode::TargetOnly, &prompt, 1, 4, None).unwrap();
        let good: Vec<usize> = cont[prompt.len()..].to_vec();

        // Perfect drafts: all accepted plus a bonus.
        let mut state = DecodeState::new(&target, &tstore, None, &prompt).unwrap();
        let (acc, committed) = verify_greedy(&mut state, &target, &tstore, &good).unwrap();
        assert_eq!(acc, 4);
        assert_eq!(committed.len(), 5);
        assert_eq!(&committed[..4], &good[..]);

        // Corrupt the second draft: exactly one accepted, bonus replaces it.
        let mut bad = good.clone();
        bad[1] = (bad[1] + 1) % 17;
        let mut state = DecodeState::new(&target, &tstore, None, &prompt).unwrap();
        let (acc, committed) = verify_greedy(&mut state, &target, &tstore, &bad).unwrap();
        assert_eq!(acc, 1);
        assert_eq!(committed, vec![good[0], good[1]]);
    }

    #[test]
    fn end_token_stops_generation_without_breaking_accounting() {
        let (target, tstore, drafter, dstore) = models(Variant::Shared);
        let prompt = vec![1usize, 2];
        let (reference, _, _) =
            decode(&target, &tstore, None, DecodeMode::TargetOnly, &prompt, 1, 20, None).unwrap();
        let end = reference[prompt.len() + 5];
        for mode in [DecodeMode::TargetOnly, DecodeMode::Parallel, DecodeMode::Ar] {
            let df = (mode != DecodeMode::TargetOnly).then_some((&drafter, &dstore));
            let (tokens, stats, _) =
                decode(&target, &tstore, df, mode, &prompt, 3, 20, Some(end)).unwrap();
            let cut = reference.iter().position(|&t| t == end).unwrap();
            assert_eq!(tokens, reference[..=cut], "{mode:?}");
            let total: usize = stats.accepted_per_iter.iter().map(|a| a + 1).sum();
            assert_eq!(total, stats.generated);
            assert_eq!(stats.generated, tokens.len() - prompt.len());
        }
    }

    #[test]
    fn cost_model_reproduces_the_expected_directions() {
        let stats = SpecStats {
            iterations: 10,
            accepted_per_iter: vec![2; 10],
            generated: 30,
            acceptance_length: 3.0,
            drafter_passes: 10,
            target_passes: 11,
        };
        // Free drafting: throughput is acceptance length over target cost
        // (up to the prefill pass).
        let free = CostModel { t_target: 1.0, t_draft_per_layer: 0.0, overhead_per_token: 0.0 };
        let tp = simulate_cost(&stats, &free, 4);
        assert!((tp - 30.0 / 11.0).abs() < 1e-12);

        // A 4-layer parallel drafter at K=3 costs more per iteration than
        // three sequential 1-layer passes.
        let cm = CostModel { t_target: 1.0, t_draft_per_layer: 0.1, overhead_per_token: 0.0 };
        let mut ar = stats.clone();
        ar.drafter_passes = 30;
        let parallel_cost = stats.drafter_passes as f64 * cm.t_draft(4);
        let ar_cost = ar.drafter_passes as f64 * cm.t_draft(1);
        assert!(parallel_cost > ar_cost);
        assert!(simulate_cost(&stats, &cm, 4) < simulate_cost(&ar, &cm, 1));
    }

    #[test]
    fn preconditions_are_enforced() {
        let (target, tstore, drafter, dstore) = models(Variant::Shared);
        assert!(matches!(
            DecodeState::new(&target, &tstore, None, &[]),
            Err(SpecdecError::EmptyPrompt)
        ));
        assert!(matches!(
            decode(&target, &tstore, None, DecodeMode::Parallel, &[1], 3, 4, None),
            Err(SpecdecError::MissingDrafter)
        ));
        assert!(matches!(
            decode(
                &target,
                &tstore,
                Some((&drafter, &dstore)),
                DecodeMode::Ar,
                &[1],
                0,
                4,
                None
            ),
            Err(SpecdecError::BadSpeculationDepth)
        ));
        let mut state = DecodeState::new(&target, &tstore, None, &[1, 2]).unwrap();
        assert!(matches!(
            verify_greedy(&mut state, &target, &tstore, &[]),
            Err(SpecdecError::BadSpeculationDepth)
        ));
    }

    #[test]
    fn single_token_prompt_decodes_without_prefill() {
        let (target, tstore, drafter, dstore) = models(Variant::NtpProj);
        let (reference, rs, _) =
            decode(&target, &tstore, None, DecodeMode::TargetOnly, &[7], 1, 6, None).unwrap();
        assert_eq!(rs.target_passes, 6); // no prefill pass for a 1-token prompt
        let (tokens, _, _) = decode(
            &target,
            &tstore,
            Some((&drafter, &dstore)),
            DecodeMode::Parallel,
            &[7],
            3,
            6,
            None,
        )
        .unwrap();
        assert_eq!(tokens, reference);
    }
}
