//! Acceptance gate. Each test asserts one release property end to end and
//! prints a single `PASS:` line with the numbers it measured. The desk-scale
//! checks share one set of trained artifacts built on first use.

use std::rc::Rc;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pdraft_cli::corpus::{generate, CorpusSpec, Generator};
use pdraft_cli::harness::{eval_prompts, fold_stats};
use pdraft_core::maskgen::{
    mask_allowed, AssembledMask, BlockMaskSet, LayoutSample, Slot, DEFAULT_BUDGET_BYTES,
};
use pdraft_core::model::{
    DraftBatch, Drafter, DrafterConfig, TargetConfig, TargetModel, Variant,
};
use pdraft_core::numerics::{ParamStore, Tape};
use pdraft_core::partition::SegmentPlan;
use pdraft_core::specdec::{decode, DecodeMode};
use pdraft_core::theory::{attn_score, injectivity_probe, position_recovery, RopeConfig};
use pdraft_core::trainer::{
    build_example, step_full, step_segmented, train_drafter, train_target, OptimConfig,
    TrainConfig, TrainReport,
};

const ALL_VARIANTS: [Variant; 5] = [
    Variant::Shared,
    Variant::DepthEmbed,
    Variant::NtpProj,
    Variant::NtpProjDepth,
    Variant::Regularized,
];

// ---------------------------------------------------------------- mask gate

#[test]
fn acceptance_01_mask_assembly_matches_direct_predicate() {
    let start = Instant::now();
    let mut checked = 0usize;
    let mut sets = Vec::new();
    for k in 1..=6 {
        let blocks = BlockMaskSet::precompute(64, k, DEFAULT_BUDGET_BYTES).unwrap();
        for n in 1..=64 {
            let sliced = blocks.slice_full(n).unwrap();
            let direct = AssembledMask::from_slots(sliced.order()).unwrap();
            assert_eq!(sliced.bits(), direct.bits(), "full layout n={n} k={k}");
            checked += 1;
        }
        sets.push(blocks);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc1);
    for trial in 0..200 {
        let n = rng.gen_range(1..=64);
        let k = rng.gen_range(1..=6);
        let ratio = rng.gen_range(0.3..=1.0);
        let sample = LayoutSample::sample(n, k, ratio, rng.gen()).unwrap();
        let gathered = sets[k - 1].gather(&sample).unwrap();
        let direct = AssembledMask::from_slots(gathered.order()).unwrap();
        assert_eq!(gathered.bits(), direct.bits(), "drop-token trial {trial}");
        // Spot-check the predicate itself on a handful of random pairs.
        let t = gathered.len();
        for _ in 0..32.min(t * t) {
            let (i, j) = (rng.gen_range(0..t), rng.gen_range(0..t));
            let q = gathered.order()[i];
            let key = gathered.order()[j];
            assert_eq!(gathered.allowed(i, j), mask_allowed(q, key).unwrap());
        }
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "took {secs:.1}s, budget is one minute");
    println!("PASS: {checked} assembled masks bit-identical to the predicate in {secs:.2}s");
}

#[test]
fn acceptance_02_masks_are_position_invariant() {
    let sets: Vec<BlockMaskSet> = (1..=8)
        .map(|k| BlockMaskSet::precompute(256, k, DEFAULT_BUDGET_BYTES).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc2);
    for pair in 0..50 {
        let n2 = rng.gen_range(2..=256);
        let n1 = rng.gen_range(1..n2);
        let k = rng.gen_range(1..=8);
        let short = sets[k - 1].slice_full(n1).unwrap();
        let long = sets[k - 1].slice_full(n2).unwrap();
        let t1 = short.len();
        assert_eq!(
            short.order(),
            &long.order()[..t1],
            "pair {pair}: slot order must be a prefix"
        );
        for i in 0..t1 {
            for j in 0..t1 {
                assert_eq!(
                    short.allowed(i, j),
                    long.allowed(i, j),
                    "pair {pair}: n1={n1} n2={n2} k={k} bit ({i},{j})"
                );
            }
        }
    }
    println!("PASS: 50 random length pairs, shorter mask always the leading submatrix");
}

// ---------------------------------------------------------- partition gate

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

#[test]
fn acceptance_03_hand_fixture_keeps_chain_in_one_segment() {
    let layout = hand_layout();
    assert_eq!(layout.total_slots(), 38);
    let plan = SegmentPlan::partition(&layout, 2).unwrap();
    let deep = Slot::new(8, 2).unwrap();
    let ancestor = Slot::new(7, 1).unwrap();
    let a_deep = plan.assignment(&layout, deep).unwrap();
    let a_anc = plan.assignment(&layout, ancestor).unwrap();
    assert_eq!(a_deep, a_anc, "chained slots must share a segment");
    // A naive position bucket (split [0,16) at 8) puts the two slots in
    // different halves, breaking the dependency the plan preserves.
    let bucket = |p: usize| if p < 8 { 0 } else { 1 };
    assert_ne!(
        bucket(deep.pos),
        bucket(ancestor.pos),
        "the naive bucketing must actually violate the chain here"
    );
    println!(
        "PASS: 38-slot fixture, chained slots both in segment {a_deep}, naive bucket splits them"
    );
}

#[test]
fn acceptance_04_partition_preserves_dependencies() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc4);
    for trial in 0..1000 {
        let n = rng.gen_range(1..=256);
        let k = rng.gen_range(1..=8);
        let s = rng.gen_range(1..=8usize.min(n));
        let sample = LayoutSample::sample(n, k, rng.gen_range(0.2..=1.0), rng.gen()).unwrap();
        let plan = SegmentPlan::partition(&sample, s).unwrap();
        // Coverage and exclusivity: every retained slot owned exactly once.
        let mut owned = 0usize;
        for seg in 0..plan.segments() {
            for e in plan.segment_slots(&sample, seg) {
                if e.loss_bearing {
                    assert_eq!(
                        plan.assignment(&sample, e.slot),
                        Some(seg),
                        "trial {trial}: owner disagrees with assignment"
                    );
                    owned += 1;
                }
            }
        }
        assert_eq!(owned, sample.total_slots(), "trial {trial}: coverage");
        // Chain preservation: every deep slot sits with its ancestor.
        for d in 2..sample.depths() {
            for &p in sample.retained(d) {
                let slot = Slot::new(p, d).unwrap();
                let anc = Slot::new(p - 1, d - 1).unwrap();
                assert_eq!(
                    plan.assignment(&sample, slot),
                    plan.assignment(&sample, anc),
                    "trial {trial}: chain broken at ({p},{d}) with s={s}"
                );
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "took {secs:.1}s, budget is one minute");
    println!("PASS: 1000 random layouts, zero chain violations, exact coverage in {secs:.2}s");
}

// ----------------------------------------------------------- gradient gate

fn tiny_pair(
    vocab: usize,
    dim: usize,
    drafter_layers: usize,
    k_train: usize,
    variant: Variant,
    dropout_rate: f64,
    seed: u64,
) -> (TargetModel, ParamStore, Drafter, ParamStore) {
    let tcfg =
        TargetConfig { vocab, dim, layers: 3, heads: 2, rope_base: 10_000.0 };
    let mut tstore = ParamStore::new();
    let target = TargetModel::new(tcfg, &mut tstore, seed).unwrap();
    let dcfg = DrafterConfig {
        layers: drafter_layers,
        dim,
        heads: 2,
        rope_base: 10_000.0,
        k_train,
        variant,
        unfreeze_embeddings: true,
        dropout_rate,
        separate_mtp_combiner: false,
    };
    let mut dstore = ParamStore::new();
    let drafter = Drafter::new(dcfg, &target, &tstore, &mut dstore, seed ^ 0xd).unwrap();
    (target, tstore, drafter, dstore)
}

fn rel_close(a: f64, b: f64, rel: f64, floor: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(floor)
}

#[test]
fn acceptance_05_segmented_gradients_match_full() {
    let start = Instant::now();
    let masks = BlockMaskSet::precompute(64, 4, DEFAULT_BUDGET_BYTES).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc5);
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let n = rng.gen_range(8..=64);
        let k = rng.gen_range(1..=4);
        let s = rng.gen_range(2..=4);
        let variant = ALL_VARIANTS[trial % ALL_VARIANTS.len()];
        let layers = 1 + trial % 2;
        let (target, tstore, drafter, dstore) =
            tiny_pair(64, 16, layers, k, variant, 0.3, 0x50 + trial as u64);
        let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..63)).collect();
        let (_, fused) = target.forward_full(&tstore, &tokens).unwrap();
        let cfg = TrainConfig {
            k_train: k,
            cod_ratio: 0.7,
            max_seq_len: 64,
            segments: s,
            epochs: 1,
            peak_lr: 1e-3,
            warmup_ratio: 0.0,
            batch_size: 1,
            seed: rng.gen(),
        };
        let ex = build_example(&drafter, &tokens, fused, &cfg, rng.gen(), &masks).unwrap();
        let plan = SegmentPlan::partition(&ex.sample, s).unwrap();
        let full = step_full(&drafter, &dstore, &ex.batch, None).unwrap();
        let seg = step_segmented(&drafter, &dstore, &ex, &plan).unwrap();
        assert!(
            rel_close(full.loss, seg.loss, 1e-9, 1e-12),
            "trial {trial}: loss {} vs {}",
            full.loss,
            seg.loss
        );
        for id in dstore.ids() {
            let shape = dstore.get(id).shape();
            let a = full.grads.dense(id, shape);
            let b = seg.grads.dense(id, shape);
            for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
                assert!(
                    rel_close(x, y, 1e-9, 1e-12),
                    "trial {trial}: {} entry {i}: {x} vs {y}",
                    dstore.name(id)
                );
                let denom = x.abs().max(y.abs()).max(1e-12);
                worst = worst.max((x - y).abs() / denom);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 300.0, "took {secs:.1}s, budget is five minutes");
    println!(
        "PASS: 50 examples, segmented grads match full (worst rel {worst:.2e}) in {secs:.2}s"
    );
}

#[test]
fn acceptance_06_analytic_gradients_match_finite_differences() {
    let masks = BlockMaskSet::precompute(6, 3, DEFAULT_BUDGET_BYTES).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc6);
    let tokens: Vec<usize> = (0..6).map(|_| rng.gen_range(0..31)).collect();
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    for (vi, &variant) in ALL_VARIANTS.iter().enumerate() {
        let (target, tstore, drafter, mut dstore) =
            tiny_pair(32, 8, 1, 3, variant, 0.25, 0x60 + vi as u64);
        let (_, fused) = target.forward_full(&tstore, &tokens).unwrap();
        let cfg = TrainConfig {
            k_train: 3,
            cod_ratio: 0.9,
            max_seq_len: 6,
            segments: 1,
            epochs: 1,
            peak_lr: 1e-3,
            warmup_ratio: 0.0,
            batch_size: 1,
            seed: 77,
        };
        let ex = build_example(&drafter, &tokens, fused, &cfg, 99, &masks).unwrap();
        let analytic = step_full(&drafter, &dstore, &ex.batch, None).unwrap().grads;
        let loss_of = |store: &ParamStore, batch: &DraftBatch| -> f64 {
            let mut tape = Tape::new(store);
            let logits = drafter.forward_tape(&mut tape, batch).unwrap();
            let l = tape
                .cross_entropy(logits, Rc::new(batch.labels.clone()), batch.loss_scale)
                .unwrap();
            tape.value(l).get(0, 0)
        };
        let h = 1e-6;
        let ids: Vec<_> = dstore.ids().collect();
        for id in ids {
            let shape = dstore.get(id).shape();
            let g = analytic.dense(id, shape);
            for v in 0..shape.0 * shape.1 {
                let orig = dstore.get(id).data()[v];
                dstore.get_mut(id).data_mut()[v] = orig + h;
                let up = loss_of(&dstore, &ex.batch);
                dstore.get_mut(id).data_mut()[v] = orig - h;
                let down = loss_of(&dstore, &ex.batch);
                dstore.get_mut(id).data_mut()[v] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = g.data()[v];
                assert!(
                    rel_close(fd, an, 1e-4, 1e-6),
                    "{variant:?} {} value {v}: fd {fd} vs analytic {an}",
                    dstore.name(id)
                );
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
                checked += 1;
            }
        }
    }
    println!(
        "PASS: {checked} central-difference checks across all five variants (worst rel {worst:.2e})"
    );
}

// --------------------------------------------------------- desk-scale gate

struct DeskArtifacts {
    corpus: Vec<Vec<usize>>,
    target: TargetModel,
    tstore: ParamStore,
    drafter4: Drafter,
    d4store: ParamStore,
    drafter1: Drafter,
    d1store: ParamStore,
    d4report: TrainReport,
    train_secs: f64,
}

fn drafter_cfg(layers: usize, variant: Variant, dropout_rate: f64) -> DrafterConfig {
    DrafterConfig {
        layers,
        dim: 64,
        heads: 4,
        rope_base: 10_000.0,
        k_train: 5,
        variant,
        unfreeze_embeddings: true,
        dropout_rate,
        separate_mtp_combiner: false,
    }
}

fn drafter_schedule(epochs: usize) -> TrainConfig {
    TrainConfig {
        k_train: 5,
        cod_ratio: 0.8,
        max_seq_len: 48,
        segments: 1,
        epochs,
        peak_lr: 2e-3,
        warmup_ratio: 0.05,
        batch_size: 8,
        seed: 7,
    }
}

fn desk() -> &'static DeskArtifacts {
    static DESK: OnceLock<DeskArtifacts> = OnceLock::new();
    DESK.get_or_init(|| {
        let start = Instant::now();
        let spec = CorpusSpec {
            vocab: 512,
            generator: Generator::Markov,
            count: 2000,
            min_len: 32,
            max_len: 48,
            seed: 42,
        };
        let corpus = generate(&spec).unwrap();
        let tcfg =
            TargetConfig { vocab: 512, dim: 64, layers: 4, heads: 4, rope_base: 10_000.0 };
        let optim = OptimConfig {
            epochs: 2,
            peak_lr: 1e-3,
            warmup_ratio: 0.05,
            batch_size: 8,
            seed: 1,
        };
        let mut tstore = ParamStore::new();
        let target = TargetModel::new(tcfg, &mut tstore, optim.seed).unwrap();
        train_target(&target, &mut tstore, &corpus, &optim).unwrap();

        let masks = BlockMaskSet::precompute(48, 5, DEFAULT_BUDGET_BYTES).unwrap();
        let sched = drafter_schedule(2);
        let mut d4store = ParamStore::new();
        let drafter4 = Drafter::new(
            drafter_cfg(4, Variant::Shared, 0.1),
            &target,
            &tstore,
            &mut d4store,
            sched.seed,
        )
        .unwrap();
        let d4report =
            train_drafter(&drafter4, &mut d4store, &target, &tstore, &corpus, &sched, &masks)
                .unwrap();
        let mut d1store = ParamStore::new();
        let drafter1 = Drafter::new(
            drafter_cfg(1, Variant::Shared, 0.1),
            &target,
            &tstore,
            &mut d1store,
            sched.seed,
        )
        .unwrap();
        train_drafter(&drafter1, &mut d1store, &target, &tstore, &corpus, &sched, &masks)
            .unwrap();
        DeskArtifacts {
            corpus,
            target,
            tstore,
            drafter4,
            d4store,
            drafter1,
            d1store,
            d4report,
            train_secs: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn acceptance_07_speculative_decoding_is_lossless() {
    let desk = desk();
    let prompts = eval_prompts(&desk.corpus, 50, 8);
    assert_eq!(prompts.len(), 50);
    let mut decodes = 0usize;
    for prompt in &prompts {
        let (reference, _, _) = decode(
            &desk.target,
            &desk.tstore,
            None,
            DecodeMode::TargetOnly,
            prompt,
            1,
            24,
            None,
        )
        .unwrap();
        for k_infer in 1..=5 {
            for mode in [DecodeMode::Parallel, DecodeMode::Ar] {
                let (tokens, _, _) = decode(
                    &desk.target,
                    &desk.tstore,
                    Some((&desk.drafter4, &desk.d4store)),
                    mode,
                    prompt,
                    k_infer,
                    24,
                    None,
                )
                .unwrap();
                assert_eq!(
                    tokens, reference,
                    "k={k_infer} mode={mode:?} diverged from the target-only decode"
                );
                decodes += 1;
            }
        }
    }
    println!("PASS: {decodes} speculative decodes token-identical to target-only greedy");
}

#[test]
fn acceptance_08_drop_token_counts_follow_geometric_decay() {
    let (n, k, r) = (8192usize, 8usize, 0.8f64);
    let expected = n as f64 * (1.0 - r.powi(k as i32)) / (1.0 - r);
    let mut totals = Vec::new();
    for seed in [3, 59, 1021] {
        let sample = LayoutSample::sample(n, k, r, seed).unwrap();
        let total = sample.total_slots();
        let drift = (total as f64 - expected).abs() / expected;
        assert!(
            drift < 0.02,
            "seed {seed}: {total} slots vs expected {expected:.1} ({drift:.4} off)"
        );
        totals.push(total);
    }
    println!("PASS: totals {totals:?} within 2% of {expected:.1} at n={n} k={k} r={r}");
}

#[test]
fn acceptance_09_desk_scale_training_reaches_acceptance_target() {
    let desk = desk();
    let start = Instant::now();
    let prompts = eval_prompts(&desk.corpus, 50, 8);
    let run = |drafter: &Drafter, store: &ParamStore| {
        let per: Vec<_> = prompts
            .iter()
            .map(|p| {
                decode(
                    &desk.target,
                    &desk.tstore,
                    Some((drafter, store)),
                    DecodeMode::Parallel,
                    p,
                    4,
                    24,
                    None,
                )
                .unwrap()
                .1
            })
            .collect();
        fold_stats(&per).acceptance_length
    };
    let al4 = run(&desk.drafter4, &desk.d4store);
    let al1 = run(&desk.drafter1, &desk.d1store);
    let total_secs = desk.train_secs + start.elapsed().as_secs_f64();
    assert!(al4 >= 1.5, "4-layer acceptance length {al4:.3} below 1.5");
    assert!(
        al4 >= al1,
        "4-layer acceptance length {al4:.3} below 1-layer {al1:.3}"
    );
    assert!(
        total_secs <= 1800.0,
        "training plus evaluation took {total_secs:.0}s, budget is 30 minutes"
    );
    let final_loss = desk.d4report.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
    println!(
        "PASS: acceptance length {al4:.3} (4-layer, final loss {final_loss:.3}) vs {al1:.3} (1-layer) in {total_secs:.0}s"
    );
}

#[test]
fn acceptance_10_block_assembly_outpaces_direct_construction() {
    let (n, k, repeats) = (2048usize, 8usize, 128usize);
    let samples: Vec<LayoutSample> = (0..repeats)
        .map(|i| LayoutSample::sample(n, k, 0.8, 0xb0 + i as u64).unwrap())
        .collect();
    let t = Instant::now();
    let blocks = BlockMaskSet::precompute(n, k, DEFAULT_BUDGET_BYTES).unwrap();
    let mut gather_secs = t.elapsed().as_secs_f64();
    let mut naive_secs = 0.0;
    let mut pairs = Vec::with_capacity(repeats);
    for sample in &samples {
        let slots = sample.slots();
        let t = Instant::now();
        let naive = AssembledMask::from_slots(&slots).unwrap();
        naive_secs += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let gathered = blocks.gather(sample).unwrap();
        gather_secs += t.elapsed().as_secs_f64();
        pairs.push((naive, gathered));
    }
    for (i, (naive, gathered)) in pairs.iter().enumerate() {
        assert_eq!(naive.bits(), gathered.bits(), "example {i} masks differ");
    }
    let speedup = naive_secs / gather_secs;
    assert!(
        speedup >= 5.0,
        "blockwise assembly only {speedup:.1}x faster ({naive_secs:.2}s vs {gather_secs:.2}s)"
    );
    println!(
        "PASS: {speedup:.1}x over direct construction at n={n} k={k} across {repeats} examples"
    );
}

#[test]
fn acceptance_11_rotary_scores_are_injective_and_recoverable() {
    let start = Instant::now();
    let cfg = RopeConfig { dim: 64, base: 10_000.0 };
    let report = injectivity_probe(&cfg, 0..1024, 1000, 1e-9, 0xf00d).unwrap();
    assert_eq!(
        report.collisions, 0,
        "offset pairs within tolerance: {:?}",
        report.cases
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc11);
    for trial in 0..100 {
        let q: Vec<f64> =
            (0..64).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let k: Vec<f64> =
            (0..64).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let truth = rng.gen_range(0..1024);
        let observed = attn_score(&cfg, &q, &k, truth).unwrap();
        let rec = position_recovery(&cfg, &k, &q, observed, 0..1024, 1e-9).unwrap();
        assert_eq!(rec.delta, truth, "trial {trial}");
        assert_eq!(rec.residual, 0.0, "trial {trial}: non-exact recovery");
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "took {secs:.1}s, budget is one minute");
    println!(
        "PASS: 1000 trials, zero collisions (min gap {:.3e}), 100 exact recoveries in {secs:.2}s",
        report.min_gap
    );
}

#[test]
fn acceptance_12_injection_scale_decays_during_training() {
    let desk = desk();
    let corpus = &desk.corpus[..512];
    let masks = BlockMaskSet::precompute(48, 5, DEFAULT_BUDGET_BYTES).unwrap();
    let sched = drafter_schedule(4);
    let mut store = ParamStore::new();
    let drafter = Drafter::new(
        drafter_cfg(1, Variant::Regularized, 0.5),
        &desk.target,
        &desk.tstore,
        &mut store,
        sched.seed,
    )
    .unwrap();
    let report = train_drafter(
        &drafter,
        &mut store,
        &desk.target,
        &desk.tstore,
        corpus,
        &sched,
        &masks,
    )
    .unwrap();
    let alphas: Vec<f64> =
        report.metrics.iter().filter_map(|m| m.alpha).collect();
    assert_eq!(alphas.len(), report.metrics.len(), "alpha recorded every step");
    let per_epoch = alphas.len() / sched.epochs;
    let means: Vec<f64> = (0..sched.epochs)
        .map(|e| alphas[e * per_epoch..(e + 1) * per_epoch].iter().sum::<f64>() / per_epoch as f64)
        .collect();
    assert!(
        means[0] < 0.1,
        "first epoch mean {:.4} did not move below the 0.1 initialization",
        means[0]
    );
    for w in means.windows(2) {
        assert!(
            w[1] < w[0],
            "epoch means {means:?} are not strictly decreasing"
        );
    }
    println!(
        "PASS: injection scale epoch means {:?} strictly decreasing from 0.1",
        means.iter().map(|m| (m * 1e4).round() / 1e4).collect::<Vec<_>>()
    );
}
