//! Subcommand definitions and implementations. Every command is
//! deterministic given `--seed`; wall-clock readings are confined to
//! dedicated timing fields so reruns produce identical outputs elsewhere.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use pdraft_core::maskgen::{AssembledMask, BlockMaskSet, LayoutSample};
use pdraft_core::model::{
    Drafter, DrafterConfig, TargetConfig, TargetModel, Variant,
};
use pdraft_core::numerics::ParamStore;
use pdraft_core::partition::SegmentPlan;
use pdraft_core::specdec::{
    decode, simulate_cost, CostModel, DecodeMode, IterTrace, SpecStats,
};
use pdraft_core::theory::{attn_score, injectivity_probe, position_recovery, RopeConfig};
use pdraft_core::trainer::{train_drafter, train_target, OptimConfig, TrainConfig, TrainReport};

use crate::corpus::{self, CorpusSpec, Generator};
use crate::harness::{
    eval_prompts, fold_stats, load_drafter, load_target, mask_budget, save_drafter,
    save_target, usage,
};

#[derive(Parser)]
#[command(name = "pdraft", version, about = "Parallel-draft speculative decoding testbed")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Generate a synthetic corpus as JSON-lines.
    GenCorpus(GenCorpusArgs),
    /// Train the frozen target model on a corpus.
    TrainTarget(TrainTargetArgs),
    /// Train a drafter against a trained target.
    TrainDrafter(TrainDrafterArgs),
    /// Decode prompts and report acceptance statistics.
    Eval(EvalArgs),
    /// Time per-example mask construction against precompute + gather.
    BenchMask(BenchMaskArgs),
    /// Probe rotary-score injectivity and position recovery.
    ProbeTheory(ProbeTheoryArgs),
    /// Train/eval a grid of drafter configurations; emit CSV.
    Ablate(AblateArgs),
    /// Print the segment plan for one sampled or explicit layout.
    DumpPlan(DumpPlanArgs),
}

pub fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenCorpus(a) => run_gen_corpus(a),
        Cmd::TrainTarget(a) => run_train_target(a),
        Cmd::TrainDrafter(a) => run_train_drafter(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::BenchMask(a) => run_bench_mask(a),
        Cmd::ProbeTheory(a) => run_probe_theory(a),
        Cmd::Ablate(a) => run_ablate(a),
        Cmd::DumpPlan(a) => run_dump_plan(a),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Shared,
    DepthEmbed,
    NtpProj,
    NtpProjDepth,
    Regularized,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Shared => Variant::Shared,
            VariantArg::DepthEmbed => Variant::DepthEmbed,
            VariantArg::NtpProj => Variant::NtpProj,
            VariantArg::NtpProjDepth => Variant::NtpProjDepth,
            VariantArg::Regularized => Variant::Regularized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Parallel,
    Ar,
    TargetOnly,
}

impl From<ModeArg> for DecodeMode {
    fn from(m: ModeArg) -> DecodeMode {
        match m {
            ModeArg::Parallel => DecodeMode::Parallel,
            ModeArg::Ar => DecodeMode::Ar,
            ModeArg::TargetOnly => DecodeMode::TargetOnly,
        }
    }
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| usage(format!("{}: bad config: {e}", path.display())))
}

fn write_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            fs::write(path, text + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
        }
        None => {
            use std::io::Write as _;
            // A closed pipe (e.g. piping into `head`) is not a failure.
            let mut stdout = std::io::stdout().lock();
            if let Err(e) = writeln!(stdout, "{text}") {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(e.into());
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- gen-corpus

#[derive(Args)]
pub struct GenCorpusArgs {
    /// Generator family.
    #[arg(long = "gen", value_enum, default_value = "markov")]
    pub generator: Generator,
    #[arg(long, default_value_t = 512)]
    pub vocab: usize,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub min_len: usize,
    #[arg(long, default_value_t = 48)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSON-lines file.
    #[arg(long)]
    pub out: PathBuf,
}

fn run_gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let spec = CorpusSpec {
        vocab: a.vocab,
        generator: a.generator,
        count: a.count,
        min_len: a.min_len,
        max_len: a.max_len,
        seed: a.seed,
    };
    spec.validate().map_err(|e| usage(format!("{e:#}")))?;
    let seqs = corpus::generate(&spec)?;
    corpus::write_jsonl(&a.out, &seqs)?;
    eprintln!("wrote {} sequences to {}", seqs.len(), a.out.display());
    Ok(())
}

// --------------------------------------------------------------- train specs

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetTrainSpec {
    pub model: TargetConfig,
    pub optim: OptimConfig,
}

impl Default for TargetTrainSpec {
    fn default() -> Self {
        TargetTrainSpec {
            model: TargetConfig {
                vocab: 512,
                dim: 64,
                layers: 4,
                heads: 4,
                rope_base: 10000.0,
            },
            optim: OptimConfig {
                epochs: 2,
                peak_lr: 1e-3,
                warmup_ratio: 0.05,
                batch_size: 8,
                seed: 0,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DrafterTrainSpec {
    pub model: DrafterConfig,
    pub train: TrainConfig,
}

impl DrafterTrainSpec {
    /// Desk-scale defaults shaped around a loaded target.
    pub fn default_for(target: &TargetConfig) -> Self {
        DrafterTrainSpec {
            model: DrafterConfig {
                layers: 4,
                dim: target.dim,
                heads: target.heads,
                rope_base: target.rope_base,
                k_train: 5,
                variant: Variant::Shared,
                unfreeze_embeddings: true,
                dropout_rate: 0.1,
                separate_mtp_combiner: false,
            },
            train: TrainConfig {
                k_train: 5,
                cod_ratio: 0.8,
                max_seq_len: 48,
                segments: 1,
                epochs: 2,
                peak_lr: 2e-3,
                warmup_ratio: 0.05,
                batch_size: 8,
                seed: 0,
            },
        }
    }
}

#[derive(Serialize)]
struct RunSummary {
    steps: usize,
    final_loss: Option<f64>,
    diverged_at: Option<usize>,
    wall_time_secs: f64,
    peak_slots: usize,
    final_checksum: u64,
}

fn write_run_outputs(dir: &Path, stem: &str, report: &TrainReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let metrics_path = dir.join(format!("{stem}_metrics.jsonl"));
    let mut w = BufWriter::new(File::create(&metrics_path)?);
    for rec in &report.metrics {
        serde_json::to_writer(&mut w, rec)?;
        writeln!(w)?;
    }
    w.flush()?;
    let summary = RunSummary {
        steps: report.metrics.len(),
        final_loss: report.metrics.last().map(|m| m.loss),
        diverged_at: report.diverged_at,
        wall_time_secs: report.wall_time_secs,
        peak_slots: report.peak_slots,
        final_checksum: report.final_checksum,
    };
    write_json(Some(&dir.join(format!("{stem}_report.json"))), &summary)
}

// -------------------------------------------------------------- train-target

#[derive(Args)]
pub struct TrainTargetArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// JSON file deserializing to {model, optim}; defaults are used when
    /// omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output directory (checkpoint, metrics, report).
    #[arg(long)]
    pub out: PathBuf,
}

fn run_train_target(a: TrainTargetArgs) -> Result<()> {
    let corpus = corpus::read_jsonl(&a.corpus)?;
    let mut spec: TargetTrainSpec = match &a.config {
        Some(p) => load_json(p)?,
        None => TargetTrainSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.optim.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        spec.optim.epochs = epochs;
    }
    let max_tok = corpus.iter().flatten().copied().max().unwrap_or(0);
    if max_tok + 2 > spec.model.vocab {
        return Err(usage(format!(
            "corpus holds token {max_tok} but vocab {} must also reserve the mask id",
            spec.model.vocab
        )));
    }
    let mut store = ParamStore::new();
    let target = TargetModel::new(spec.model.clone(), &mut store, spec.optim.seed)?;
    let report = train_target(&target, &mut store, &corpus, &spec.optim)?;
    fs::create_dir_all(&a.out)?;
    save_target(&a.out.join("target.ckpt"), target.cfg(), &store)?;
    write_run_outputs(&a.out, "target", &report)?;
    eprintln!(
        "target trained: {} steps, final loss {:?}",
        report.metrics.len(),
        report.metrics.last().map(|m| m.loss)
    );
    Ok(())
}

// ------------------------------------------------------------- train-drafter

#[derive(Args)]
pub struct TrainDrafterArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Target checkpoint to draft for.
    #[arg(long)]
    pub target: PathBuf,
    /// JSON file deserializing to {model, train}; defaults are shaped
    /// around the target when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k_train: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long)]
    pub segments: Option<usize>,
    #[arg(long)]
    pub cod_ratio: Option<f64>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output directory (checkpoint, metrics, report).
    #[arg(long)]
    pub out: PathBuf,
}

fn apply_drafter_overrides(spec: &mut DrafterTrainSpec, a: &TrainDrafterArgs) {
    if let Some(k) = a.k_train {
        spec.model.k_train = k;
        spec.train.k_train = k;
    }
    if let Some(l) = a.layers {
        spec.model.layers = l;
    }
    if let Some(v) = a.variant {
        spec.model.variant = v.into();
    }
    if let Some(s) = a.segments {
        spec.train.segments = s;
    }
    if let Some(r) = a.cod_ratio {
        spec.train.cod_ratio = r;
    }
    if let Some(m) = a.max_seq_len {
        spec.train.max_seq_len = m;
    }
    if let Some(e) = a.epochs {
        spec.train.epochs = e;
    }
    if let Some(seed) = a.seed {
        spec.train.seed = seed;
    }
}

/// Precompute the mask blocks sized for this corpus and config.
fn blocks_for(
    corpus: &[Vec<usize>],
    max_seq_len: usize,
    k_train: usize,
) -> Result<BlockMaskSet> {
    let longest = corpus.iter().map(Vec::len).max().unwrap_or(1);
    let n_max = max_seq_len.min(longest).max(1);
    Ok(BlockMaskSet::precompute(n_max, k_train, mask_budget()?)?)
}

fn run_train_drafter(a: TrainDrafterArgs) -> Result<()> {
    let corpus = corpus::read_jsonl(&a.corpus)?;
    let (target, tstore) = load_target(&a.target)?;
    let mut spec = match &a.config {
        Some(p) => load_json::<DrafterTrainSpec>(p)?,
        None => DrafterTrainSpec::default_for(target.cfg()),
    };
    apply_drafter_overrides(&mut spec, &a);
    if spec.model.dim != target.cfg().dim {
        return Err(usage(format!(
            "drafter dim {} must match target dim {} (shared embeddings)",
            spec.model.dim,
            target.cfg().dim
        )));
    }
    if spec.model.k_train != spec.train.k_train {
        return Err(usage(format!(
            "model k_train {} and train k_train {} disagree",
            spec.model.k_train, spec.train.k_train
        )));
    }
    let masks = blocks_for(&corpus, spec.train.max_seq_len, spec.train.k_train)?;
    let mut store = ParamStore::new();
    let drafter =
        Drafter::new(spec.model.clone(), &target, &tstore, &mut store, spec.train.seed)?;
    let report =
        train_drafter(&drafter, &mut store, &target, &tstore, &corpus, &spec.train, &masks)?;
    fs::create_dir_all(&a.out)?;
    save_drafter(&a.out.join("drafter.ckpt"), drafter.cfg(), &store)?;
    write_run_outputs(&a.out, "drafter", &report)?;
    eprintln!(
        "drafter trained: {} steps, final loss {:?}",
        report.metrics.len(),
        report.metrics.last().map(|m| m.loss)
    );
    Ok(())
}

// ---------------------------------------------------------------------- eval

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Required unless --mode target-only.
    #[arg(long)]
    pub drafter: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "parallel")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 4)]
    pub k_infer: usize,
    #[arg(long, default_value_t = 20)]
    pub prompts: usize,
    #[arg(long, default_value_t = 8)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 32)]
    pub max_new: usize,
    /// Analytic cost of one target pass.
    #[arg(long, default_value_t = 1.0)]
    pub t_target: f64,
    /// Analytic cost of one drafter layer per pass.
    #[arg(long, default_value_t = 0.1)]
    pub t_draft_layer: f64,
    /// Analytic per-generated-token overhead.
    #[arg(long, default_value_t = 0.0)]
    pub overhead: f64,
    /// Output directory (traces.jsonl, summary.json).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    prompt: usize,
    #[serde(flatten)]
    iter: &'a IterTrace,
}

#[derive(Serialize)]
struct EvalSummary {
    mode: String,
    k_infer: usize,
    prompts: usize,
    stats: SpecStats,
    cost_model: CostModel,
    simulated_throughput: f64,
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let corpus = corpus::read_jsonl(&a.corpus)?;
    let (target, tstore) = load_target(&a.target)?;
    let mode: DecodeMode = a.mode.into();
    let loaded = match (&a.drafter, mode) {
        (_, DecodeMode::TargetOnly) => None,
        (Some(path), _) => Some(load_drafter(path, &target, &tstore)?),
        (None, _) => return Err(usage("--drafter is required unless --mode target-only")),
    };
    let drafter = loaded.as_ref().map(|(d, s)| (d, s));
    let prompts = eval_prompts(&corpus, a.prompts, a.prompt_len);
    if prompts.is_empty() {
        return Err(usage("corpus provided no usable prompts"));
    }
    fs::create_dir_all(&a.out)?;
    let mut traces = BufWriter::new(File::create(a.out.join("traces.jsonl"))?);
    let mut per_prompt = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let (_, stats, iters) =
            decode(&target, &tstore, drafter, mode, prompt, a.k_infer, a.max_new, None)?;
        for iter in &iters {
            serde_json::to_writer(&mut traces, &TraceLine { prompt: i, iter })?;
            writeln!(traces)?;
        }
        per_prompt.push(stats);
    }
    traces.flush()?;
    let stats = fold_stats(&per_prompt);
    let cost_model = CostModel {
        t_target: a.t_target,
        t_draft_per_layer: a.t_draft_layer,
        overhead_per_token: a.overhead,
    };
    let layers = drafter.map_or(0, |(d, _)| d.cfg().layers);
    let summary = EvalSummary {
        mode: format!("{mode:?}").to_lowercase(),
        k_infer: a.k_infer,
        prompts: prompts.len(),
        simulated_throughput: simulate_cost(&stats, &cost_model, layers),
        stats,
        cost_model,
    };
    write_json(Some(&a.out.join("summary.json")), &summary)?;
    eprintln!(
        "evaluated {} prompts: acceptance length {:.3}",
        prompts.len(),
        summary.stats.acceptance_length
    );
    Ok(())
}

// ---------------------------------------------------------------- bench-mask

#[derive(Args)]
pub struct BenchMaskArgs {
    /// Sequence lengths to benchmark.
    #[arg(long = "n", value_delimiter = ',', default_value = "2048")]
    pub n_list: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Retention decay ratio for the sampled layouts.
    #[arg(long, default_value_t = 0.8)]
    pub ratio: f64,
    #[arg(long, default_value_t = 128)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct BenchRow {
    n: usize,
    k: usize,
    repeats: usize,
    naive_secs: f64,
    gather_secs: f64,
    speedup: f64,
    masks_equal: bool,
}

fn run_bench_mask(a: BenchMaskArgs) -> Result<()> {
    if a.n_list.is_empty() || a.repeats == 0 {
        return Err(usage("bench-mask needs at least one length and one repeat"));
    }
    let budget = mask_budget()?;
    let mut rows = Vec::new();
    for &n in &a.n_list {
        let samples: Vec<LayoutSample> = (0..a.repeats)
            .map(|i| LayoutSample::sample(n, a.k, a.ratio, a.seed.wrapping_add(i as u64)))
            .collect::<std::result::Result<_, _>>()?;
        // Gather side pays for its precompute up front.
        let t = Instant::now();
        let blocks = BlockMaskSet::precompute(n, a.k, budget)?;
        let mut gather_secs = t.elapsed().as_secs_f64();
        let mut naive_secs = 0.0;
        let mut masks_equal = true;
        for sample in &samples {
            let slots = sample.slots();
            let t = Instant::now();
            let naive = AssembledMask::from_slots(&slots)?;
            naive_secs += t.elapsed().as_secs_f64();
            let t = Instant::now();
            let gathered = blocks.gather(sample)?;
            gather_secs += t.elapsed().as_secs_f64();
            // Equality audited outside the timed sections.
            masks_equal &= naive.bits() == gathered.bits();
        }
        rows.push(BenchRow {
            n,
            k: a.k,
            repeats: a.repeats,
            naive_secs,
            gather_secs,
            speedup: naive_secs / gather_secs,
            masks_equal,
        });
    }
    write_json(a.out.as_deref(), &rows)
}

// -------------------------------------------------------------- probe-theory

#[derive(Args)]
pub struct ProbeTheoryArgs {
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 10000.0)]
    pub base: f64,
    #[arg(long, default_value_t = 0)]
    pub delta_start: i64,
    #[arg(long, default_value_t = 1024)]
    pub delta_count: usize,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    /// Noiseless generate-then-recover round trips.
    #[arg(long, default_value_t = 100)]
    pub recovery_trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RecoveryReport {
    trials: usize,
    exact: usize,
    ambiguous: usize,
}

#[derive(Serialize)]
struct TheoryReport {
    injectivity: pdraft_core::theory::InjectivityReport,
    recovery: RecoveryReport,
}

fn run_probe_theory(a: ProbeTheoryArgs) -> Result<()> {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    let cfg = RopeConfig { dim: a.dim, base: a.base };
    let deltas = a.delta_start..a.delta_start + a.delta_count as i64;
    let injectivity = injectivity_probe(&cfg, deltas.clone(), a.trials, a.tol, a.seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed ^ 0x7265_636f_7665_7279);
    let mut exact = 0;
    let mut ambiguous = 0;
    for _ in 0..a.recovery_trials {
        let q: Vec<f64> =
            (0..a.dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let k: Vec<f64> =
            (0..a.dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let truth = rng.gen_range(deltas.clone());
        let observed = attn_score(&cfg, &q, &k, truth)?;
        let rec = position_recovery(&cfg, &k, &q, observed, deltas.clone(), a.tol)?;
        if rec.delta == truth && rec.residual == 0.0 {
            exact += 1;
        }
        if !rec.ambiguous_with.is_empty() {
            ambiguous += 1;
        }
    }
    let report = TheoryReport {
        injectivity,
        recovery: RecoveryReport { trials: a.recovery_trials, exact, ambiguous },
    };
    write_json(a.out.as_deref(), &report)
}

// -------------------------------------------------------------------- ablate

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Base {model, train} spec applied to every cell before the grid
    /// overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub k_infer: usize,
    #[arg(long, default_value_t = 16)]
    pub prompts: usize,
    #[arg(long, default_value_t = 8)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 24)]
    pub max_new: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "grid-layers", value_delimiter = ',', default_value = "1,2,4")]
    pub grid_layers: Vec<usize>,
    #[arg(long = "grid-unfreeze", value_delimiter = ',', default_value = "true,false")]
    pub grid_unfreeze: Vec<bool>,
    /// Defaults to {k_infer, k_infer+3}.
    #[arg(long = "grid-k-train", value_delimiter = ',')]
    pub grid_k_train: Option<Vec<usize>>,
    #[arg(
        long = "grid-variants",
        value_delimiter = ',',
        default_value = "shared,depth-embed,ntp-proj,ntp-proj-depth,regularized"
    )]
    pub grid_variants: Vec<VariantArg>,
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory (ablate.csv).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    layers: usize,
    unfreeze: bool,
    k_train: usize,
    variant: Variant,
}

#[derive(Debug, Clone, Serialize)]
struct CellRow {
    layers: usize,
    unfreeze_embeddings: bool,
    k_train: usize,
    variant: String,
    acceptance_length: Option<f64>,
    final_loss: Option<f64>,
    status: String,
}

fn run_cell(
    cell: Cell,
    seed: u64,
    base: &DrafterTrainSpec,
    target: &TargetModel,
    tstore: &ParamStore,
    train_set: &[Vec<usize>],
    masks: &BlockMaskSet,
    prompts: &[Vec<usize>],
    k_infer: usize,
    max_new: usize,
) -> Result<(f64, Option<f64>)> {
    let mut spec = base.clone();
    spec.model.layers = cell.layers;
    spec.model.unfreeze_embeddings = cell.unfreeze;
    spec.model.k_train = cell.k_train;
    spec.model.variant = cell.variant;
    spec.train.k_train = cell.k_train;
    spec.train.seed = seed;
    let mut store = ParamStore::new();
    let drafter = Drafter::new(spec.model.clone(), target, tstore, &mut store, seed)?;
    let report =
        train_drafter(&drafter, &mut store, target, tstore, train_set, &spec.train, masks)?;
    let mut per_prompt = Vec::new();
    for prompt in prompts {
        let (_, stats, _) = decode(
            target,
            tstore,
            Some((&drafter, &store)),
            DecodeMode::Parallel,
            prompt,
            k_infer,
            max_new,
            None,
        )?;
        per_prompt.push(stats);
    }
    let folded = fold_stats(&per_prompt);
    Ok((folded.acceptance_length, report.metrics.last().map(|m| m.loss)))
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let corpus = corpus::read_jsonl(&a.corpus)?;
    let (target, tstore) = load_target(&a.target)?;
    let mut base = match &a.config {
        Some(p) => load_json::<DrafterTrainSpec>(p)?,
        None => DrafterTrainSpec::default_for(target.cfg()),
    };
    if let Some(e) = a.epochs {
        base.train.epochs = e;
    }
    let k_trains = a
        .grid_k_train
        .clone()
        .unwrap_or_else(|| vec![a.k_infer, a.k_infer + 3]);
    let mut cells = Vec::new();
    for &layers in &a.grid_layers {
        for &unfreeze in &a.grid_unfreeze {
            for &k_train in &k_trains {
                for &variant in &a.grid_variants {
                    cells.push(Cell { layers, unfreeze, k_train, variant: variant.into() });
                }
            }
        }
    }
    if cells.is_empty() {
        return Err(usage("the ablation grid is empty"));
    }
    // Mask blocks per distinct k_train, shared across workers.
    let mut blocks = HashMap::new();
    for &k in &k_trains {
        blocks.insert(k, blocks_for(&corpus, base.train.max_seq_len, k)?);
    }
    let prompts = eval_prompts(&corpus, a.prompts, a.prompt_len);
    if prompts.is_empty() {
        return Err(usage("corpus provided no usable prompts"));
    }

    let jobs = a
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, cells.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CellRow>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let cell = cells[i];
                // Per-cell seeds keep the grid deterministic under any
                // worker schedule.
                let outcome = run_cell(
                    cell,
                    a.seed.wrapping_add(i as u64),
                    &base,
                    &target,
                    &tstore,
                    &corpus,
                    &blocks[&cell.k_train],
                    &prompts,
                    a.k_infer,
                    a.max_new,
                );
                let row = match outcome {
                    Ok((al, loss)) => CellRow {
                        layers: cell.layers,
                        unfreeze_embeddings: cell.unfreeze,
                        k_train: cell.k_train,
                        variant: format!("{:?}", cell.variant).to_lowercase(),
                        acceptance_length: Some(al),
                        final_loss: loss,
                        status: "ok".into(),
                    },
                    Err(e) => CellRow {
                        layers: cell.layers,
                        unfreeze_embeddings: cell.unfreeze,
                        k_train: cell.k_train,
                        variant: format!("{:?}", cell.variant).to_lowercase(),
                        acceptance_length: None,
                        final_loss: None,
                        status: format!("error: {e:#}"),
                    },
                };
                eprintln!(
                    "cell {}/{}: layers={} unfreeze={} k_train={} variant={} -> {}",
                    i + 1,
                    cells.len(),
                    cell.layers,
                    cell.unfreeze,
                    cell.k_train,
                    row.variant,
                    row.acceptance_length
                        .map_or_else(|| row.status.clone(), |al| format!("AL {al:.3}")),
                );
                results.lock().unwrap()[i] = Some(row);
            });
        }
    });

    fs::create_dir_all(&a.out)?;
    let mut w = csv::Writer::from_path(a.out.join("ablate.csv"))?;
    for row in results.into_inner().unwrap() {
        w.serialize(row.expect("every cell ran"))?;
    }
    w.flush()?;
    Ok(())
}

// ----------------------------------------------------------------- dump-plan

#[derive(Args)]
pub struct DumpPlanArgs {
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    /// Depth count (one next-token depth plus k-1 look-ahead depths).
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 2)]
    pub segments: usize,
    #[arg(long, default_value_t = 0.8)]
    pub cod_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file with explicit per-depth retained positions (depth 0
    /// included); overrides sampling.
    #[arg(long)]
    pub sets: Option<PathBuf>,
    /// Report file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run_dump_plan(a: DumpPlanArgs) -> Result<()> {
    let sample = match &a.sets {
        Some(path) => {
            let sets: Vec<Vec<usize>> = load_json(path)?;
            LayoutSample::from_sets(a.n, sets).map_err(|e| usage(format!("{e}")))?
        }
        None => LayoutSample::sample(a.n, a.k, a.cod_ratio, a.seed)?,
    };
    let plan = SegmentPlan::partition(&sample, a.segments)?;
    let retained: Vec<&[usize]> =
        (0..sample.depths()).map(|d| sample.retained(d)).collect();
    let segments: Vec<serde_json::Value> = (0..plan.segments())
        .map(|s| {
            let slots = plan.segment_slots(&sample, s);
            serde_json::json!({
                "segment": s,
                "owned_slots": slots.iter().filter(|t| t.loss_bearing).count(),
                "context_slots": slots.iter().filter(|t| !t.loss_bearing).count(),
                "context_positions": plan.context_positions(s),
            })
        })
        .collect();
    let report = serde_json::json!({
        "n": sample.n(),
        "depths": sample.depths(),
        "total_slots": sample.total_slots(),
        "retained": retained,
        "boundaries": plan.boundaries(),
        "segments": segments,
        "plan": serde_json::from_str::<serde_json::Value>(&plan.to_json())?,
    });
    write_json(a.out.as_deref(), &report)
}
