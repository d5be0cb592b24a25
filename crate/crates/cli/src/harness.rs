//! Shared plumbing for the subcommands: usage-vs-runtime error split,
//! checkpoint save/load with embedded JSON configs, the mask-budget
//! environment override, and decode aggregation.

use std::fmt;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pdraft_core::maskgen::DEFAULT_BUDGET_BYTES;
use pdraft_core::model::{Drafter, DrafterConfig, TargetConfig, TargetModel};
use pdraft_core::numerics::{load_checkpoint, save_checkpoint, ParamStore};
use pdraft_core::specdec::SpecStats;

/// Marks an error as the caller's fault (bad flags, configs, or inputs);
/// the binary maps these to exit code 2 instead of 3.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

/// Mask precompute budget in bytes, overridable via `PDRAFT_BUDGET_BYTES`.
pub fn mask_budget() -> Result<u64> {
    match std::env::var("PDRAFT_BUDGET_BYTES") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("PDRAFT_BUDGET_BYTES is not a byte count: {v:?}"))),
        Err(_) => Ok(DEFAULT_BUDGET_BYTES),
    }
}

pub fn save_target(path: &Path, cfg: &TargetConfig, store: &ParamStore) -> Result<()> {
    let meta = serde_json::to_string(cfg)?;
    save_checkpoint(store, &meta, path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn save_drafter(path: &Path, cfg: &DrafterConfig, store: &ParamStore) -> Result<()> {
    let meta = serde_json::to_string(cfg)?;
    save_checkpoint(store, &meta, path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Copies every parameter of `fresh` from `loaded`, matching by name and
/// insisting on identical shapes.
fn adopt_values(fresh: &mut ParamStore, loaded: &ParamStore, what: &str) -> Result<()> {
    let ids: Vec<_> = fresh.ids().collect();
    for id in ids {
        let name = fresh.name(id).to_string();
        let lid = loaded
            .lookup(&name)
            .with_context(|| format!("{what} checkpoint is missing parameter {name}"))?;
        let src = loaded.get(lid);
        if src.shape() != fresh.get(id).shape() {
            bail!(
                "{what} checkpoint parameter {name} has shape {:?}, model expects {:?}",
                src.shape(),
                fresh.get(id).shape()
            );
        }
        *fresh.get_mut(id) = src.clone();
    }
    Ok(())
}

/// Rebuilds a target model around the parameters stored in a checkpoint.
pub fn load_target(path: &Path) -> Result<(TargetModel, ParamStore)> {
    let (loaded, meta) =
        load_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: TargetConfig = serde_json::from_str(&meta)
        .with_context(|| format!("{}: not a target checkpoint", path.display()))?;
    let mut store = ParamStore::new();
    let model = TargetModel::new(cfg, &mut store, 0)?;
    adopt_values(&mut store, &loaded, "target")?;
    Ok((model, store))
}

/// Rebuilds a drafter (which shares embedding geometry with its target)
/// from a checkpoint.
pub fn load_drafter(
    path: &Path,
    target: &TargetModel,
    tstore: &ParamStore,
) -> Result<(Drafter, ParamStore)> {
    let (loaded, meta) =
        load_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: DrafterConfig = serde_json::from_str(&meta)
        .with_context(|| format!("{}: not a drafter checkpoint", path.display()))?;
    let mut store = ParamStore::new();
    let drafter = Drafter::new(cfg, target, tstore, &mut store, 0)?;
    adopt_values(&mut store, &loaded, "drafter")?;
    Ok((drafter, store))
}

/// Prompt slices for evaluation: the first `count` corpus sequences,
/// trimmed to `prompt_len` tokens (always leaving at least one).
pub fn eval_prompts(corpus: &[Vec<usize>], count: usize, prompt_len: usize) -> Vec<Vec<usize>> {
    corpus
        .iter()
        .filter(|s| !s.is_empty())
        .take(count)
        .map(|s| s[..prompt_len.max(1).min(s.len())].to_vec())
        .collect()
}

/// Per-prompt stats folded into one record; acceptance length is
/// recomputed over the totals.
pub fn fold_stats(per_prompt: &[SpecStats]) -> SpecStats {
    let mut total = SpecStats {
        iterations: 0,
        accepted_per_iter: Vec::new(),
        generated: 0,
        acceptance_length: 0.0,
        drafter_passes: 0,
        target_passes: 0,
    };
    for s in per_prompt {
        total.iterations += s.iterations;
        total.accepted_per_iter.extend_from_slice(&s.accepted_per_iter);
        total.generated += s.generated;
        total.drafter_passes += s.drafter_passes;
        total.target_passes += s.target_passes;
    }
    if total.iterations > 0 {
        total.acceptance_length = total.generated as f64 / total.iterations as f64;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use pdraft_core::model::Variant;

    #[test]
    fn checkpoints_round_trip_through_the_loaders() {
        let dir = tempfile::tempdir().unwrap();
        let tcfg =
            TargetConfig { vocab: 19, dim: 8, layers: 3, heads: 2, rope_base: 10000.0 };
        let mut tstore = ParamStore::new();
        let target = TargetModel::new(tcfg, &mut tstore, 7).unwrap();
        let tpath = dir.path().join("target.ckpt");
        save_target(&tpath, target.cfg(), &tstore).unwrap();
        let (target2, tstore2) = load_target(&tpath).unwrap();
        assert_eq!(tstore.checksum(), tstore2.checksum());

        let dcfg = DrafterConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            rope_base: 10000.0,
            k_train: 4,
            variant: Variant::DepthEmbed,
            unfreeze_embeddings: true,
            dropout_rate: 0.1,
            separate_mtp_combiner: false,
        };
        let mut dstore = ParamStore::new();
        let drafter = Drafter::new(dcfg, &target, &tstore, &mut dstore, 9).unwrap();
        let dpath = dir.path().join("drafter.ckpt");
        save_drafter(&dpath, drafter.cfg(), &dstore).unwrap();
        let (_, dstore2) = load_drafter(&dpath, &target2, &tstore2).unwrap();
        assert_eq!(dstore.checksum(), dstore2.checksum());
    }

    #[test]
    fn mismatched_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let tcfg =
            TargetConfig { vocab: 19, dim: 8, layers: 3, heads: 2, rope_base: 10000.0 };
        let mut tstore = ParamStore::new();
        let _ = TargetModel::new(tcfg.clone(), &mut tstore, 7).unwrap();
        let tpath = dir.path().join("target.ckpt");
        save_target(&tpath, &tcfg, &tstore).unwrap();
        // A target checkpoint is not a drafter checkpoint.
        let (target, tstore) = load_target(&tpath).unwrap();
        assert!(load_drafter(&tpath, &target, &tstore).is_err());
    }

    #[test]
    fn prompt_slicing_respects_short_sequences() {
        let corpus = vec![vec![1, 2, 3, 4, 5], vec![9], vec![7, 7, 7]];
        let prompts = eval_prompts(&corpus, 10, 4);
        assert_eq!(prompts, vec![vec![1, 2, 3, 4], vec![9], vec![7, 7, 7]]);
    }
}
