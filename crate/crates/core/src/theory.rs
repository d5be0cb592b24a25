//! Numerical probes of rotary-embedding attention scores: explicit rotation
//! matrices, score-level injectivity over an offset range, and recovery of
//! an absolute position from a single score against a reference key.
//!
//! The claims being probed: the map from a relative offset to its rotation
//! matrix is injective within one period of the slowest frequency, and the
//! query/key pairs for which the scalar score `qᵀ R_δ k` collides across
//! offsets form a measure-zero set — so random Gaussian vectors should
//! essentially never collide, and a score pins down the offset (hence the
//! absolute position, given a reference at a known position). This module
//! is a numerical witness, not a proof checker.

use std::fmt;
use std::ops::Range;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor2D;

#[derive(Debug)]
pub enum TheoryError {
    Config(String),
    /// The offset range spans at least one full period of the slowest
    /// rotation, where distinct offsets stop being distinguishable.
    RangeTooWide { span: f64, period: f64 },
}

impl fmt::Display for TheoryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TheoryError::Config(msg) => write!(f, "bad probe config: {msg}"),
            TheoryError::RangeTooWide { span, period } => write!(
                f,
                "offset span {span} reaches the slowest rotation period {period}"
            ),
        }
    }
}

impl std::error::Error for TheoryError {}

pub type Result<T> = std::result::Result<T, TheoryError>;

/// Rotary geometry for a single attention head.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RopeConfig {
    pub dim: usize,
    pub base: f64,
}

impl RopeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(TheoryError::Config(format!(
                "head dim must be positive and even, got {}",
                self.dim
            )));
        }
        if !(self.base > 1.0) || !self.base.is_finite() {
            return Err(TheoryError::Config(format!(
                "rotation base must be finite and > 1, got {}",
                self.base
            )));
        }
        Ok(())
    }

    /// Frequencies `base^(-2j/dim)` for pair index `j` in `0..dim/2`,
    /// decreasing from 1.
    pub fn freqs(&self) -> Vec<f64> {
        let half = self.dim / 2;
        (0..half)
            .map(|j| self.base.powf(-2.0 * j as f64 / self.dim as f64))
            .collect()
    }

    /// Period of the slowest pair rotation, `2π / θ_{dim/2-1}`: integer
    /// offsets are only distinguishable within a span shorter than this.
    pub fn slowest_period(&self) -> f64 {
        let slowest = self.base.powf(-(self.dim as f64 - 2.0) / self.dim as f64);
        2.0 * std::f64::consts::PI / slowest
    }

    fn check_range(&self, deltas: &Range<i64>) -> Result<()> {
        if deltas.is_empty() {
            return Err(TheoryError::Config("empty offset range".into()));
        }
        let span = (deltas.end - 1 - deltas.start) as f64;
        let period = self.slowest_period();
        if span >= period {
            return Err(TheoryError::RangeTooWide { span, period });
        }
        Ok(())
    }
}

/// Explicit rotation matrix for offset `delta`: block-diagonal 2×2
/// rotations by `delta·θ_j`. Orthogonal by construction; the identity at
/// `delta = 0`.
pub fn rope_matrix(cfg: &RopeConfig, delta: i64) -> Result<Tensor2D> {
    cfg.validate()?;
    let mut m = Tensor2D::zeros(cfg.dim, cfg.dim);
    for (j, theta) in cfg.freqs().into_iter().enumerate() {
        let (s, c) = (delta as f64 * theta).sin_cos();
        let (a, b) = (2 * j, 2 * j + 1);
        m.row_mut(a)[a] = c;
        m.row_mut(a)[b] = -s;
        m.row_mut(b)[a] = s;
        m.row_mut(b)[b] = c;
    }
    Ok(m)
}

/// Attention score `qᵀ R_delta k` via per-pair rotation, without forming
/// the matrix.
pub fn attn_score(cfg: &RopeConfig, q: &[f64], k: &[f64], delta: i64) -> Result<f64> {
    cfg.validate()?;
    if q.len() != cfg.dim || k.len() != cfg.dim {
        return Err(TheoryError::Config(format!(
            "vectors of dim {}/{} against head dim {}",
            q.len(),
            k.len(),
            cfg.dim
        )));
    }
    Ok(score_from_freqs(&cfg.freqs(), q, k, delta as f64))
}

fn score_from_freqs(freqs: &[f64], q: &[f64], k: &[f64], delta: f64) -> f64 {
    let mut acc = 0.0;
    for (j, theta) in freqs.iter().enumerate() {
        let (s, c) = (delta * theta).sin_cos();
        let (a, b) = (2 * j, 2 * j + 1);
        acc += c * (q[a] * k[a] + q[b] * k[b]) + s * (q[b] * k[a] - q[a] * k[b]);
    }
    acc
}

/// One offending score collision, with the vectors that produced it.
#[derive(Debug, Clone, Serialize)]
pub struct CollisionCase {
    pub trial: usize,
    pub delta_a: i64,
    pub delta_b: i64,
    pub gap: f64,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InjectivityReport {
    pub config: RopeConfig,
    pub delta_start: i64,
    pub delta_count: usize,
    pub trials: usize,
    pub tol: f64,
    pub seed: u64,
    /// Offset pairs whose scores landed within `tol`, over all trials.
    pub collisions: usize,
    /// Smallest score gap between distinct offsets seen anywhere.
    pub min_gap: f64,
    /// Up to the first eight colliding cases, for post-mortems.
    pub cases: Vec<CollisionCase>,
    pub runtime_secs: f64,
}

impl InjectivityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Collision scan for a single query/key pair: scores every offset, then
/// counts pairs of distinct offsets whose scores fall within `tol`, plus
/// the smallest gap and the first few offending offset pairs.
fn scan_pair(
    trig: &[Vec<(f64, f64)>],
    delta_start: i64,
    q: &[f64],
    k: &[f64],
    tol: f64,
) -> (usize, f64, Vec<(i64, i64, f64)>) {
    let mut scored: Vec<(f64, i64)> = Vec::with_capacity(trig.len());
    for (i, row) in trig.iter().enumerate() {
        let mut acc = 0.0;
        for (j, &(s, c)) in row.iter().enumerate() {
            let (a, b) = (2 * j, 2 * j + 1);
            acc += c * (q[a] * k[a] + q[b] * k[b]) + s * (q[b] * k[a] - q[a] * k[b]);
        }
        scored.push((acc, delta_start + i as i64));
    }
    scored.sort_by(|x, y| x.0.total_cmp(&y.0));
    // In sorted order colliding pairs are contiguous, so a sliding window
    // counts them all.
    let mut pairs = 0;
    let mut min_gap = f64::INFINITY;
    let mut offenders = Vec::new();
    let mut lo = 0;
    for hi in 1..scored.len() {
        let gap = scored[hi].0 - scored[hi - 1].0;
        min_gap = min_gap.min(gap);
        while lo < hi && scored[hi].0 - scored[lo].0 >= tol {
            lo += 1;
        }
        pairs += hi - lo;
        if hi > lo && offenders.len() < 8 {
            offenders.push((scored[hi - 1].1, scored[hi].1, gap));
        }
    }
    (pairs, min_gap, offenders)
}

/// Score-collision count and minimum gap for one explicit query/key pair —
/// the probe's inner loop, exposed so degenerate inputs can be audited.
pub fn score_collisions(
    cfg: &RopeConfig,
    q: &[f64],
    k: &[f64],
    deltas: Range<i64>,
    tol: f64,
) -> Result<(usize, f64)> {
    cfg.validate()?;
    cfg.check_range(&deltas)?;
    if q.len() != cfg.dim || k.len() != cfg.dim {
        return Err(TheoryError::Config(format!(
            "vectors of dim {}/{} against head dim {}",
            q.len(),
            k.len(),
            cfg.dim
        )));
    }
    let freqs = cfg.freqs();
    let trig: Vec<Vec<(f64, f64)>> = deltas
        .clone()
        .map(|d| freqs.iter().map(|t| (d as f64 * t).sin_cos()).collect())
        .collect();
    let (pairs, min_gap, _) = scan_pair(&trig, deltas.start, q, k, tol);
    Ok((pairs, min_gap))
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    // SplitMix64 step so each trial gets an independent stream and the
    // trial loop could run in any order.
    let mut z = seed ^ (trial as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// For `trials` random Gaussian query/key pairs, score every offset in
/// `deltas` and count pairs of distinct offsets whose scores fall within
/// `tol` of each other. Zero collisions is the expected outcome on any
/// non-degenerate input; a single collision is reportable.
pub fn injectivity_probe(
    cfg: &RopeConfig,
    deltas: Range<i64>,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<InjectivityReport> {
    cfg.validate()?;
    cfg.check_range(&deltas)?;
    if trials == 0 {
        return Err(TheoryError::Config("probe needs at least one trial".into()));
    }
    if !(tol >= 0.0) {
        return Err(TheoryError::Config(format!("tolerance must be >= 0, got {tol}")));
    }
    let start = Instant::now();
    let freqs = cfg.freqs();
    let count = (deltas.end - deltas.start) as usize;
    // Trig tables are shared across trials: trig[i][j] = (sin, cos) of
    // (start + i)·θ_j.
    let trig: Vec<Vec<(f64, f64)>> = (0..count)
        .map(|i| {
            let d = (deltas.start + i as i64) as f64;
            freqs.iter().map(|t| (d * t).sin_cos()).collect()
        })
        .collect();

    let mut collisions = 0;
    let mut min_gap = f64::INFINITY;
    let mut cases = Vec::new();
    for trial in 0..trials {
        let mut rng = trial_rng(seed, trial);
        let q: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
        let k: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
        let (pairs, gap, offenders) = scan_pair(&trig, deltas.start, &q, &k, tol);
        collisions += pairs;
        min_gap = min_gap.min(gap);
        for (delta_a, delta_b, gap) in offenders {
            if cases.len() < 8 {
                cases.push(CollisionCase {
                    trial,
                    delta_a,
                    delta_b,
                    gap,
                    q: q.clone(),
                    k: k.clone(),
                });
            }
        }
    }
    Ok(InjectivityReport {
        config: *cfg,
        delta_start: deltas.start,
        delta_count: count,
        trials,
        tol,
        seed,
        collisions,
        min_gap,
        cases,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// Outcome of recovering an offset from one observed score.
#[derive(Debug, Clone, Serialize)]
pub struct Recovery {
    pub delta: i64,
    /// |score(delta) − observed| at the winner.
    pub residual: f64,
    /// Runner-up residual, if the range held more than one offset.
    pub runner_up: Option<f64>,
    /// Other offsets whose residual ties the winner within `tol`; empty on
    /// generic inputs, populated for degenerate ones (e.g. a zero query).
    pub ambiguous_with: Vec<i64>,
}

/// Recover the offset that generated `observed = qᵀ R_δ k_r` by brute
/// minimization of the residual over `deltas`; ties within `tol` of the
/// winner are reported rather than silently broken. With the reference key
/// at a known position `r`, the query's absolute position is `r − δ`.
pub fn position_recovery(
    cfg: &RopeConfig,
    k_r: &[f64],
    q: &[f64],
    observed: f64,
    deltas: Range<i64>,
    tol: f64,
) -> Result<Recovery> {
    cfg.validate()?;
    cfg.check_range(&deltas)?;
    if q.len() != cfg.dim || k_r.len() != cfg.dim {
        return Err(TheoryError::Config(format!(
            "vectors of dim {}/{} against head dim {}",
            q.len(),
            k_r.len(),
            cfg.dim
        )));
    }
    let freqs = cfg.freqs();
    let residuals: Vec<(i64, f64)> = deltas
        .map(|d| (d, (score_from_freqs(&freqs, q, k_r, d as f64) - observed).abs()))
        .collect();
    let &(delta, residual) = residuals
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .expect("range checked nonempty");
    let mut runner_up = None;
    let mut ambiguous_with = Vec::new();
    for &(d, r) in &residuals {
        if d == delta {
            continue;
        }
        if runner_up.is_none_or(|best| r < best) {
            runner_up = Some(r);
        }
        if r <= residual + tol {
            ambiguous_with.push(d);
        }
    }
    Ok(Recovery { delta, residual, runner_up, ambiguous_with })
}

/// The corollary direction: a recovered offset against a reference at a
/// known position names the query's absolute position.
pub fn absolute_position(reference: i64, delta: i64) -> i64 {
    reference - delta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor;

    fn cfg(dim: usize) -> RopeConfig {
        RopeConfig { dim, base: 10000.0 }
    }

    fn gauss(dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = trial_rng(seed, 0);
        (0..dim).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn zero_offset_is_the_identity() {
        let m = rope_matrix(&cfg(8), 0).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(m.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn rotations_compose_additively_and_preserve_norm() {
        let c = cfg(16);
        let r1 = rope_matrix(&c, 7).unwrap();
        let r2 = rope_matrix(&c, -3).unwrap();
        let sum = rope_matrix(&c, 4).unwrap();
        let prod = tensor::matmul(&r1, &r2).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                assert!((prod.get(i, j) - sum.get(i, j)).abs() < 1e-12);
            }
        }
        let x = gauss(16, 5);
        let xs = Tensor2D::from_vec(16, 1, x.clone());
        let rx = tensor::matmul(&r1, &xs).unwrap();
        let n0: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n1: f64 = (0..16).map(|i| rx.get(i, 0) * rx.get(i, 0)).sum::<f64>().sqrt();
        assert!((n0 - n1).abs() < 1e-12);
    }

    #[test]
    fn paired_score_matches_the_explicit_matrix_path() {
        let c = cfg(32);
        let q = gauss(32, 1);
        let k = gauss(32, 2);
        for delta in [-9i64, 0, 1, 17, 400] {
            let fast = attn_score(&c, &q, &k, delta).unwrap();
            let m = rope_matrix(&c, delta).unwrap();
            let kt = Tensor2D::from_vec(32, 1, k.clone());
            let rk = tensor::matmul(&m, &kt).unwrap();
            let slow: f64 = (0..32).map(|i| q[i] * rk.get(i, 0)).sum();
            assert!((fast - slow).abs() < 1e-12, "delta {delta}: {fast} vs {slow}");
        }
        let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
        assert!((attn_score(&c, &q, &k, 0).unwrap() - dot).abs() < 1e-12);
    }

    #[test]
    fn score_convention_matches_the_model_kernels() {
        // Rotating q at position m and k at position n must equal the
        // un-rotated score at offset n - m.
        let c = cfg(8);
        let q = gauss(8, 3);
        let k = gauss(8, 4);
        for (m, n) in [(0usize, 5usize), (3, 3), (7, 2)] {
            let qr = tensor::rope(&Tensor2D::from_vec(1, 8, q.clone()), &[m], 8, c.base, false)
                .unwrap();
            let kr = tensor::rope(&Tensor2D::from_vec(1, 8, k.clone()), &[n], 8, c.base, false)
                .unwrap();
            let via_model: f64 = qr.row(0).iter().zip(kr.row(0)).map(|(a, b)| a * b).sum();
            let via_probe = attn_score(&c, &q, &k, n as i64 - m as i64).unwrap();
            assert!((via_model - via_probe).abs() < 1e-12);
        }
    }

    #[test]
    fn constructed_orthogonal_query_scores_zero_everywhere() {
        // k lives in the first rotation plane; rotations keep it there, so
        // a q supported on the other pairs never sees it.
        let c = cfg(8);
        let k = vec![0.8, -0.6, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let q = vec![0.0, 0.0, 1.0, 2.0, -1.0, 0.5, 0.3, 0.9];
        for delta in 0..50 {
            assert!(attn_score(&c, &q, &k, delta).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn single_frequency_scores_are_distinct_cosine_samples() {
        // dim 2 has one frequency θ=1: scores are a·cos δ + b·sin δ, all
        // different over δ ∈ [0,4) for generic vectors.
        let c = RopeConfig { dim: 2, base: 10000.0 };
        let report = injectivity_probe(&c, 0..4, 10, 1e-9, 42).unwrap();
        assert_eq!(report.collisions, 0);
        assert!(report.min_gap > 1e-3);
    }

    #[test]
    fn gaussian_probe_finds_no_collisions_at_scale() {
        let report = injectivity_probe(&cfg(64), 0..1024, 50, 1e-9, 7).unwrap();
        assert_eq!(report.collisions, 0, "cases: {:?}", report.cases);
        assert!(report.min_gap > 1e-9);
        assert!(report.cases.is_empty());
        let json = report.to_json();
        assert!(json.contains("\"collisions\": 0"));
    }

    #[test]
    fn zero_query_is_flagged_as_maximally_degenerate() {
        // q = 0 kills every score, the canonical measure-zero input: all
        // C(16,2) offset pairs collide and the gap collapses to zero.
        let c = cfg(8);
        let q = vec![0.0; 8];
        let k = gauss(8, 9);
        let (pairs, min_gap) = score_collisions(&c, &q, &k, 0..16, 1e-9).unwrap();
        assert_eq!(pairs, 16 * 15 / 2);
        assert_eq!(min_gap, 0.0);
        // Recovery on the same degenerate input reports the ambiguity
        // instead of inventing a position.
        let rec = position_recovery(&c, &k, &q, 0.0, 0..16, 1e-9).unwrap();
        assert_eq!(rec.ambiguous_with.len(), 15);
    }

    #[test]
    fn recovery_round_trips_exactly_on_noiseless_scores() {
        let c = cfg(64);
        let mut rng = trial_rng(99, 0);
        for trial in 0..100 {
            let q: Vec<f64> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
            let k: Vec<f64> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
            let truth = rng.gen_range(0..512);
            let observed = attn_score(&c, &q, &k, truth).unwrap();
            let rec = position_recovery(&c, &k, &q, observed, 0..512, 1e-9).unwrap();
            assert_eq!(rec.delta, truth, "trial {trial}");
            assert_eq!(rec.residual, 0.0);
            assert!(rec.ambiguous_with.is_empty());
            assert_eq!(absolute_position(truth + 3, rec.delta), 3);
        }
    }

    #[test]
    fn tiny_noise_leaves_recovery_unchanged_when_gaps_dominate() {
        let c = cfg(64);
        let q = gauss(64, 11);
        let k = gauss(64, 12);
        let probe = injectivity_probe(&c, 0..256, 1, 1e-9, 11).unwrap();
        assert!(probe.min_gap > 1e-6);
        for truth in [0i64, 100, 255] {
            let observed = attn_score(&c, &q, &k, truth).unwrap() + 1e-12;
            let rec = position_recovery(&c, &k, &q, observed, 0..256, 1e-15).unwrap();
            assert_eq!(rec.delta, truth);
            assert!(rec.runner_up.unwrap() > rec.residual);
        }
    }

    #[test]
    fn preconditions_are_enforced() {
        assert!(matches!(
            RopeConfig { dim: 7, base: 10000.0 }.validate(),
            Err(TheoryError::Config(_))
        ));
        assert!(matches!(
            RopeConfig { dim: 8, base: 1.0 }.validate(),
            Err(TheoryError::Config(_))
        ));
        // dim 2, base 10000: slowest (only) frequency is 1, period 2π.
        let c = RopeConfig { dim: 2, base: 10000.0 };
        assert!(matches!(
            injectivity_probe(&c, 0..8, 1, 1e-9, 0),
            Err(TheoryError::RangeTooWide { .. })
        ));
        assert!(matches!(
            injectivity_probe(&cfg(8), 4..4, 1, 1e-9, 0),
            Err(TheoryError::Config(_))
        ));
        assert!(matches!(
            attn_score(&cfg(8), &[0.0; 4], &[0.0; 8], 1),
            Err(TheoryError::Config(_))
        ));
    }
}
