//! The iterative coreset loop and the two reference samplers.
//!
//! Each round takes every centroid's nearest unconsumed open-set row (the
//! minimal maximizer of the facility-location value over what is left),
//! adds the round to the coreset, and stops when the budget is met, when the
//! round's value falls below `tau` times the first round's value, or when
//! the open-set runs out.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::clustering::{kmeans_fit, CentroidSet, Geometry, KMeansParams, DEFAULT_K, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::embedding::{EmbeddingMatrix, LabelVector};
use crate::error::{Error, Result};
use crate::scoring::{rank_order, CandidateIndex, DEFAULT_BLOCK_BYTES, DEFAULT_TOP_M};

pub const DEFAULT_TAU: f64 = 0.95;
/// Default budget is this many times the target set size.
pub const DEFAULT_BUDGET_MULTIPLIER: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub k: usize,
    pub tau: f64,
    /// Maximum coreset size; `None` means `50 × |target|`.
    pub budget: Option<usize>,
    pub seed: u64,
    /// Truncate the coreset to exactly `budget` rows.
    pub strict_budget: bool,
    /// Keep the round that trips the threshold (the loop updates, then checks).
    pub include_final_round: bool,
    /// Use every target row as a centroid instead of running k-means.
    pub exact_target: bool,
    pub geometry: Geometry,
    pub max_iter: usize,
    pub tol: f64,
    pub top_m: usize,
    pub block_bytes: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            tau: DEFAULT_TAU,
            budget: None,
            seed: 0,
            strict_budget: false,
            include_final_round: true,
            exact_target: false,
            geometry: Geometry::Spherical,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            top_m: DEFAULT_TOP_M,
            block_bytes: DEFAULT_BLOCK_BYTES,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Parameter("tau must be in (0,1]".into()));
        }
        if self.k == 0 {
            return Err(Error::Parameter("k must be at least 1".into()));
        }
        if self.budget == Some(0) {
            return Err(Error::Parameter("budget must be at least 1".into()));
        }
        if self.top_m == 0 {
            return Err(Error::Parameter("top_m must be at least 1".into()));
        }
        if self.max_iter == 0 || !(self.tol >= 0.0) {
            return Err(Error::Parameter("max_iter must be ≥ 1 and tol ≥ 0".into()));
        }
        Ok(())
    }

    pub fn resolved_budget(&self, target_count: usize) -> usize {
        self.budget
            .unwrap_or(DEFAULT_BUDGET_MULTIPLIER.saturating_mul(target_count))
    }

    fn kmeans_params(&self) -> KMeansParams {
        KMeansParams {
            k: self.k,
            seed: self.seed,
            max_iter: self.max_iter,
            tol: self.tol,
            geometry: self.geometry,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundResult {
    /// 1-based round number.
    pub t: usize,
    /// Open-set rows picked this round, ascending.
    #[serde(skip)]
    pub members: Vec<usize>,
    pub size: usize,
    /// `f̂` of the full round.
    pub value: f64,
    /// `value` over the first round's value.
    pub ratio: f64,
    /// False only for a threshold-tripping round dropped because
    /// `include_final_round` is off.
    #[serde(skip)]
    pub included: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    Threshold,
    Budget,
    Exhausted,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timings {
    pub kmeans_ms: f64,
    pub index_ms: f64,
    pub rounds_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionReport {
    pub config: SamplerConfig,
    pub budget: usize,
    pub rounds: Vec<RoundResult>,
    /// Selected rows in selection order.
    #[serde(skip)]
    pub coreset: Vec<usize>,
    pub coreset_size: usize,
    pub open_count: usize,
    pub sampling_ratio: f64,
    pub stop_reason: StopReason,
    pub centroid_count: usize,
    pub kmeans_inertia: f64,
    pub kmeans_iterations: usize,
    pub index_scans: usize,
    pub elapsed_ms: f64,
    pub timings: Timings,
}

impl SelectionReport {
    /// Coreset indices in ascending order.
    pub fn sorted_coreset(&self) -> Vec<usize> {
        let mut v = self.coreset.clone();
        v.sort_unstable();
        v
    }

    /// Writes the coreset as newline-delimited ascending indices.
    pub fn write_indices(&self, path: impl AsRef<Path>) -> Result<()> {
        write_indices(&self.sorted_coreset(), path)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Everything except wall-clock timings, for determinism checks.
    pub fn without_timings(&self) -> Self {
        Self {
            elapsed_ms: 0.0,
            timings: Timings::default(),
            ..self.clone()
        }
    }
}

pub fn write_indices(indices: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(indices.len() * 8);
    for i in indices {
        out.push_str(&i.to_string());
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_indices(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: not an index: {l:?}", n + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stop iff `round_value < tau · first_value`.
pub fn stopping_check(round_value: f64, first_value: f64, tau: f64) -> Result<StopDecision> {
    if !(first_value > 0.0) {
        return Err(Error::Degenerate(format!(
            "first-round value {first_value} is not positive; the stopping ratio is undefined"
        )));
    }
    Ok(if round_value < tau * first_value {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    })
}

fn check_inputs(target: &EmbeddingMatrix, open: &EmbeddingMatrix) -> Result<()> {
    if target.dim() != open.dim() {
        return Err(Error::DimMismatch {
            expected: target.dim(),
            found: open.dim(),
        });
    }
    if !target.is_normalized() || !open.is_normalized() {
        return Err(Error::Parameter("target and open-set must be L2-normalized".into()));
    }
    Ok(())
}

/// Selects the open-set rows most similar to `target`.
///
/// With `exact_target` set, or when `k` equals the target size, the target
/// rows serve as centroids directly; otherwise k-means runs first.
pub fn simcore_select(
    target: &EmbeddingMatrix,
    open: &EmbeddingMatrix,
    config: &SamplerConfig,
) -> Result<SelectionReport> {
    let started = Instant::now();
    config.validate()?;
    check_inputs(target, open)?;

    let centroids = if config.exact_target || config.k == target.count() {
        CentroidSet::from_matrix(target.clone())?
    } else {
        kmeans_fit(target, &config.kmeans_params())?
    };
    let kmeans_ms = ms(started);
    info!(
        k = centroids.k(),
        inertia = centroids.inertia(),
        iterations = centroids.iterations(),
        "centroids ready"
    );
    select_with_centroids(&centroids, open, config, target.count(), started, kmeans_ms)
}

/// Runs the round loop against precomputed centroids. `target_count` only
/// feeds the default budget.
pub fn select_with_centroids(
    centroids: &CentroidSet,
    open: &EmbeddingMatrix,
    config: &SamplerConfig,
    target_count: usize,
    started: Instant,
    kmeans_ms: f64,
) -> Result<SelectionReport> {
    config.validate()?;
    check_inputs(centroids.matrix(), open)?;
    let budget = config.resolved_budget(target_count);

    let index_start = Instant::now();
    let mut index =
        CandidateIndex::build_with_block_bytes(centroids, open, config.top_m, config.block_bytes)?;
    let index_ms = ms(index_start);

    let rounds_start = Instant::now();
    let mut coreset: Vec<usize> = Vec::new();
    let mut rounds: Vec<RoundResult> = Vec::new();
    let mut first_value = None;
    let mut last_pick = None;
    let stop_reason = loop {
        if coreset.len() >= budget {
            break StopReason::Budget;
        }
        let pick = match index.nearest_per_centroid() {
            Ok(p) => p,
            Err(Error::Exhausted) => break StopReason::Exhausted,
            Err(e) => return Err(e),
        };
        let t = rounds.len() + 1;
        let first = match first_value {
            Some(f) => f,
            None => {
                if !(pick.value > 0.0) {
                    return Err(Error::Degenerate(
                        "open-set entirely dissimilar to target".into(),
                    ));
                }
                first_value = Some(pick.value);
                pick.value
            }
        };
        let ratio = pick.value / first;
        let decision = stopping_check(pick.value, first, config.tau)?;
        let members = pick.indices();
        let included = decision == StopDecision::Continue || config.include_final_round;
        info!(t, size = members.len(), value = pick.value, ratio, "round");
        if included {
            index.consume(&members)?;
            coreset.extend_from_slice(&members);
        }
        rounds.push(RoundResult {
            t,
            size: members.len(),
            members,
            value: pick.value,
            ratio,
            included,
        });
        last_pick = Some(pick);
        if decision == StopDecision::Stop {
            break StopReason::Threshold;
        }
    };

    if config.strict_budget && coreset.len() > budget {
        let excess = coreset.len() - budget;
        let last = rounds.last_mut().expect("overshoot implies a round");
        let pick = last_pick.expect("overshoot implies a round");
        // lowest similarity first; among equals the higher index goes first
        let mut order = pick.members.clone();
        order.sort_by(|a, b| rank_order(b, a));
        let dropped: BTreeSet<usize> = order.iter().take(excess).map(|c| c.index).collect();
        debug!(dropped = dropped.len(), "truncating final round to the budget");
        last.members.retain(|u| !dropped.contains(u));
        last.size = last.members.len();
        coreset.retain(|u| !dropped.contains(u));
    }

    let rounds_ms = ms(rounds_start);
    info!(
        rounds = rounds.len(),
        coreset = coreset.len(),
        ?stop_reason,
        "selection finished"
    );
    Ok(SelectionReport {
        config: config.clone(),
        budget,
        coreset_size: coreset.len(),
        open_count: open.count(),
        sampling_ratio: coreset.len() as f64 / open.count() as f64,
        coreset,
        rounds,
        stop_reason,
        centroid_count: centroids.k(),
        kmeans_inertia: centroids.inertia(),
        kmeans_iterations: centroids.iterations(),
        index_scans: index.scans(),
        elapsed_ms: ms(started),
        timings: Timings {
            kmeans_ms,
            index_ms,
            rounds_ms,
        },
    })
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Reference samplers the coreset is compared against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineSpec {
    /// A uniform random `fraction` of the open-set.
    RandomFraction { fraction: f64 },
    /// Every row whose label is in `classes`.
    LabelOracle { classes: Vec<i64> },
}

impl BaselineSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            BaselineSpec::RandomFraction { fraction } if !(*fraction > 0.0 && *fraction <= 1.0) => {
                Err(Error::Parameter("fraction must be in (0,1]".into()))
            }
            _ => Ok(()),
        }
    }

    /// Runs the baseline. `labels` is required for the label oracle.
    pub fn select(&self, open_count: usize, labels: Option<&LabelVector>, seed: u64) -> Result<Vec<usize>> {
        self.validate()?;
        match self {
            BaselineSpec::RandomFraction { fraction } => {
                let budget = ((open_count as f64) * fraction).round() as usize;
                random_select(open_count, budget.min(open_count), seed)
            }
            BaselineSpec::LabelOracle { classes } => {
                let labels = labels
                    .ok_or_else(|| Error::Parameter("label oracle needs a label vector".into()))?;
                labels.check_paired(open_count)?;
                let classes: BTreeSet<i64> = classes.iter().copied().collect();
                Ok(label_oracle_select(labels, &classes))
            }
        }
    }
}

/// `budget` indices drawn uniformly without replacement, ascending.
pub fn random_select(open_count: usize, budget: usize, seed: u64) -> Result<Vec<usize>> {
    if budget > open_count {
        return Err(Error::Parameter(format!(
            "budget {budget} exceeds the open-set size {open_count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = rand::seq::index::sample(&mut rng, open_count, budget).into_vec();
    v.sort_unstable();
    Ok(v)
}

/// Indices whose label is in `classes`, ascending.
pub fn label_oracle_select(labels: &LabelVector, classes: &BTreeSet<i64>) -> Vec<usize> {
    labels
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, l)| classes.contains(l))
        .map(|(i, _)| i)
        .collect()
}
