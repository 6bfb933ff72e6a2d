//! Synthetic embedding worlds with known relevance, selection metrics, an
//! exhaustive single-round oracle and parameter sweeps.
//!
//! A world is a set of cluster directions on the unit sphere, pairwise at
//! least `min_separation_deg` apart. Target clusters and "relevant" open-set
//! clusters share directions; distractor clusters get their own. Each point
//! is its cluster direction tilted by an angle of at most `spread_deg`
//! towards a uniformly random tangent direction, the tilt drawn from a
//! half-normal with scale `spread_deg / 2` truncated at `spread_deg`. With
//! `min_separation > 2 × spread` every point is strictly closer to its own
//! direction than to any other.
//!
//! World spec files are TOML:
//!
//! ```toml
//! dim = 32
//! seed = 7
//! min_separation_deg = 25.0
//!
//! [[target_clusters]]
//! points = 200
//! spread_deg = 5.0
//!
//! [[relevant_open_clusters]]
//! target = 0          # index into target_clusters
//! points = 200
//! spread_deg = 5.0
//!
//! [[distractor_open_clusters]]
//! points = 200
//! spread_deg = 5.0
//! ```

use std::fs;
use std::path::Path;

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::CentroidSet;
use crate::embedding::{EmbeddingMatrix, LabelVector};
use crate::error::{Error, Result};
use crate::sampler::{simcore_select, SamplerConfig, StopReason};
use crate::scoring::{dot, similarity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub points: usize,
    pub spread_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevantClusterSpec {
    /// Index of the target cluster whose direction this cluster shares.
    pub target: usize,
    pub points: usize,
    pub spread_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub dim: usize,
    pub seed: u64,
    pub min_separation_deg: f64,
    pub target_clusters: Vec<ClusterSpec>,
    #[serde(default)]
    pub relevant_open_clusters: Vec<RelevantClusterSpec>,
    #[serde(default)]
    pub distractor_open_clusters: Vec<ClusterSpec>,
}

impl WorldSpec {
    /// `clusters` target clusters, each mirrored by one relevant open-set
    /// cluster, plus `distractors` unrelated clusters; every cluster holds
    /// `points` rows with the same spread.
    pub fn balanced(
        dim: usize,
        clusters: usize,
        distractors: usize,
        points: usize,
        spread_deg: f64,
        min_separation_deg: f64,
        seed: u64,
    ) -> Self {
        let c = ClusterSpec { points, spread_deg };
        Self {
            dim,
            seed,
            min_separation_deg,
            target_clusters: vec![c.clone(); clusters],
            relevant_open_clusters: (0..clusters)
                .map(|target| RelevantClusterSpec {
                    target,
                    points,
                    spread_deg,
                })
                .collect(),
            distractor_open_clusters: vec![c; distractors],
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::WorldSpec(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::WorldSpec(e.to_string()))
    }

    fn spreads(&self) -> impl Iterator<Item = f64> + '_ {
        self.target_clusters
            .iter()
            .map(|c| c.spread_deg)
            .chain(self.relevant_open_clusters.iter().map(|c| c.spread_deg))
            .chain(self.distractor_open_clusters.iter().map(|c| c.spread_deg))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::WorldSpec(m));
        if self.dim < 2 {
            return bad("dim must be at least 2".into());
        }
        if self.target_clusters.is_empty() {
            return bad("at least one target cluster is required".into());
        }
        if self.relevant_open_clusters.is_empty() && self.distractor_open_clusters.is_empty() {
            return bad("the open-set needs at least one cluster".into());
        }
        let counts = self
            .target_clusters
            .iter()
            .map(|c| c.points)
            .chain(self.relevant_open_clusters.iter().map(|c| c.points))
            .chain(self.distractor_open_clusters.iter().map(|c| c.points));
        if counts.into_iter().any(|n| n == 0) {
            return bad("every cluster needs at least one point".into());
        }
        if let Some(r) = self
            .relevant_open_clusters
            .iter()
            .find(|r| r.target >= self.target_clusters.len())
        {
            return bad(format!("relevant cluster refers to missing target cluster {}", r.target));
        }
        let mut max_spread = 0f64;
        for s in self.spreads() {
            if !(0.0..90.0).contains(&s) {
                return bad(format!("spread {s}° must lie in [0, 90)"));
            }
            max_spread = max_spread.max(s);
        }
        if !(self.min_separation_deg > 2.0 * max_spread) || self.min_separation_deg > 180.0 {
            return bad(format!(
                "min separation {}° must exceed twice the largest spread ({max_spread}°)",
                self.min_separation_deg
            ));
        }
        Ok(())
    }

    fn direction_count(&self) -> usize {
        self.target_clusters.len() + self.distractor_open_clusters.len()
    }
}

/// A generated world. Cluster ids index [`SyntheticWorld::directions`]:
/// target clusters first, then distractors.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub target: EmbeddingMatrix,
    pub open: EmbeddingMatrix,
    /// 1 for open rows from a cluster sharing a target direction, else 0.
    pub relevance: LabelVector,
    pub target_clusters: Vec<usize>,
    pub open_clusters: Vec<usize>,
    pub directions: EmbeddingMatrix,
}

impl SyntheticWorld {
    pub fn relevant_count(&self) -> usize {
        self.relevance.labels().iter().filter(|&&l| l == 1).count()
    }
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn sample_directions(spec: &WorldSpec) -> Result<Vec<Vec<f64>>> {
    const MAX_ATTEMPTS: usize = 100_000;
    let mut rng = ChaCha8Rng::from_seed(stream_seed(spec.seed, 0, 0));
    let min_cos = spec.min_separation_deg.to_radians().cos();
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(spec.direction_count());
    while dirs.len() < spec.direction_count() {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let cand = gaussian_unit(&mut rng, spec.dim);
            let ok = dirs
                .iter()
                .all(|d| d.iter().zip(&cand).map(|(a, b)| a * b).sum::<f64>() <= min_cos);
            if ok {
                dirs.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::WorldSpec(format!(
                "could not place {} directions {}° apart in {} dimensions",
                spec.direction_count(),
                spec.min_separation_deg,
                spec.dim
            )));
        }
    }
    Ok(dirs)
}

/// Seed for an independent ChaCha stream per (world seed, role, row).
fn stream_seed(seed: u64, role: u64, row: u64) -> [u8; 32] {
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&seed.to_le_bytes());
    s[8..16].copy_from_slice(&role.to_le_bytes());
    s[16..24].copy_from_slice(&row.to_le_bytes());
    s
}

fn perturb(dir: &[f64], spread_deg: f64, rng: &mut ChaCha8Rng, out: &mut [f32]) {
    if spread_deg == 0.0 {
        for (o, d) in out.iter_mut().zip(dir) {
            *o = *d as f32;
        }
        return;
    }
    let spread = spread_deg.to_radians();
    let theta = loop {
        let z: f64 = rng.sample(StandardNormal);
        let t = (z * spread / 2.0).abs();
        if t <= spread {
            break t;
        }
    };
    // uniform tangent direction: a Gaussian with its radial part removed
    let tangent = loop {
        let g = gaussian_unit(rng, dir.len());
        let along: f64 = g.iter().zip(dir).map(|(a, b)| a * b).sum();
        let t: Vec<f64> = g.iter().zip(dir).map(|(a, b)| a - along * b).collect();
        let n = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            break t.into_iter().map(|x| x / n).collect::<Vec<_>>();
        }
    };
    let (s, c) = theta.sin_cos();
    let point: Vec<f64> = dir.iter().zip(&tangent).map(|(d, t)| c * d + s * t).collect();
    let n = point.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (o, p) in out.iter_mut().zip(point) {
        *o = (p / n) as f32;
    }
}

struct Block {
    direction: usize,
    points: usize,
    spread: f64,
}

fn fill(
    spec: &WorldSpec,
    role: u64,
    dirs: &[Vec<f64>],
    blocks: &[Block],
) -> Result<(EmbeddingMatrix, Vec<usize>)> {
    let dim = spec.dim;
    let mut owner = Vec::with_capacity(blocks.iter().map(|b| b.points).sum());
    let mut spreads = Vec::with_capacity(owner.capacity());
    for b in blocks {
        owner.extend(std::iter::repeat_n(b.direction, b.points));
        spreads.extend(std::iter::repeat_n(b.spread, b.points));
    }
    let mut data = vec![0f32; owner.len() * dim];
    data.par_chunks_mut(dim).enumerate().for_each(|(row, out)| {
        let mut rng = ChaCha8Rng::from_seed(stream_seed(spec.seed, role, row as u64));
        perturb(&dirs[owner[row]], spreads[row], &mut rng, out);
    });
    let mut m = EmbeddingMatrix::new(owner.len(), dim, data)?;
    m = m.assume_normalized()?;
    Ok((m, owner))
}

/// Fails if some row is at least as similar to a foreign direction as to its own.
fn check_purity(m: &EmbeddingMatrix, owner: &[usize], dirs: &EmbeddingMatrix) -> Result<()> {
    let bad = (0..m.count()).into_par_iter().find_first(|&i| {
        let own = dot(m.row(i), dirs.row(owner[i]));
        dirs.rows()
            .enumerate()
            .any(|(d, r)| d != owner[i] && dot(m.row(i), r) >= own)
    });
    match bad {
        Some(i) => Err(Error::WorldSpec(format!(
            "row {i} is closer to a foreign cluster direction than to its own"
        ))),
        None => Ok(()),
    }
}

/// Generates a world; the same spec always yields the same world.
pub fn generate_world(spec: &WorldSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let dirs = sample_directions(spec)?;
    let n_target = spec.target_clusters.len();
    let target_blocks: Vec<Block> = spec
        .target_clusters
        .iter()
        .enumerate()
        .map(|(i, c)| Block {
            direction: i,
            points: c.points,
            spread: c.spread_deg,
        })
        .collect();
    let open_blocks: Vec<Block> = spec
        .relevant_open_clusters
        .iter()
        .map(|c| Block {
            direction: c.target,
            points: c.points,
            spread: c.spread_deg,
        })
        .chain(
            spec.distractor_open_clusters
                .iter()
                .enumerate()
                .map(|(i, c)| Block {
                    direction: n_target + i,
                    points: c.points,
                    spread: c.spread_deg,
                }),
        )
        .collect();

    let (target, target_clusters) = fill(spec, 1, &dirs, &target_blocks)?;
    let (open, open_clusters) = fill(spec, 2, &dirs, &open_blocks)?;
    let directions = EmbeddingMatrix::new(
        dirs.len(),
        spec.dim,
        dirs.iter().flatten().map(|&v| v as f32).collect(),
    )?;
    check_purity(&target, &target_clusters, &directions)?;
    check_purity(&open, &open_clusters, &directions)?;
    let relevance = LabelVector::new(
        open_clusters
            .iter()
            .map(|&c| i64::from(c < n_target))
            .collect(),
    );
    Ok(SyntheticWorld {
        target,
        open,
        relevance,
        target_clusters,
        open_clusters,
        directions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    /// `None` when nothing was selected.
    pub precision: Option<f64>,
    pub recall: f64,
    pub selected_count: usize,
    pub relevant_selected: usize,
    pub relevant_pool_size: usize,
    /// Relevant fraction of the whole open-set: the expected precision of a
    /// uniform random selection.
    pub baseline_precision: f64,
}

/// Precision and recall of `selected` against labels where 1 marks a
/// relevant row. Repeated indices count once.
pub fn precision_recall(selected: &[usize], relevance: &LabelVector) -> Result<EvalMetrics> {
    let n = relevance.count();
    let mut seen = vec![false; n];
    let mut selected_count = 0;
    let mut relevant_selected = 0;
    for &i in selected {
        if i >= n {
            return Err(Error::OutOfBounds { index: i, len: n });
        }
        if !seen[i] {
            seen[i] = true;
            selected_count += 1;
            if relevance.labels()[i] == 1 {
                relevant_selected += 1;
            }
        }
    }
    let pool = relevance.labels().iter().filter(|&&l| l == 1).count();
    Ok(EvalMetrics {
        precision: (selected_count > 0).then(|| relevant_selected as f64 / selected_count as f64),
        recall: if pool == 0 {
            0.0
        } else {
            relevant_selected as f64 / pool as f64
        },
        selected_count,
        relevant_selected,
        relevant_pool_size: pool,
        baseline_precision: if n == 0 { 0.0 } else { pool as f64 / n as f64 },
    })
}

pub const ORACLE_MAX_CANDIDATES: usize = 20;
pub const ORACLE_MAX_K: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub value: f64,
    /// A smallest maximizer; among those, the lexicographically first.
    pub members: Vec<usize>,
}

/// Exhaustive search for the best non-empty subset of `candidates` under
/// the centroid facility-location value.
///
/// Subsets are enumerated by size, then lexicographically, so the first
/// subset reaching the maximum is a minimum-cardinality maximizer.
pub fn brute_force_round_oracle(centroids: &CentroidSet, candidates: &EmbeddingMatrix) -> Result<OracleResult> {
    let (k, n) = (centroids.k(), candidates.count());
    if n > ORACLE_MAX_CANDIDATES || k > ORACLE_MAX_K {
        return Err(Error::TooLarge(format!(
            "{n} candidates and k = {k}; limits are {ORACLE_MAX_CANDIDATES} and {ORACLE_MAX_K}"
        )));
    }
    // sims[c][u]
    let mut sims = vec![vec![0f32; n]; k];
    for (c, row) in sims.iter_mut().enumerate() {
        for (u, s) in row.iter_mut().enumerate() {
            *s = similarity(centroids.centroid(c), candidates.row(u))?;
        }
    }
    let mut best: Option<OracleResult> = None;
    // A maximizer never needs more than one row per centroid.
    for size in 1..=k.min(n) {
        for subset in (0..n).combinations(size) {
            let value: f64 = sims
                .iter()
                .map(|row| f64::from(subset.iter().map(|&u| row[u]).fold(f32::NEG_INFINITY, f32::max)))
                .sum();
            if best.as_ref().is_none_or(|b| value > b.value) {
                best = Some(OracleResult {
                    value,
                    members: subset,
                });
            }
        }
    }
    best.ok_or_else(|| Error::TooLarge("no candidates".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Tau,
    K,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub sampling_ratio: f64,
    pub coreset_size: usize,
    pub rounds: usize,
    pub stop_reason: StopReason,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// One selection per value of `param`, everything else held at `base`.
/// Precision and recall are filled in when `relevance` is given.
pub fn sweep(
    target: &EmbeddingMatrix,
    open: &EmbeddingMatrix,
    relevance: Option<&LabelVector>,
    base: &SamplerConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Parameter("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            match param {
                SweepParam::Tau => c.tau = v,
                SweepParam::K => {
                    if !(v >= 1.0 && v.fract() == 0.0) {
                        return Err(Error::Parameter(format!("k must be a positive integer, got {v}")));
                    }
                    c.k = v as usize;
                }
            }
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = configs
        .par_iter()
        .zip(values)
        .map(|(cfg, &value)| {
            let report = simcore_select(target, open, cfg)?;
            let metrics = relevance
                .map(|r| precision_recall(&report.coreset, r))
                .transpose()?;
            Ok(SweepRow {
                value,
                sampling_ratio: report.sampling_ratio,
                coreset_size: report.coreset_size,
                rounds: report.rounds.len(),
                stop_reason: report.stop_reason,
                precision: metrics.as_ref().and_then(|m| m.precision),
                recall: metrics.map(|m| m.recall),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { param, rows })
}
