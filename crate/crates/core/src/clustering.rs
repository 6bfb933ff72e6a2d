//! Seeded k-means reducing the target set to `k` unit-norm centroids.
//!
//! The default geometry is spherical: rows go to the centroid with the
//! largest dot product and each centroid is the re-normalized mean of its
//! members, with inertia `Σ (1 − dot(row, centroid))`. The Euclidean variant
//! runs plain Lloyd iterations and normalizes the centroids once at the end.

use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{
    load_embeddings, row_norm, save_embeddings, EmbeddingMatrix, Format, MIN_NORM,
};
use crate::error::{Error, Result};
use crate::scoring::dot;

pub const DEFAULT_K: usize = 100;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    #[default]
    Spherical,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once the relative inertia change drops below this.
    pub tol: f64,
    pub geometry: Geometry,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            seed: 0,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            geometry: Geometry::Spherical,
        }
    }
}

/// `k` unit-norm centroids standing in for the target set.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    centroids: EmbeddingMatrix,
    inertia: f64,
    iterations: usize,
    seed: u64,
    tol: f64,
    geometry: Geometry,
    converged: bool,
    inertia_history: Vec<f64>,
}

impl CentroidSet {
    /// Uses the rows of a normalized matrix directly as centroids (`k` equals
    /// the row count, inertia 0).
    pub fn from_matrix(matrix: EmbeddingMatrix) -> Result<Self> {
        require_normalized(&matrix)?;
        Ok(Self {
            centroids: matrix,
            inertia: 0.0,
            iterations: 0,
            seed: 0,
            tol: 0.0,
            geometry: Geometry::Spherical,
            converged: true,
            inertia_history: vec![0.0],
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.count()
    }

    pub fn dim(&self) -> usize {
        self.centroids.dim()
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.centroids
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        self.centroids.row(i)
    }

    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    /// Inertia after initialization and after each Lloyd iteration.
    pub fn inertia_history(&self) -> &[f64] {
        &self.inertia_history
    }

    pub fn metadata(&self) -> CentroidMetadata {
        CentroidMetadata {
            k: self.k(),
            dim: self.dim(),
            seed: self.seed,
            inertia: self.inertia,
            iterations: self.iterations,
            tol: self.tol,
            geometry: self.geometry,
            converged: self.converged,
        }
    }
}

/// Sidecar JSON written next to persisted centroids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidMetadata {
    pub k: usize,
    pub dim: usize,
    pub seed: u64,
    pub inertia: f64,
    pub iterations: usize,
    pub tol: f64,
    pub geometry: Geometry,
    pub converged: bool,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes centroids as `EMB1` plus `<path>.json` metadata.
pub fn save_centroids(set: &CentroidSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    save_embeddings(&set.centroids, path)?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&set.metadata())?;
    fs::write(&side, json).map_err(|e| Error::io(side, e))
}

pub fn load_centroids(path: impl AsRef<Path>) -> Result<CentroidSet> {
    let path = path.as_ref();
    let matrix = load_embeddings(path, Format::Binary)?.assume_normalized()?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CentroidMetadata = serde_json::from_str(&text)?;
    if meta.k != matrix.count() || meta.dim != matrix.dim() {
        return Err(Error::format(side, "metadata disagrees with the centroid file"));
    }
    Ok(CentroidSet {
        centroids: matrix,
        inertia: meta.inertia,
        iterations: meta.iterations,
        seed: meta.seed,
        tol: meta.tol,
        geometry: meta.geometry,
        converged: meta.converged,
        inertia_history: vec![meta.inertia],
    })
}

/// Cluster id per source row and the size of each cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub labels: Vec<usize>,
    pub counts: Vec<usize>,
}

fn require_normalized(m: &EmbeddingMatrix) -> Result<()> {
    if !m.is_normalized() {
        return Err(Error::Parameter("input matrix must be L2-normalized".into()));
    }
    Ok(())
}

fn check_k(matrix: &EmbeddingMatrix, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if k > matrix.count() {
        return Err(Error::Parameter(format!(
            "k = {k} exceeds the {} source rows",
            matrix.count()
        )));
    }
    let distinct = matrix.distinct_rows();
    if k > distinct {
        return Err(Error::Parameter(format!(
            "k = {k} exceeds the {distinct} distinct source rows"
        )));
    }
    Ok(())
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum()
}

/// k-means++ seeding: the first centroid uniformly, each next one with
/// probability proportional to its squared distance from the nearest
/// centroid chosen so far. Returns the chosen row indices.
fn plus_plus(matrix: &EmbeddingMatrix, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let n = matrix.count();
    let first = rng.random_range(0..n);
    let mut chosen = vec![first];
    let mut d2: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_dist(matrix.row(i), matrix.row(first)))
        .collect();
    while chosen.len() < k {
        let dist = WeightedIndex::new(&d2).map_err(|_| {
            Error::Parameter(format!("fewer than {k} distinct rows to seed from"))
        })?;
        let next = dist.sample(rng);
        chosen.push(next);
        let row = matrix.row(next);
        d2.par_iter_mut().enumerate().for_each(|(i, d)| {
            *d = d.min(sq_dist(matrix.row(i), row));
        });
    }
    Ok(chosen)
}

/// Seeds `k` distinct centroids from the rows of `matrix`. The result has
/// not been refined by any Lloyd iteration.
pub fn init_centroids(matrix: &EmbeddingMatrix, k: usize, seed: u64) -> Result<CentroidSet> {
    require_normalized(matrix)?;
    check_k(matrix, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = plus_plus(matrix, k, &mut rng)?;
    let centroids = matrix.select_rows(&rows)?;
    let inertia = spherical_costs(matrix, &centroids.rows().collect::<Vec<_>>()).1;
    Ok(CentroidSet {
        centroids,
        inertia,
        iterations: 0,
        seed,
        tol: DEFAULT_TOL,
        geometry: Geometry::Spherical,
        converged: false,
        inertia_history: vec![inertia],
    })
}

/// Nearest centroid per row under `geometry`, ties to the lowest index, and
/// each row's cost.
fn nearest(matrix: &EmbeddingMatrix, cents: &[&[f32]], geometry: Geometry) -> (Vec<usize>, Vec<f64>) {
    matrix
        .data()
        .par_chunks_exact(matrix.dim())
        .map(|row| match geometry {
            Geometry::Spherical => {
                let mut best = (0usize, f32::NEG_INFINITY);
                for (c, cent) in cents.iter().enumerate() {
                    let s = dot(row, cent);
                    if s > best.1 {
                        best = (c, s);
                    }
                }
                (best.0, (1.0 - f64::from(best.1)).max(0.0))
            }
            Geometry::Euclidean => {
                let mut best = (0usize, f64::INFINITY);
                for (c, cent) in cents.iter().enumerate() {
                    let d = sq_dist(row, cent);
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best
            }
        })
        .unzip()
}

fn spherical_costs(matrix: &EmbeddingMatrix, cents: &[&[f32]]) -> (Vec<usize>, f64) {
    let (labels, costs) = nearest(matrix, cents, Geometry::Spherical);
    (labels, costs.iter().sum())
}

/// Assigns each row to its highest-dot-product centroid, ties broken toward
/// the lowest centroid index.
pub fn assign(matrix: &EmbeddingMatrix, centroids: &CentroidSet) -> Result<Assignment> {
    if matrix.dim() != centroids.dim() {
        return Err(Error::DimMismatch {
            expected: centroids.dim(),
            found: matrix.dim(),
        });
    }
    let cents: Vec<&[f32]> = centroids.matrix().rows().collect();
    let (labels, _) = nearest(matrix, &cents, Geometry::Spherical);
    let counts = count_labels(&labels, centroids.k());
    Ok(Assignment { labels, counts })
}

fn count_labels(labels: &[usize], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

/// Working state of one Lloyd run: a flat `k × dim` centroid buffer.
struct Lloyd<'a> {
    matrix: &'a EmbeddingMatrix,
    geometry: Geometry,
    k: usize,
    dim: usize,
    cents: Vec<f32>,
}

impl Lloyd<'_> {
    fn cent_rows(&self) -> Vec<&[f32]> {
        self.cents.chunks_exact(self.dim).collect()
    }

    fn assign(&self) -> (Vec<usize>, Vec<f64>) {
        nearest(self.matrix, &self.cent_rows(), self.geometry)
    }

    /// Moves each centroid to the mean of its members (re-normalized for the
    /// spherical geometry). Summation runs sequentially in row order.
    fn update(&mut self, labels: &[usize]) {
        let dim = self.dim;
        let mut sums = vec![0f64; self.k * dim];
        let mut counts = vec![0usize; self.k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(self.matrix.row(i)) {
                *s += f64::from(v);
            }
        }
        for c in 0..self.k {
            if counts[c] == 0 {
                continue;
            }
            let sum = &sums[c * dim..(c + 1) * dim];
            let scale = match self.geometry {
                Geometry::Spherical => {
                    let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
                    // members cancel out; keep the previous direction
                    if norm <= MIN_NORM {
                        continue;
                    }
                    norm
                }
                Geometry::Euclidean => counts[c] as f64,
            };
            for (dst, s) in self.cents[c * dim..(c + 1) * dim].iter_mut().zip(sum) {
                *dst = (s / scale) as f32;
            }
        }
    }

    /// Re-seeds every empty cluster at the row farthest from its current
    /// centroid, taking rows only from clusters that keep at least one member.
    /// Returns whether anything moved.
    fn repair(&mut self, labels: &[usize], costs: &[f64]) -> bool {
        let mut counts = count_labels(labels, self.k);
        let empty: Vec<usize> = (0..self.k).filter(|&c| counts[c] == 0).collect();
        if empty.is_empty() {
            return false;
        }
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.sort_by(|&a, &b| costs[b].total_cmp(&costs[a]).then(a.cmp(&b)));
        let mut donors = order.into_iter();
        let mut moved = false;
        for c in empty {
            for r in donors.by_ref() {
                if counts[labels[r]] <= 1 {
                    continue;
                }
                let row = self.matrix.row(r);
                if self.cent_rows().contains(&row) {
                    continue;
                }
                counts[labels[r]] -= 1;
                self.cents[c * self.dim..(c + 1) * self.dim].copy_from_slice(row);
                moved = true;
                break;
            }
        }
        moved
    }
}

/// Fits `params.k` centroids to a normalized matrix.
///
/// Deterministic for a given matrix and parameter set. Stops once
/// `|Δinertia| ≤ tol · inertia` or after `max_iter` Lloyd iterations.
pub fn kmeans_fit(matrix: &EmbeddingMatrix, params: &KMeansParams) -> Result<CentroidSet> {
    require_normalized(matrix)?;
    check_k(matrix, params.k)?;
    if !(params.tol >= 0.0) || params.max_iter == 0 {
        return Err(Error::Parameter("max_iter must be ≥ 1 and tol ≥ 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let seeds = plus_plus(matrix, params.k, &mut rng)?;
    let mut lloyd = Lloyd {
        matrix,
        geometry: params.geometry,
        k: params.k,
        dim: matrix.dim(),
        cents: matrix.select_rows(&seeds)?.into_data(),
    };

    let (mut labels, costs) = lloyd.assign();
    let mut inertia: f64 = costs.iter().sum();
    let mut history = vec![inertia];
    let mut iterations = 0;
    let mut converged = false;
    let mut costs = costs;
    while iterations < params.max_iter {
        lloyd.update(&labels);
        lloyd.repair(&labels, &costs);
        let (l, c) = lloyd.assign();
        let next: f64 = c.iter().sum();
        iterations += 1;
        debug_assert!(
            next <= inertia * (1.0 + 1e-9) + 1e-9,
            "inertia increased from {inertia} to {next} at iteration {iterations}"
        );
        history.push(next);
        let delta = (inertia - next).abs();
        labels = l;
        costs = c;
        inertia = next;
        if delta <= params.tol * inertia {
            converged = true;
            break;
        }
    }

    for _ in 0..params.k {
        if !lloyd.repair(&labels, &costs) {
            break;
        }
        let (l, c) = lloyd.assign();
        labels = l;
        costs = c;
        inertia = costs.iter().sum();
        history.push(inertia);
    }
    if count_labels(&labels, params.k).contains(&0) {
        return Err(Error::Degenerate("k-means left an empty cluster".into()));
    }

    let mut data = lloyd.cents;
    if params.geometry == Geometry::Euclidean {
        for (c, chunk) in data.chunks_exact_mut(matrix.dim()).enumerate() {
            let norm = row_norm(chunk);
            if !(norm > MIN_NORM) {
                return Err(Error::ZeroNorm { row: c, norm });
            }
            chunk.iter_mut().for_each(|v| *v = (f64::from(*v) / norm) as f32);
        }
    }
    let mut centroids = EmbeddingMatrix::new(params.k, matrix.dim(), data)?;
    centroids.set_normalized_unchecked(true);
    Ok(CentroidSet {
        centroids,
        inertia,
        iterations,
        seed: params.seed,
        tol: params.tol,
        geometry: params.geometry,
        converged,
        inertia_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::l2_normalize;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assume, proptest, ProptestConfig};

    fn unit(rows: &[Vec<f32>]) -> EmbeddingMatrix {
        l2_normalize(&EmbeddingMatrix::from_rows(rows).unwrap()).unwrap()
    }

    fn params(k: usize, seed: u64) -> KMeansParams {
        KMeansParams {
            k,
            seed,
            ..Default::default()
        }
    }

    fn random_rows(seed: u64, n: usize, d: usize) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        unit(&rows)
    }

    #[test]
    fn init_picks_both_distinct_rows() {
        let m = unit(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let c = init_centroids(&m, 2, 9).unwrap();
        let mut rows: Vec<Vec<f32>> = c.matrix().rows().map(|r| r.to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let one = init_centroids(&m, 1, 9).unwrap();
        assert_eq!(one.k(), 1);
    }

    #[test]
    fn init_rejects_too_few_distinct_rows() {
        let m = unit(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert!(matches!(init_centroids(&m, 2, 0), Err(Error::Parameter(_))));
        assert!(matches!(init_centroids(&m, 4, 0), Err(Error::Parameter(_))));
        let raw = EmbeddingMatrix::from_rows(&[vec![1.0f32, 0.0]]).unwrap();
        assert!(init_centroids(&raw, 1, 0).is_err());
    }

    #[test]
    fn separated_axes_give_zero_inertia() {
        let mut rows = vec![vec![1.0, 0.0]; 5];
        rows.extend(vec![vec![0.0, 1.0]; 5]);
        let m = unit(&rows);
        let c = kmeans_fit(&m, &params(2, 1)).unwrap();
        assert_eq!(c.inertia(), 0.0);
        let mut got: Vec<Vec<f32>> = c.matrix().rows().map(|r| r.to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn single_cluster_is_normalized_mean_hand_computed() {
        // rows (1,0), (0,1), (0.6,0.8): sum = (1.6, 1.8), norm = sqrt(5.8)
        let m = unit(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]);
        let c = kmeans_fit(&m, &params(1, 4)).unwrap();
        let n = 5.8f64.sqrt();
        let want = [1.6 / n, 1.8 / n];
        assert!((f64::from(c.centroid(0)[0]) - want[0]).abs() < 1e-6);
        assert!((f64::from(c.centroid(0)[1]) - want[1]).abs() < 1e-6);
    }

    #[test]
    fn identical_rows_converge_in_one_iteration() {
        let m = unit(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        let c = kmeans_fit(&m, &params(1, 0)).unwrap();
        assert_eq!(c.centroid(0), &[1.0, 0.0]);
        assert_eq!(c.inertia(), 0.0);
        assert_eq!(c.iterations(), 1);
        assert!(c.converged());
    }

    #[test]
    fn assign_examples() {
        let cs = CentroidSet::from_matrix(unit(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        let rows = unit(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 2.0]]);
        let a = assign(&rows, &cs).unwrap();
        assert_eq!(a.labels, vec![0, 0, 1]);
        assert_eq!(a.counts, vec![2, 1]);
        let bad = unit(&[vec![1.0, 0.0, 0.0]]);
        assert!(assign(&bad, &cs).is_err());
    }

    #[test]
    fn k_equal_distinct_rows_has_zero_inertia() {
        let m = random_rows(8, 12, 5);
        let c = kmeans_fit(&m, &params(12, 2)).unwrap();
        assert!(c.inertia() < 1e-5, "{}", c.inertia());
        let a = assign(&m, &c).unwrap();
        assert!(a.counts.iter().all(|&n| n == 1));
    }

    #[test]
    fn empty_clusters_are_repaired() {
        // many clusters relative to structure: still no empty cluster
        let m = random_rows(21, 60, 3);
        for seed in 0..10 {
            let c = kmeans_fit(&m, &params(25, seed)).unwrap();
            let a = assign(&m, &c).unwrap();
            assert!(a.counts.iter().all(|&n| n > 0));
            assert_eq!(a.counts.iter().sum::<usize>(), 60);
        }
    }

    #[test]
    fn euclidean_geometry_outputs_unit_centroids() {
        let m = random_rows(3, 80, 6);
        let c = kmeans_fit(
            &m,
            &KMeansParams {
                geometry: Geometry::Euclidean,
                ..params(5, 1)
            },
        )
        .unwrap();
        for r in c.matrix().rows() {
            assert!((row_norm(r) - 1.0).abs() < 1e-5);
        }
        assert_eq!(c.geometry(), Geometry::Euclidean);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.emb");
        let c = kmeans_fit(&random_rows(1, 40, 4), &params(3, 7)).unwrap();
        save_centroids(&c, &p).unwrap();
        let meta: CentroidMetadata =
            serde_json::from_str(&fs::read_to_string(sidecar_path(&p)).unwrap()).unwrap();
        assert_eq!(meta, c.metadata());
        let back = load_centroids(&p).unwrap();
        assert_eq!(back.matrix(), c.matrix());
        assert_eq!(back.inertia(), c.inertia());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn fit_invariants(seed in any::<u64>(), n in 2usize..60, d in 2usize..6, k in 1usize..8) {
            let m = random_rows(seed, n, d);
            prop_assume!(k <= n);
            let p = params(k, seed ^ 0x5eed);
            let c = kmeans_fit(&m, &p).unwrap();
            for r in c.matrix().rows() {
                prop_assert!((row_norm(r) - 1.0).abs() <= 1e-5);
            }
            prop_assert!(c.inertia().is_finite() && c.inertia() >= 0.0);
            for w in c.inertia_history().windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-9, "{:?}", c.inertia_history());
            }
            let again = kmeans_fit(&m, &p).unwrap();
            prop_assert_eq!(&c, &again);
            let a = assign(&m, &c).unwrap();
            prop_assert!(a.counts.iter().all(|&x| x > 0));
            prop_assert!(a.labels.iter().all(|&l| l < k));
        }

        #[test]
        fn single_cluster_matches_direct_mean(seed in any::<u64>(), n in 1usize..30, d in 1usize..6) {
            let m = random_rows(seed, n, d);
            let mut sum = vec![0f64; d];
            for r in m.rows() {
                for (s, v) in sum.iter_mut().zip(r) { *s += f64::from(*v); }
            }
            let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assume!(norm > 1e-3);
            let c = kmeans_fit(&m, &params(1, seed)).unwrap();
            for (got, s) in c.centroid(0).iter().zip(&sum) {
                prop_assert!((f64::from(*got) - s / norm).abs() <= 1e-6);
            }
        }
    }
}
