//! Similarities, the facility-location objective over centroids, and the
//! per-centroid candidate index that drives each selection round.

use std::cmp::Ordering;
use std::ops::Range;

use rayon::prelude::*;

use crate::clustering::CentroidSet;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

/// Default byte budget for one materialized similarity block.
pub const DEFAULT_BLOCK_BYTES: usize = 8 << 20;
pub const DEFAULT_TOP_M: usize = 64;

/// Dot product with a fixed accumulation order: eight interleaved lanes over
/// the leading multiple of eight, a fixed pairwise fold of the lanes, then
/// the tail in sequence. The order depends only on the length, so results
/// are identical across thread counts and call sites.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ta.iter().zip(tb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `w(x, u)`: the dot product of two unit vectors.
pub fn similarity(x: &[f32], u: &[f32]) -> Result<f32> {
    if x.len() != u.len() {
        return Err(Error::DimMismatch {
            expected: x.len(),
            found: u.len(),
        });
    }
    Ok(dot(x, u))
}

/// An open-set row paired with its similarity to some centroid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub similarity: f32,
}

/// Ranking order used everywhere: higher similarity first, then lower index.
#[inline]
pub fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.similarity
        .partial_cmp(&a.similarity)
        .unwrap_or(Ordering::Equal)
        .then(a.index.cmp(&b.index))
}

/// Similarities between a range of centroids and a range of open-set rows,
/// stored centroid-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBlock {
    pub centroid_range: Range<usize>,
    pub candidate_range: Range<usize>,
    pub values: Vec<f32>,
}

impl SimilarityBlock {
    pub fn width(&self) -> usize {
        self.candidate_range.len()
    }

    /// Similarity of centroid `centroid_range.start + i` to open row
    /// `candidate_range.start + j`.
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.width() + j]
    }

    pub fn centroid_row(&self, i: usize) -> &[f32] {
        let w = self.width();
        &self.values[i * w..(i + 1) * w]
    }
}

/// Open-set rows per block such that `rows × centroids × 4` bytes stays
/// within `max_bytes` (at least one row).
pub fn block_rows(centroids: usize, max_bytes: usize) -> usize {
    (max_bytes / (centroids.max(1) * std::mem::size_of::<f32>())).max(1)
}

fn fill_block(cents: &[&[f32]], open: &EmbeddingMatrix, range: Range<usize>) -> Vec<f32> {
    let w = range.len();
    let mut values = vec![0f32; cents.len() * w];
    for (j, u) in range.enumerate() {
        let row = open.row(u);
        for (i, c) in cents.iter().enumerate() {
            values[i * w + j] = dot(c, row);
        }
    }
    values
}

/// Similarities of every centroid against `open[candidate_range]`.
pub fn similarity_block(
    centroids: &CentroidSet,
    open: &EmbeddingMatrix,
    candidate_range: Range<usize>,
) -> Result<SimilarityBlock> {
    let cm = centroids.matrix();
    check_dims(cm, open)?;
    if candidate_range.start > candidate_range.end || candidate_range.end > open.count() {
        return Err(Error::OutOfBounds {
            index: candidate_range.end,
            len: open.count(),
        });
    }
    let cents: Vec<&[f32]> = cm.rows().collect();
    Ok(SimilarityBlock {
        centroid_range: 0..cm.count(),
        values: fill_block(&cents, open, candidate_range.clone()),
        candidate_range,
    })
}

/// Splits the open-set into blocks bounded by `max_bytes` and computes each.
pub fn similarity_blocks<'a>(
    centroids: &'a CentroidSet,
    open: &'a EmbeddingMatrix,
    max_bytes: usize,
) -> Result<impl Iterator<Item = SimilarityBlock> + 'a> {
    check_dims(centroids.matrix(), open)?;
    let step = block_rows(centroids.k(), max_bytes);
    let cents: Vec<&'a [f32]> = centroids.matrix().rows().collect();
    Ok((0..open.count()).step_by(step).map(move |s| {
        let r = s..(s + step).min(open.count());
        SimilarityBlock {
            centroid_range: 0..cents.len(),
            values: fill_block(&cents, open, r.clone()),
            candidate_range: r,
        }
    }))
}

fn check_dims(centroids: &EmbeddingMatrix, open: &EmbeddingMatrix) -> Result<()> {
    if centroids.dim() != open.dim() {
        return Err(Error::DimMismatch {
            expected: centroids.dim(),
            found: open.dim(),
        });
    }
    Ok(())
}

/// `f̂(S) = Σ_centroids max_{u ∈ S} w(centroid, u)`, summed in f64 in
/// centroid order.
pub fn facility_value(centroids: &CentroidSet, subset: &[usize], open: &EmbeddingMatrix) -> Result<f64> {
    facility_value_rows(centroids.matrix(), subset, open)
}

pub(crate) fn facility_value_rows(
    centroids: &EmbeddingMatrix,
    subset: &[usize],
    open: &EmbeddingMatrix,
) -> Result<f64> {
    check_dims(centroids, open)?;
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    if let Some(&bad) = subset.iter().find(|&&u| u >= open.count()) {
        return Err(Error::OutOfBounds {
            index: bad,
            len: open.count(),
        });
    }
    let mut total = 0f64;
    for c in centroids.rows() {
        let best = subset
            .iter()
            .map(|&u| dot(c, open.row(u)))
            .fold(f32::NEG_INFINITY, f32::max);
        total += f64::from(best);
    }
    Ok(total)
}

/// Bounded best-`m` collector under [`rank_order`].
struct TopM {
    m: usize,
    buf: Vec<Candidate>,
    floor: Option<Candidate>,
}

impl TopM {
    fn new(m: usize) -> Self {
        Self {
            m,
            buf: Vec::with_capacity(2 * m),
            floor: None,
        }
    }

    #[inline]
    fn push(&mut self, c: Candidate) {
        if let Some(f) = &self.floor {
            if rank_order(&c, f) != Ordering::Less {
                return;
            }
        }
        self.buf.push(c);
        if self.buf.len() >= 2 * self.m {
            self.compact();
        }
    }

    fn compact(&mut self) {
        if self.buf.len() > self.m {
            self.buf.select_nth_unstable_by(self.m - 1, rank_order);
            self.buf.truncate(self.m);
            self.floor = self.buf.iter().copied().max_by(rank_order);
        }
    }

    fn finish(mut self) -> Vec<Candidate> {
        self.compact();
        self.buf.sort_unstable_by(rank_order);
        self.buf
    }
}

/// The winners of one round: each non-exhausted centroid's best unconsumed
/// candidate, de-duplicated.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPick {
    /// Distinct winners, ascending by index. `similarity` is the highest
    /// similarity among the centroids that chose the row.
    pub members: Vec<Candidate>,
    /// Winning open-set row per centroid (`None` for exhausted centroids).
    pub winners: Vec<Option<usize>>,
    /// `f̂` of `members`.
    pub value: f64,
}

impl RoundPick {
    pub fn indices(&self) -> Vec<usize> {
        self.members.iter().map(|c| c.index).collect()
    }
}

/// Ranked candidate lists, one per centroid, over the not-yet-selected part
/// of the open-set.
///
/// Each list holds the best `top_m` unconsumed rows for its centroid at the
/// time of its last scan; consuming rows removes them from every list, which
/// keeps each list a prefix of the true ranking. A drained list is refilled
/// by rescanning the open-set, and its centroid is marked exhausted only
/// when no unconsumed row remains.
#[derive(Debug, Clone)]
pub struct CandidateIndex<'a> {
    centroids: &'a EmbeddingMatrix,
    open: &'a EmbeddingMatrix,
    top_m: usize,
    block_rows: usize,
    lists: Vec<Vec<Candidate>>,
    exhausted: Vec<bool>,
    consumed: Vec<bool>,
    consumed_count: usize,
    scans: usize,
}

impl<'a> CandidateIndex<'a> {
    pub fn build(centroids: &'a CentroidSet, open: &'a EmbeddingMatrix, top_m: usize) -> Result<Self> {
        Self::build_with_block_bytes(centroids, open, top_m, DEFAULT_BLOCK_BYTES)
    }

    pub fn build_with_block_bytes(
        centroids: &'a CentroidSet,
        open: &'a EmbeddingMatrix,
        top_m: usize,
        block_bytes: usize,
    ) -> Result<Self> {
        Self::from_rows(centroids.matrix(), open, top_m, block_bytes)
    }

    pub(crate) fn from_rows(
        centroids: &'a EmbeddingMatrix,
        open: &'a EmbeddingMatrix,
        top_m: usize,
        block_bytes: usize,
    ) -> Result<Self> {
        check_dims(centroids, open)?;
        if top_m == 0 {
            return Err(Error::Parameter("top_m must be at least 1".into()));
        }
        let k = centroids.count();
        let mut index = Self {
            centroids,
            open,
            top_m,
            block_rows: block_rows(k, block_bytes),
            lists: vec![Vec::new(); k],
            exhausted: vec![false; k],
            consumed: vec![false; open.count()],
            consumed_count: 0,
            scans: 0,
        };
        let all: Vec<usize> = (0..k).collect();
        index.rescan(&all);
        Ok(index)
    }

    pub fn k(&self) -> usize {
        self.lists.len()
    }

    pub fn top_m(&self) -> usize {
        self.top_m
    }

    /// Current ranked list of centroid `c`, best first.
    pub fn list(&self, c: usize) -> &[Candidate] {
        &self.lists[c]
    }

    pub fn is_exhausted(&self, c: usize) -> bool {
        self.exhausted[c]
    }

    pub fn is_consumed(&self, u: usize) -> bool {
        self.consumed[u]
    }

    pub fn remaining(&self) -> usize {
        self.open.count() - self.consumed_count
    }

    /// Number of open-set scans run so far, including the initial build.
    pub fn scans(&self) -> usize {
        self.scans
    }

    fn rescan(&mut self, which: &[usize]) {
        if which.is_empty() {
            return;
        }
        self.scans += 1;
        let cents: Vec<&[f32]> = which.iter().map(|&c| self.centroids.row(c)).collect();
        let (open, consumed, m, step) = (self.open, &self.consumed, self.top_m, self.block_rows);
        let starts: Vec<usize> = (0..open.count()).step_by(step).collect();
        let partials: Vec<Vec<Vec<Candidate>>> = starts
            .par_iter()
            .map(|&s| {
                let range = s..(s + step).min(open.count());
                let values = fill_block(&cents, open, range.clone());
                let w = range.len();
                (0..cents.len())
                    .map(|i| {
                        let mut top = TopM::new(m);
                        for (j, &v) in values[i * w..(i + 1) * w].iter().enumerate() {
                            let u = range.start + j;
                            if !consumed[u] {
                                top.push(Candidate {
                                    index: u,
                                    similarity: v,
                                });
                            }
                        }
                        top.finish()
                    })
                    .collect()
            })
            .collect();
        for (i, &c) in which.iter().enumerate() {
            let mut top = TopM::new(m);
            for part in &partials {
                for &cand in &part[i] {
                    top.push(cand);
                }
            }
            let list = top.finish();
            self.exhausted[c] = list.is_empty();
            self.lists[c] = list;
        }
    }

    /// Each non-exhausted centroid's best unconsumed row, de-duplicated.
    /// Does not consume anything.
    pub fn nearest_per_centroid(&self) -> Result<RoundPick> {
        let mut winners = Vec::with_capacity(self.k());
        let mut value = 0f64;
        let mut members: Vec<Candidate> = Vec::new();
        for (c, list) in self.lists.iter().enumerate() {
            if self.exhausted[c] {
                winners.push(None);
                continue;
            }
            let head = list[0];
            winners.push(Some(head.index));
            value += f64::from(head.similarity);
            members.push(head);
        }
        if members.is_empty() {
            return Err(Error::Exhausted);
        }
        members.sort_unstable_by(|a, b| a.index.cmp(&b.index).then(rank_order(a, b)));
        members.dedup_by_key(|c| c.index);
        Ok(RoundPick {
            members,
            winners,
            value,
        })
    }

    /// Marks rows as selected, drops them from every list and refills any
    /// list that drained.
    pub fn consume(&mut self, indices: &[usize]) -> Result<()> {
        if let Some(&bad) = indices.iter().find(|&&u| u >= self.open.count()) {
            return Err(Error::OutOfBounds {
                index: bad,
                len: self.open.count(),
            });
        }
        for &u in indices {
            if !self.consumed[u] {
                self.consumed[u] = true;
                self.consumed_count += 1;
            }
        }
        let consumed = &self.consumed;
        let mut drained = Vec::new();
        for (c, list) in self.lists.iter_mut().enumerate() {
            list.retain(|cand| !consumed[cand.index]);
            if list.is_empty() && !self.exhausted[c] {
                drained.push(c);
            }
        }
        self.rescan(&drained);
        Ok(())
    }
}
