//! Exact top-K similarity search over the corpus.
//!
//! Scores are dot products of unit vectors (cosine). The scan is exact and
//! deterministic: ties break by ascending id, and the sharded parallel path
//! merges partial results with the same total order as the serial scan, so
//! results are identical at any worker count.

use std::collections::HashSet;

use rayon::prelude::*;

use crate::corpus::CorpusIndex;
use crate::error::{Error, Result};

/// One search hit.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredHit {
    pub id: String,
    pub row: u32,
    pub score: f32,
    /// 1-based position in the ranked list.
    pub rank: usize,
}

/// Ranked result of one exact scan with an exclusion set applied.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub hits: Vec<ScoredHit>,
    pub excluded: usize,
}

impl RankedList {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.id.as_str())
    }
}

/// Rank of a target under the deterministic order, or a distinct signal that
/// the target was excluded from the scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankOutcome {
    Rank(usize),
    Excluded,
}

impl RankOutcome {
    pub fn rank(self) -> Option<usize> {
        match self {
            RankOutcome::Rank(r) => Some(r),
            RankOutcome::Excluded => None,
        }
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    score: f32,
    tie: u32,
    row: u32,
}

/// `a` strictly better than `b`: higher score first, then ascending id.
#[inline]
fn better(a: Candidate, b: Candidate) -> bool {
    match a.score.total_cmp(&b.score) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => a.tie < b.tie,
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Four accumulators: fixed summation order, deterministic across runs
    // and across thread counts.
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0f32;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn scan_range(
    index: &CorpusIndex,
    query: &[f32],
    k: usize,
    exclude: &HashSet<u32>,
    rows: std::ops::Range<usize>,
) -> Vec<Candidate> {
    let dim = index.dim();
    let order = index.id_order();
    let vectors = index.vectors();
    let mut best: Vec<Candidate> = Vec::with_capacity(k + 1);
    for row in rows {
        let r = row as u32;
        if exclude.contains(&r) {
            continue;
        }
        let score = dot(query, &vectors[row * dim..(row + 1) * dim]);
        let cand = Candidate { score, tie: order[row], row: r };
        if best.len() < k {
            best.push(cand);
            best.sort_by(|a, b| if better(*a, *b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
        } else if better(cand, best[k - 1]) {
            best[k - 1] = cand;
            let mut i = k - 1;
            while i > 0 && better(best[i], best[i - 1]) {
                best.swap(i, i - 1);
                i -= 1;
            }
        }
    }
    best
}

/// The K highest-scoring items not in `exclude`, deterministically ordered.
/// Returns `min(K, corpus − |excluded ∩ corpus|)` hits.
pub fn top_k(
    index: &CorpusIndex,
    query: &[f32],
    k: usize,
    exclude: &HashSet<u32>,
) -> Result<RankedList> {
    if k < 1 {
        return Err(Error::InvalidConfig("top_k requires K >= 1".into()));
    }
    if query.len() != index.dim() {
        return Err(Error::DimensionMismatch {
            expected: index.dim(),
            got: query.len(),
            context: "top_k query",
        });
    }

    let n = index.len();
    let workers = rayon::current_num_threads().max(1);
    let mut merged: Vec<Candidate> = if workers == 1 || n < 4096 {
        scan_range(index, query, k, exclude, 0..n)
    } else {
        let chunk = n.div_ceil(workers);
        let ranges: Vec<std::ops::Range<usize>> = (0..workers)
            .map(|w| (w * chunk).min(n)..((w + 1) * chunk).min(n))
            .filter(|r| !r.is_empty())
            .collect();
        let mut partials: Vec<Candidate> = ranges
            .into_par_iter()
            .map(|r| scan_range(index, query, k, exclude, r))
            .reduce(Vec::new, |mut a, b| {
                a.extend(b);
                a
            });
        partials.sort_by(|a, b| {
            if better(*a, *b) {
                std::cmp::Ordering::Less
            } else {
                std::cmp::Ordering::Greater
            }
        });
        partials.truncate(k);
        partials
    };
    merged.truncate(k);

    let hits = merged
        .into_iter()
        .enumerate()
        .map(|(i, c)| ScoredHit {
            id: index.id(c.row).to_string(),
            row: c.row,
            score: c.score,
            rank: i + 1,
        })
        .collect();
    Ok(RankedList { hits, excluded: exclude.len() })
}

/// 1-based rank of `target` under the same deterministic order applied by
/// [`top_k`]; the target sitting in the exclusion set is signaled distinctly.
pub fn rank_of(
    index: &CorpusIndex,
    query: &[f32],
    target: &str,
    exclude: &HashSet<u32>,
) -> Result<RankOutcome> {
    let target_row = index.row_of(target)?;
    if exclude.contains(&target_row) {
        return Ok(RankOutcome::Excluded);
    }
    if query.len() != index.dim() {
        return Err(Error::DimensionMismatch {
            expected: index.dim(),
            got: query.len(),
            context: "rank_of query",
        });
    }
    let dim = index.dim();
    let vectors = index.vectors();
    let order = index.id_order();
    let target_cand = Candidate {
        score: dot(query, index.vector(target_row)),
        tie: order[target_row as usize],
        row: target_row,
    };
    let ahead: usize = (0..index.len())
        .into_par_iter()
        .filter(|&row| {
            let r = row as u32;
            if r == target_row || exclude.contains(&r) {
                return false;
            }
            let cand = Candidate {
                score: dot(query, &vectors[row * dim..(row + 1) * dim]),
                tie: order[row],
                row: r,
            };
            better(cand, target_cand)
        })
        .count();
    Ok(RankOutcome::Rank(ahead + 1))
}
