//! Exact top-k inner-product retrieval, deterministic retrieval-error
//! injection, and uniform tail sampling.
//!
//! This is the oracle the estimators are studied against: `exact_top_k`
//! always returns the true head set, `inject_retrieval_error` deletes
//! chosen ranks from it (back-filling with the next-best vectors so the
//! head size stays fixed), and `sample_tail` draws the uniform sample of
//! the remaining vectors that the importance-weighted estimators need.

use std::collections::{BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::numeric::dot;

/// Ranked result of a top-k query: indices sorted by descending inner
/// product, ties broken by ascending index. `clamped` is set when the
/// requested `k` exceeded `N` and was reduced.
#[derive(Clone, Debug, PartialEq)]
pub struct TopKResult {
    indices: Vec<usize>,
    scores: Vec<f64>,
    clamped: bool,
}

impl TopKResult {
    pub(crate) fn from_ranked(indices: Vec<usize>, scores: Vec<f64>, clamped: bool) -> TopKResult {
        debug_assert_eq!(indices.len(), scores.len());
        TopKResult {
            indices,
            scores,
            clamped,
        }
    }

    /// Head of size zero, for the uniform estimator special case.
    pub fn empty() -> TopKResult {
        TopKResult {
            indices: Vec::new(),
            scores: Vec::new(),
            clamped: false,
        }
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn clamped(&self) -> bool {
        self.clamped
    }
}

/// `true` when `(score_a, idx_a)` ranks strictly better than
/// `(score_b, idx_b)`: higher score first, ascending index on ties.
#[inline]
pub(crate) fn ranks_before(score_a: f64, idx_a: usize, score_b: f64, idx_b: usize) -> bool {
    score_a > score_b || (score_a == score_b && idx_a < idx_b)
}

/// Exact top-k by full scan, `O(N log k)` after the `O(N·d)` scoring pass.
///
/// `k > N` clamps to `N` and flags the result.
pub fn exact_top_k(v: &EmbeddingMatrix, q: &[f64], k: usize) -> Result<TopKResult> {
    if k == 0 {
        return Err(Error::invalid("k", "must be >= 1 (use TopKResult::empty for k = 0)"));
    }
    if q.len() != v.dim() {
        return Err(Error::DimMismatch {
            expected: v.dim(),
            got: q.len(),
        });
    }
    let n = v.n_vectors();
    let clamped = k > n;
    let k = k.min(n);

    // fixed-size selection buffer ordered worst-first
    let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for i in 0..n {
        let score = dot(v.row(i), q);
        if heap.len() < k {
            heap.push((score, i));
            if heap.len() == k {
                heap.sort_unstable_by(|a, b| rank_order(*a, *b));
            }
            continue;
        }
        let worst = heap[k - 1];
        if ranks_before(score, i, worst.0, worst.1) {
            // insert in ranked position, drop the worst
            let pos = heap.partition_point(|&(s, j)| ranks_before(s, j, score, i));
            heap.insert(pos, (score, i));
            heap.pop();
        }
    }
    let indices = heap.iter().map(|&(_, i)| i).collect();
    let scores = heap.iter().map(|&(s, _)| s).collect();
    Ok(TopKResult::from_ranked(indices, scores, clamped))
}

fn rank_order(a: (f64, usize), b: (f64, usize)) -> std::cmp::Ordering {
    if ranks_before(a.0, a.1, b.0, b.1) {
        std::cmp::Ordering::Less
    } else if ranks_before(b.0, b.1, a.0, a.1) {
        std::cmp::Ordering::Greater
    } else {
        std::cmp::Ordering::Equal
    }
}

/// Which 1-based ranks to delete from a true top-k result.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RetrievalErrorSpec {
    dropped_ranks: BTreeSet<usize>,
}

impl RetrievalErrorSpec {
    pub fn none() -> RetrievalErrorSpec {
        RetrievalErrorSpec::default()
    }

    pub fn new<I: IntoIterator<Item = usize>>(ranks: I) -> Result<RetrievalErrorSpec> {
        let dropped_ranks: BTreeSet<usize> = ranks.into_iter().collect();
        if dropped_ranks.contains(&0) {
            return Err(Error::invalid("dropped_ranks", "ranks are 1-based"));
        }
        Ok(RetrievalErrorSpec { dropped_ranks })
    }

    pub fn dropped_ranks(&self) -> &BTreeSet<usize> {
        &self.dropped_ranks
    }

    pub fn len(&self) -> usize {
        self.dropped_ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dropped_ranks.is_empty()
    }

    /// "none" or the space-joined rank list, e.g. "1 2".
    pub fn describe(&self) -> String {
        if self.dropped_ranks.is_empty() {
            "none".to_string()
        } else {
            self.dropped_ranks
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(" ")
        }
    }
}

/// Simulate an imperfect retriever: delete the specified true ranks from
/// the head and back-fill with the next-best vectors, so the returned head
/// still has `k` entries and stays sorted.
pub fn inject_retrieval_error(
    truth: &TopKResult,
    spec: &RetrievalErrorSpec,
    v: &EmbeddingMatrix,
    q: &[f64],
) -> Result<TopKResult> {
    if spec.is_empty() {
        return Ok(truth.clone());
    }
    let k = truth.k();
    let m = spec.len();
    let extended_len = k + m;
    if let Some(&max_rank) = spec.dropped_ranks.iter().next_back() {
        if max_rank > extended_len {
            return Err(Error::UnreachableRank {
                rank: max_rank,
                max: extended_len,
            });
        }
    }
    if extended_len > v.n_vectors() {
        return Err(Error::invalid(
            "dropped_ranks",
            format!(
                "k + dropped = {} exceeds {} vectors; nothing left to back-fill with",
                extended_len,
                v.n_vectors()
            ),
        ));
    }
    let extended = exact_top_k(v, q, extended_len)?;
    let mut indices = Vec::with_capacity(k);
    let mut scores = Vec::with_capacity(k);
    for (pos, (&idx, &score)) in extended.indices().iter().zip(extended.scores()).enumerate() {
        let rank = pos + 1;
        if !spec.dropped_ranks.contains(&rank) {
            indices.push(idx);
            scores.push(score);
        }
    }
    indices.truncate(k);
    scores.truncate(k);
    Ok(TopKResult::from_ranked(indices, scores, false))
}

/// Uniform sample (without replacement) from the complement of an
/// excluded index set. Scores are the inner products with `query` when one
/// is supplied.
#[derive(Clone, Debug, PartialEq)]
pub struct TailSample {
    indices: Vec<usize>,
    scores: Option<Vec<f64>>,
}

impl TailSample {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn scores(&self) -> Option<&[f64]> {
        self.scores.as_deref()
    }

    pub fn empty() -> TailSample {
        TailSample {
            indices: Vec::new(),
            scores: Some(Vec::new()),
        }
    }
}

/// Draw `l` distinct indices uniformly from `[0, N) \ exclude`,
/// deterministic per seed. When `l` is small relative to the complement a
/// rejection loop against a hash set is used; otherwise a partial
/// Fisher-Yates shuffle of the complement. Both are exactly uniform.
pub fn sample_tail(
    v: &EmbeddingMatrix,
    exclude: &[usize],
    l: usize,
    seed: u64,
    query: Option<&[f64]>,
) -> Result<TailSample> {
    let n = v.n_vectors();
    let excluded: HashSet<usize> = exclude.iter().copied().collect();
    if let Some(&bad) = exclude.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index: bad, n });
    }
    let available = n - excluded.len();
    if l > available {
        return Err(Error::TailTooLarge {
            requested: l,
            available,
        });
    }
    if let Some(q) = query {
        if q.len() != v.dim() {
            return Err(Error::DimMismatch {
                expected: v.dim(),
                got: q.len(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize>;
    if l * 8 <= available {
        // sparse draw: rejection against the exclusion set
        let mut picked = HashSet::with_capacity(l * 2);
        indices = Vec::with_capacity(l);
        while indices.len() < l {
            let cand = rng.random_range(0..n);
            if excluded.contains(&cand) || !picked.insert(cand) {
                continue;
            }
            indices.push(cand);
        }
    } else {
        // dense draw: partial Fisher-Yates over the complement
        let mut pool: Vec<usize> = (0..n).filter(|i| !excluded.contains(i)).collect();
        for i in 0..l {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(l);
        indices = pool;
    }

    let scores = query.map(|q| indices.iter().map(|&i| dot(v.row(i), q)).collect());
    Ok(TailSample { indices, scores })
}
