//! Approximate maximum-inner-product search.
//!
//! Inner-product ranking against a query `q` reduces to Euclidean
//! nearest-neighbor ranking by augmenting every vector to
//! `ṽᵢ = [vᵢ ; √(Φ² − ‖vᵢ‖²)]` with `Φ = maxᵢ ‖vᵢ‖` and querying with
//! `q̃ = [q ; 0]`: then `‖ṽᵢ − q̃‖² = Φ² + ‖q‖² − 2·vᵢ·q`, so distance
//! order and inner-product order coincide for every query.
//!
//! The augmented points are indexed with a hierarchical k-means tree
//! (k-means++ seeding, Lloyd refinement, empty clusters repaired by
//! stealing the farthest point from the largest cluster). Search keeps a
//! priority queue of unexplored subtrees ordered by centroid distance and
//! scores leaf candidates by their true inner product until the
//! [`SearchBudget`] is spent — candidates are re-ranked exactly, the tree
//! only decides which ones get scored. With a budget covering all N points
//! the search drains the queue and returns exactly [`oracle::exact_top_k`].
//!
//! The tree serializes to a single little-endian file (see
//! [`read_index`] for the layout); deserialization validates structure,
//! bounds, and the leaf partition before the index is usable.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{EmbeddingMatrix, QuerySet};
use crate::error::{Error, Result};
use crate::numeric::{derive_seed, dot, norm, squared_distance};
use crate::oracle::{exact_top_k, ranks_before, TopKResult};

/// Depth at which splitting stops regardless of leaf size; keeps
/// degenerate inputs (many identical rows) from recursing linearly.
const MAX_DEPTH: usize = 64;

/// Lloyd iteration cap per node.
const MAX_KMEANS_ITERS: usize = 25;

/// How many candidate points a search may score before stopping. The
/// budget counts scored candidates, not visited nodes, so accuracy/speed
/// trade-offs are comparable across machines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchBudget {
    max_leaf_checks: usize,
}

impl SearchBudget {
    pub fn new(max_leaf_checks: usize) -> Result<SearchBudget> {
        if max_leaf_checks == 0 {
            return Err(Error::invalid("max_leaf_checks", "must be >= 1"));
        }
        Ok(SearchBudget { max_leaf_checks })
    }

    /// A budget that degenerates the search to an exact scan.
    pub fn exhaustive() -> SearchBudget {
        SearchBudget {
            max_leaf_checks: usize::MAX,
        }
    }

    pub fn max_leaf_checks(&self) -> usize {
        self.max_leaf_checks
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TreeParams {
    pub branching: usize,
    pub leaf_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Leaf {
        indices: Vec<usize>,
    },
    Internal {
        /// Child centroids, flattened rows of `aug_dim` values.
        centroids: Vec<f64>,
        children: Vec<Node>,
    },
}

/// K-means tree over augmented vectors, bound to the matrix it indexes.
#[derive(Clone, Debug)]
pub struct AugmentedIndex {
    data: Arc<EmbeddingMatrix>,
    phi: f64,
    params: TreeParams,
    root: Node,
}

impl AugmentedIndex {
    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn params(&self) -> TreeParams {
        self.params
    }

    pub fn data(&self) -> &Arc<EmbeddingMatrix> {
        &self.data
    }

    /// Every row index, gathered leaf by leaf. Used by the partition
    /// audit; order is deterministic.
    pub fn leaf_indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.data.n_vectors());
        collect_leaves(&self.root, &mut out);
        out
    }
}

fn collect_leaves(node: &Node, out: &mut Vec<usize>) {
    match node {
        Node::Leaf { indices } => out.extend_from_slice(indices),
        Node::Internal { children, .. } => {
            for c in children {
                collect_leaves(c, out);
            }
        }
    }
}

/// Augmented coordinate `√(Φ² − ‖v‖²)` for every row, plus Φ itself.
fn augment(data: &EmbeddingMatrix) -> (Vec<f64>, f64) {
    let n = data.n_vectors();
    let norms: Vec<f64> = (0..n).map(|i| norm(data.row(i))).collect();
    let phi = norms.iter().copied().fold(0.0f64, f64::max);
    let d = data.dim();
    let mut aug = Vec::with_capacity(n * (d + 1));
    for i in 0..n {
        aug.extend_from_slice(data.row(i));
        aug.push((phi * phi - norms[i] * norms[i]).max(0.0).sqrt());
    }
    (aug, phi)
}

/// Build the index: recursive k-means partitioning of the augmented rows
/// until every partition fits in a leaf. Deterministic for a fixed seed —
/// each node derives its own RNG stream, so sibling subtrees could be
/// built on any number of workers without changing the result.
pub fn build_index(
    data: Arc<EmbeddingMatrix>,
    branching: usize,
    leaf_size: usize,
    seed: u64,
) -> Result<AugmentedIndex> {
    if branching < 2 {
        return Err(Error::invalid("branching", "must be >= 2"));
    }
    if leaf_size == 0 {
        return Err(Error::invalid("leaf_size", "must be >= 1"));
    }
    let (aug, phi) = augment(&data);
    let aug_dim = data.dim() + 1;
    let indices: Vec<usize> = (0..data.n_vectors()).collect();
    let root = split(
        &aug,
        aug_dim,
        indices,
        branching,
        leaf_size,
        derive_seed(seed, 0),
        0,
    );
    Ok(AugmentedIndex {
        data,
        phi,
        params: TreeParams {
            branching,
            leaf_size,
            seed,
        },
        root,
    })
}

fn split(
    aug: &[f64],
    aug_dim: usize,
    mut indices: Vec<usize>,
    branching: usize,
    leaf_size: usize,
    node_seed: u64,
    depth: usize,
) -> Node {
    if indices.len() <= leaf_size || depth >= MAX_DEPTH {
        indices.sort_unstable();
        return Node::Leaf { indices };
    }
    let b = branching.min(indices.len());
    let (centroids, clusters) = kmeans(aug, aug_dim, &indices, b, node_seed);
    let children: Vec<Node> = clusters
        .into_iter()
        .enumerate()
        .map(|(c, cluster)| {
            split(
                aug,
                aug_dim,
                cluster,
                branching,
                leaf_size,
                derive_seed(node_seed, c as u64 + 1),
                depth + 1,
            )
        })
        .collect();
    Node::Internal {
        centroids,
        children,
    }
}

fn point(aug: &[f64], aug_dim: usize, i: usize) -> &[f64] {
    &aug[i * aug_dim..(i + 1) * aug_dim]
}

/// Lloyd's algorithm with k-means++ seeding over the subset `indices`.
/// Ties always break toward the lower cluster ordinal, empty clusters
/// steal the farthest point from the largest cluster, so the outcome is a
/// pure function of the inputs.
fn kmeans(
    aug: &[f64],
    aug_dim: usize,
    indices: &[usize],
    b: usize,
    seed: u64,
) -> (Vec<f64>, Vec<Vec<usize>>) {
    let n = indices.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids = Vec::with_capacity(b * aug_dim);
    let first = indices[rng.random_range(0..n)];
    centroids.extend_from_slice(point(aug, aug_dim, first));
    let mut min_dist: Vec<f64> = indices
        .iter()
        .map(|&i| squared_distance(point(aug, aug_dim, i), &centroids[0..aug_dim]))
        .collect();
    for c in 1..b {
        let total: f64 = min_dist.iter().sum();
        let picked = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (pos, &w) in min_dist.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = pos;
                    break;
                }
            }
            chosen
        } else {
            // all remaining points coincide with a centroid
            rng.random_range(0..n)
        };
        let row = point(aug, aug_dim, indices[picked]);
        centroids.extend_from_slice(row);
        for (pos, &i) in indices.iter().enumerate() {
            let dist = squared_distance(point(aug, aug_dim, i), row);
            if dist < min_dist[pos] {
                min_dist[pos] = dist;
            }
        }
        let _ = c;
    }

    // Lloyd refinement
    let mut assignment = vec![0usize; n];
    for _ in 0..MAX_KMEANS_ITERS {
        let mut changed = false;
        for (pos, &i) in indices.iter().enumerate() {
            let p = point(aug, aug_dim, i);
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for c in 0..b {
                let dist = squared_distance(p, &centroids[c * aug_dim..(c + 1) * aug_dim]);
                if dist < best_dist {
                    best_dist = dist;
                    best = c;
                }
            }
            if assignment[pos] != best {
                assignment[pos] = best;
                changed = true;
            }
        }

        // recompute means
        let mut sums = vec![0.0f64; b * aug_dim];
        let mut counts = vec![0usize; b];
        for (pos, &i) in indices.iter().enumerate() {
            let c = assignment[pos];
            counts[c] += 1;
            let p = point(aug, aug_dim, i);
            for (s, &x) in sums[c * aug_dim..(c + 1) * aug_dim].iter_mut().zip(p) {
                *s += x;
            }
        }

        // repair empty clusters: steal the farthest point from the largest
        for c in 0..b {
            if counts[c] > 0 {
                continue;
            }
            let donor = (0..b).max_by_key(|&x| counts[x]).expect("b >= 1");
            let mut far_pos = usize::MAX;
            let mut far_dist = -1.0;
            for (pos, &i) in indices.iter().enumerate() {
                if assignment[pos] != donor {
                    continue;
                }
                let dist = squared_distance(
                    point(aug, aug_dim, i),
                    &centroids[donor * aug_dim..(donor + 1) * aug_dim],
                );
                if dist > far_dist {
                    far_dist = dist;
                    far_pos = pos;
                }
            }
            let i = indices[far_pos];
            let p = point(aug, aug_dim, i);
            for (s, &x) in sums[donor * aug_dim..(donor + 1) * aug_dim]
                .iter_mut()
                .zip(p)
            {
                *s -= x;
            }
            counts[donor] -= 1;
            for (s, &x) in sums[c * aug_dim..(c + 1) * aug_dim].iter_mut().zip(p) {
                *s += x;
            }
            counts[c] = 1;
            assignment[far_pos] = c;
            changed = true;
        }

        for c in 0..b {
            if counts[c] > 0 {
                for (dst, src) in centroids[c * aug_dim..(c + 1) * aug_dim]
                    .iter_mut()
                    .zip(&sums[c * aug_dim..(c + 1) * aug_dim])
                {
                    *dst = src / counts[c] as f64;
                }
            }
        }

        if !changed {
            break;
        }
    }

    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); b];
    for (pos, &i) in indices.iter().enumerate() {
        clusters[assignment[pos]].push(i);
    }
    (centroids, clusters)
}

struct QueueEntry<'a> {
    dist: f64,
    seq: usize,
    node: &'a Node,
}

impl PartialEq for QueueEntry<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.dist == other.dist && self.seq == other.seq
    }
}
impl Eq for QueueEntry<'_> {}
impl PartialOrd for QueueEntry<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueueEntry<'_> {
    // reversed so the BinaryHeap pops the nearest subtree first; seq keeps
    // the order total and deterministic on distance ties
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .partial_cmp(&self.dist)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl AugmentedIndex {
    /// Budgeted approximate top-k: explore subtrees nearest to `[q ; 0]`
    /// first, score at most `budget` leaf candidates by true inner
    /// product, return the best k found.
    pub fn approx_top_k(&self, q: &[f64], k: usize, budget: SearchBudget) -> Result<TopKResult> {
        if k == 0 {
            return Err(Error::invalid("k", "must be >= 1"));
        }
        if q.len() != self.data.dim() {
            return Err(Error::DimMismatch {
                expected: self.data.dim(),
                got: q.len(),
            });
        }
        let n = self.data.n_vectors();
        let clamped = k > n;
        let k = k.min(n);

        let mut q_aug = Vec::with_capacity(q.len() + 1);
        q_aug.extend_from_slice(q);
        q_aug.push(0.0);

        let mut queue: BinaryHeap<QueueEntry> = BinaryHeap::new();
        let mut seq = 0usize;
        queue.push(QueueEntry {
            dist: 0.0,
            seq,
            node: &self.root,
        });

        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let mut scored = 0usize;
        'search: while let Some(entry) = queue.pop() {
            match entry.node {
                Node::Internal {
                    centroids,
                    children,
                } => {
                    let aug_dim = self.data.dim() + 1;
                    for (c, child) in children.iter().enumerate() {
                        seq += 1;
                        queue.push(QueueEntry {
                            dist: squared_distance(
                                &q_aug,
                                &centroids[c * aug_dim..(c + 1) * aug_dim],
                            ),
                            seq,
                            node: child,
                        });
                    }
                }
                Node::Leaf { indices } => {
                    for &i in indices {
                        let score = dot(self.data.row(i), q);
                        insert_candidate(&mut best, k, score, i);
                        scored += 1;
                        if scored >= budget.max_leaf_checks {
                            break 'search;
                        }
                    }
                }
            }
        }
        let indices = best.iter().map(|&(_, i)| i).collect();
        let scores = best.iter().map(|&(s, _)| s).collect();
        Ok(TopKResult::from_ranked(indices, scores, clamped))
    }
}

fn insert_candidate(best: &mut Vec<(f64, usize)>, k: usize, score: f64, idx: usize) {
    if best.len() == k {
        let worst = best[k - 1];
        if !ranks_before(score, idx, worst.0, worst.1) {
            return;
        }
        best.pop();
    }
    let pos = best.partition_point(|&(s, j)| ranks_before(s, j, score, idx));
    best.insert(pos, (score, idx));
}

/// Wall-clock comparison of brute-force scanning vs the index, averaged
/// over a query set; recall against the exact oracle is reported alongside
/// because one number is meaningless without the other.
#[derive(Clone, Copy, Debug)]
pub struct SpeedupReport {
    pub speedup: f64,
    pub recall: f64,
    pub brute_seconds: f64,
    pub index_seconds: f64,
}

pub fn measure_speedup(
    index: &AugmentedIndex,
    v: &EmbeddingMatrix,
    queries: &QuerySet,
    k: usize,
    budget: SearchBudget,
) -> Result<SpeedupReport> {
    if v.n_vectors() != index.data.n_vectors() || v.dim() != index.data.dim() {
        return Err(Error::invalid(
            "index",
            "index was built over a different matrix shape",
        ));
    }
    if queries.is_empty() {
        return Err(Error::invalid("queries", "query set is empty"));
    }
    let mut exact_results = Vec::with_capacity(queries.len());
    let brute_start = Instant::now();
    for qi in 0..queries.len() {
        exact_results.push(exact_top_k(v, queries.row(qi), k)?);
    }
    let brute_seconds = brute_start.elapsed().as_secs_f64();

    let mut approx_results = Vec::with_capacity(queries.len());
    let index_start = Instant::now();
    for qi in 0..queries.len() {
        approx_results.push(index.approx_top_k(queries.row(qi), k, budget)?);
    }
    let index_seconds = index_start.elapsed().as_secs_f64();

    let mut recall_sum = 0.0;
    for (exact, approx) in exact_results.iter().zip(&approx_results) {
        let truth: std::collections::HashSet<usize> =
            exact.indices().iter().copied().collect();
        let hit = approx
            .indices()
            .iter()
            .filter(|i| truth.contains(i))
            .count();
        recall_sum += hit as f64 / exact.k().max(1) as f64;
    }
    Ok(SpeedupReport {
        speedup: brute_seconds / index_seconds.max(f64::MIN_POSITIVE),
        recall: recall_sum / queries.len() as f64,
        brute_seconds,
        index_seconds,
    })
}

// ---------------------------------------------------------------------------
// serialization
//
// Little-endian layout:
//   magic "ZHKT" | version u32 = 1 | branching u32 | leaf_size u32 |
//   seed u64 | n_vectors u64 | dim u32 | phi f64 | root node
// node:
//   tag u8: 0 = leaf | 1 = internal
//   leaf:     count u64, count × row index u64
//   internal: child_count u32, child_count × (dim+1) × centroid f64,
//             child_count × node
// ---------------------------------------------------------------------------

const IDX_MAGIC: &[u8; 4] = b"ZHKT";
const IDX_VERSION: u32 = 1;
const MAX_READ_DEPTH: usize = 512;

/// Index file contents before being bound to an embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexFile {
    params: TreeParams,
    n_vectors: u64,
    dim: u32,
    phi: f64,
    root: Node,
}

impl AugmentedIndex {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = BufWriter::new(File::create(path)?);
        self.write(&mut writer)?;
        writer.flush()?;
        Ok(())
    }

    pub fn write<W: Write>(&self, writer: &mut W) -> Result<()> {
        writer.write_all(IDX_MAGIC)?;
        writer.write_all(&IDX_VERSION.to_le_bytes())?;
        writer.write_all(&(self.params.branching as u32).to_le_bytes())?;
        writer.write_all(&(self.params.leaf_size as u32).to_le_bytes())?;
        writer.write_all(&self.params.seed.to_le_bytes())?;
        writer.write_all(&(self.data.n_vectors() as u64).to_le_bytes())?;
        writer.write_all(&(self.data.dim() as u32).to_le_bytes())?;
        writer.write_all(&self.phi.to_le_bytes())?;
        write_node(&self.root, self.data.dim() + 1, writer)
    }

    /// Load an index file and bind it to the matrix it was built over.
    /// Shape, leaf partition, and Φ are all validated against `data`.
    pub fn load(path: impl AsRef<Path>, data: Arc<EmbeddingMatrix>) -> Result<AugmentedIndex> {
        let mut reader = BufReader::new(File::open(path)?);
        let file = read_index(&mut reader)?;
        file.bind(data)
    }
}

impl IndexFile {
    pub fn params(&self) -> TreeParams {
        self.params
    }

    pub fn n_vectors(&self) -> u64 {
        self.n_vectors
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    /// Attach to the data matrix, re-checking everything that depends on
    /// it: shape, the leaf partition, and the stored Φ.
    pub fn bind(self, data: Arc<EmbeddingMatrix>) -> Result<AugmentedIndex> {
        if data.n_vectors() as u64 != self.n_vectors || data.dim() as u32 != self.dim {
            return Err(Error::CorruptIndex(format!(
                "index is over a {}x{} matrix, data is {}x{}",
                self.n_vectors,
                self.dim,
                data.n_vectors(),
                data.dim()
            )));
        }
        let n = data.n_vectors();
        let mut seen = vec![false; n];
        let mut stack = vec![&self.root];
        while let Some(node) = stack.pop() {
            match node {
                Node::Leaf { indices } => {
                    for &i in indices {
                        if i >= n || seen[i] {
                            return Err(Error::CorruptIndex(format!(
                                "leaf partition broken at row {i}"
                            )));
                        }
                        seen[i] = true;
                    }
                }
                Node::Internal { children, .. } => stack.extend(children.iter()),
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::CorruptIndex("leaf partition misses rows".into()));
        }
        let phi_data = (0..n).map(|i| norm(data.row(i))).fold(0.0f64, f64::max);
        if (phi_data - self.phi).abs() > 1e-9 * phi_data.max(1.0) {
            return Err(Error::CorruptIndex(format!(
                "stored phi {} does not match data phi {phi_data}",
                self.phi
            )));
        }
        Ok(AugmentedIndex {
            data,
            phi: self.phi,
            params: self.params,
            root: self.root,
        })
    }
}

fn write_node<W: Write>(node: &Node, aug_dim: usize, writer: &mut W) -> Result<()> {
    match node {
        Node::Leaf { indices } => {
            writer.write_all(&[0u8])?;
            writer.write_all(&(indices.len() as u64).to_le_bytes())?;
            for &i in indices {
                writer.write_all(&(i as u64).to_le_bytes())?;
            }
        }
        Node::Internal {
            centroids,
            children,
        } => {
            writer.write_all(&[1u8])?;
            writer.write_all(&(children.len() as u32).to_le_bytes())?;
            debug_assert_eq!(centroids.len(), children.len() * aug_dim);
            for c in centroids {
                writer.write_all(&c.to_le_bytes())?;
            }
            for child in children {
                write_node(child, aug_dim, writer)?;
            }
        }
    }
    Ok(())
}

/// Parse an index file from untrusted bytes. Structure is validated as it
/// is read (tags, counts, depth, finite centroids); the data-dependent
/// checks happen in [`IndexFile::bind`].
pub fn read_index<R: BufRead>(reader: &mut R) -> Result<IndexFile> {
    let mut magic = [0u8; 4];
    idx_read(reader, &mut magic, "magic")?;
    if &magic != IDX_MAGIC {
        return Err(Error::CorruptIndex("bad magic".into()));
    }
    let version = idx_u32(reader)?;
    if version != IDX_VERSION {
        return Err(Error::CorruptIndex(format!("unsupported version {version}")));
    }
    let branching = idx_u32(reader)? as usize;
    let leaf_size = idx_u32(reader)? as usize;
    if branching < 2 || leaf_size == 0 {
        return Err(Error::CorruptIndex(format!(
            "invalid params: branching {branching}, leaf_size {leaf_size}"
        )));
    }
    let seed = idx_u64(reader)?;
    let n_vectors = idx_u64(reader)?;
    let dim = idx_u32(reader)?;
    if n_vectors == 0 || dim == 0 {
        return Err(Error::CorruptIndex("empty index".into()));
    }
    let phi = idx_f64(reader)?;
    if !phi.is_finite() || phi < 0.0 {
        return Err(Error::CorruptIndex(format!("invalid phi {phi}")));
    }
    let root = read_node(reader, dim as usize + 1, branching, n_vectors, 0)?;
    Ok(IndexFile {
        params: TreeParams {
            branching,
            leaf_size,
            seed,
        },
        n_vectors,
        dim,
        phi,
        root,
    })
}

fn read_node<R: BufRead>(
    reader: &mut R,
    aug_dim: usize,
    branching: usize,
    n_vectors: u64,
    depth: usize,
) -> Result<Node> {
    if depth > MAX_READ_DEPTH {
        return Err(Error::CorruptIndex("tree deeper than the format allows".into()));
    }
    let mut tag = [0u8; 1];
    idx_read(reader, &mut tag, "node tag")?;
    match tag[0] {
        0 => {
            let count = idx_u64(reader)?;
            if count > n_vectors {
                return Err(Error::CorruptIndex(format!(
                    "leaf claims {count} of {n_vectors} rows"
                )));
            }
            let mut indices = Vec::with_capacity((count as usize).min(1 << 20));
            for _ in 0..count {
                let i = idx_u64(reader)?;
                if i >= n_vectors {
                    return Err(Error::CorruptIndex(format!("row index {i} out of range")));
                }
                indices.push(i as usize);
            }
            Ok(Node::Leaf { indices })
        }
        1 => {
            let child_count = idx_u32(reader)? as usize;
            if child_count < 2 || child_count > branching {
                return Err(Error::CorruptIndex(format!(
                    "internal node with {child_count} children (branching {branching})"
                )));
            }
            let mut centroids = Vec::with_capacity(
                (child_count * aug_dim).min(1 << 20),
            );
            for _ in 0..child_count * aug_dim {
                let x = idx_f64(reader)?;
                if x.is_nan() {
                    return Err(Error::CorruptIndex("NaN centroid".into()));
                }
                centroids.push(x);
            }
            let mut children = Vec::with_capacity(child_count);
            for _ in 0..child_count {
                children.push(read_node(reader, aug_dim, branching, n_vectors, depth + 1)?);
            }
            Ok(Node::Internal {
                centroids,
                children,
            })
        }
        t => Err(Error::CorruptIndex(format!("unknown node tag {t}"))),
    }
}

fn idx_read<R: Read>(reader: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    reader
        .read_exact(buf)
        .map_err(|_| Error::CorruptIndex(format!("truncated while reading {what}")))
}

fn idx_u32<R: Read>(reader: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    idx_read(reader, &mut b, "u32")?;
    Ok(u32::from_le_bytes(b))
}

fn idx_u64<R: Read>(reader: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    idx_read(reader, &mut b, "u64")?;
    Ok(u64::from_le_bytes(b))
}

fn idx_f64<R: Read>(reader: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    idx_read(reader, &mut b, "f64")?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{perturb_queries, synthesize_gaussian};
    use std::io::Cursor;

    fn arc(m: EmbeddingMatrix) -> Arc<EmbeddingMatrix> {
        Arc::new(m)
    }

    #[test]
    fn tiny_matrix_single_leaf() {
        let v = arc(synthesize_gaussian(3, 4, 1.0, 0).unwrap());
        let idx = build_index(v, 4, 10, 0).unwrap();
        assert_eq!(idx.leaf_indices(), vec![0, 1, 2]);
        match idx.root {
            Node::Leaf { ref indices } => assert_eq!(indices, &[0, 1, 2]),
            _ => panic!("expected single leaf"),
        }
    }

    #[test]
    fn unit_norm_rows_have_zero_augment() {
        let mut data = vec![0.0; 6 * 3];
        for i in 0..6 {
            data[i * 3 + i % 3] = 1.0;
        }
        let v = EmbeddingMatrix::new(3, data, Vec::new()).unwrap();
        let (aug, phi) = augment(&v);
        assert_eq!(phi, 1.0);
        for i in 0..6 {
            assert_eq!(aug[i * 4 + 3], 0.0, "row {i}");
        }
    }

    #[test]
    fn every_row_in_exactly_one_leaf() {
        let v = arc(synthesize_gaussian(2000, 8, 1.0, 5).unwrap());
        let idx = build_index(v, 4, 16, 9).unwrap();
        let mut rows = idx.leaf_indices();
        rows.sort_unstable();
        let expected: Vec<usize> = (0..2000).collect();
        assert_eq!(rows, expected);
    }

    #[test]
    fn identical_rows_terminate() {
        // all rows equal: k-means degenerates, the depth cap must hold
        let v = arc(EmbeddingMatrix::new(2, vec![1.0, 2.0].repeat(500), Vec::new()).unwrap());
        let idx = build_index(v, 2, 4, 3).unwrap();
        let mut rows = idx.leaf_indices();
        rows.sort_unstable();
        assert_eq!(rows.len(), 500);
        rows.dedup();
        assert_eq!(rows.len(), 500);
    }

    #[test]
    fn reduction_preserves_order() {
        let v = synthesize_gaussian(200, 6, 0.8, 33).unwrap();
        let (aug, _) = augment(&v);
        let queries = synthesize_gaussian(10, 6, 0.8, 34).unwrap();
        for qi in 0..10 {
            let q = queries.row(qi);
            let mut q_aug = q.to_vec();
            q_aug.push(0.0);
            for i in 0..200 {
                for j in (i + 1)..200 {
                    let ip_i = dot(v.row(i), q);
                    let ip_j = dot(v.row(j), q);
                    if ip_i == ip_j {
                        continue;
                    }
                    let di = squared_distance(point(&aug, 7, i), &q_aug);
                    let dj = squared_distance(point(&aug, 7, j), &q_aug);
                    assert_eq!(ip_i > ip_j, di < dj, "rows {i},{j} query {qi}");
                }
            }
        }
    }

    #[test]
    fn exhaustive_budget_equals_exact() {
        let v = arc(synthesize_gaussian(500, 10, 0.7, 21).unwrap());
        let idx = build_index(Arc::clone(&v), 8, 16, 4).unwrap();
        let queries = perturb_queries(&v, &(0..20).collect::<Vec<_>>(), 0.2, 7).unwrap();
        for qi in 0..queries.len() {
            let q = queries.row(qi);
            for &k in &[1usize, 7, 40] {
                let exact = exact_top_k(&v, q, k).unwrap();
                let approx = idx.approx_top_k(q, k, SearchBudget::exhaustive()).unwrap();
                assert_eq!(exact.indices(), approx.indices(), "k={k} q={qi}");
                assert_eq!(exact.scores(), approx.scores());
            }
        }
    }

    #[test]
    fn orthonormal_top1_any_budget() {
        let mut data = vec![0.0; 9];
        for i in 0..3 {
            data[i * 3 + i] = 1.0;
        }
        let v = arc(EmbeddingMatrix::new(3, data, Vec::new()).unwrap());
        let idx = build_index(v, 2, 1, 0).unwrap();
        let r = idx
            .approx_top_k(&[3.0, 2.0, 1.0], 1, SearchBudget::exhaustive())
            .unwrap();
        assert_eq!(r.indices(), &[0]);
        assert_eq!(r.scores(), &[3.0]);
    }

    #[test]
    fn recall_non_decreasing_in_budget() {
        let v = arc(synthesize_gaussian(3000, 16, 0.6, 11).unwrap());
        let idx = build_index(Arc::clone(&v), 8, 32, 2).unwrap();
        let query_idx: Vec<usize> = (0..60).map(|i| i * 50).collect();
        let queries = perturb_queries(&v, &query_idx, 0.1, 3).unwrap();
        let budgets = [30usize, 150, 750, 3000];
        let mut recalls = Vec::new();
        for &b in &budgets {
            let mut total = 0.0;
            for qi in 0..queries.len() {
                let q = queries.row(qi);
                let exact = exact_top_k(&v, q, 10).unwrap();
                let approx = idx
                    .approx_top_k(q, 10, SearchBudget::new(b).unwrap())
                    .unwrap();
                let truth: std::collections::HashSet<usize> =
                    exact.indices().iter().copied().collect();
                total += approx.indices().iter().filter(|i| truth.contains(i)).count() as f64
                    / 10.0;
            }
            recalls.push(total / queries.len() as f64);
        }
        for w in recalls.windows(2) {
            assert!(
                w[1] >= w[0] - 0.02,
                "mean recall decreased with budget: {recalls:?}"
            );
        }
        assert!(
            (recalls[3] - 1.0).abs() < 1e-12,
            "full budget must be exact: {recalls:?}"
        );
    }

    #[test]
    fn build_deterministic_across_thread_counts() {
        let v = arc(synthesize_gaussian(1500, 6, 0.9, 41).unwrap());
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| build_index(Arc::clone(&v), 4, 16, 77).unwrap());
        let multi = build_index(Arc::clone(&v), 4, 16, 77).unwrap();
        assert_eq!(single.root, multi.root);
        assert_eq!(single.phi, multi.phi);
    }

    #[test]
    fn index_roundtrip_and_validation() {
        let v = arc(synthesize_gaussian(300, 5, 0.8, 13).unwrap());
        let idx = build_index(Arc::clone(&v), 4, 8, 19).unwrap();
        let mut buf = Vec::new();
        idx.write(&mut buf).unwrap();

        let file = read_index(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(file.params(), idx.params());
        let bound = file.bind(Arc::clone(&v)).unwrap();
        assert_eq!(bound.root, idx.root);

        // search result identical after roundtrip
        let q = v.row(17).to_vec();
        let a = idx.approx_top_k(&q, 5, SearchBudget::new(64).unwrap()).unwrap();
        let b = bound
            .approx_top_k(&q, 5, SearchBudget::new(64).unwrap())
            .unwrap();
        assert_eq!(a.indices(), b.indices());

        // binding to a different matrix is rejected
        let other = arc(synthesize_gaussian(300, 5, 0.8, 14).unwrap());
        let file = read_index(&mut Cursor::new(&buf)).unwrap();
        assert!(file.bind(other).is_err());

        // truncations error out instead of panicking
        for cut in [0usize, 3, 10, 40, buf.len() / 2, buf.len() - 1] {
            let mut t = buf.clone();
            t.truncate(cut);
            assert!(read_index(&mut Cursor::new(&t)).is_err(), "cut {cut}");
        }

        // flipped tag byte: first node tag sits right after the 44-byte header
        let mut bad = buf.clone();
        bad[44] = 9;
        assert!(read_index(&mut Cursor::new(&bad)).is_err());
    }

    #[test]
    fn speedup_measurement_reports_recall() {
        let v = arc(synthesize_gaussian(4000, 12, 0.5, 3).unwrap());
        let idx = build_index(Arc::clone(&v), 8, 32, 5).unwrap();
        let queries = perturb_queries(&v, &(0..40).collect::<Vec<_>>(), 0.1, 9).unwrap();
        let report =
            measure_speedup(&idx, &v, &queries, 10, SearchBudget::new(400).unwrap()).unwrap();
        assert!(report.recall > 0.0 && report.recall <= 1.0);
        assert!(report.speedup > 0.0);
        assert!(report.brute_seconds > 0.0);
    }
}
