//! First-neighbor clustering and the partition hierarchy built from it.
//!
//! One round links every point to its most similar other point (its first
//! neighbor κ). Points `i` and `j` are linked when `j = κ(i)`, `κ(j) = i`, or
//! `κ(i) = κ(j)`; clusters are the connected components of that graph. The
//! next round repeats the procedure on the cluster centroids, until a single
//! cluster remains.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::vector::{dot, mean, normalize_in_place, EmbeddingMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinchConfig {
    /// Run the forced last merge when a round leaves two clusters.
    pub final_merge: bool,
    /// Drop a single-cluster top level (when it is not the only level).
    pub drop_root_if_singleton: bool,
    /// Coarse centroids as member-weighted means of leaves instead of
    /// unweighted means of the previous round's centroids.
    pub weighted_centroids: bool,
    /// Above this many points the neighbor search switches to tiled scans.
    pub exact_block_threshold: usize,
}

impl Default for FinchConfig {
    fn default() -> Self {
        Self {
            final_merge: true,
            drop_root_if_singleton: false,
            weighted_centroids: false,
            exact_block_threshold: 4096,
        }
    }
}

/// Similarity used for neighbor search: plain dot product for unit vectors,
/// cosine otherwise. Zero-norm rows have similarity 0 to everything.
struct Scorer<'a> {
    points: &'a EmbeddingMatrix,
    inv_norms: Option<Vec<f64>>,
}

impl<'a> Scorer<'a> {
    fn new(points: &'a EmbeddingMatrix, normalized: bool) -> Self {
        let inv_norms = (!normalized).then(|| {
            points
                .norms()
                .into_iter()
                .map(|n| if n == 0.0 { 0.0 } else { 1.0 / n })
                .collect()
        });
        Self { points, inv_norms }
    }

    #[inline]
    fn scale(&self, d: f64, i: usize, j: usize) -> f64 {
        match &self.inv_norms {
            None => d,
            Some(inv) => d * inv[i] * inv[j],
        }
    }

    #[inline]
    fn sim(&self, i: usize, j: usize) -> f64 {
        self.scale(dot(self.points.row(i), self.points.row(j)), i, j)
    }

    /// Similarities of rows `i..i+4` to row `j`. Four independent
    /// accumulators, each summed in ascending order, so every value equals
    /// the one `sim` returns.
    #[inline]
    fn sim4(&self, i: usize, j: usize) -> [f64; 4] {
        let (a, b, c, d) = (
            self.points.row(i),
            self.points.row(i + 1),
            self.points.row(i + 2),
            self.points.row(i + 3),
        );
        let y = self.points.row(j);
        let mut acc = [0.0f64; 4];
        for k in 0..y.len() {
            let yk = f64::from(y[k]);
            acc[0] += f64::from(a[k]) * yk;
            acc[1] += f64::from(b[k]) * yk;
            acc[2] += f64::from(c[k]) * yk;
            acc[3] += f64::from(d[k]) * yk;
        }
        [
            self.scale(acc[0], i, j),
            self.scale(acc[1], i + 1, j),
            self.scale(acc[2], i + 2, j),
            self.scale(acc[3], i + 3, j),
        ]
    }
}

fn check_points(vectors: &EmbeddingMatrix) -> Result<()> {
    if vectors.len() < 2 {
        return Err(Error::TooFewPoints {
            required: 2,
            actual: vectors.len(),
        });
    }
    if let Some(index) = vectors.first_non_finite() {
        return Err(Error::NonFinite { index });
    }
    Ok(())
}

/// κ[i] = argmax over j ≠ i of similarity(i, j), smallest j on ties.
pub fn first_neighbors(vectors: &EmbeddingMatrix, normalized: bool) -> Result<Vec<u32>> {
    check_points(vectors)?;
    let scorer = Scorer::new(vectors, normalized);
    let n = vectors.len();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut best = f64::NEG_INFINITY;
            let mut arg = usize::MAX;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let s = scorer.sim(i, j);
                if s > best {
                    best = s;
                    arg = j;
                }
            }
            arg as u32
        })
        .collect())
}

const ROW_TILE: usize = 32;
const COL_TILE: usize = 256;

/// Same result as [`first_neighbors`], scanning the similarity matrix in
/// row × column tiles so a column tile stays cache resident across rows.
pub fn first_neighbors_tiled(vectors: &EmbeddingMatrix, normalized: bool) -> Result<Vec<u32>> {
    check_points(vectors)?;
    let scorer = Scorer::new(vectors, normalized);
    let n = vectors.len();
    let mut out = vec![0u32; n];
    out.par_chunks_mut(ROW_TILE)
        .enumerate()
        .for_each(|(tile, slots)| {
            let i0 = tile * ROW_TILE;
            let mut best = vec![f64::NEG_INFINITY; slots.len()];
            let mut arg = vec![usize::MAX; slots.len()];
            for j0 in (0..n).step_by(COL_TILE) {
                let j1 = (j0 + COL_TILE).min(n);
                let mut r = 0;
                while r + 4 <= slots.len() {
                    for j in j0..j1 {
                        let s = scorer.sim4(i0 + r, j);
                        for q in 0..4 {
                            if j != i0 + r + q && s[q] > best[r + q] {
                                best[r + q] = s[q];
                                arg[r + q] = j;
                            }
                        }
                    }
                    r += 4;
                }
                for r in r..slots.len() {
                    let i = i0 + r;
                    for j in j0..j1 {
                        if j == i {
                            continue;
                        }
                        let s = scorer.sim(i, j);
                        if s > best[r] {
                            best[r] = s;
                            arg[r] = j;
                        }
                    }
                }
            }
            for (slot, a) in slots.iter_mut().zip(arg) {
                *slot = a as u32;
            }
        });
    Ok(out)
}

/// Disjoint-set forest with path halving and union by size.
struct DisjointSets {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }
}

/// Connected components of the first-neighbor link graph, labelled
/// 0..C in order of each component's smallest member.
pub fn link_components(neighbors: &[u32]) -> (Vec<u32>, usize) {
    let n = neighbors.len();
    let mut sets = DisjointSets::new(n);
    // i–κ(i) edges cover all three link rules: κ(i) = κ(j) joins i and j
    // through their shared neighbor.
    for (i, &k) in neighbors.iter().enumerate() {
        sets.union(i, k as usize);
    }
    let mut label_of_root = vec![u32::MAX; n];
    let mut labels = Vec::with_capacity(n);
    let mut next = 0u32;
    for i in 0..n {
        let r = sets.find(i);
        if label_of_root[r] == u32::MAX {
            label_of_root[r] = next;
            next += 1;
        }
        labels.push(label_of_root[r]);
    }
    (labels, next as usize)
}

/// Means of the rows in each cluster, in ascending row order, re-normalized
/// when `normalized` (zero means stay zero).
pub fn cluster_means(
    points: &EmbeddingMatrix,
    labels: &[u32],
    num_clusters: usize,
    normalized: bool,
) -> EmbeddingMatrix {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_clusters];
    for (i, &c) in labels.iter().enumerate() {
        members[c as usize].push(i);
    }
    let mut out = EmbeddingMatrix::with_capacity(points.dim(), num_clusters);
    for m in &members {
        let mut c = mean(points.dim(), m.iter().map(|&i| points.row(i)));
        if normalized {
            normalize_in_place(&mut c);
        }
        out.push(&c).expect("centroid has the point dimension");
    }
    out
}

/// One clustering round over `vectors`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionLevel {
    /// Cluster id for every leaf.
    pub assignment: Vec<u32>,
    /// Cluster id for every unit of the previous level (leaves at level 1).
    pub parent_of_prev: Vec<u32>,
    pub num_clusters: usize,
    pub centroids: EmbeddingMatrix,
}

impl PartitionLevel {
    /// Member units of the previous level, per cluster, ascending.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); self.num_clusters];
        for (unit, &c) in self.parent_of_prev.iter().enumerate() {
            g[c as usize].push(unit);
        }
        g
    }

    /// Leaf count per cluster.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.num_clusters];
        for &c in &self.assignment {
            s[c as usize] += 1;
        }
        s
    }
}

/// Runs one first-neighbor round. `tile_threshold` picks the tiled scan for
/// larger inputs; both scans are exact and agree.
pub fn cluster_once_with(
    vectors: &EmbeddingMatrix,
    normalized: bool,
    tile_threshold: usize,
) -> Result<PartitionLevel> {
    let neighbors = if vectors.len() > tile_threshold {
        first_neighbors_tiled(vectors, normalized)?
    } else {
        first_neighbors(vectors, normalized)?
    };
    let (labels, num_clusters) = link_components(&neighbors);
    let centroids = cluster_means(vectors, &labels, num_clusters, normalized);
    Ok(PartitionLevel {
        assignment: labels.clone(),
        parent_of_prev: labels,
        num_clusters,
        centroids,
    })
}

pub fn cluster_once(vectors: &EmbeddingMatrix, normalized: bool) -> Result<PartitionLevel> {
    cluster_once_with(
        vectors,
        normalized,
        FinchConfig::default().exact_block_threshold,
    )
}

/// Nested partitions, finest (level 1) first.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionHierarchy {
    pub levels: Vec<PartitionLevel>,
    pub num_leaves: usize,
}

impl PartitionHierarchy {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// 1-based level accessor.
    pub fn level(&self, level: usize) -> &PartitionLevel {
        &self.levels[level - 1]
    }

    pub fn cluster_counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.num_clusters).collect()
    }
}

pub fn build_hierarchy(corpus: &Corpus, config: &FinchConfig) -> Result<PartitionHierarchy> {
    build_hierarchy_from(corpus.embeddings(), corpus.normalized(), config)
}

pub fn build_hierarchy_from(
    leaves: &EmbeddingMatrix,
    normalized: bool,
    config: &FinchConfig,
) -> Result<PartitionHierarchy> {
    let threshold = config.exact_block_threshold;
    let mut levels = vec![cluster_once_with(leaves, normalized, threshold)?];
    loop {
        let cur = levels.last().expect("at least one level");
        if cur.num_clusters == 1 || (cur.num_clusters == 2 && !config.final_merge) {
            break;
        }
        let mut next = cluster_once_with(&cur.centroids, normalized, threshold)?;
        if next.num_clusters >= cur.num_clusters {
            break;
        }
        next.assignment = cur
            .assignment
            .iter()
            .map(|&c| next.parent_of_prev[c as usize])
            .collect();
        if config.weighted_centroids {
            next.centroids = cluster_means(leaves, &next.assignment, next.num_clusters, normalized);
        }
        tracing::debug!(
            level = levels.len() + 1,
            clusters = next.num_clusters,
            "clustering round"
        );
        levels.push(next);
    }
    if config.drop_root_if_singleton && levels.len() > 1 && levels.last().unwrap().num_clusters == 1
    {
        levels.pop();
    }
    Ok(PartitionHierarchy {
        levels,
        num_leaves: leaves.len(),
    })
}
