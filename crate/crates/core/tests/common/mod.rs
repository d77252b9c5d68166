//! Brute-force reference implementations and random fixtures shared by the
//! integration tests.
//!
//! The oracle follows the same arithmetic conventions as the library (f64
//! accumulation in ascending index order, means cast to f32 before
//! renormalizing) but shares no code with it: it materializes the full
//! similarity matrix and the explicit three-rule link graph, and finds
//! clusters by breadth-first search.

#![allow(dead_code)]

use std::collections::VecDeque;

use hiermem::compaction::Summarizer;
use hiermem::corpus::{CaptionRecord, Corpus, StubEmbedder};
use hiermem::membank::{build_bank, BankMode, BuildOptions, MemoryBank};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s
}

fn inv_norm(a: &[f32]) -> f64 {
    let n = dot64(a, a).sqrt();
    if n == 0.0 {
        0.0
    } else {
        1.0 / n
    }
}

pub fn similarity_matrix(points: &[Vec<f32>], normalized: bool) -> Vec<Vec<f64>> {
    let inv: Vec<f64> = points.iter().map(|p| inv_norm(p)).collect();
    let n = points.len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let d = dot64(&points[i], &points[j]);
            s[i][j] = if normalized { d } else { d * inv[i] * inv[j] };
        }
    }
    s
}

pub fn oracle_first_neighbors(sim: &[Vec<f64>]) -> Vec<usize> {
    let n = sim.len();
    (0..n)
        .map(|i| {
            let mut best = usize::MAX;
            for j in 0..n {
                if j != i && (best == usize::MAX || sim[i][j] > sim[i][best]) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Components of the link graph, labelled by order of smallest member.
pub fn oracle_components(kappa: &[usize]) -> (Vec<usize>, usize) {
    let n = kappa.len();
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i != j && (kappa[i] == j || kappa[j] == i || kappa[i] == kappa[j]) {
                adj[i].push(j);
            }
        }
    }
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        label[s] = next;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if label[v] == usize::MAX {
                    label[v] = next;
                    queue.push_back(v);
                }
            }
        }
        next += 1;
    }
    (label, next)
}

fn oracle_centroids(
    points: &[Vec<f32>],
    labels: &[usize],
    c: usize,
    normalized: bool,
) -> Vec<Vec<f32>> {
    let dim = points[0].len();
    (0..c)
        .map(|k| {
            let mut acc = vec![0.0f64; dim];
            let mut count = 0.0;
            for (i, p) in points.iter().enumerate() {
                if labels[i] == k {
                    for d in 0..dim {
                        acc[d] += p[d] as f64;
                    }
                    count += 1.0;
                }
            }
            let mut m: Vec<f32> = acc.iter().map(|a| (a / count) as f32).collect();
            if normalized {
                let n = dot64(&m, &m).sqrt();
                if n > 0.0 && n.is_finite() {
                    m = m.iter().map(|&x| (x as f64 / n) as f32).collect();
                }
            }
            m
        })
        .collect()
}

/// Leaf assignment at every level, finest first.
pub fn oracle_hierarchy(
    leaves: &[Vec<f32>],
    normalized: bool,
    final_merge: bool,
) -> Vec<Vec<usize>> {
    let mut levels: Vec<Vec<usize>> = Vec::new();
    let mut points = leaves.to_vec();
    let mut leaf_to_unit: Vec<usize> = (0..leaves.len()).collect();
    loop {
        let sim = similarity_matrix(&points, normalized);
        let (labels, c) = oracle_components(&oracle_first_neighbors(&sim));
        if c >= points.len() {
            break;
        }
        leaf_to_unit = leaf_to_unit.iter().map(|&u| labels[u]).collect();
        levels.push(leaf_to_unit.clone());
        if c == 1 || (c == 2 && !final_merge) {
            break;
        }
        points = oracle_centroids(&points, &labels, c, normalized);
    }
    levels
}

/// Flat top-K over every node of bank level 1, ties by smaller id.
pub fn flat_top_k(bank: &MemoryBank, query: &[f32], k: usize) -> Vec<u32> {
    let level = bank.level(1);
    let qn = dot64(query, query).sqrt();
    let mut scored: Vec<(f64, u32)> = (0..level.len())
        .map(|i| {
            let e = level.embeddings.row(i);
            let d = qn * dot64(e, e).sqrt();
            (if d == 0.0 { 0.0 } else { dot64(query, e) / d }, i as u32)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    let mut ids: Vec<u32> = scored.into_iter().map(|s| s.1).collect();
    ids.sort_unstable();
    ids
}

pub fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim)
        .map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal))
        .collect()
}

pub fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v = gaussian(rng, dim);
        let n = dot64(&v, &v).sqrt();
        if n > 1e-6 {
            return v.iter().map(|&x| (x as f64 / n) as f32).collect();
        }
    }
}

/// Points scattered around a few random centers so that hierarchies have
/// several levels.
pub fn clustered_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
    let centers: Vec<Vec<f32>> = (0..rng.random_range(2..8))
        .map(|_| unit(rng, dim))
        .collect();
    let spread = rng.random_range(0.2f32..1.2);
    (0..n)
        .map(|_| {
            let c = &centers[rng.random_range(0..centers.len())];
            let noise = unit(rng, dim);
            c.iter().zip(&noise).map(|(a, b)| a + spread * b).collect()
        })
        .collect()
}

pub fn corpus_from_points(points: &[Vec<f32>], normalize: bool) -> Corpus {
    let records = points
        .iter()
        .enumerate()
        .map(|(i, p)| CaptionRecord {
            id: format!("leaf-{i}"),
            text: format!("caption {i}"),
            embedding: p.clone(),
        })
        .collect();
    Corpus::from_records(records, normalize).expect("generated corpus is valid")
}

pub fn random_corpus(seed: u64, n: usize, dim: usize) -> Corpus {
    let mut r = rng(seed);
    corpus_from_points(&clustered_points(&mut r, n, dim), true)
}

pub fn build(corpus: &Corpus, summarizer: &Summarizer, mode: BankMode) -> MemoryBank {
    build_bank(
        corpus,
        summarizer,
        &StubEmbedder::new(corpus.dim()),
        &BuildOptions {
            mode,
            ..Default::default()
        },
    )
    .expect("bank builds")
}

/// Random hierarchical bank; alternates medoid and centroid summaries.
pub fn random_bank(seed: u64) -> MemoryBank {
    let mut r = rng(seed);
    let n = r.random_range(30..300);
    let dim = [4, 16, 32][r.random_range(0..3)];
    let corpus = corpus_from_points(&clustered_points(&mut r, n, dim), true);
    let s = if seed.is_multiple_of(2) {
        Summarizer::medoid()
    } else {
        Summarizer::centroid()
    };
    build(&corpus, &s, BankMode::Hierarchical)
}
