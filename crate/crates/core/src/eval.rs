//! Synthetic evaluation: a planted two-level topic structure, banks built
//! under each construction variant, and retrieval swept over K and the
//! selection rules.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::compaction::Summarizer;
use crate::corpus::{CaptionRecord, Corpus, StubEmbedder};
use crate::error::{Error, Result};
use crate::finch::{build_hierarchy, FinchConfig};
use crate::membank::{bank_stats, build_bank, BankMode, BuildOptions, BuildStats, MemoryBank};
use crate::retrieval::{read_hierarchical, select_at_level, ReadMode, RetrievalConfig, Selection};
use crate::vector::normalize_in_place;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub dim: usize,
    pub super_clusters: usize,
    pub clusters_per_super: usize,
    pub members_per_cluster: usize,
    /// Spread of cluster prototypes around their super prototype.
    pub cluster_spread: f32,
    /// Spread of members around their cluster prototype.
    pub member_noise: f32,
    /// Spread of queries around the planted cluster prototype.
    pub query_noise: f32,
    pub queries: usize,
    pub k_grid: Vec<usize>,
    pub selections: Vec<Selection>,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dim: 64,
            super_clusters: 25,
            clusters_per_super: 20,
            members_per_cluster: 10,
            cluster_spread: 0.6,
            member_noise: 0.25,
            query_noise: 0.25,
            queries: 200,
            k_grid: vec![1, 5, 10, 20],
            selections: vec![Selection::Max, Selection::TopK, Selection::Threshold],
            threshold: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn num_leaves(&self) -> usize {
        self.super_clusters * self.clusters_per_super * self.members_per_cluster
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0
            || self.super_clusters == 0
            || self.clusters_per_super == 0
            || self.members_per_cluster == 0
        {
            return Err(Error::Config(
                "generator needs positive dim and cluster sizes".into(),
            ));
        }
        if self.num_leaves() < 2 {
            return Err(Error::Config(
                "generator must produce at least two captions".into(),
            ));
        }
        if self.queries == 0
            || self.k_grid.is_empty()
            || self.k_grid.contains(&0)
            || self.selections.is_empty()
        {
            return Err(Error::Config(
                "need queries, a non-empty K grid without zeros, and a selection".into(),
            ));
        }
        Ok(())
    }
}

/// Planted corpus plus the cluster label of every caption.
#[derive(Debug, Clone)]
pub struct PlantedData {
    pub corpus: Corpus,
    pub labels: Vec<usize>,
    pub prototypes: Vec<Vec<f32>>,
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let mut v: Vec<f32> = (0..dim)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        if normalize_in_place(&mut v) {
            return v;
        }
    }
}

fn perturb(rng: &mut ChaCha8Rng, center: &[f32], scale: f32) -> Vec<f32> {
    let noise = gaussian_unit(rng, center.len());
    let mut v: Vec<f32> = center
        .iter()
        .zip(&noise)
        .map(|(c, n)| c + scale * n)
        .collect();
    if !normalize_in_place(&mut v) {
        v = center.to_vec();
    }
    v
}

pub fn generate(config: &EvalConfig) -> Result<PlantedData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut prototypes = Vec::new();
    let mut records = Vec::with_capacity(config.num_leaves());
    let mut labels = Vec::with_capacity(config.num_leaves());
    for s in 0..config.super_clusters {
        let topic = gaussian_unit(&mut rng, config.dim);
        for c in 0..config.clusters_per_super {
            let proto = perturb(&mut rng, &topic, config.cluster_spread);
            let label = prototypes.len();
            for m in 0..config.members_per_cluster {
                records.push(CaptionRecord {
                    id: format!("t{s}-s{c}-v{m}"),
                    text: format!("topic {s} step {c} variant {m}"),
                    embedding: perturb(&mut rng, &proto, config.member_noise),
                });
                labels.push(label);
            }
            prototypes.push(proto);
        }
    }
    Ok(PlantedData {
        corpus: Corpus::from_records(records, true)?,
        labels,
        prototypes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Every caption stored verbatim in one level.
    Flat,
    /// Hierarchy with averaged cluster features.
    ClusteringCentroid,
    /// Hierarchy with a representative member per cluster.
    ClusteringMedoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub k: usize,
    pub selection: Selection,
    /// Fraction of queries whose finest-level picks include the query's
    /// planted cluster.
    pub planted_recall: f64,
    /// Mean overlap of finest-level picks with a flat scan of the same level
    /// under the same selection rule.
    pub oracle_recall: f64,
    pub mean_comparisons: f64,
    /// Comparisons a flat bank over the whole corpus makes per query.
    pub flat_comparisons: usize,
    pub latency_p50_us: f64,
    pub latency_p95_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub stats: BuildStats,
    pub runs: Vec<RunReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub config: EvalConfig,
    pub corpus_size: usize,
    pub variants: Vec<VariantReport>,
}

impl EvalReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantReport> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

impl VariantReport {
    pub fn run(&self, k: usize, selection: Selection) -> Option<&RunReport> {
        self.runs
            .iter()
            .find(|r| r.k == k && r.selection == selection)
    }
}

/// Majority planted label of each finest-level node.
fn node_labels(bank: &MemoryBank, data: &PlantedData, finch: &FinchConfig) -> Result<Vec<usize>> {
    if bank.provenance().mode == BankMode::Flat {
        return Ok(data.labels.clone());
    }
    let h = build_hierarchy(&data.corpus, finch)?;
    let level1 = h.level(1);
    let n_labels = data.prototypes.len();
    let mut votes = vec![vec![0usize; n_labels]; level1.num_clusters];
    for (leaf, &c) in level1.assignment.iter().enumerate() {
        votes[c as usize][data.labels[leaf]] += 1;
    }
    Ok(votes
        .iter()
        .map(|v| {
            // First maximum, so the smallest label wins ties.
            let max = *v.iter().max().unwrap_or(&0);
            v.iter().position(|&x| x == max).unwrap_or(0)
        })
        .collect())
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

pub fn build_variant(
    data: &PlantedData,
    variant: Variant,
    finch: &FinchConfig,
) -> Result<MemoryBank> {
    let embedder = StubEmbedder::new(data.corpus.dim());
    let (summarizer, mode) = match variant {
        Variant::Flat => (Summarizer::medoid(), BankMode::Flat),
        Variant::ClusteringCentroid => (Summarizer::centroid(), BankMode::Hierarchical),
        Variant::ClusteringMedoid => (Summarizer::medoid(), BankMode::Hierarchical),
    };
    build_bank(
        &data.corpus,
        &summarizer,
        &embedder,
        &BuildOptions {
            mode,
            finch: finch.clone(),
            ..Default::default()
        },
    )
}

fn run_sweep(
    bank: &MemoryBank,
    labels: &[usize],
    queries: &[(Vec<f32>, usize)],
    corpus_size: usize,
    config: &EvalConfig,
) -> Result<Vec<RunReport>> {
    let level1 = bank.level(1);
    let all: Vec<u32> = (0..level1.len() as u32).collect();
    let mut runs = Vec::new();
    for &k in &config.k_grid {
        for &selection in &config.selections {
            let rc = RetrievalConfig {
                k,
                selection,
                threshold: config.threshold,
                mode: ReadMode::Hierarchical,
                ..Default::default()
            };
            let mut hits = 0usize;
            let mut overlap = 0.0f64;
            let mut comparisons = 0usize;
            let mut latencies = Vec::with_capacity(queries.len());
            for (q, label) in queries {
                let t0 = Instant::now();
                let trace = read_hierarchical(bank, q, &rc)?;
                latencies.push(t0.elapsed().as_secs_f64() * 1e6);
                comparisons += trace.comparison_count;
                let picks = &trace.at_level(1).expect("descent reaches level 1").selected;
                if picks.iter().any(|s| labels[s.node as usize] == *label) {
                    hits += 1;
                }
                let oracle = select_at_level(q, level1, &all, &rc)?;
                let shared = picks
                    .iter()
                    .filter(|p| oracle.iter().any(|o| o.node == p.node))
                    .count();
                overlap += shared as f64 / oracle.len() as f64;
            }
            latencies.sort_by(f64::total_cmp);
            let n = queries.len() as f64;
            runs.push(RunReport {
                k,
                selection,
                planted_recall: hits as f64 / n,
                oracle_recall: overlap / n,
                mean_comparisons: comparisons as f64 / n,
                flat_comparisons: corpus_size,
                latency_p50_us: percentile(&latencies, 50.0),
                latency_p95_us: percentile(&latencies, 95.0),
            });
        }
    }
    Ok(runs)
}

/// Generates the planted corpus, builds every variant and sweeps the grid.
/// Reproducible from `config` alone, apart from the latency fields.
pub fn eval_synthetic(config: &EvalConfig) -> Result<EvalReport> {
    let data = generate(config)?;
    let finch = FinchConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let queries: Vec<(Vec<f32>, usize)> = (0..config.queries)
        .map(|_| {
            let label = rng.random_range(0..data.prototypes.len());
            (
                perturb(&mut rng, &data.prototypes[label], config.query_noise),
                label,
            )
        })
        .collect();
    let mut variants = Vec::new();
    for variant in [
        Variant::Flat,
        Variant::ClusteringCentroid,
        Variant::ClusteringMedoid,
    ] {
        let bank = build_variant(&data, variant, &finch)?;
        let labels = node_labels(&bank, &data, &finch)?;
        let runs = run_sweep(&bank, &labels, &queries, data.corpus.len(), config)?;
        variants.push(VariantReport {
            variant,
            stats: bank_stats(&bank),
            runs,
        });
    }
    Ok(EvalReport {
        schema: "hiermem.eval/1".into(),
        config: config.clone(),
        corpus_size: data.corpus.len(),
        variants,
    })
}
