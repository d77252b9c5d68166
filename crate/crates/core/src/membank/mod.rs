//! The queryable memory bank: per-level nodes with summaries, embeddings and
//! parent/child links, plus build statistics and the binary file format.

mod file;

use serde::{Deserialize, Serialize};

use crate::compaction::{compact_all, Summarizer, TEMPLATE_ID};
use crate::corpus::{Corpus, Embedder};
use crate::error::{Error, Result};
use crate::finch::{build_hierarchy, FinchConfig};
use crate::vector::{norm, EmbeddingMatrix};

pub use file::{decode, encode, load_bank, save_bank, FORMAT_VERSION, MAGIC};

pub const NO_PARENT: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankMode {
    #[default]
    Hierarchical,
    /// A single level holding every caption verbatim.
    Flat,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryNode {
    pub level: usize,
    pub node_id: u32,
    pub text: String,
    pub member_count: u32,
    pub leaf_span: u32,
    pub parent: Option<u32>,
    pub children: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankLevel {
    pub nodes: Vec<MemoryNode>,
    pub embeddings: EmbeddingMatrix,
}

impl BankLevel {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub format: String,
    pub mode: BankMode,
    pub corpus_hash: String,
    pub corpus_size: usize,
    pub normalized: bool,
    pub summarizer: String,
    pub embedder: String,
    pub template_version: String,
    pub build_timestamp: Option<String>,
    pub fallback_count: usize,
    pub warnings: Vec<String>,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    levels: Vec<BankLevel>,
    dim: usize,
    provenance: Provenance,
    norms: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct BuildOptions {
    pub mode: BankMode,
    pub finch: FinchConfig,
    /// Recorded verbatim; `None` keeps builds byte-reproducible.
    pub build_timestamp: Option<String>,
    /// Effective configuration, embedded in the provenance block.
    pub config_snapshot: serde_json::Value,
}

/// Clusters the corpus, compacts every level bottom-up and links the nodes.
pub fn build_bank(
    corpus: &Corpus,
    summarizer: &Summarizer,
    embedder: &dyn Embedder,
    options: &BuildOptions,
) -> Result<MemoryBank> {
    if corpus.len() < 2 {
        return Err(Error::TooFewPoints {
            required: 2,
            actual: corpus.len(),
        });
    }
    let mut provenance = Provenance {
        format: format!("hcmb/{FORMAT_VERSION}"),
        mode: options.mode,
        corpus_hash: corpus.content_hash(),
        corpus_size: corpus.len(),
        normalized: corpus.normalized(),
        summarizer: summarizer.kind().as_str().into(),
        embedder: embedder.kind().into(),
        template_version: TEMPLATE_ID.into(),
        build_timestamp: options.build_timestamp.clone(),
        fallback_count: 0,
        warnings: Vec::new(),
        config: options.config_snapshot.clone(),
    };
    if options.mode == BankMode::Flat {
        provenance.summarizer = "none".into();
        let nodes = corpus
            .records()
            .enumerate()
            .map(|(i, r)| MemoryNode {
                level: 1,
                node_id: i as u32,
                text: r.text.to_owned(),
                member_count: 1,
                leaf_span: 1,
                parent: None,
                children: Vec::new(),
            })
            .collect();
        let level = BankLevel {
            nodes,
            embeddings: corpus.embeddings().clone(),
        };
        return MemoryBank::new(vec![level], provenance);
    }

    let hierarchy = build_hierarchy(corpus, &options.finch)?;
    let summaries = compact_all(corpus, &hierarchy, summarizer, embedder)?;
    let num_levels = hierarchy.num_levels();
    let mut levels = Vec::with_capacity(num_levels);
    for (idx, level_summaries) in summaries.into_iter().enumerate() {
        let level = idx + 1;
        let spans = hierarchy.level(level).sizes();
        let parents = (level < num_levels).then(|| &hierarchy.level(level + 1).parent_of_prev);
        let child_groups = (level > 1).then(|| hierarchy.level(level).groups());
        let mut embeddings = EmbeddingMatrix::with_capacity(corpus.dim(), level_summaries.len());
        let mut nodes = Vec::with_capacity(level_summaries.len());
        for s in level_summaries {
            let id = s.cluster_id;
            if s.fallback {
                provenance.fallback_count += 1;
            }
            provenance.warnings.extend(
                s.warnings
                    .iter()
                    .map(|w| format!("level {level} node {id}: {w}")),
            );
            embeddings.push(&s.embedding)?;
            nodes.push(MemoryNode {
                level,
                node_id: id as u32,
                text: s.text,
                member_count: s.member_count as u32,
                leaf_span: spans[id] as u32,
                parent: parents.map(|p| p[id]),
                children: child_groups
                    .as_ref()
                    .map(|g| g[id].iter().map(|&c| c as u32).collect())
                    .unwrap_or_default(),
            });
        }
        levels.push(BankLevel { nodes, embeddings });
    }
    MemoryBank::new(levels, provenance)
}

impl MemoryBank {
    /// Assembles and validates a bank.
    pub fn new(levels: Vec<BankLevel>, provenance: Provenance) -> Result<Self> {
        let dim = levels
            .first()
            .map(|l| l.embeddings.dim())
            .ok_or_else(|| Error::Corrupt("bank has no levels".into()))?;
        let norms = levels.iter().map(|l| l.embeddings.norms()).collect();
        let bank = Self {
            levels,
            dim,
            provenance,
            norms,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// 1-based level accessor.
    pub fn level(&self, level: usize) -> &BankLevel {
        &self.levels[level - 1]
    }

    pub fn levels(&self) -> &[BankLevel] {
        &self.levels
    }

    pub fn node(&self, level: usize, id: u32) -> &MemoryNode {
        &self.levels[level - 1].nodes[id as usize]
    }

    pub fn embedding(&self, level: usize, id: u32) -> &[f32] {
        self.levels[level - 1].embeddings.row(id as usize)
    }

    /// L2 norm of every node embedding at `level`.
    pub fn norms(&self, level: usize) -> &[f64] {
        &self.norms[level - 1]
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(BankLevel::len).collect()
    }

    pub fn max_level_width(&self) -> usize {
        self.levels.iter().map(BankLevel::len).max().unwrap_or(0)
    }

    /// Checks every structural invariant: ids, dimensions, parent/child
    /// agreement, the partition property, leaf-span conservation and unit
    /// norms in normalized mode.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Corrupt(m));
        let corpus_size = self.provenance.corpus_size;
        let top = self.levels.len();
        for (idx, lvl) in self.levels.iter().enumerate() {
            let level = idx + 1;
            if lvl.nodes.is_empty() {
                return bad(format!("level {level} is empty"));
            }
            if lvl.embeddings.dim() != self.dim || lvl.embeddings.len() != lvl.nodes.len() {
                return bad(format!("level {level} embedding block has the wrong shape"));
            }
            if let Some(i) = lvl.embeddings.first_non_finite() {
                return bad(format!("level {level} node {i} has a non-finite embedding"));
            }
            let mut span_total = 0u64;
            for (i, n) in lvl.nodes.iter().enumerate() {
                if n.node_id as usize != i || n.level != level {
                    return bad(format!("level {level} node {i} is mislabelled"));
                }
                span_total += u64::from(n.leaf_span);
                if self.provenance.normalized && (norm(lvl.embeddings.row(i)) - 1.0).abs() > 1e-5 {
                    return bad(format!("level {level} node {i} is not unit norm"));
                }
                match (n.parent, level == top) {
                    (None, true) => {}
                    (Some(p), false) => {
                        let parent = self.levels[idx + 1].nodes.get(p as usize);
                        if !parent.is_some_and(|pn| pn.children.contains(&n.node_id)) {
                            return bad(format!(
                                "level {level} node {i}: parent {p} does not list it"
                            ));
                        }
                    }
                    _ => return bad(format!("level {level} node {i} has an inconsistent parent")),
                }
                if level == 1 {
                    if !n.children.is_empty() {
                        return bad(format!("level 1 node {i} has children"));
                    }
                } else {
                    let below = &self.levels[idx - 1].nodes;
                    let mut sum = 0u64;
                    for &c in &n.children {
                        match below.get(c as usize) {
                            Some(cn) if cn.parent == Some(n.node_id) => {
                                sum += u64::from(cn.leaf_span)
                            }
                            _ => {
                                return bad(format!(
                                    "level {level} node {i}: child {c} does not point back"
                                ))
                            }
                        }
                    }
                    if n.children.is_empty() || sum != u64::from(n.leaf_span) {
                        return bad(format!(
                            "level {level} node {i}: leaf span {} != children sum {sum}",
                            n.leaf_span
                        ));
                    }
                }
            }
            if span_total != corpus_size as u64 {
                return bad(format!(
                    "level {level} spans {span_total} leaves, corpus has {corpus_size}"
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub nodes: usize,
    pub mean_leaf_span: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildStats {
    pub schema: String,
    pub levels: Vec<LevelStats>,
    pub total_units: usize,
    pub corpus_size: usize,
    pub compaction_ratio: f64,
    pub fallback_count: usize,
}

pub fn bank_stats(bank: &MemoryBank) -> BuildStats {
    let levels: Vec<LevelStats> = bank
        .levels()
        .iter()
        .enumerate()
        .map(|(i, l)| LevelStats {
            level: i + 1,
            nodes: l.len(),
            mean_leaf_span: l.nodes.iter().map(|n| f64::from(n.leaf_span)).sum::<f64>()
                / l.len() as f64,
        })
        .collect();
    let total_units = levels.iter().map(|l| l.nodes).sum();
    let corpus_size = bank.provenance().corpus_size;
    BuildStats {
        schema: "hiermem.stats/1".into(),
        levels,
        total_units,
        corpus_size,
        compaction_ratio: total_units as f64 / corpus_size as f64,
        fallback_count: bank.provenance().fallback_count,
    }
}
