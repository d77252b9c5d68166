//! One compact representation (text + embedding) per cluster per level.
//!
//! Level 1 summarizes raw captions; level `l > 1` summarizes the level `l-1`
//! summaries of its member clusters.

pub mod llm;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Embedder};
use crate::error::{Error, Result};
use crate::finch::PartitionHierarchy;
use crate::http::HttpSettings;
use crate::vector::{cosine, mean, normalize_in_place, EmbeddingMatrix};

pub use llm::{LlmSummarizer, ReplyCache, TEMPLATE_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummarizerKind {
    LlmHttp,
    Medoid,
    Centroid,
}

impl SummarizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SummarizerKind::LlmHttp => "llm_http",
            SummarizerKind::Medoid => "medoid",
            SummarizerKind::Centroid => "centroid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummarizerConfig {
    pub kind: SummarizerKind,
    pub url: String,
    pub model: String,
    pub max_words: usize,
    pub timeout_ms: u64,
    pub retries: u32,
    pub max_in_flight: usize,
    pub auth_env: String,
    pub cache_dir: Option<PathBuf>,
    /// Use the medoid when the LLM fails instead of failing the build.
    pub fallback_to_medoid: bool,
    /// Summaries estimated above this many tokens get a truncation warning.
    pub max_embed_tokens: usize,
}

impl Default for SummarizerConfig {
    fn default() -> Self {
        Self {
            kind: SummarizerKind::Medoid,
            url: "http://127.0.0.1:8082/chat".into(),
            model: "llama3-70b".into(),
            max_words: 30,
            timeout_ms: 60_000,
            retries: 3,
            max_in_flight: 8,
            auth_env: "HIERMEM_LLM_TOKEN".into(),
            cache_dir: None,
            fallback_to_medoid: true,
            max_embed_tokens: 77,
        }
    }
}

pub struct Summarizer {
    config: SummarizerConfig,
    llm: Option<LlmSummarizer>,
}

impl Summarizer {
    pub fn from_config(config: &SummarizerConfig) -> Result<Self> {
        if config.max_words == 0 {
            return Err(Error::Config(
                "summarizer.max_words must be positive".into(),
            ));
        }
        let llm = (config.kind == SummarizerKind::LlmHttp).then(|| {
            LlmSummarizer::new(
                config.model.clone(),
                config.max_words,
                HttpSettings {
                    url: config.url.clone(),
                    timeout: Duration::from_millis(config.timeout_ms),
                    retries: config.retries,
                    backoff_base: Duration::from_millis(500),
                    max_in_flight: config.max_in_flight,
                    bearer_token: std::env::var(&config.auth_env).ok(),
                },
                config.cache_dir.clone().map(ReplyCache::new),
            )
        });
        Ok(Self {
            config: config.clone(),
            llm,
        })
    }

    pub fn medoid() -> Self {
        Self::from_config(&SummarizerConfig::default()).expect("default config is valid")
    }

    pub fn centroid() -> Self {
        Self::from_config(&SummarizerConfig {
            kind: SummarizerKind::Centroid,
            ..Default::default()
        })
        .expect("default config is valid")
    }

    pub fn kind(&self) -> SummarizerKind {
        self.config.kind
    }

    pub fn config(&self) -> &SummarizerConfig {
        &self.config
    }

    fn parallelism(&self) -> usize {
        self.llm.as_ref().map_or(1, |l| l.max_in_flight())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSummary {
    pub level: usize,
    pub cluster_id: usize,
    pub text: String,
    pub embedding: Vec<f32>,
    pub member_count: usize,
    /// The LLM failed and the medoid was used instead.
    pub fallback: bool,
    pub warnings: Vec<String>,
}

/// Index of the member closest (cosine) to the member mean; smallest index
/// on ties.
pub fn medoid_index(dim: usize, embeddings: &[&[f32]]) -> usize {
    let center = mean(dim, embeddings.iter().copied());
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, e) in embeddings.iter().enumerate() {
        let s = cosine(e, &center);
        if s > best {
            best = s;
            arg = i;
        }
    }
    arg
}

/// Summarizes one cluster; `level` and `cluster_id` are left at zero for
/// the caller to fill in.
pub fn summarize_cluster(
    summarizer: &Summarizer,
    member_texts: &[&str],
    embedder: &dyn Embedder,
    member_embeddings: &[&[f32]],
) -> Result<ClusterSummary> {
    if member_texts.is_empty() {
        return Err(Error::Invalid("cluster has no members".into()));
    }
    if member_embeddings.len() != member_texts.len() {
        return Err(Error::Invalid(format!(
            "{} texts but {} embeddings",
            member_texts.len(),
            member_embeddings.len()
        )));
    }
    let dim = member_embeddings[0].len();
    let summary = |text: String, embedding: Vec<f32>| ClusterSummary {
        level: 0,
        cluster_id: 0,
        text,
        embedding,
        member_count: member_texts.len(),
        fallback: false,
        warnings: Vec::new(),
    };
    let medoid = || {
        let i = medoid_index(dim, member_embeddings);
        summary(member_texts[i].to_owned(), member_embeddings[i].to_vec())
    };
    match summarizer.kind() {
        SummarizerKind::Medoid => Ok(medoid()),
        SummarizerKind::Centroid => {
            let mut c = mean(dim, member_embeddings.iter().copied());
            if !normalize_in_place(&mut c) {
                return Err(Error::DegenerateMean {
                    members: member_texts.len(),
                });
            }
            Ok(summary(
                format!("⟨centroid of {} members⟩", member_texts.len()),
                c,
            ))
        }
        SummarizerKind::LlmHttp => {
            let llm = summarizer
                .llm
                .as_ref()
                .expect("llm client built for llm_http");
            let attempt = llm.summarize(member_texts).and_then(|text| {
                let embedding = crate::corpus::embed_text(embedder, &text)?;
                Ok((text, embedding))
            });
            match attempt {
                Ok((text, embedding)) => {
                    let mut s = summary(text, embedding);
                    let est = estimate_tokens(&s.text);
                    if est > summarizer.config.max_embed_tokens {
                        s.warnings.push(format!(
                            "summary of ~{est} tokens may be truncated by the embedder (limit {})",
                            summarizer.config.max_embed_tokens
                        ));
                    }
                    Ok(s)
                }
                Err(e) if summarizer.config.fallback_to_medoid => {
                    let mut s = medoid();
                    s.fallback = true;
                    s.warnings
                        .push(format!("llm summary failed, used medoid: {e}"));
                    Ok(s)
                }
                Err(e) => Err(e),
            }
        }
    }
}

/// Rough subword count: 4 tokens per 3 words plus one per punctuation mark.
pub fn estimate_tokens(text: &str) -> usize {
    let words = text.split_whitespace().count();
    let punct = text.chars().filter(|c| c.is_ascii_punctuation()).count();
    words * 4 / 3 + punct
}

/// Text and embedding for each unit of the level below the one being
/// compacted.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelInputs {
    pub texts: Vec<String>,
    pub embeddings: EmbeddingMatrix,
}

impl LevelInputs {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        Self {
            texts: corpus.texts().to_vec(),
            embeddings: corpus.embeddings().clone(),
        }
    }

    pub fn from_summaries(dim: usize, summaries: &[ClusterSummary]) -> Result<Self> {
        let mut embeddings = EmbeddingMatrix::with_capacity(dim, summaries.len());
        for s in summaries {
            embeddings.push(&s.embedding)?;
        }
        Ok(Self {
            texts: summaries.iter().map(|s| s.text.clone()).collect(),
            embeddings,
        })
    }
}

/// One summary per cluster at `level` (1-based), ordered by cluster id.
/// Any cluster failure aborts the whole level.
pub fn compact_level(
    hierarchy: &PartitionHierarchy,
    level: usize,
    inputs: &LevelInputs,
    summarizer: &Summarizer,
    embedder: &dyn Embedder,
) -> Result<Vec<ClusterSummary>> {
    if level == 0 || level > hierarchy.num_levels() {
        return Err(Error::Invalid(format!(
            "level {level} outside 1..={}",
            hierarchy.num_levels()
        )));
    }
    let part = hierarchy.level(level);
    if part.parent_of_prev.len() != inputs.texts.len() {
        return Err(Error::Invalid(format!(
            "level {level} groups {} units but {} inputs were given",
            part.parent_of_prev.len(),
            inputs.texts.len()
        )));
    }
    let groups = part.groups();
    let run = |cluster: usize| -> Result<ClusterSummary> {
        let members = &groups[cluster];
        let texts: Vec<&str> = members.iter().map(|&u| inputs.texts[u].as_str()).collect();
        let embs: Vec<&[f32]> = members.iter().map(|&u| inputs.embeddings.row(u)).collect();
        let mut s = summarize_cluster(summarizer, &texts, embedder, &embs).map_err(|e| {
            Error::Compaction {
                level,
                cluster,
                source: Box::new(e),
            }
        })?;
        if s.embedding.len() != inputs.embeddings.dim() {
            return Err(Error::Compaction {
                level,
                cluster,
                source: Box::new(Error::DimensionMismatch {
                    expected: inputs.embeddings.dim(),
                    actual: s.embedding.len(),
                }),
            });
        }
        s.level = level;
        s.cluster_id = cluster;
        Ok(s)
    };

    let results: Vec<Result<ClusterSummary>> = if summarizer.llm.is_some() {
        run_bounded(groups.len(), summarizer.parallelism(), run)
    } else {
        (0..groups.len()).into_par_iter().map(run).collect()
    };
    results.into_iter().collect()
}

/// Runs `f` over `0..n` on at most `workers` threads; results in index order.
fn run_bounded<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunks: Vec<Vec<(usize, T)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers.clamp(1, n.max(1)))
            .map(|_| {
                s.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= n {
                            break out;
                        }
                        out.push((i, f(i)));
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    for (i, v) in chunks.into_iter().flatten() {
        slots[i] = Some(v);
    }
    slots
        .into_iter()
        .map(|v| v.expect("every index ran"))
        .collect()
}

/// Compacts every level bottom-up. Level `l` starts only after level `l-1`
/// is complete.
pub fn compact_all(
    corpus: &Corpus,
    hierarchy: &PartitionHierarchy,
    summarizer: &Summarizer,
    embedder: &dyn Embedder,
) -> Result<Vec<Vec<ClusterSummary>>> {
    let mut out: Vec<Vec<ClusterSummary>> = Vec::with_capacity(hierarchy.num_levels());
    let mut inputs = LevelInputs::from_corpus(corpus);
    for level in 1..=hierarchy.num_levels() {
        let summaries = compact_level(hierarchy, level, &inputs, summarizer, embedder)?;
        inputs = LevelInputs::from_summaries(corpus.dim(), &summaries)?;
        out.push(summaries);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CaptionRecord, StubEmbedder};
    use crate::finch::{build_hierarchy, FinchConfig};
    use crate::http::mock;

    fn unit(deg: f64) -> Vec<f32> {
        let r = deg.to_radians();
        vec![r.cos() as f32, r.sin() as f32]
    }

    #[test]
    fn single_member_medoid_is_identity() {
        let e = unit(30.0);
        let s = summarize_cluster(
            &Summarizer::medoid(),
            &["stir"],
            &StubEmbedder::new(2),
            &[&e],
        )
        .unwrap();
        assert_eq!(s.text, "stir");
        assert_eq!(s.embedding, e);
        assert_eq!(s.member_count, 1);
    }

    #[test]
    fn medoid_is_member_nearest_the_mean() {
        // Angles 0°, 20°, 70°: mean direction is atan2(Σsin, Σcos) ≈ 29.3°,
        // so 20° is closest (9.3° away, vs 29.3° and 40.7°).
        let (a, b, c) = (unit(0.0), unit(20.0), unit(70.0));
        let s = summarize_cluster(
            &Summarizer::medoid(),
            &["a", "b", "c"],
            &StubEmbedder::new(2),
            &[&a, &b, &c],
        )
        .unwrap();
        assert_eq!(s.text, "b");
        assert_eq!(s.embedding, b);
    }

    #[test]
    fn centroid_of_antipodal_pair_fails() {
        let (a, b) = (vec![1.0f32, 0.0], vec![-1.0f32, 0.0]);
        let r = summarize_cluster(
            &Summarizer::centroid(),
            &["x", "y"],
            &StubEmbedder::new(2),
            &[&a, &b],
        );
        assert!(matches!(r, Err(Error::DegenerateMean { members: 2 })));
    }

    #[test]
    fn centroid_text_and_embedding() {
        let (a, b) = (unit(0.0), unit(90.0));
        let s = summarize_cluster(
            &Summarizer::centroid(),
            &["x", "y"],
            &StubEmbedder::new(2),
            &[&a, &b],
        )
        .unwrap();
        assert_eq!(s.text, "⟨centroid of 2 members⟩");
        assert!((s.embedding[0] - s.embedding[1]).abs() < 1e-7);
        assert!((crate::vector::norm(&s.embedding) - 1.0).abs() < 1e-6);
    }

    fn toy_corpus() -> Corpus {
        let recs = [0.0, 5.0, 90.0, 95.0]
            .iter()
            .enumerate()
            .map(|(i, d)| CaptionRecord {
                id: format!("c{i}"),
                text: format!("caption {i}"),
                embedding: unit(*d),
            })
            .collect();
        Corpus::from_records(recs, true).unwrap()
    }

    #[test]
    fn count_identity_on_toy_corpus() {
        let corpus = toy_corpus();
        let h = build_hierarchy(&corpus, &FinchConfig::default()).unwrap();
        let all = compact_all(&corpus, &h, &Summarizer::medoid(), &StubEmbedder::new(2)).unwrap();
        let counts: Vec<usize> = all.iter().map(Vec::len).collect();
        assert_eq!(counts, h.cluster_counts());
        assert_eq!(counts, vec![2, 1]);
        // 0° and 5° are equidistant from their mean; either may win.
        assert!(["caption 0", "caption 1"].contains(&all[0][0].text.as_str()));
        assert_eq!(all[1][0].level, 2);
    }

    #[test]
    fn level_recomputes_from_cached_lower_level() {
        let corpus = toy_corpus();
        let h = build_hierarchy(&corpus, &FinchConfig::default()).unwrap();
        let s = Summarizer::medoid();
        let e = StubEmbedder::new(2);
        let all = compact_all(&corpus, &h, &s, &e).unwrap();
        let inputs = LevelInputs::from_summaries(2, &all[0]).unwrap();
        assert_eq!(compact_level(&h, 2, &inputs, &s, &e).unwrap(), all[1]);
    }

    #[test]
    fn bad_level_is_rejected() {
        let corpus = toy_corpus();
        let h = build_hierarchy(&corpus, &FinchConfig::default()).unwrap();
        let inputs = LevelInputs::from_corpus(&corpus);
        assert!(
            compact_level(&h, 3, &inputs, &Summarizer::medoid(), &StubEmbedder::new(2)).is_err()
        );
        assert!(
            compact_level(&h, 2, &inputs, &Summarizer::medoid(), &StubEmbedder::new(2)).is_err()
        );
    }

    fn llm_config(url: &str, fallback: bool) -> SummarizerConfig {
        SummarizerConfig {
            kind: SummarizerKind::LlmHttp,
            url: url.into(),
            timeout_ms: 2000,
            retries: 0,
            max_in_flight: 2,
            fallback_to_medoid: fallback,
            ..Default::default()
        }
    }

    #[test]
    fn llm_summaries_are_embedded() {
        let server = mock::serve(|_, body| {
            let topic = if body.contains("caption 0") {
                "first pair"
            } else {
                "second pair"
            };
            (200, format!(r#"{{"content":"{topic}"}}"#))
        });
        let corpus = toy_corpus();
        let h = build_hierarchy(&corpus, &FinchConfig::default()).unwrap();
        let s = Summarizer::from_config(&llm_config(&server.url, true)).unwrap();
        let e = StubEmbedder::new(2);
        let level1 = compact_level(&h, 1, &LevelInputs::from_corpus(&corpus), &s, &e).unwrap();
        assert_eq!(level1[0].text, "first pair");
        assert_eq!(level1[1].text, "second pair");
        assert_eq!(level1[0].embedding, e.embed_one("first pair"));
        assert!(!level1[0].fallback);
    }

    #[test]
    fn llm_failure_falls_back_to_medoid() {
        let server = mock::serve(|_, _| (500, "{}".into()));
        let corpus = toy_corpus();
        let h = build_hierarchy(&corpus, &FinchConfig::default()).unwrap();
        let e = StubEmbedder::new(2);
        let inputs = LevelInputs::from_corpus(&corpus);

        let s = Summarizer::from_config(&llm_config(&server.url, true)).unwrap();
        let level1 = compact_level(&h, 1, &inputs, &s, &e).unwrap();
        assert!(level1.iter().all(|c| c.fallback && !c.warnings.is_empty()));
        assert!(level1[0].text.starts_with("caption "));
        assert_eq!(
            level1[0].embedding,
            corpus.embeddings().row(medoid_index(
                2,
                &[corpus.embeddings().row(0), corpus.embeddings().row(1)]
            ))
        );

        let s = Summarizer::from_config(&llm_config(&server.url, false)).unwrap();
        let err = compact_level(&h, 1, &inputs, &s, &e).unwrap_err();
        assert!(matches!(
            err,
            Error::Compaction {
                level: 1,
                cluster: 0,
                ..
            }
        ));
    }

    #[test]
    fn long_summary_gets_token_warning() {
        let long = vec!["word"; 29].join(" ");
        let server = mock::serve(move |_, _| (200, format!(r#"{{"content":"{long}"}}"#)));
        let cfg = SummarizerConfig {
            max_embed_tokens: 20,
            ..llm_config(&server.url, true)
        };
        let s = Summarizer::from_config(&cfg).unwrap();
        let e = unit(0.0);
        let out = summarize_cluster(&s, &["x"], &StubEmbedder::new(2), &[&e]).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert!(!out.fallback);
    }

    #[test]
    fn bounded_runner_keeps_order() {
        let v = run_bounded(20, 3, |i| i * 2);
        assert_eq!(v, (0..20).map(|i| i * 2).collect::<Vec<_>>());
        assert!(run_bounded(0, 3, |i| i).is_empty());
    }
}
