//! Top-down reads of a memory bank.
//!
//! Frame features are averaged into temporal anchors. Each anchor scans the
//! highest requested level, keeps the best nodes, and continues among the
//! children of everything it kept, level by level. Selected features are
//! averaged within each level, then across levels.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::membank::{BankLevel, MemoryBank};
use crate::vector::{dot, norm, normalize_in_place, EmbeddingMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub anchors: EmbeddingMatrix,
    pub slices: Vec<Range<usize>>,
    pub source_frame_count: usize,
}

/// Splits `0..frames` into `w` contiguous slices whose sizes differ by at
/// most one; earlier slices take the remainder.
pub fn anchor_slices(frames: usize, w: usize) -> Result<Vec<Range<usize>>> {
    if w == 0 {
        return Err(Error::Invalid("anchor count must be at least 1".into()));
    }
    if w > frames {
        return Err(Error::Invalid(format!(
            "{w} anchors requested from {frames} frames"
        )));
    }
    let (base, extra) = (frames / w, frames % w);
    let mut start = 0;
    Ok((0..w)
        .map(|a| {
            let len = base + usize::from(a < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// Averages each slice of frame features into one anchor.
pub fn make_anchors(frames: &EmbeddingMatrix, w: usize, renormalize: bool) -> Result<AnchorSet> {
    if let Some(i) = frames.first_non_finite() {
        return Err(Error::NonFinite { index: i });
    }
    let slices = anchor_slices(frames.len(), w)?;
    let mut anchors = EmbeddingMatrix::with_capacity(frames.dim(), w);
    for s in &slices {
        let mut a = crate::vector::mean(frames.dim(), s.clone().map(|i| frames.row(i)));
        if renormalize {
            normalize_in_place(&mut a);
        }
        anchors.push(&a)?;
    }
    Ok(AnchorSet {
        anchors,
        slices,
        source_frame_count: frames.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// The single most similar node.
    Max,
    /// The `k` most similar nodes.
    TopK,
    /// Every node at or above the threshold, else the single best.
    Threshold,
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Selection::Max),
            "top_k" | "topk" | "top-k" => Ok(Selection::TopK),
            "threshold" | "similarity" => Ok(Selection::Threshold),
            other => Err(Error::Config(format!("unknown selection {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadMode {
    #[default]
    Hierarchical,
    /// Scan every finest-level node.
    Flat,
}

/// Which levels contribute to aggregation. `low` is level 1, `high` the top
/// level, `middle` everything in between.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum LevelSpec {
    #[default]
    All,
    Named {
        low: bool,
        middle: bool,
        high: bool,
    },
    Explicit(Vec<usize>),
}

impl LevelSpec {
    /// Inclusion flag per level, index 0 = level 1.
    pub fn resolve(&self, num_levels: usize) -> Result<Vec<bool>> {
        let mut mask = vec![false; num_levels];
        match self {
            LevelSpec::All => mask.iter_mut().for_each(|m| *m = true),
            LevelSpec::Named { low, middle, high } => {
                for (i, m) in mask.iter_mut().enumerate() {
                    let level = i + 1;
                    *m = (*low && level == 1)
                        || (*high && level == num_levels)
                        || (*middle && level > 1 && level < num_levels);
                }
            }
            LevelSpec::Explicit(levels) => {
                for &l in levels {
                    if l == 0 || l > num_levels {
                        return Err(Error::Config(format!("level {l} outside 1..={num_levels}")));
                    }
                    mask[l - 1] = true;
                }
            }
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Config(format!(
                "level mask {self} selects no level of a {num_levels}-level bank"
            )));
        }
        Ok(mask)
    }
}

impl FromStr for LevelSpec {
    type Err = Error;

    /// `all`, any `+`-joined combination of `low`/`middle`/`high`, or a
    /// comma-separated list of level numbers.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::Config("empty level mask".into()));
        }
        if s == "all" {
            return Ok(LevelSpec::All);
        }
        if s.chars().next().is_some_and(|c| c.is_ascii_digit()) {
            let levels = s
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad level {p:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            return Ok(LevelSpec::Explicit(levels));
        }
        let (mut low, mut middle, mut high) = (false, false, false);
        for part in s.split('+') {
            match part.trim() {
                "low" => low = true,
                "middle" | "mid" => middle = true,
                "high" => high = true,
                other => return Err(Error::Config(format!("unknown level group {other:?}"))),
            }
        }
        Ok(LevelSpec::Named { low, middle, high })
    }
}

impl fmt::Display for LevelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LevelSpec::All => f.write_str("all"),
            LevelSpec::Named { low, middle, high } => {
                let parts: Vec<&str> = [(*low, "low"), (*middle, "middle"), (*high, "high")]
                    .into_iter()
                    .filter_map(|(on, n)| on.then_some(n))
                    .collect();
                f.write_str(&parts.join("+"))
            }
            LevelSpec::Explicit(v) => {
                let parts: Vec<String> = v.iter().map(usize::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl Serialize for LevelSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LevelSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub selection: Selection,
    pub threshold: f64,
    pub levels: LevelSpec,
    pub hierarchical_aggregation: bool,
    pub mode: ReadMode,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            selection: Selection::TopK,
            threshold: 0.5,
            levels: LevelSpec::All,
            hierarchical_aggregation: true,
            mode: ReadMode::Hierarchical,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.threshold > -1.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {} outside (-1, 1)",
                self.threshold
            )));
        }
        if let LevelSpec::Named {
            low: false,
            middle: false,
            high: false,
        } = self.levels
        {
            return Err(Error::Config("level mask is empty".into()));
        }
        if matches!(&self.levels, LevelSpec::Explicit(v) if v.is_empty()) {
            return Err(Error::Config("level mask is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub node: u32,
    pub similarity: f64,
}

/// Selections made at one level during a read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub level: usize,
    /// Whether the level contributes to aggregation.
    pub included: bool,
    pub candidates: usize,
    pub selected: Vec<Selected>,
}

/// Query norm paired with the query, so per-candidate cosine needs only the
/// node's norm.
struct Query<'a> {
    values: &'a [f32],
    norm: f64,
}

fn similarity(q: &Query<'_>, node: &[f32], node_norm: f64) -> f64 {
    let d = q.norm * node_norm;
    if d == 0.0 {
        0.0
    } else {
        dot(q.values, node) / d
    }
}

/// Ranks `candidates` of one level against `query` and applies the
/// selection rule. Ties go to the smaller node id.
pub fn select_at_level(
    query: &[f32],
    level: &BankLevel,
    candidates: &[u32],
    config: &RetrievalConfig,
) -> Result<Vec<Selected>> {
    let q = Query {
        values: query,
        norm: norm(query),
    };
    select_with(&q, level, None, candidates, config)
}

fn select_with(
    q: &Query<'_>,
    level: &BankLevel,
    norms: Option<&[f64]>,
    candidates: &[u32],
    config: &RetrievalConfig,
) -> Result<Vec<Selected>> {
    if candidates.is_empty() {
        return Err(Error::Invalid("empty candidate set".into()));
    }
    let mut scored: Vec<Selected> = candidates
        .iter()
        .map(|&c| {
            let row = level.embeddings.row(c as usize);
            let n = norms.map_or_else(|| norm(row), |ns| ns[c as usize]);
            Selected {
                node: c,
                similarity: similarity(q, row, n),
            }
        })
        .collect();
    let order = |a: &Selected, b: &Selected| {
        b.similarity
            .total_cmp(&a.similarity)
            .then(a.node.cmp(&b.node))
    };
    match config.selection {
        Selection::Max | Selection::TopK => {
            let keep = if config.selection == Selection::Max {
                1
            } else {
                config.k.min(scored.len())
            };
            if keep < scored.len() {
                scored.select_nth_unstable_by(keep - 1, order);
                scored.truncate(keep);
            }
            scored.sort_unstable_by(order);
        }
        Selection::Threshold => {
            scored.sort_unstable_by(order);
            let passing = scored
                .iter()
                .take_while(|s| s.similarity >= config.threshold)
                .count();
            scored.truncate(passing.max(1));
        }
    }
    Ok(scored)
}

/// One anchor's read: selections from the start level downwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorTrace {
    /// Coarsest level first.
    pub levels: Vec<LevelTrace>,
    pub comparison_count: usize,
}

impl AnchorTrace {
    pub fn at_level(&self, level: usize) -> Option<&LevelTrace> {
        self.levels.iter().find(|t| t.level == level)
    }
}

/// Top-down read for one query. Starts with a full scan of the highest
/// included level and descends through the union of children of all
/// selected nodes, down to the lowest included level.
pub fn read_hierarchical(
    bank: &MemoryBank,
    query: &[f32],
    config: &RetrievalConfig,
) -> Result<AnchorTrace> {
    config.validate()?;
    check_dim(bank, query)?;
    let q = Query {
        values: query,
        norm: norm(query),
    };
    read_with(bank, &q, config)
}

fn check_dim(bank: &MemoryBank, query: &[f32]) -> Result<()> {
    if query.len() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            actual: query.len(),
        });
    }
    if query.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index: 0 });
    }
    Ok(())
}

fn read_with(bank: &MemoryBank, q: &Query<'_>, config: &RetrievalConfig) -> Result<AnchorTrace> {
    if config.mode == ReadMode::Flat {
        let level = bank.level(1);
        let all: Vec<u32> = (0..level.len() as u32).collect();
        let selected = select_with(q, level, Some(bank.norms(1)), &all, config)?;
        return Ok(AnchorTrace {
            levels: vec![LevelTrace {
                level: 1,
                included: true,
                candidates: all.len(),
                selected,
            }],
            comparison_count: all.len(),
        });
    }
    let mask = config.levels.resolve(bank.num_levels())?;
    let start = mask.iter().rposition(|&m| m).expect("mask is non-empty") + 1;
    let lowest = mask.iter().position(|&m| m).expect("mask is non-empty") + 1;
    let mut candidates: Vec<u32> = (0..bank.level(start).len() as u32).collect();
    let mut levels = Vec::with_capacity(start - lowest + 1);
    let mut comparisons = 0;
    for level in (lowest..=start).rev() {
        let considered = candidates.len();
        comparisons += considered;
        let selected = select_with(
            q,
            bank.level(level),
            Some(bank.norms(level)),
            &candidates,
            config,
        )?;
        if level > lowest {
            let mut next: Vec<u32> = selected
                .iter()
                .flat_map(|s| bank.node(level, s.node).children.iter().copied())
                .collect();
            next.sort_unstable();
            next.dedup();
            candidates = next;
        }
        levels.push(LevelTrace {
            level,
            included: mask[level - 1],
            candidates: considered,
            selected,
        });
    }
    Ok(AnchorTrace {
        levels,
        comparison_count: comparisons,
    })
}

/// Two-round average pooling. `per_level` holds, finest level first, the
/// selected features of each included level. Round one averages within a
/// level; round two averages the round-one features. Without hierarchical
/// aggregation the finest level's round-one feature is returned.
pub fn aggregate(per_level: &[Vec<&[f32]>], hierarchical_aggregation: bool) -> Result<Vec<f32>> {
    let dim = per_level
        .iter()
        .flatten()
        .map(|f| f.len())
        .next()
        .ok_or_else(|| {
            Error::Invalid("nothing to aggregate: every level is masked or empty".into())
        })?;
    let round_one: Vec<Vec<f64>> = per_level
        .iter()
        .filter(|feats| !feats.is_empty())
        .map(|feats| {
            let mut acc = vec![0.0f64; dim];
            for f in feats {
                for (a, x) in acc.iter_mut().zip(f.iter()) {
                    *a += f64::from(*x);
                }
            }
            let n = feats.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            acc
        })
        .collect();
    let pooled = if hierarchical_aggregation {
        let mut acc = vec![0.0f64; dim];
        for r in &round_one {
            for (a, x) in acc.iter_mut().zip(r) {
                *a += x;
            }
        }
        let n = round_one.len() as f64;
        acc.into_iter().map(|a| a / n).collect()
    } else {
        round_one.into_iter().next().expect("at least one level")
    };
    Ok(pooled.into_iter().map(|x| x as f32).collect())
}

/// Pools the bank features named by an anchor trace.
pub fn aggregate_trace(
    bank: &MemoryBank,
    trace: &AnchorTrace,
    config: &RetrievalConfig,
) -> Result<Vec<f32>> {
    let mut included: Vec<&LevelTrace> = trace.levels.iter().filter(|t| t.included).collect();
    included.sort_by_key(|t| t.level);
    let per_level: Vec<Vec<&[f32]>> = included
        .iter()
        .map(|t| {
            t.selected
                .iter()
                .map(|s| bank.embedding(t.level, s.node))
                .collect()
        })
        .collect();
    let hierarchical = config.hierarchical_aggregation && config.mode == ReadMode::Hierarchical;
    aggregate(&per_level, hierarchical)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorResult {
    pub anchor: usize,
    #[serde(rename = "r_a", with = "f32_base64")]
    pub feature: Vec<f32>,
    pub comparison_count: usize,
    pub trace: Vec<LevelTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub per_anchor: Vec<AnchorResult>,
}

impl RetrievalResult {
    pub fn features(&self) -> EmbeddingMatrix {
        let dim = self.per_anchor.first().map_or(0, |a| a.feature.len());
        let mut m = EmbeddingMatrix::with_capacity(dim, self.per_anchor.len());
        for a in &self.per_anchor {
            m.push(&a.feature).expect("uniform feature dimension");
        }
        m
    }
}

/// Reads and pools every anchor independently.
pub fn retrieve(
    bank: &MemoryBank,
    anchors: &EmbeddingMatrix,
    config: &RetrievalConfig,
) -> Result<RetrievalResult> {
    config.validate()?;
    if anchors.is_empty() {
        return Err(Error::Invalid("no anchors".into()));
    }
    if anchors.dim() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            actual: anchors.dim(),
        });
    }
    let per_anchor = (0..anchors.len())
        .into_par_iter()
        .map(|a| {
            let query = anchors.row(a);
            let run = || -> Result<AnchorResult> {
                check_dim(bank, query)?;
                let q = Query {
                    values: query,
                    norm: norm(query),
                };
                let trace = read_with(bank, &q, config)?;
                let feature = aggregate_trace(bank, &trace, config)?;
                Ok(AnchorResult {
                    anchor: a,
                    feature,
                    comparison_count: trace.comparison_count,
                    trace: trace.levels,
                })
            };
            run().map_err(|e| Error::Anchor {
                anchor: a,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalResult { per_anchor })
}

/// Maps timestamps to `b` evenly spaced bins over `[0, duration]`;
/// `t = duration` falls in the last bin.
pub fn time_tokens(timestamps: &[f64], duration: f64, b: u32) -> Result<Vec<u32>> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::Invalid(format!(
            "duration {duration} must be positive"
        )));
    }
    if b == 0 {
        return Err(Error::Invalid("need at least one time token".into()));
    }
    timestamps
        .iter()
        .map(|&t| {
            if !(0.0..=duration).contains(&t) {
                return Err(Error::Invalid(format!(
                    "timestamp {t} outside [0, {duration}]"
                )));
            }
            Ok(((t / duration * f64::from(b)).floor() as u32).min(b - 1))
        })
        .collect()
}

/// Serializes an f32 vector as base64 of its little-endian bytes.
pub mod f32_base64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn encode(v: &[f32]) -> String {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        STANDARD.encode(bytes)
    }

    pub fn decode(s: &str) -> Result<Vec<f32>, String> {
        let bytes = STANDARD.decode(s).map_err(|e| e.to_string())?;
        if bytes.len() % 4 != 0 {
            return Err(format!(
                "{} bytes is not a whole number of f32 values",
                bytes.len()
            ));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn serialize<S: Serializer>(v: &[f32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f32>, D::Error> {
        let s = String::deserialize(d)?;
        decode(&s).map_err(serde::de::Error::custom)
    }
}
