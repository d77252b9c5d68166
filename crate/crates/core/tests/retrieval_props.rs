mod common;

use common::*;
use hiermem::membank::{BankLevel, BankMode, MemoryBank, MemoryNode, Provenance};
use hiermem::retrieval::{
    aggregate, anchor_slices, make_anchors, read_hierarchical, retrieve, AnchorTrace, LevelSpec,
    ReadMode, RetrievalConfig, Selection,
};
use hiermem::vector::EmbeddingMatrix;
use proptest::prelude::*;
use rand::Rng;

fn descendants_ok(bank: &MemoryBank, trace: &AnchorTrace) -> bool {
    trace.levels.windows(2).all(|w| {
        let (upper, lower) = (&w[0], &w[1]);
        lower.selected.iter().all(|s| {
            let parent = bank.node(lower.level, s.node).parent;
            upper.selected.iter().any(|u| Some(u.node) == parent)
        })
    })
}

#[test]
fn wide_k_matches_flat_top_k_and_descends() {
    for b in 0..6u64 {
        let bank = random_bank(100 + b);
        let k = bank.max_level_width();
        let cfg = RetrievalConfig {
            k,
            ..Default::default()
        };
        let mut r = rng(200 + b);
        for _ in 0..50 {
            let q = gaussian(&mut r, bank.dim());
            let trace = read_hierarchical(&bank, &q, &cfg).unwrap();
            let mut got: Vec<u32> = trace
                .at_level(1)
                .unwrap()
                .selected
                .iter()
                .map(|s| s.node)
                .collect();
            got.sort_unstable();
            assert_eq!(got, flat_top_k(&bank, &q, k));
            assert!(descendants_ok(&bank, &trace));
        }
    }
}

#[test]
fn containment_holds_for_small_k_and_every_rule() {
    let bank = random_bank(7);
    let mut r = rng(8);
    for selection in [Selection::Max, Selection::TopK, Selection::Threshold] {
        for k in [1, 2, 5] {
            let cfg = RetrievalConfig {
                k,
                selection,
                threshold: 0.3,
                ..Default::default()
            };
            for _ in 0..40 {
                let q = gaussian(&mut r, bank.dim());
                let trace = read_hierarchical(&bank, &q, &cfg).unwrap();
                assert!(descendants_ok(&bank, &trace));
                assert_eq!(trace.levels.len(), bank.num_levels());
                for t in &trace.levels {
                    assert!(!t.selected.is_empty());
                }
            }
        }
    }
}

#[test]
fn work_bound() {
    let bank = random_bank(21);
    let k = 3;
    let cfg = RetrievalConfig {
        k,
        ..Default::default()
    };
    let max_children = (2..=bank.num_levels())
        .flat_map(|l| bank.level(l).nodes.iter().map(|n| n.children.len()))
        .max()
        .unwrap_or(0);
    let top = bank.level(bank.num_levels()).len();
    let bound = top + (bank.num_levels() - 1) * k * max_children;
    let mut r = rng(22);
    for _ in 0..100 {
        let q = gaussian(&mut r, bank.dim());
        assert!(read_hierarchical(&bank, &q, &cfg).unwrap().comparison_count <= bound);
    }
}

/// Two parents, each the renormalized mean of two orthogonal children.
fn two_level_bank() -> MemoryBank {
    let s = std::f32::consts::FRAC_1_SQRT_2;
    let children = EmbeddingMatrix::from_rows(
        4,
        &[
            [1.0f32, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
    )
    .unwrap();
    let parents = EmbeddingMatrix::from_rows(4, &[[s, s, 0.0, 0.0], [0.0, 0.0, s, s]]).unwrap();
    let leaf = |i: u32, p: u32| MemoryNode {
        level: 1,
        node_id: i,
        text: format!("c{i}"),
        member_count: 1,
        leaf_span: 1,
        parent: Some(p),
        children: vec![],
    };
    let parent = |i: u32| MemoryNode {
        level: 2,
        node_id: i,
        text: format!("p{i}"),
        member_count: 2,
        leaf_span: 2,
        parent: None,
        children: vec![2 * i, 2 * i + 1],
    };
    MemoryBank::new(
        vec![
            BankLevel {
                nodes: vec![leaf(0, 0), leaf(1, 0), leaf(2, 1), leaf(3, 1)],
                embeddings: children,
            },
            BankLevel {
                nodes: vec![parent(0), parent(1)],
                embeddings: parents,
            },
        ],
        Provenance {
            format: "hcmb/1".into(),
            mode: BankMode::Hierarchical,
            corpus_hash: String::new(),
            corpus_size: 4,
            normalized: true,
            summarizer: "manual".into(),
            embedder: "none".into(),
            template_version: String::new(),
            build_timestamp: None,
            fallback_count: 0,
            warnings: vec![],
            config: serde_json::Value::Null,
        },
    )
    .unwrap()
}

#[test]
fn hand_built_two_level_read() {
    let bank = two_level_bank();
    let cfg = RetrievalConfig {
        k: 1,
        ..Default::default()
    };
    // Query c1: cosines to parents are 1/√2 and 0; to c0, c1 they are 0 and 1.
    let trace = read_hierarchical(&bank, &[0.0, 1.0, 0.0, 0.0], &cfg).unwrap();
    let top = trace.at_level(2).unwrap();
    assert_eq!(top.selected[0].node, 0);
    assert!((top.selected[0].similarity - 0.5f64.sqrt()).abs() < 1e-7);
    let low = trace.at_level(1).unwrap();
    assert_eq!(low.candidates, 2);
    assert_eq!(low.selected[0].node, 1);
    assert_eq!(low.selected[0].similarity, 1.0);
    assert_eq!(trace.comparison_count, 4);

    // Two rounds: level 1 gives c1, level 2 gives p0; r_a is their mean.
    let anchors = EmbeddingMatrix::from_rows(4, &[[0.0f32, 1.0, 0.0, 0.0]]).unwrap();
    let r = retrieve(&bank, &anchors, &cfg).unwrap();
    let s = 0.5f64.sqrt();
    let expected = [s / 2.0, (1.0 + s) / 2.0, 0.0, 0.0];
    for (got, want) in r.per_anchor[0].feature.iter().zip(expected) {
        assert!((*got as f64 - want).abs() < 1e-6);
    }

    let off = RetrievalConfig {
        hierarchical_aggregation: false,
        ..cfg.clone()
    };
    let r = retrieve(&bank, &anchors, &off).unwrap();
    assert_eq!(r.per_anchor[0].feature, vec![0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn low_only_equals_flat_read() {
    let bank = random_bank(31);
    let mut r = rng(32);
    let low = RetrievalConfig {
        k: 4,
        levels: "low".parse().unwrap(),
        ..Default::default()
    };
    let flat = RetrievalConfig {
        mode: ReadMode::Flat,
        ..low.clone()
    };
    let anchors = EmbeddingMatrix::from_rows(
        bank.dim(),
        &(0..10)
            .map(|_| gaussian(&mut r, bank.dim()))
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let a = retrieve(&bank, &anchors, &low).unwrap();
    let b = retrieve(&bank, &anchors, &flat).unwrap();
    assert_eq!(a.features(), b.features());
    assert_eq!(
        low.levels,
        LevelSpec::Named {
            low: true,
            middle: false,
            high: false
        }
    );
}

#[test]
fn aggregation_two_rounds_by_hand() {
    let (a, b, c) = ([1.0f32, 0.0], [0.0f32, 1.0], [1.0f32, 1.0]);
    // Level 1 mean (0.5, 0.5), level 2 mean (1, 1); across levels (0.75, 0.75).
    let r = aggregate(&[vec![&a[..], &b[..]], vec![&c[..]]], true).unwrap();
    assert!((r[0] - 0.75).abs() < 1e-6 && (r[1] - 0.75).abs() < 1e-6);
    let r = aggregate(&[vec![&a[..], &b[..]], vec![&c[..]]], false).unwrap();
    assert_eq!(r, vec![0.5, 0.5]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn aggregation_is_permutation_invariant(
        levels in prop::collection::vec(prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 6), 1..8), 1..5),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let per: Vec<Vec<&[f32]>> = levels.iter().map(|l| l.iter().map(Vec::as_slice).collect()).collect();
        let mut shuffled = per.clone();
        for l in &mut shuffled {
            for i in (1..l.len()).rev() {
                l.swap(i, r.random_range(0..=i));
            }
        }
        let x = aggregate(&per, true).unwrap();
        let y = aggregate(&shuffled, true).unwrap();
        for (p, q) in x.iter().zip(&y) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn query_scale_does_not_change_anything(seed in any::<u64>(), scale in 0.01f32..100.0) {
        let bank = random_bank(seed % 8);
        let mut r = rng(seed);
        let q = gaussian(&mut r, bank.dim());
        let scaled: Vec<f32> = q.iter().map(|x| x * scale).collect();
        let cfg = RetrievalConfig { k: 3, ..Default::default() };
        let a = read_hierarchical(&bank, &q, &cfg).unwrap();
        let b = read_hierarchical(&bank, &scaled, &cfg).unwrap();
        let ids = |t: &AnchorTrace| t.levels.iter().map(|l| l.selected.iter().map(|s| s.node).collect::<Vec<_>>()).collect::<Vec<_>>();
        prop_assert_eq!(ids(&a), ids(&b));
    }

    #[test]
    fn anchor_slices_tile_the_frames(frames in 1usize..400, w in 1usize..60) {
        prop_assume!(w <= frames);
        let slices = anchor_slices(frames, w).unwrap();
        prop_assert_eq!(slices.len(), w);
        let mut next = 0;
        for s in &slices {
            prop_assert_eq!(s.start, next);
            prop_assert!(!s.is_empty());
            next = s.end;
        }
        prop_assert_eq!(next, frames);
        prop_assert!(slices.windows(2).all(|p| p[0].len() >= p[1].len()));
    }
}

#[test]
fn anchors_average_their_slices() {
    let frames = EmbeddingMatrix::from_rows(
        2,
        &[
            [1.0f32, 0.0],
            [0.0, 1.0],
            [2.0, 2.0],
            [4.0, 0.0],
            [0.0, 4.0],
        ],
    )
    .unwrap();
    let a = make_anchors(&frames, 2, false).unwrap();
    assert_eq!(a.slices, vec![0..3, 3..5]);
    assert_eq!(a.anchors.row(0), &[1.0, 1.0]);
    assert_eq!(a.anchors.row(1), &[2.0, 2.0]);
    assert!(make_anchors(&frames, 6, true).is_err());
}

#[test]
fn flat_bank_reads_every_leaf() {
    let corpus = random_corpus(41, 50, 8);
    let bank = build(&corpus, &hiermem::Summarizer::medoid(), BankMode::Flat);
    let mut r = rng(42);
    let q = gaussian(&mut r, 8);
    let t = read_hierarchical(
        &bank,
        &q,
        &RetrievalConfig {
            k: 3,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(t.comparison_count, 50);
    let mut got: Vec<u32> = t.levels[0].selected.iter().map(|s| s.node).collect();
    got.sort_unstable();
    assert_eq!(got, flat_top_k(&bank, &q, 3));
}
