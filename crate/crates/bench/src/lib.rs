//! Fixtures shared by the benchmarks.

use hiermem::eval::{generate, EvalConfig};
use hiermem::Corpus;

/// Planted corpus of `super_clusters × 20 × 10` captions in 64 dimensions.
pub fn planted(super_clusters: usize) -> Corpus {
    let config = EvalConfig {
        super_clusters,
        ..Default::default()
    };
    generate(&config).expect("valid generator settings").corpus
}
