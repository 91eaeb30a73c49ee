//! Exact induced distributions, divergences, likelihoods under known
//! sources, Monte-Carlo estimators and throughput accounting.

mod distribution;
mod enumerate;
mod estimate;
mod export;
mod throughput;

pub use distribution::{
    kl_strings, nll_terms, nll_under_source, tv_distance, SourceProbability, StringDistribution, NLL_FLOOR,
};
pub use enumerate::{enumerate_induced, DEFAULT_LEAF_BUDGET, PRUNE_BELOW};
pub use estimate::{
    conditional_kl, conditional_kl_at_k, sample_reference, tv_terms, Estimate, KlAtK, ReferenceSample,
};
pub use export::{write_long_csv, write_summary, LongRow};
pub use throughput::{benchmark, BenchmarkConfig, ThroughputReport};
