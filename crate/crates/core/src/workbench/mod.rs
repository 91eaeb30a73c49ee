pub mod checkpoint;
mod config;
pub mod pipeline;
mod source;

pub use config::{
    load_config, parse_config, BenchmarkSettings, DataConfig, EvaluationConfig, ExperimentConfig, HarvestConfig,
    ModelConfig, RandomBigram, RandomFactorized, RandomFiniteSupport, SamplerTrainingConfig, SamplingGrid,
    SourceSpec, TwoSentence,
};
pub use pipeline::{Manifest, Pipeline, Stage};
pub use source::{BigramChain, FiniteSupport, SyntheticSource};
