use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoding::{PolicyKind, SamplingConfig};
use crate::error::{Error, Result};
use crate::model::{BaseTrainConfig, ModelDims};
use crate::numerics::RngStream;
use crate::training::{LossPositions, TrainConfig};
use crate::workbench::{BigramChain, FiniteSupport, SyntheticSource};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomBigram {
    pub tokens: usize,
    pub len: usize,
    pub successors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomFiniteSupport {
    pub tokens: usize,
    pub len: usize,
    pub strings: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomFactorized {
    pub tokens: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoSentence {}

/// How to obtain the synthetic source. Random kinds are drawn from the
/// experiment seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    TwoSentence(TwoSentence),
    FiniteSupport(FiniteSupport),
    BigramChain(BigramChain),
    RandomBigram(RandomBigram),
    RandomFiniteSupport(RandomFiniteSupport),
    RandomFactorized(RandomFactorized),
}

impl SourceSpec {
    pub fn build(&self, rng: &mut RngStream) -> Result<SyntheticSource> {
        let src = match self {
            SourceSpec::TwoSentence(_) => SyntheticSource::two_sentence_world(),
            SourceSpec::FiniteSupport(f) => SyntheticSource::FiniteSupport(f.clone()),
            SourceSpec::BigramChain(b) => SyntheticSource::BigramChain(b.clone()),
            SourceSpec::RandomBigram(r) => SyntheticSource::random_bigram(r.tokens, r.len, r.successors, rng)?,
            SourceSpec::RandomFiniteSupport(r) => {
                SyntheticSource::random_finite_support(r.tokens, r.len, r.strings, rng)?
            }
            SourceSpec::RandomFactorized(r) => SyntheticSource::random_factorized(r.tokens, r.len, rng)?,
        };
        src.validate().map_err(|e| Error::Config(format!("source: {e}")))?;
        Ok(src)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_strings: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarvestConfig {
    pub trajectories: usize,
    pub heldout_trajectories: usize,
    /// Truncation points drawn per trajectory.
    pub samples_per_trace: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerTrainingConfig {
    pub k: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub loss_positions: LossPositions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingGrid {
    pub k_grid: Vec<usize>,
    pub temperatures: Vec<f64>,
    pub policies: Vec<PolicyKind>,
    pub top_p: f64,
    pub clamp: bool,
    /// Decodes written per setting by the `sample` stage.
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Reference strings for the Monte-Carlo TV estimate.
    pub tv_samples: usize,
    /// Strings decoded per procedure for likelihood under the source.
    pub nll_samples: usize,
    pub leaf_budget: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSettings {
    pub n_strings: usize,
    pub warmup: usize,
    pub repetitions: usize,
}

/// Everything a pipeline run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub source: SourceSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub base_training: BaseTrainConfig,
    pub harvest: HarvestConfig,
    pub sampler_training: SamplerTrainingConfig,
    pub sampling: SamplingGrid,
    pub evaluation: EvaluationConfig,
    pub benchmark: BenchmarkSettings,
}

/// Parses TOML and validates. Unknown keys are rejected with their path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

fn bad(key: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {why}"))
}

impl ExperimentConfig {
    /// Bigram source over 16 tokens of length 12, a 64-wide 4-block base and
    /// a sampler trained for 4 tokens per step.
    pub fn desk_dream() -> Self {
        ExperimentConfig {
            name: "desk-dream".into(),
            seed: 0,
            out_dir: PathBuf::from("runs/desk-dream"),
            source: SourceSpec::RandomBigram(RandomBigram {
                tokens: 16,
                len: 12,
                successors: 3,
            }),
            data: DataConfig { n_strings: 20_000 },
            model: ModelConfig {
                d: 64,
                blocks: 4,
                heads: 4,
            },
            base_training: BaseTrainConfig {
                epochs: 8,
                lr: 1e-3,
                batch_size: 64,
            },
            harvest: HarvestConfig {
                trajectories: 4000,
                heldout_trajectories: 250,
                samples_per_trace: 4,
            },
            sampler_training: SamplerTrainingConfig {
                k: 4,
                epochs: 8,
                lr: 1e-3,
                batch_size: 32,
                loss_positions: LossPositions::AllMasked,
            },
            sampling: SamplingGrid {
                k_grid: vec![1, 2, 3, 4],
                temperatures: vec![1.0],
                policies: vec![PolicyKind::LeastEntropy],
                top_p: 1.0,
                clamp: false,
                n_samples: 1000,
            },
            evaluation: EvaluationConfig {
                tv_samples: 100_000,
                nll_samples: 10_000,
                leaf_budget: crate::evaluation::DEFAULT_LEAF_BUDGET,
            },
            benchmark: BenchmarkSettings {
                n_strings: 256,
                warmup: 3,
                repetitions: 5,
            },
        }
    }

    /// The two-sentence world with small budgets; runs in about a minute.
    pub fn two_sentence() -> Self {
        let mut c = Self::desk_dream();
        c.name = "two-sentence".into();
        c.out_dir = PathBuf::from("runs/two-sentence");
        c.source = SourceSpec::TwoSentence(TwoSentence {});
        c.data.n_strings = 2000;
        c.model = ModelConfig {
            d: 32,
            blocks: 2,
            heads: 2,
        };
        c.base_training.epochs = 40;
        c.harvest.trajectories = 500;
        c.harvest.heldout_trajectories = 50;
        c.sampler_training.epochs = 60;
        c.sampling.n_samples = 200;
        c.evaluation.tv_samples = 2000;
        c.evaluation.nll_samples = 2000;
        c.benchmark.n_strings = 64;
        c.benchmark.repetitions = 3;
        c
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d == 0 || m.blocks == 0 || m.heads == 0 || !m.d.is_multiple_of(m.heads) {
            return Err(bad("model", "d, blocks, heads must be positive with heads dividing d"));
        }
        if self.data.n_strings == 0 {
            return Err(bad("data.n_strings", "must be positive"));
        }
        let b = &self.base_training;
        if b.batch_size == 0 || !(b.lr >= 0.0 && b.lr.is_finite()) {
            return Err(bad("base_training", "batch_size must be positive and lr finite, non-negative"));
        }
        if self.harvest.trajectories == 0 || self.harvest.samples_per_trace == 0 {
            return Err(bad("harvest", "trajectories and samples_per_trace must be positive"));
        }
        if self.harvest.heldout_trajectories == 0 {
            return Err(bad("harvest.heldout_trajectories", "must be positive"));
        }
        self.train_config()
            .validate()
            .map_err(|e| bad("sampler_training", e))?;
        let s = &self.sampling;
        if s.k_grid.is_empty() || s.temperatures.is_empty() || s.policies.is_empty() {
            return Err(bad("sampling", "k_grid, temperatures and policies must be non-empty"));
        }
        for cfg in self.sampling_configs() {
            cfg.validate().map_err(|e| bad("sampling", e))?;
        }
        if s.n_samples == 0 {
            return Err(bad("sampling.n_samples", "must be positive"));
        }
        let e = &self.evaluation;
        if e.tv_samples < 2 || e.nll_samples < 2 {
            return Err(bad("evaluation", "need at least two samples"));
        }
        if self.benchmark.repetitions == 0 || self.benchmark.n_strings == 0 {
            return Err(bad("benchmark", "repetitions and n_strings must be positive"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let s = &self.sampler_training;
        TrainConfig {
            k: s.k,
            epochs: s.epochs,
            lr: s.lr,
            batch_size: s.batch_size,
            loss_positions: s.loss_positions,
            seed: self.seed,
        }
    }

    /// Every grid point, in `K`, temperature, policy order.
    pub fn sampling_configs(&self) -> Vec<SamplingConfig> {
        let s = &self.sampling;
        let mut out = Vec::new();
        for &k in &s.k_grid {
            for &temperature in &s.temperatures {
                for &policy in &s.policies {
                    out.push(SamplingConfig {
                        k,
                        temperature,
                        top_p: s.top_p,
                        policy,
                        clamp: s.clamp,
                        seed: self.seed,
                    });
                }
            }
        }
        out
    }

    pub fn dims(&self, max_len: usize) -> ModelDims {
        ModelDims {
            d: self.model.d,
            blocks: self.model.blocks,
            heads: self.model.heads,
            max_len,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for c in [ExperimentConfig::desk_dream(), ExperimentConfig::two_sentence()] {
            let text = c.to_toml().unwrap();
            let back = parse_config(&text).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_toml().unwrap(), text);
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let text = ExperimentConfig::desk_dream()
            .to_toml()
            .unwrap()
            .replace("[model]\n", "[model]\nwidth = 3\n");
        let err = parse_config(&text).unwrap_err();
        assert_eq!(err.category(), "config");
        assert!(err.to_string().contains("width"), "{err}");

        let text = ExperimentConfig::desk_dream()
            .to_toml()
            .unwrap()
            .replace("successors = 3", "successors = 3\nbranching = 2");
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn invalid_values_name_their_key() {
        let mut c = ExperimentConfig::desk_dream();
        c.model.heads = 5;
        assert!(c.validate().unwrap_err().to_string().contains("model"));
        let mut c = ExperimentConfig::desk_dream();
        c.sampling.temperatures = vec![-1.0];
        assert!(c.validate().unwrap_err().to_string().contains("sampling"));
    }

    #[test]
    fn grid_expands_in_order() {
        let mut c = ExperimentConfig::desk_dream();
        c.sampling.policies = vec![PolicyKind::LeastEntropy, PolicyKind::LeftToRight];
        let g = c.sampling_configs();
        assert_eq!(g.len(), 8);
        assert_eq!((g[1].k, g[1].policy), (1, PolicyKind::LeftToRight));
    }
}
