//! Sampling procedures over a denoiser: parallel, exact one-at-a-time, and
//! sampler-refreshed joint decoding.

mod clamp;
pub(crate) mod engine;
mod trace;

use serde::{Deserialize, Serialize};

pub use clamp::{clamp_bounds, ground_clamp};
pub use engine::{
    adjust_sample, adjust_string_logprob, decode_batch, exact_joint_sample, forced_logprobs,
    parallel_sample, replay_logprob,
};
pub use trace::{read_traces, write_traces, DecodeTrace, TraceEvent};

use crate::error::{Error, Result};
use crate::numerics::{entropy, ProbRow, RngStream};

/// Rule for picking the next position to commit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    LeastEntropy,
    HighestConfidence,
    LeftToRight,
    Random,
}

impl PolicyKind {
    pub fn is_random(self) -> bool {
        self == PolicyKind::Random
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::LeastEntropy => "least_entropy",
            PolicyKind::HighestConfidence => "highest_confidence",
            PolicyKind::LeftToRight => "left_to_right",
            PolicyKind::Random => "random",
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "least_entropy" => Ok(PolicyKind::LeastEntropy),
            "highest_confidence" => Ok(PolicyKind::HighestConfidence),
            "left_to_right" => Ok(PolicyKind::LeftToRight),
            "random" => Ok(PolicyKind::Random),
            other => Err(Error::InvalidArgument(format!("unknown policy {other:?}"))),
        }
    }
}

/// How the tokens of one macro-step are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Procedure {
    /// Independent draws from one frozen set of rows.
    Parallel,
    /// One token per base forward.
    ExactJoint,
    /// First token from the base rows, the rest from sampler-refreshed rows.
    Adjust,
}

impl Procedure {
    pub fn name(self) -> &'static str {
        match self {
            Procedure::Parallel => "parallel",
            Procedure::ExactJoint => "exact_joint",
            Procedure::Adjust => "adjust",
        }
    }
}

impl std::str::FromStr for Procedure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Procedure::Parallel),
            "exact_joint" => Ok(Procedure::ExactJoint),
            "adjust" => Ok(Procedure::Adjust),
            other => Err(Error::InvalidArgument(format!("unknown procedure {other:?}"))),
        }
    }
}

/// Everything that determines a procedure's induced distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Tokens committed per base forward.
    pub k: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub policy: PolicyKind,
    #[serde(default)]
    pub clamp: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            k: 1,
            temperature: 1.0,
            top_p: 1.0,
            policy: PolicyKind::LeastEntropy,
            clamp: false,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_policy(mut self, policy: PolicyKind) -> Self {
        self.policy = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature {} must be finite and non-negative",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidArgument(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        Ok(())
    }
}

/// Picks a position among `rows` (tagged by position, ascending). Ties go to
/// the lowest position. `rng` is only drawn from by the random policy.
pub fn select_position(
    rows: &[(usize, ProbRow)],
    policy: PolicyKind,
    rng: Option<&mut RngStream>,
) -> Result<usize> {
    if rows.is_empty() {
        return Err(Error::NothingMasked);
    }
    let best_by = |score: &dyn Fn(&ProbRow) -> f64| {
        let mut best = 0;
        let mut best_score = score(&rows[0].1);
        for (i, (_, r)) in rows.iter().enumerate().skip(1) {
            let s = score(r);
            if s < best_score {
                best = i;
                best_score = s;
            }
        }
        best
    };
    let idx = match policy {
        PolicyKind::LeastEntropy => best_by(&entropy),
        PolicyKind::HighestConfidence => best_by(&|r: &ProbRow| -r.max()),
        PolicyKind::LeftToRight => best_by(&|_| 0.0),
        PolicyKind::Random => {
            let rng = rng.ok_or_else(|| {
                Error::InvalidArgument("random policy needs a random stream".into())
            })?;
            rng.below(rows.len())
        }
    };
    Ok(rows[idx].0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn least_entropy_prefers_certain_rows() {
        let rows = vec![(2, ProbRow::one_hot(3, 1)), (5, ProbRow::uniform(3))];
        assert_eq!(select_position(&rows, PolicyKind::LeastEntropy, None).unwrap(), 2);
        let rows = vec![(5, ProbRow::uniform(3)), (7, ProbRow::one_hot(3, 1))];
        assert_eq!(select_position(&rows, PolicyKind::LeastEntropy, None).unwrap(), 7);
    }

    #[test]
    fn ties_go_to_the_lowest_position() {
        let r = ProbRow::new(vec![0.3, 0.7]).unwrap();
        let rows = vec![(1, r.clone()), (4, r)];
        for p in [PolicyKind::LeastEntropy, PolicyKind::HighestConfidence, PolicyKind::LeftToRight] {
            assert_eq!(select_position(&rows, p, None).unwrap(), 1);
        }
    }

    #[test]
    fn highest_confidence_compares_row_maxima() {
        let rows = vec![
            (1, ProbRow::new(vec![0.6, 0.4]).unwrap()),
            (3, ProbRow::new(vec![0.9, 0.1]).unwrap()),
        ];
        assert_eq!(select_position(&rows, PolicyKind::HighestConfidence, None).unwrap(), 3);
    }

    #[test]
    fn random_policy_needs_a_stream_and_is_seeded() {
        let rows: Vec<_> = (0..5).map(|i| (i, ProbRow::uniform(2))).collect();
        assert!(select_position(&rows, PolicyKind::Random, None).is_err());
        let draw = |seed| {
            let mut rng = RngStream::new(seed, 0);
            (0..20)
                .map(|_| select_position(&rows, PolicyKind::Random, Some(&mut rng)).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert!(select_position(&[], PolicyKind::LeftToRight, None).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SamplingConfig::default().validate().is_ok());
        assert!(SamplingConfig::default().with_k(0).validate().is_err());
        let narrow = SamplingConfig {
            top_p: 0.0,
            ..SamplingConfig::default()
        };
        assert!(narrow.validate().is_err());
        let cold = SamplingConfig {
            temperature: -1.0,
            ..SamplingConfig::default()
        };
        assert!(cold.validate().is_err());
    }
}
