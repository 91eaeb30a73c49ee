use serde::{Deserialize, Serialize};

use crate::adjust::JointSampler;
use crate::decoding::{decode_batch, forced_logprobs, Procedure, SamplingConfig};
use crate::error::{Error, Result};
use crate::model::{Denoiser, TokenString};
use crate::numerics::prob::kl_slices;
use crate::numerics::softmax_row;
use crate::training::distill::{reaching, selected, states};
use crate::training::{evaluate_distill, LossPositions, TrajectorySample};

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Estimate {
                mean: f64::NAN,
                std_err: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Estimate {
            mean,
            std_err: (var / n as f64).sqrt(),
            n,
        }
    }

    /// Estimate of `mean(a) − mean(b)` from paired draws.
    pub fn paired_difference(a: &[f64], b: &[f64]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Shape("paired samples differ in count".into()));
        }
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        Ok(Self::from_values(&d))
    }

    /// `mean / std_err`; infinite for an exact nonzero mean.
    pub fn z_score(&self) -> f64 {
        if self.std_err == 0.0 {
            if self.mean == 0.0 {
                0.0
            } else {
                self.mean.signum() * f64::INFINITY
            }
        } else {
            self.mean / self.std_err
        }
    }
}

/// A string drawn from the reference procedure with its log-probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSample {
    pub x: TokenString,
    pub log_q: f64,
}

/// `n` one-token-per-forward decodes of `start`, tokens from streams
/// `first_stream..first_stream + n` of `cfg.seed`.
pub fn sample_reference(
    base: &dyn Denoiser,
    start: &TokenString,
    cfg: &SamplingConfig,
    n: usize,
    first_stream: u64,
) -> Result<Vec<ReferenceSample>> {
    let cfg = cfg.clone().with_k(1);
    let starts = vec![start.clone(); n];
    decode_batch(Procedure::ExactJoint, base, None, &starts, &cfg, first_stream, false)?
        .into_iter()
        .map(|(x, t)| {
            Ok(ReferenceSample {
                log_q: t.log_prob(),
                x,
            })
        })
        .collect()
}

/// Per-sample terms `max(0, 1 − P(x)/Q(x))` whose mean is an unbiased
/// estimate of `TV(P, Q)` when `x ~ Q`. `P` is the distribution induced by
/// `procedure` (exact per string for deterministic policies).
pub fn tv_terms(
    procedure: Procedure,
    base: &dyn Denoiser,
    g: Option<&dyn JointSampler>,
    start: &TokenString,
    cfg: &SamplingConfig,
    reference: &[ReferenceSample],
) -> Result<Vec<f64>> {
    let starts = vec![start.clone(); reference.len()];
    let targets: Vec<TokenString> = reference.iter().map(|r| r.x.clone()).collect();
    let (procedure, g) = match (procedure, cfg.k) {
        (Procedure::Adjust, 1) => (Procedure::ExactJoint, None),
        other => (other.0, g),
    };
    let lp = forced_logprobs(procedure, base, g, &starts, &targets, cfg)?;
    Ok(lp
        .iter()
        .zip(reference)
        .map(|(p, r)| (1.0 - (p - r.log_q).exp()).max(0.0))
        .collect())
}

/// KL at step `k` for the sampler and for the stale-row baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlAtK {
    pub k: usize,
    /// `KL(base at x_k ‖ sampler unrolled to x_k)`.
    pub joint: f64,
    /// `KL(base at x_k ‖ base at x)`.
    pub marginal: f64,
}

/// KL@k for `k = 1..k_max` on held-out samples.
pub fn conditional_kl(
    base: &dyn Denoiser,
    g: &dyn JointSampler,
    samples: &[TrajectorySample],
    k_max: usize,
    positions: LossPositions,
) -> Result<Vec<KlAtK>> {
    if k_max == 0 {
        return Err(Error::InvalidArgument("KL@k needs k_max ≥ 1".into()));
    }
    let joint = evaluate_distill(base, g, samples, k_max + 1, positions)?;
    let entry = base.forward_batch(&states(samples, 0))?;
    let mut out = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let teacher = base.forward_batch(&states(samples, k))?;
        let mut total = 0.0;
        for (si, s) in samples.iter().enumerate().filter(|(_, s)| s.reaches(k)) {
            let pos = selected(s, k, positions);
            let mut acc = 0.0;
            for &i in &pos {
                let p = softmax_row(teacher[si].logit_row(i), 1.0)?;
                let q = softmax_row(entry[si].logit_row(i), 1.0)?;
                acc += kl_slices(p.values(), q.values())?;
            }
            total += acc / pos.len() as f64;
        }
        out.push(KlAtK {
            k,
            joint: joint.kl_at_k[k - 1],
            marginal: total / reaching(samples, k) as f64,
        });
    }
    Ok(out)
}

pub fn conditional_kl_at_k(
    base: &dyn Denoiser,
    g: &dyn JointSampler,
    samples: &[TrajectorySample],
    k: usize,
    positions: LossPositions,
) -> Result<KlAtK> {
    let all = conditional_kl(base, g, samples, k, positions)?;
    Ok(all[k - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjust::{oracle_g, IdentitySampler};
    use crate::decoding::PolicyKind;
    use crate::evaluation::{enumerate_induced, tv_distance, StringDistribution};
    use crate::model::{TabularDenoiser, Vocab};
    use crate::numerics::RngStream;
    use crate::training::{build_samples, harvest_trajectories};
    use std::sync::Arc;

    fn world() -> (Vocab, Arc<TabularDenoiser>) {
        let v = Vocab::from_labels(&["a", "b", "c"]).unwrap();
        let sup = vec![
            (v.parse("a b c a").unwrap(), 0.4),
            (v.parse("b b a c").unwrap(), 0.3),
            (v.parse("c a a b").unwrap(), 0.2),
            (v.parse("a a c c").unwrap(), 0.1),
        ];
        (v.clone(), Arc::new(TabularDenoiser::new(v, sup, 0.0).unwrap()))
    }

    #[test]
    fn paired_difference_of_equal_samples_is_zero() {
        let e = Estimate::paired_difference(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((e.mean, e.std_err), (0.0, 0.0));
        assert_eq!(e.z_score(), 0.0);
    }

    #[test]
    fn monte_carlo_tv_matches_enumeration() {
        let (v, tab) = world();
        let start = TokenString::all_masked(4, &v);
        let cfg = SamplingConfig::default().with_k(2);
        let reference = sample_reference(tab.as_ref(), &start, &cfg, 20_000, 0).unwrap();
        let terms = tv_terms(Procedure::Parallel, tab.as_ref(), None, &start, &cfg, &reference).unwrap();
        let est = Estimate::from_values(&terms);
        let par = enumerate_induced(Procedure::Parallel, tab.as_ref(), None, &start, &cfg, 1000).unwrap();
        let truth = StringDistribution::of_tabular(&tab).unwrap();
        let exact = tv_distance(&par, &truth).unwrap();
        assert!(exact > 0.1);
        assert!((est.mean - exact).abs() < 4.0 * est.std_err, "{est:?} vs {exact}");
    }

    #[test]
    fn oracle_sampler_has_zero_tv_terms() {
        let (v, tab) = world();
        let start = TokenString::all_masked(4, &v);
        let cfg = SamplingConfig::default().with_k(3).with_policy(PolicyKind::HighestConfidence);
        let reference = sample_reference(tab.as_ref(), &start, &cfg, 200, 0).unwrap();
        let g = oracle_g(tab.clone());
        let terms = tv_terms(Procedure::Adjust, tab.as_ref(), Some(&g), &start, &cfg, &reference).unwrap();
        assert!(terms.iter().all(|&t| t < 1e-12));
    }

    #[test]
    fn oracle_kl_is_zero_and_baseline_is_not() {
        let (v, tab) = world();
        let start = TokenString::all_masked(4, &v);
        let trajs = harvest_trajectories(tab.as_ref(), &start, 20, &SamplingConfig::default(), 0).unwrap();
        let (samples, _) = build_samples(&trajs, 3, 1, &mut RngStream::new(0, 0)).unwrap();
        let g = oracle_g(tab.clone());
        let kl = conditional_kl(tab.as_ref(), &g, &samples, 2, LossPositions::AllMasked).unwrap();
        for r in &kl {
            assert!(r.joint.abs() < 1e-9, "{r:?}");
            assert!(r.marginal > 0.0);
        }
        let id = conditional_kl(tab.as_ref(), &IdentitySampler, &samples, 2, LossPositions::AllMasked).unwrap();
        for (a, b) in id.iter().zip(&kl) {
            assert!((a.joint - b.marginal).abs() < 1e-12);
        }
        assert!(conditional_kl(tab.as_ref(), &g, &samples, 3, LossPositions::AllMasked).is_err());
    }
}
