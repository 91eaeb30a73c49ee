use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{TabularDenoiser, TokenString};

/// Explicit distribution over complete strings of one length.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StringDistribution {
    probs: BTreeMap<TokenString, f64>,
    pruned_mass: f64,
}

impl StringDistribution {
    /// Checks completeness, a common length, and total mass 1 ± 1e-9
    /// (counting `pruned_mass`).
    pub fn new(probs: BTreeMap<TokenString, f64>, pruned_mass: f64) -> Result<Self> {
        let len = probs.keys().next().map(|x| x.len());
        for (x, &p) in &probs {
            if !x.is_complete() {
                return Err(Error::InvalidArgument(format!("{x} still has masks")));
            }
            if Some(x.len()) != len {
                return Err(Error::Shape("strings of different lengths".into()));
            }
            if !(p >= 0.0 && p.is_finite()) {
                return Err(Error::NonFinite(format!("probability {p} for {x}")));
            }
        }
        let total: f64 = probs.values().sum::<f64>() + pruned_mass;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("mass sums to {total}")));
        }
        Ok(StringDistribution { probs, pruned_mass })
    }

    /// Empirical distribution of `samples`.
    pub fn empirical<'a>(samples: impl IntoIterator<Item = &'a TokenString>) -> Result<Self> {
        let mut counts: BTreeMap<TokenString, f64> = BTreeMap::new();
        let mut n = 0.0;
        for x in samples {
            *counts.entry(x.clone()).or_default() += 1.0;
            n += 1.0;
        }
        if n == 0.0 {
            return Err(Error::InvalidArgument("no samples".into()));
        }
        for v in counts.values_mut() {
            *v /= n;
        }
        Self::new(counts, 0.0)
    }

    /// Support and weights of a tabular model.
    pub fn of_tabular(tab: &TabularDenoiser) -> Result<Self> {
        let probs = tab
            .support()
            .iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(x, w)| (x.clone(), *w))
            .collect();
        Self::new(probs, 0.0)
    }

    pub fn get(&self, x: &TokenString) -> f64 {
        self.probs.get(x).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TokenString, f64)> {
        self.probs.iter().map(|(x, &p)| (x, p))
    }

    pub fn string_len(&self) -> Option<usize> {
        self.probs.keys().next().map(|x| x.len())
    }

    /// Mass dropped by enumeration pruning; not attributed to any string.
    pub fn pruned_mass(&self) -> f64 {
        self.pruned_mass
    }

    /// Mass this distribution puts on strings `other` gives probability 0.
    pub fn mass_outside(&self, other: &StringDistribution) -> f64 {
        self.probs
            .iter()
            .filter(|(x, _)| other.get(x) == 0.0)
            .map(|(_, &p)| p)
            .sum()
    }
}

fn check_lengths(p: &StringDistribution, q: &StringDistribution) -> Result<()> {
    match (p.string_len(), q.string_len()) {
        (Some(a), Some(b)) if a != b => Err(Error::Shape(format!(
            "distributions over lengths {a} and {b}"
        ))),
        _ => Ok(()),
    }
}

/// Half the L1 distance over the union of supports.
pub fn tv_distance(p: &StringDistribution, q: &StringDistribution) -> Result<f64> {
    check_lengths(p, q)?;
    let mut total = 0.0;
    for (x, a) in p.iter() {
        total += (a - q.get(x)).abs();
    }
    for (x, b) in q.iter() {
        if !p.probs.contains_key(x) {
            total += b;
        }
    }
    Ok((0.5 * total).min(1.0))
}

/// `KL(p ‖ q)`; infinite when `p` has mass where `q` has none.
pub fn kl_strings(p: &StringDistribution, q: &StringDistribution) -> Result<f64> {
    check_lengths(p, q)?;
    let mut total = 0.0;
    for (x, a) in p.iter() {
        if a == 0.0 {
            continue;
        }
        let b = q.get(x);
        if b == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += a * (a / b).ln();
    }
    Ok(total.max(0.0))
}

/// Exact probability of a complete string under a known source.
pub trait SourceProbability {
    fn probability(&self, x: &TokenString) -> f64;
}

impl SourceProbability for TabularDenoiser {
    fn probability(&self, x: &TokenString) -> f64 {
        TabularDenoiser::probability(self, x)
    }
}

impl SourceProbability for StringDistribution {
    fn probability(&self, x: &TokenString) -> f64 {
        self.get(x)
    }
}

/// Probabilities below this count as this when scoring.
pub const NLL_FLOOR: f64 = 1e-12;

/// `−ln max(p_source(x), 1e-12)` for each string.
pub fn nll_terms(source: &dyn SourceProbability, strings: &[TokenString]) -> Vec<f64> {
    strings
        .iter()
        .map(|x| -source.probability(x).max(NLL_FLOOR).ln())
        .collect()
}

/// Mean negative log-likelihood of `strings` under `source`.
pub fn nll_under_source(source: &dyn SourceProbability, strings: &[TokenString]) -> f64 {
    let t = nll_terms(source, strings);
    t.iter().sum::<f64>() / t.len().max(1) as f64
}
