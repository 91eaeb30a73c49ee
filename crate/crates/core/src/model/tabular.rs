use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{check_batch, Denoiser, DenoiserOutput, TokenString, Vocab};
use crate::numerics::{ProbRow, Tensor, MASKED_LOGIT};

/// Exact conditionals of an explicit weighted set of complete strings.
///
/// Evidence that no support string is consistent with falls back to
/// `(1 − λ) · unconditional position marginal + λ · uniform`.
#[derive(Clone, Debug)]
pub struct TabularDenoiser {
    vocab: Vocab,
    len: usize,
    support: Vec<(TokenString, f64)>,
    smoothing: f64,
    position_marginals: Vec<Vec<f64>>,
}

impl TabularDenoiser {
    pub fn new(vocab: Vocab, support: Vec<(TokenString, f64)>, smoothing: f64) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::InvalidArgument("empty support".into()));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidArgument(format!(
                "fallback smoothing {smoothing} outside [0, 1)"
            )));
        }
        let len = support[0].0.len();
        let mut merged: BTreeMap<TokenString, f64> = BTreeMap::new();
        for (s, w) in support {
            if s.len() != len {
                return Err(Error::InvalidArgument("support strings differ in length".into()));
            }
            if !s.is_complete() {
                return Err(Error::InvalidArgument(format!("support string {s} contains a mask")));
            }
            if s.mask_id() != vocab.mask_id() || s.tokens().iter().any(|&t| t >= vocab.size()) {
                return Err(Error::InvalidArgument(format!("support string {s} not in vocabulary")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!("support weight {w} must be positive")));
            }
            *merged.entry(s).or_insert(0.0) += w;
        }
        let total: f64 = merged.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "support weights sum to {total}, expected 1"
            )));
        }
        let support: Vec<(TokenString, f64)> =
            merged.into_iter().map(|(s, w)| (s, w / total)).collect();
        let mut position_marginals = vec![vec![0.0; vocab.size()]; len];
        for (s, w) in &support {
            for (i, &t) in s.tokens().iter().enumerate() {
                position_marginals[i][t] += w;
            }
        }
        Ok(TabularDenoiser {
            vocab,
            len,
            support,
            smoothing,
            position_marginals,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn support(&self) -> &[(TokenString, f64)] {
        &self.support
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    /// Probability of a complete string under the support distribution.
    pub fn probability(&self, x: &TokenString) -> f64 {
        self.support
            .iter()
            .find(|(s, _)| s == x)
            .map(|(_, w)| *w)
            .unwrap_or(0.0)
    }

    fn consistent<'a>(&'a self, x: &'a TokenString) -> impl Iterator<Item = &'a (TokenString, f64)> + 'a {
        self.support.iter().filter(move |(s, _)| {
            s.tokens()
                .iter()
                .zip(x.tokens())
                .all(|(&a, &b)| b == x.mask_id() || a == b)
        })
    }

    fn fallback_row(&self, i: usize) -> Vec<f64> {
        let uniform = 1.0 / self.vocab.data_size() as f64;
        let mask = self.vocab.mask_id();
        (0..self.vocab.size())
            .map(|v| {
                if v == mask {
                    0.0
                } else {
                    (1.0 - self.smoothing) * self.position_marginals[i][v] + self.smoothing * uniform
                }
            })
            .collect()
    }

    fn rows(&self, x: &TokenString) -> Vec<Vec<f64>> {
        let v = self.vocab.size();
        let mut counts = vec![vec![0.0; v]; self.len];
        let mut total = 0.0;
        for (s, w) in self.consistent(x) {
            total += w;
            for (i, &t) in s.tokens().iter().enumerate() {
                counts[i][t] += w;
            }
        }
        (0..self.len)
            .map(|i| {
                if !x.is_masked(i) {
                    let mut r = vec![0.0; v];
                    r[x.get(i)] = 1.0;
                    r
                } else if total > 0.0 {
                    counts[i].iter().map(|c| c / total).collect()
                } else {
                    self.fallback_row(i)
                }
            })
            .collect()
    }
}

/// Exact conditional distribution at masked position `i` of `x`.
pub fn tabular_conditional(tab: &TabularDenoiser, x: &TokenString, i: usize) -> Result<ProbRow> {
    if x.len() != tab.len {
        return Err(Error::Shape(format!(
            "string of length {} for a model of length {}",
            x.len(),
            tab.len
        )));
    }
    if !x.is_masked(i) {
        return Err(Error::NotMasked(i));
    }
    ProbRow::from_weights(tab.rows(x).swap_remove(i))
}

fn to_logit(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        MASKED_LOGIT
    }
}

impl Denoiser for TabularDenoiser {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn max_len(&self) -> usize {
        self.len
    }

    fn forward_batch(&self, xs: &[TokenString]) -> Result<Vec<DenoiserOutput>> {
        check_batch(self, xs)?;
        xs.iter()
            .map(|x| {
                if x.len() != self.len {
                    return Err(Error::Shape(format!(
                        "string of length {} for a model of length {}",
                        x.len(),
                        self.len
                    )));
                }
                let data: Vec<f64> = self.rows(x).into_iter().flatten().map(to_logit).collect();
                Ok(DenoiserOutput {
                    hidden: None,
                    logits: Tensor::matrix(self.len, self.vocab.size(), data)?,
                })
            })
            .collect()
    }

    fn layer_count(&self) -> usize {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::marginals;

    fn aabb() -> TabularDenoiser {
        let v = Vocab::from_labels(&["a", "b"]).unwrap();
        let s = vec![(v.parse("a a").unwrap(), 0.5), (v.parse("b b").unwrap(), 0.5)];
        TabularDenoiser::new(v, s, 0.0).unwrap()
    }

    #[test]
    fn all_masked_gives_uniform_pair() {
        let t = aabb();
        let x = t.vocab().parse("[M] [M]").unwrap();
        for (_, r) in marginals(&t, &x, 1.0, 1.0).unwrap() {
            assert!((r.get(0) - 0.5).abs() < 1e-15);
            assert!((r.get(1) - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn evidence_pins_the_other_position() {
        let t = aabb();
        let x = t.vocab().parse("a [M]").unwrap();
        let r = tabular_conditional(&t, &x, 1).unwrap();
        assert_eq!(r.get(0), 1.0);
        assert!(tabular_conditional(&t, &x, 0).is_err());
    }

    #[test]
    fn off_support_evidence_uses_fallback() {
        let v = Vocab::from_labels(&["a", "b", "c"]).unwrap();
        let s = vec![
            (v.parse("a a c").unwrap(), 0.5),
            (v.parse("b b a").unwrap(), 0.5),
        ];
        let t = TabularDenoiser::new(v.clone(), s.clone(), 0.0).unwrap();
        let x = v.parse("a b [M]").unwrap();
        let r = tabular_conditional(&t, &x, 2).unwrap();
        assert_eq!(r.values(), &[0.5, 0.0, 0.5, 0.0]);
        let smooth = TabularDenoiser::new(v, s, 0.3).unwrap();
        let r = tabular_conditional(&smooth, &x, 2).unwrap();
        let want = [0.35 + 0.1, 0.1, 0.35 + 0.1, 0.0];
        for (a, b) in r.values().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_supports() {
        let v = Vocab::from_labels(&["a", "b"]).unwrap();
        let aa = v.parse("a a").unwrap();
        assert!(TabularDenoiser::new(v.clone(), vec![(aa.clone(), 0.7)], 0.0).is_err());
        assert!(TabularDenoiser::new(v.clone(), vec![(v.parse("a [M]").unwrap(), 1.0)], 0.0).is_err());
        assert!(TabularDenoiser::new(v, vec![(aa, 1.0)], 1.0).is_err());
    }
}
