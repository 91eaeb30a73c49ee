use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::SourceProbability;
use crate::model::{TabularDenoiser, TokenString, Vocab};
use crate::numerics::{sample_categorical, ProbRow, RngStream};

/// A generator of complete strings whose probabilities are known exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSource {
    FiniteSupport(FiniteSupport),
    BigramChain(BigramChain),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteSupport {
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    pub data_tokens: usize,
    /// Token-index strings with weights summing to 1.
    pub strings: Vec<(Vec<usize>, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BigramChain {
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    pub len: usize,
    pub initial: Vec<f64>,
    /// Row `a` is the distribution of the token after `a`.
    pub transition: Vec<Vec<f64>>,
}

fn check_dist(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
        return Err(Error::InvalidArgument(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{what} sums to {s}, expected 1")));
    }
    Ok(())
}

fn normalized(w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

impl SyntheticSource {
    pub fn validate(&self) -> Result<()> {
        match self {
            SyntheticSource::FiniteSupport(FiniteSupport {
                labels,
                data_tokens,
                strings,
            }) => {
                if let Some(l) = labels {
                    if l.len() != *data_tokens {
                        return Err(Error::InvalidArgument("label count differs from data_tokens".into()));
                    }
                }
                let first = strings
                    .first()
                    .ok_or_else(|| Error::InvalidArgument("finite support is empty".into()))?;
                if first.0.is_empty() {
                    return Err(Error::InvalidArgument("support strings are empty".into()));
                }
                for (s, _) in strings {
                    if s.len() != first.0.len() || s.iter().any(|&t| t >= *data_tokens) {
                        return Err(Error::InvalidArgument(format!("bad support string {s:?}")));
                    }
                }
                let w: Vec<f64> = strings.iter().map(|(_, w)| *w).collect();
                check_dist(&w, "support weights")
            }
            SyntheticSource::BigramChain(BigramChain {
                labels,
                len,
                initial,
                transition,
            }) => {
                let n = initial.len();
                if n == 0 || *len == 0 {
                    return Err(Error::InvalidArgument("bigram chain needs tokens and length".into()));
                }
                if let Some(l) = labels {
                    if l.len() != n {
                        return Err(Error::InvalidArgument("label count differs from token count".into()));
                    }
                }
                check_dist(initial, "initial distribution")?;
                if transition.len() != n {
                    return Err(Error::InvalidArgument(format!("transition has {} rows, expected {n}", transition.len())));
                }
                for (a, row) in transition.iter().enumerate() {
                    if row.len() != n {
                        return Err(Error::InvalidArgument(format!("transition row {a} has wrong width")));
                    }
                    check_dist(row, &format!("transition row {a}"))?;
                }
                Ok(())
            }
        }
    }

    pub fn data_tokens(&self) -> usize {
        match self {
            SyntheticSource::FiniteSupport(FiniteSupport { data_tokens, .. }) => *data_tokens,
            SyntheticSource::BigramChain(BigramChain { initial, .. }) => initial.len(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SyntheticSource::FiniteSupport(FiniteSupport { strings, .. }) => strings[0].0.len(),
            SyntheticSource::BigramChain(BigramChain { len, .. }) => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Data tokens `0..n` followed by the mask.
    pub fn vocab(&self) -> Vocab {
        let labels = match self {
            SyntheticSource::FiniteSupport(FiniteSupport { labels, .. }) | SyntheticSource::BigramChain(BigramChain { labels, .. }) => labels,
        };
        match labels {
            Some(l) => Vocab::from_labels(l).expect("validated labels"),
            None => Vocab::with_mask_last(self.data_tokens()).expect("validated size"),
        }
    }

    /// Exact probability of a complete string, in `O(L)` for bigram chains.
    pub fn probability(&self, x: &TokenString) -> f64 {
        if x.len() != self.len() || !x.is_complete() || x.tokens().iter().any(|&t| t >= self.data_tokens()) {
            return 0.0;
        }
        match self {
            SyntheticSource::FiniteSupport(FiniteSupport { strings, .. }) => strings
                .iter()
                .filter(|(s, _)| s.as_slice() == x.tokens())
                .map(|(_, w)| w)
                .sum(),
            SyntheticSource::BigramChain(BigramChain { initial, transition, .. }) => {
                let t = x.tokens();
                let mut p = initial[t[0]];
                for w in t.windows(2) {
                    p *= transition[w[0]][w[1]];
                }
                p
            }
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> Result<TokenString> {
        let vocab = self.vocab();
        let tokens = match self {
            SyntheticSource::FiniteSupport(FiniteSupport { strings, .. }) => {
                let w = ProbRow::from_weights(strings.iter().map(|(_, w)| *w).collect())?;
                strings[sample_categorical(&w, rng)?].0.clone()
            }
            SyntheticSource::BigramChain(BigramChain {
                len,
                initial,
                transition,
                ..
            }) => {
                let init = ProbRow::from_weights(initial.clone())?;
                let rows = transition
                    .iter()
                    .map(|r| ProbRow::from_weights(r.clone()))
                    .collect::<Result<Vec<_>>>()?;
                let mut t = vec![sample_categorical(&init, rng)?];
                for _ in 1..*len {
                    let prev = *t.last().expect("non-empty");
                    t.push(sample_categorical(&rows[prev], rng)?);
                }
                t
            }
        };
        TokenString::new(tokens, &vocab)
    }

    /// Exact Shannon entropy (nats) of the string distribution.
    pub fn entropy(&self) -> f64 {
        let h = |row: &[f64]| -> f64 { row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum() };
        match self {
            SyntheticSource::FiniteSupport(FiniteSupport { strings, .. }) => {
                h(&strings.iter().map(|(_, w)| *w).collect::<Vec<_>>())
            }
            SyntheticSource::BigramChain(BigramChain {
                len,
                initial,
                transition,
                ..
            }) => {
                let row_h: Vec<f64> = transition.iter().map(|r| h(r)).collect();
                let mut total = h(initial);
                let mut state = initial.clone();
                for _ in 1..*len {
                    total += state.iter().zip(&row_h).map(|(p, e)| p * e).sum::<f64>();
                    let mut next = vec![0.0; state.len()];
                    for (a, &pa) in state.iter().enumerate() {
                        for (b, &t) in transition[a].iter().enumerate() {
                            next[b] += pa * t;
                        }
                    }
                    state = next;
                }
                total
            }
        }
    }

    /// Exact tabular model of a finite-support source.
    pub fn to_tabular(&self) -> Result<TabularDenoiser> {
        match self {
            SyntheticSource::FiniteSupport(FiniteSupport { strings, .. }) => {
                let v = self.vocab();
                let sup = strings
                    .iter()
                    .filter(|(_, w)| *w > 0.0)
                    .map(|(s, w)| Ok((TokenString::new(s.clone(), &v)?, *w)))
                    .collect::<Result<Vec<_>>>()?;
                TabularDenoiser::new(v, sup, 0.0)
            }
            SyntheticSource::BigramChain(BigramChain { .. }) => Err(Error::InvalidArgument(
                "only finite-support sources have a tabular form".into(),
            )),
        }
    }

    /// Two six-word sentences with equal weight.
    pub fn two_sentence_world() -> Self {
        let words = ["the", "cat", "sat", "on", "mat", "dog", "ran", "in", "yard"];
        let idx = |s: &str| s.split(' ').map(|w| words.iter().position(|v| *v == w).unwrap()).collect();
        SyntheticSource::FiniteSupport(FiniteSupport {
            labels: Some(words.iter().map(|w| w.to_string()).collect()),
            data_tokens: words.len(),
            strings: vec![
                (idx("the cat sat on the mat"), 0.5),
                (idx("the dog ran in the yard"), 0.5),
            ],
        })
    }

    /// `n_strings` distinct random strings with random weights.
    pub fn random_finite_support(tokens: usize, len: usize, n_strings: usize, rng: &mut RngStream) -> Result<Self> {
        let capacity = (tokens as f64).powi(len as i32);
        if tokens == 0 || len == 0 || n_strings == 0 || (n_strings as f64) > capacity {
            return Err(Error::InvalidArgument(format!(
                "cannot draw {n_strings} distinct strings over {tokens} tokens of length {len}"
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        while seen.len() < n_strings {
            seen.insert((0..len).map(|_| rng.below(tokens)).collect::<Vec<_>>());
        }
        let weights = normalized((0..n_strings).map(|_| 0.1 + rng.next_f64()).collect());
        Ok(SyntheticSource::FiniteSupport(FiniteSupport {
            labels: None,
            data_tokens: tokens,
            strings: seen.into_iter().zip(weights).collect(),
        }))
    }

    /// Independent random per-position distributions, written out as the full
    /// product support.
    pub fn random_factorized(tokens: usize, len: usize, rng: &mut RngStream) -> Result<Self> {
        if tokens == 0 || len == 0 || (tokens as f64).powi(len as i32) > 1e5 {
            return Err(Error::InvalidArgument("factorized world too large to list".into()));
        }
        let marg: Vec<Vec<f64>> = (0..len)
            .map(|_| normalized((0..tokens).map(|_| 0.1 + rng.next_f64()).collect()))
            .collect();
        let mut strings = Vec::new();
        let total = tokens.pow(len as u32);
        for code in 0..total {
            let mut c = code;
            let mut s = Vec::with_capacity(len);
            let mut w = 1.0;
            for m in &marg {
                let t = c % tokens;
                c /= tokens;
                s.push(t);
                w *= m[t];
            }
            strings.push((s, w));
        }
        let sum: f64 = strings.iter().map(|(_, w)| w).sum();
        for (_, w) in &mut strings {
            *w /= sum;
        }
        Ok(SyntheticSource::FiniteSupport(FiniteSupport {
            labels: None,
            data_tokens: tokens,
            strings,
        }))
    }

    /// Sparse chain: every token has `successors` possible next tokens.
    pub fn random_bigram(tokens: usize, len: usize, successors: usize, rng: &mut RngStream) -> Result<Self> {
        if tokens == 0 || len == 0 || successors == 0 || successors > tokens {
            return Err(Error::InvalidArgument(format!(
                "bigram chain with {tokens} tokens, length {len}, {successors} successors"
            )));
        }
        let initial = normalized((0..tokens).map(|_| 0.1 + rng.next_f64()).collect());
        let transition = (0..tokens)
            .map(|_| {
                let mut ids: Vec<usize> = (0..tokens).collect();
                rng.shuffle(&mut ids);
                let mut row = vec![0.0; tokens];
                for &b in &ids[..successors] {
                    row[b] = 0.1 + rng.next_f64();
                }
                normalized(row)
            })
            .collect();
        Ok(SyntheticSource::BigramChain(BigramChain {
            labels: None,
            len,
            initial,
            transition,
        }))
    }
}

impl SourceProbability for SyntheticSource {
    fn probability(&self, x: &TokenString) -> f64 {
        SyntheticSource::probability(self, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{nll_terms, Estimate};

    #[test]
    fn bigram_probabilities_sum_to_one() {
        let src = SyntheticSource::random_bigram(3, 4, 2, &mut RngStream::new(0, 0)).unwrap();
        src.validate().unwrap();
        let v = src.vocab();
        let mut total = 0.0;
        for code in 0..81usize {
            let t: Vec<usize> = (0..4).map(|i| (code / 3usize.pow(i)) % 3).collect();
            total += src.probability(&TokenString::new(t, &v).unwrap());
        }
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampled_nll_matches_entropy() {
        let src = SyntheticSource::random_bigram(6, 8, 3, &mut RngStream::new(1, 0)).unwrap();
        let mut rng = RngStream::new(2, 0);
        let xs: Vec<TokenString> = (0..20_000).map(|_| src.sample(&mut rng).unwrap()).collect();
        let e = Estimate::from_values(&nll_terms(&src, &xs));
        assert!((e.mean - src.entropy()).abs() < 4.0 * e.std_err, "{e:?} vs {}", src.entropy());
    }

    #[test]
    fn factorized_world_is_a_product() {
        let src = SyntheticSource::random_factorized(3, 3, &mut RngStream::new(3, 0)).unwrap();
        src.validate().unwrap();
        let SyntheticSource::FiniteSupport(FiniteSupport { strings, .. }) = &src else { unreachable!() };
        assert_eq!(strings.len(), 27);
    }

    #[test]
    fn two_sentence_world_is_valid() {
        let src = SyntheticSource::two_sentence_world();
        src.validate().unwrap();
        let v = src.vocab();
        let x = v.parse("the cat sat on the mat").unwrap();
        assert_eq!(src.probability(&x), 0.5);
        assert_eq!(src.probability(&v.parse("the cat ran on the mat").unwrap()), 0.0);
        assert_eq!(src.to_tabular().unwrap().support().len(), 2);
    }

    #[test]
    fn serde_round_trip_and_unknown_keys() {
        let src = SyntheticSource::random_bigram(4, 5, 2, &mut RngStream::new(4, 0)).unwrap();
        let s = serde_json::to_string(&src).unwrap();
        assert_eq!(serde_json::from_str::<SyntheticSource>(&s).unwrap(), src);
        let bad = r#"{"kind":"bigram_chain","len":2,"initial":[1.0],"transition":[[1.0]],"extra":1}"#;
        assert!(serde_json::from_str::<SyntheticSource>(bad).is_err());
    }
}
