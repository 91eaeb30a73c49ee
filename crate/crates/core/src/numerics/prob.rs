//! Probability rows and the divergences used throughout decoding and training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to the second argument of every log-ratio.
pub const PROB_FLOOR: f64 = 1e-12;

/// Logit assigned to tokens that must receive exactly zero probability
/// (the mask token, tokens outside a tabular support). Finite, so softmax
/// stays well defined, and far enough below any real logit that `exp`
/// underflows to an exact zero.
pub const MASKED_LOGIT: f64 = -1e30;

const SUM_TOLERANCE: f64 = 1e-9;

/// A categorical distribution over the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbRow(Vec<f64>);

impl ProbRow {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "probability entry {v} is negative or non-finite"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(ProbRow(values))
    }

    /// Normalizes non-negative weights into a row.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !sum.is_finite() || sum <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "weights must have positive finite mass, got {sum}"
            )));
        }
        ProbRow::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        ProbRow(v)
    }

    pub fn uniform(len: usize) -> Self {
        ProbRow(vec![1.0 / len as f64; len])
    }

    /// Skips validation; callers guarantee the invariant (or are tests probing
    /// the error paths).
    #[cfg(test)]
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        ProbRow(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, v: usize) -> f64 {
        self.0[v]
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax of `logits / temperature`; temperature 0 is the argmax limit.
pub fn softmax_row(logits: &[f64], temperature: f64) -> Result<ProbRow> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("empty logit row".into()));
    }
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logit {v}")));
    }
    if !temperature.is_finite() || temperature < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be a finite value >= 0, got {temperature}"
        )));
    }
    if temperature == 0.0 {
        return Ok(ProbRow::one_hot(logits.len(), argmax(logits)));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(ProbRow(out))
}

/// Nucleus truncation: keeps the smallest prefix of the descending-sorted
/// probabilities whose mass reaches `top_p` and renormalizes. Ties in the sort
/// keep lower indices first.
pub fn nucleus(row: &ProbRow, top_p: f64) -> Result<ProbRow> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "top_p must lie in (0, 1], got {top_p}"
        )));
    }
    if top_p >= 1.0 {
        return Ok(row.clone());
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row.0[b].total_cmp(&row.0[a]).then(a.cmp(&b)));
    let mut kept = vec![0.0; row.len()];
    let mut mass = 0.0;
    for &i in &order {
        if row.0[i] == 0.0 {
            break;
        }
        kept[i] = row.0[i];
        mass += row.0[i];
        if mass >= top_p {
            break;
        }
    }
    for v in &mut kept {
        *v /= mass;
    }
    Ok(ProbRow(kept))
}

/// Temperature scaling followed by nucleus truncation.
pub fn tempered_row(logits: &[f64], temperature: f64, top_p: f64) -> Result<ProbRow> {
    nucleus(&softmax_row(logits, temperature)?, top_p)
}

/// `KL(p ‖ q) = Σ p_v ln(p_v / q_v)` with `q` floored at [`PROB_FLOOR`] and `0 ln 0 = 0`.
pub fn kl_divergence(p: &ProbRow, q: &ProbRow) -> Result<f64> {
    kl_slices(p.values(), q.values())
}

pub(crate) fn kl_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "KL between rows of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(pv, _)| **pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv / qv.max(PROB_FLOOR)).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// Shannon entropy in nats.
pub fn entropy(p: &ProbRow) -> f64 {
    -p.0.iter()
        .filter(|v| **v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_row(&[0.0, 0.0], 1.0).unwrap().values(), &[0.5, 0.5]);
        assert_eq!(softmax_row(&[3.0, 1.0], 0.0).unwrap().values(), &[1.0, 0.0]);
        let e = std::f64::consts::E;
        let p = softmax_row(&[1.0, 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(p.get(0), e / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(p.get(1), 1.0 / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(p.get(0), 0.7311, epsilon = 1e-4);
    }

    #[test]
    fn softmax_argmax_ties_pick_lowest_index() {
        assert_eq!(softmax_row(&[1.0, 2.0, 2.0], 0.0).unwrap().argmax(), 1);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax_row(&[f64::NAN, 0.0], 1.0).is_err());
        assert!(softmax_row(&[f64::INFINITY, 0.0], 1.0).is_err());
        assert!(softmax_row(&[0.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn masked_logit_gets_exact_zero() {
        let p = softmax_row(&[0.3, MASKED_LOGIT, -0.2], 0.7).unwrap();
        assert_eq!(p.get(1), 0.0);
    }

    #[test]
    fn kl_examples() {
        let p = ProbRow::new(vec![0.2, 0.8]).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let a = ProbRow::new(vec![1.0, 0.0]).unwrap();
        let b = ProbRow::uniform(2);
        assert_abs_diff_eq!(kl_divergence(&a, &b).unwrap(), 2f64.ln(), epsilon = 1e-15);
        let q = ProbRow::new(vec![1.0, 0.0]).unwrap();
        let want = 0.5 * (0.5f64 / 1.0).ln() + 0.5 * (0.5 / 1e-12f64).ln();
        let got = kl_divergence(&b, &q).unwrap();
        assert!(got.is_finite());
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn kl_rejects_length_mismatch() {
        assert!(kl_divergence(&ProbRow::uniform(2), &ProbRow::uniform(3)).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&ProbRow::one_hot(3, 1)), 0.0);
        assert_abs_diff_eq!(entropy(&ProbRow::uniform(2)), 2f64.ln(), epsilon = 1e-15);
        let want = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        let got = entropy(&ProbRow::new(vec![0.9, 0.1]).unwrap());
        assert_abs_diff_eq!(got, want, epsilon = 1e-15);
        assert_abs_diff_eq!(got, 0.3251, epsilon = 1e-4);
    }

    #[test]
    fn nucleus_keeps_smallest_prefix() {
        let p = ProbRow::new(vec![0.1, 0.5, 0.3, 0.1]).unwrap();
        assert_eq!(nucleus(&p, 1.0).unwrap(), p);
        let n = nucleus(&p, 0.8).unwrap();
        assert_abs_diff_eq!(n.get(1), 0.625, epsilon = 1e-15);
        assert_abs_diff_eq!(n.get(2), 0.375, epsilon = 1e-15);
        assert_eq!(n.get(0), 0.0);
        assert_eq!(n.get(3), 0.0);
        let top = nucleus(&p, 0.01).unwrap();
        assert_eq!(top.values(), &[0.0, 1.0, 0.0, 0.0]);
    }

    fn row_strategy(n: usize) -> impl Strategy<Value = ProbRow> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("zero mass", |w| {
            ProbRow::from_weights(w).ok()
        })
    }

    proptest! {
        #[test]
        fn softmax_normalizes(logits in prop::collection::vec(-50.0f64..50.0, 1..20), t in 0.01f64..10.0) {
            let p = softmax_row(&logits, t).unwrap();
            let s: f64 = p.values().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(p.values().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn kl_nonnegative_and_zero_iff_equal(p in row_strategy(5), q in row_strategy(5)) {
            let kl = kl_divergence(&p, &q).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
            let gap = p.values().iter().zip(q.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if gap >= 1e-6 {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn entropy_bounded_by_log_support(p in row_strategy(6)) {
            let h = entropy(&p);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= 6f64.ln() + 1e-12);
        }

        #[test]
        fn nucleus_output_is_valid(p in row_strategy(6), top_p in 0.05f64..1.0) {
            let n = nucleus(&p, top_p).unwrap();
            let s: f64 = n.values().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(n.get(p.argmax()) > 0.0);
        }
    }
}
