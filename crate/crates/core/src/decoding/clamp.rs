use crate::error::{Error, Result};
use crate::numerics::ProbRow;

/// Admissible interval for an updated probability given the stale marginal
/// `p0` and the probability `c` of the token just committed.
pub fn clamp_bounds(p0: f64, c: f64) -> (f64, f64) {
    (((p0 - (1.0 - c)) / c).max(0.0), (p0 / c).min(1.0))
}

/// Clamps every entry of `predicted` into its [`clamp_bounds`] interval and
/// renormalizes. With `c = 1` the interval collapses and `p0` is returned.
/// If clamping leaves no mass at all the grounded row `p0` is returned.
pub fn ground_clamp(predicted: &ProbRow, p0: &ProbRow, c: f64) -> Result<ProbRow> {
    if predicted.len() != p0.len() {
        return Err(Error::Shape(format!(
            "predicted row of {} entries, marginal of {}",
            predicted.len(),
            p0.len()
        )));
    }
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "clamp needs a committed-token probability in (0, 1], got {c}"
        )));
    }
    if c == 1.0 {
        return Ok(p0.clone());
    }
    let clamped: Vec<f64> = predicted
        .values()
        .iter()
        .zip(p0.values())
        .map(|(&q, &p)| {
            let (lo, hi) = clamp_bounds(p, c);
            q.clamp(lo, hi)
        })
        .collect();
    if clamped.iter().sum::<f64>() <= 0.0 {
        return Ok(p0.clone());
    }
    ProbRow::from_weights(clamped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn certain_token_returns_the_marginal() {
        let p0 = ProbRow::new(vec![0.2, 0.3, 0.5]).unwrap();
        let q = ProbRow::new(vec![0.9, 0.1, 0.0]).unwrap();
        assert_eq!(ground_clamp(&q, &p0, 1.0).unwrap(), p0);
    }

    #[test]
    fn half_probability_leaves_half_marginal_unconstrained() {
        assert_eq!(clamp_bounds(0.5, 0.5), (0.0, 1.0));
    }

    #[test]
    fn worked_example() {
        let q = ProbRow::new(vec![1.0, 0.0]).unwrap();
        let p0 = ProbRow::new(vec![0.5, 0.5]).unwrap();
        let out = ground_clamp(&q, &p0, 0.8).unwrap();
        assert!((out.get(0) - 0.625).abs() < 1e-12);
        assert!((out.get(1) - 0.375).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_rejected() {
        let p = ProbRow::uniform(2);
        assert!(ground_clamp(&p, &p, 0.0).is_err());
    }

    fn row(n: usize) -> impl Strategy<Value = ProbRow> {
        prop::collection::vec(0.0f64..1.0, n)
            .prop_filter("nonzero", |w| w.iter().sum::<f64>() > 1e-6)
            .prop_map(|w| ProbRow::from_weights(w).unwrap())
    }

    proptest! {
        #[test]
        fn clamped_rows_are_valid(q in row(5), p0 in row(5), c in 0.01f64..=1.0) {
            let out = ground_clamp(&q, &p0, c).unwrap();
            let total: f64 = out.values().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            for (&qv, &pv) in q.values().iter().zip(p0.values()) {
                let (lo, hi) = clamp_bounds(pv, c);
                prop_assert!(lo <= hi + 1e-12);
                let v = qv.clamp(lo, hi);
                prop_assert!(v >= lo && v <= hi);
            }
        }
    }
}
