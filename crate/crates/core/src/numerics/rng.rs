use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::prob::ProbRow;

/// Counter-based random stream addressed by `(seed, stream_id)`.
///
/// Workers that need independent randomness use distinct stream ids, so the
/// draws a worker sees do not depend on scheduling.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire-style rejection keeps the draw exactly uniform.
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Derives a child stream from one draw of this stream.
    pub fn fork(&mut self) -> RngStream {
        let seed = self.inner.next_u64();
        RngStream::new(seed, self.stream_id)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Draws index `v` with probability `p_v` by inverting the cumulative mass.
pub fn sample_categorical(p: &ProbRow, rng: &mut RngStream) -> Result<usize> {
    let total: f64 = p.values().iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::InvalidArgument(
            "cannot sample from an all-zero row".into(),
        ));
    }
    let u = rng.next_f64() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &v) in p.values().iter().enumerate() {
        if v <= 0.0 {
            continue;
        }
        acc += v;
        last_positive = i;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(last_positive)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_always_returns_its_index() {
        let p = ProbRow::one_hot(5, 3);
        let mut rng = RngStream::new(1, 0);
        for _ in 0..1000 {
            assert_eq!(sample_categorical(&p, &mut rng).unwrap(), 3);
        }
    }

    #[test]
    fn uniform_bins_within_four_sigma() {
        let p = ProbRow::uniform(4);
        let mut rng = RngStream::new(7, 3);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_categorical(&p, &mut rng).unwrap()] += 1;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * 0.25).abs() < 4.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn fixed_seed_replays_exactly() {
        let p = ProbRow::new(vec![0.3, 0.7]).unwrap();
        let draw = |seed| {
            let mut rng = RngStream::new(seed, 0);
            (0..64)
                .map(|_| sample_categorical(&p, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn all_zero_row_is_an_error() {
        let p = ProbRow::from_raw(vec![0.0, 0.0]);
        assert!(sample_categorical(&p, &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let mut a = RngStream::new(5, 0);
        let mut b = RngStream::new(5, 1);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| a.next_f64() - 0.5).collect();
        let ys: Vec<f64> = (0..n).map(|_| b.next_f64() - 0.5).collect();
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        // var(U - 0.5) = 1/12; correlation standard error ≈ 1/sqrt(n)
        let corr = cov * 12.0;
        assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "corr {corr}");
        assert_ne!(xs[..8], ys[..8]);
    }

    #[test]
    fn below_is_in_range() {
        let mut rng = RngStream::new(2, 2);
        for n in 1..20 {
            assert!(rng.below(n) < n);
        }
    }
}
