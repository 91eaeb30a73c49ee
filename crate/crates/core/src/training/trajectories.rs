use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::decoding::{decode_batch, Procedure, SamplingConfig};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::model::{Denoiser, TokenString};
use crate::numerics::RngStream;

/// A complete one-token-per-forward decode of the base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub seed: u64,
    pub prompt: TokenString,
    /// `(position, token)` in commit order.
    pub steps: Vec<(usize, usize)>,
}

impl Trajectory {
    /// The prompt followed by the string after each step.
    pub fn states(&self) -> Result<Vec<TokenString>> {
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        out.push(self.prompt.clone());
        for &(p, t) in &self.steps {
            let next = out.last().expect("nonempty").splice(p, t)?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn final_string(&self) -> Result<TokenString> {
        Ok(self.states()?.pop().expect("nonempty"))
    }
}

/// Decodes `n` trajectories from `prompt` with one token per base forward.
/// Trajectory `first_id + i` uses random stream `first_id + i`.
pub fn harvest_trajectories(
    base: &dyn Denoiser,
    prompt: &TokenString,
    n: usize,
    cfg: &SamplingConfig,
    first_id: u64,
) -> Result<Vec<Trajectory>> {
    if cfg.k != 1 {
        return Err(Error::InvalidArgument(format!(
            "trajectories are harvested one token at a time, got k = {}",
            cfg.k
        )));
    }
    let starts = vec![prompt.clone(); n];
    let decoded = decode_batch(Procedure::ExactJoint, base, None, &starts, cfg, first_id, false)?;
    Ok(decoded
        .into_iter()
        .enumerate()
        .map(|(i, (_, trace))| Trajectory {
            id: first_id + i as u64,
            seed: cfg.seed,
            prompt: prompt.clone(),
            steps: trace.events.iter().map(|e| (e.position, e.token)).collect(),
        })
        .collect())
}

/// Entry string at a random truncation point plus up to `k` following states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub trajectory_id: u64,
    pub seed: u64,
    pub truncation: usize,
    pub x: TokenString,
    /// States after 1, 2, ... further steps; fewer than `k` near the end.
    pub continuations: Vec<TokenString>,
    /// Position committed at each of those steps.
    pub positions: Vec<usize>,
}

impl TrajectorySample {
    pub fn k(&self) -> usize {
        self.continuations.len()
    }

    /// The string after `k` further steps (`k = 0` is the entry string),
    /// held at the last recorded state past the end.
    pub fn state(&self, k: usize) -> &TokenString {
        match k.min(self.k()) {
            0 => &self.x,
            k => &self.continuations[k - 1],
        }
    }

    /// Whether the sampler is scored at step `k`: a position remains to be
    /// committed after `k` recorded steps.
    pub fn reaches(&self, k: usize) -> bool {
        k < self.k()
    }
}

/// Draws `per_trace` truncation points uniformly from each trajectory, keeping
/// up to `k` following states. Cuts stop one step short of the end so every
/// sample scores at least one sampler step; trajectories shorter than two
/// steps are skipped. Returns the samples and the number skipped.
pub fn build_samples(
    trajectories: &[Trajectory],
    k: usize,
    per_trace: usize,
    rng: &mut RngStream,
) -> Result<(Vec<TrajectorySample>, usize)> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    let mut out = Vec::with_capacity(trajectories.len() * per_trace);
    let mut skipped = 0;
    for t in trajectories {
        let n = t.steps.len();
        if n < 2 {
            skipped += 1;
            continue;
        }
        let states = t.states()?;
        for _ in 0..per_trace {
            let cut = rng.below(n - 1);
            let m = k.min(n - cut);
            out.push(TrajectorySample {
                trajectory_id: t.id,
                seed: t.seed,
                truncation: cut,
                x: states[cut].clone(),
                continuations: states[cut + 1..=cut + m].to_vec(),
                positions: t.steps[cut..cut + m].iter().map(|s| s.0).collect(),
            });
        }
    }
    Ok((out, skipped))
}

pub fn write_trajectories<W: Write>(w: W, t: &[Trajectory]) -> Result<()> {
    jsonl::write(w, "trajectories", t)
}

pub fn read_trajectories<R: BufRead>(r: R) -> Result<Vec<Trajectory>> {
    jsonl::read(r, "trajectories")
}

pub fn write_samples<W: Write>(w: W, s: &[TrajectorySample]) -> Result<()> {
    jsonl::write(w, "samples", s)
}

pub fn read_samples<R: BufRead>(r: R) -> Result<Vec<TrajectorySample>> {
    jsonl::read(r, "samples")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TabularDenoiser, Vocab};

    fn tab() -> TabularDenoiser {
        let v = Vocab::from_labels(&["a", "b"]).unwrap();
        let s = vec![
            (v.parse("a a a a a a a a").unwrap(), 0.5),
            (v.parse("b b b b b b b b").unwrap(), 0.5),
        ];
        TabularDenoiser::new(v, s, 0.0).unwrap()
    }

    #[test]
    fn one_state_per_step() {
        let t = tab();
        let prompt = TokenString::all_masked(8, t.vocab());
        let trajs = harvest_trajectories(&t, &prompt, 3, &SamplingConfig::default(), 0).unwrap();
        for tr in &trajs {
            assert_eq!(tr.steps.len(), 8);
            assert_eq!(tr.states().unwrap().len(), 9);
            assert!(tr.final_string().unwrap().is_complete());
        }
    }

    #[test]
    fn truncations_stay_in_range_and_respect_splicing() {
        let t = tab();
        let prompt = TokenString::all_masked(8, t.vocab());
        let trajs = harvest_trajectories(&t, &prompt, 20, &SamplingConfig::default(), 0).unwrap();
        let (samples, skipped) = build_samples(&trajs, 4, 10, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(skipped, 0);
        let mut seen = [false; 7];
        for s in &samples {
            assert!(s.truncation <= 6);
            assert_eq!(s.k(), 4.min(8 - s.truncation));
            assert!(s.reaches(1));
            seen[s.truncation] = true;
            for k in 1..=s.k() {
                let prev = s.state(k - 1);
                let cur = s.state(k);
                let p = s.positions[k - 1];
                assert!(prev.is_masked(p));
                assert_eq!(prev.splice(p, cur.get(p)).unwrap(), *cur);
                assert_eq!(cur.mask_count() + 1, prev.mask_count());
            }
        }
        assert!(seen.iter().all(|&b| b));
        let (long, _) = build_samples(&trajs, 9, 1, &mut RngStream::new(1, 0)).unwrap();
        assert!(long.iter().all(|s| s.k() == 8 - s.truncation && s.state(s.k()).is_complete()));
        assert!(build_samples(&trajs, 1, 1, &mut RngStream::new(1, 0)).is_err());
    }

    #[test]
    fn files_round_trip() {
        let t = tab();
        let prompt = TokenString::all_masked(8, t.vocab());
        let trajs = harvest_trajectories(&t, &prompt, 4, &SamplingConfig::default(), 10).unwrap();
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &trajs).unwrap();
        assert_eq!(read_trajectories(buf.as_slice()).unwrap(), trajs);
        let (samples, _) = build_samples(&trajs, 2, 2, &mut RngStream::new(0, 0)).unwrap();
        let mut buf = Vec::new();
        write_samples(&mut buf, &samples).unwrap();
        assert_eq!(read_samples(buf.as_slice()).unwrap(), samples);
        assert!(read_samples(&b"{\"schema\":1,\"kind\":\"trajectories\",\"count\":0}\n"[..]).is_err());
    }
}
