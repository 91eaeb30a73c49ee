//! Lockstep decoding machinery shared by sampling, forced replay and
//! enumeration.
//!
//! Each string is driven by a [`Cursor`] that reports what it needs next: a
//! base forward, a sampler refresh, or a (position, token) decision. Drivers
//! batch the forwards of all cursors that need the same thing.

use std::collections::HashMap;

use crate::adjust::{check_compatible, JointSampler};
use crate::decoding::{ground_clamp, select_position, DecodeTrace, Procedure, SamplingConfig, TraceEvent};
use crate::error::{Error, Result};
use crate::model::{rows_for_masked, Denoiser, DenoiserOutput, TokenString};
use crate::numerics::{sample_categorical, ProbRow, RngStream};

/// Strings decoded together; bounds memory held by live cursors.
const DECODE_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Need {
    Base,
    Sampler,
    Choose,
    Done,
}

#[derive(Clone, Debug)]
pub(crate) struct Cursor {
    pub x: TokenString,
    pub need: Need,
    /// Candidate rows for the next decision, ascending by position.
    pub rows: Vec<(usize, ProbRow)>,
    pub trace: DecodeTrace,
    pub log_prob: f64,
    pub output: Option<DenoiserOutput>,
    refresh: bool,
    step_size: usize,
    committed: usize,
    base_rows: Vec<(usize, ProbRow)>,
    last_prob: f64,
    record_rows: bool,
}

fn find_row(rows: &[(usize, ProbRow)], pos: usize) -> Option<&ProbRow> {
    rows.binary_search_by_key(&pos, |(p, _)| *p)
        .ok()
        .map(|i| &rows[i].1)
}

impl Cursor {
    pub fn new(
        procedure: Procedure,
        cfg: &SamplingConfig,
        x: TokenString,
        record_rows: bool,
    ) -> Result<Self> {
        if x.mask_count() == 0 {
            return Err(Error::NothingMasked);
        }
        if procedure == Procedure::ExactJoint && cfg.k != 1 {
            return Err(Error::InvalidArgument(format!(
                "exact joint sampling commits one token per forward, got k = {}",
                cfg.k
            )));
        }
        Ok(Cursor {
            trace: DecodeTrace::new(procedure, cfg.clone(), x.clone()),
            x,
            need: Need::Base,
            rows: Vec::new(),
            log_prob: 0.0,
            output: None,
            refresh: procedure == Procedure::Adjust,
            step_size: 0,
            committed: 0,
            base_rows: Vec::new(),
            last_prob: 1.0,
            record_rows,
        })
    }

    fn cfg(&self) -> &SamplingConfig {
        &self.trace.config
    }

    pub fn apply_base(&mut self, out: DenoiserOutput) -> Result<()> {
        debug_assert_eq!(self.need, Need::Base);
        let (t, p) = (self.cfg().temperature, self.cfg().top_p);
        self.rows = rows_for_masked(&out, &self.x, t, p)?;
        if self.refresh && self.cfg().clamp {
            self.base_rows = self.rows.clone();
        }
        self.step_size = self.cfg().k.min(self.x.mask_count());
        self.committed = 0;
        self.trace.base_forward_count += 1;
        self.output = self.refresh.then_some(out);
        self.need = Need::Choose;
        Ok(())
    }

    pub fn apply_sampler(&mut self, out: DenoiserOutput) -> Result<()> {
        debug_assert_eq!(self.need, Need::Sampler);
        let (t, p) = (self.cfg().temperature, self.cfg().top_p);
        let mut rows = rows_for_masked(&out, &self.x, t, p)?;
        if self.cfg().clamp {
            for (pos, row) in rows.iter_mut() {
                let p0 = find_row(&self.base_rows, *pos).expect("masked now implies masked at step start");
                *row = ground_clamp(row, p0, self.last_prob)?;
            }
        }
        self.rows = rows;
        self.trace.sampler_forward_count += 1;
        self.output = Some(out);
        self.need = Need::Choose;
        Ok(())
    }

    /// Commits `token` at `pos` and returns its probability. A zero-probability
    /// commit ends the decode with log-probability −∞.
    pub fn commit(&mut self, pos: usize, token: usize) -> Result<f64> {
        debug_assert_eq!(self.need, Need::Choose);
        let row = find_row(&self.rows, pos).ok_or(Error::NotMasked(pos))?;
        if token >= row.len() {
            return Err(Error::InvalidArgument(format!("token {token} outside vocabulary")));
        }
        let prob = row.get(token);
        self.committed += 1;
        self.trace.events.push(TraceEvent {
            macro_step: self.trace.base_forward_count,
            k: self.committed,
            position: pos,
            token,
            prob,
            base_forwards: self.trace.base_forward_count,
            sampler_forwards: self.trace.sampler_forward_count,
            row: self.record_rows.then(|| row.clone()),
        });
        self.x = self.x.splice(pos, token)?;
        if prob <= 0.0 {
            self.log_prob = f64::NEG_INFINITY;
            self.need = Need::Done;
            return Ok(prob);
        }
        self.log_prob += prob.ln();
        self.last_prob = prob;
        self.need = if self.x.is_complete() {
            Need::Done
        } else if self.committed == self.step_size {
            Need::Base
        } else if self.refresh {
            Need::Sampler
        } else {
            let i = self.rows.binary_search_by_key(&pos, |(p, _)| *p).expect("row present");
            self.rows.remove(i);
            Need::Choose
        };
        Ok(prob)
    }
}

pub(crate) enum Chooser<'a> {
    Sample {
        tokens: Vec<RngStream>,
        policy: Vec<RngStream>,
    },
    Targets(&'a [TokenString]),
    Traces(&'a [DecodeTrace]),
}

impl Chooser<'_> {
    fn decide(&mut self, i: usize, c: &Cursor) -> Result<(usize, usize)> {
        let policy = c.cfg().policy;
        match self {
            Chooser::Sample { tokens, policy: prng } => {
                let pos = select_position(&c.rows, policy, Some(&mut prng[i]))?;
                let row = find_row(&c.rows, pos).expect("selected from rows");
                Ok((pos, sample_categorical(row, &mut tokens[i])?))
            }
            Chooser::Targets(targets) => {
                if policy.is_random() {
                    return Err(Error::InvalidArgument(
                        "forced replay needs a deterministic policy".into(),
                    ));
                }
                let pos = select_position(&c.rows, policy, None)?;
                Ok((pos, targets[i].get(pos)))
            }
            Chooser::Traces(traces) => {
                let n = c.trace.events.len();
                let ev = traces[i].events.get(n).ok_or_else(|| Error::ReplayMismatch {
                    event: n,
                    detail: "decode continues past the recorded events".into(),
                })?;
                if !policy.is_random() {
                    let pos = select_position(&c.rows, policy, None)?;
                    if pos != ev.position {
                        return Err(Error::ReplayMismatch {
                            event: n,
                            detail: format!("policy selects {pos}, trace has {}", ev.position),
                        });
                    }
                }
                let row = find_row(&c.rows, ev.position).ok_or_else(|| Error::ReplayMismatch {
                    event: n,
                    detail: format!("position {} is not a candidate", ev.position),
                })?;
                if let Some(rec) = &ev.row {
                    let same = rec.len() == row.len()
                        && rec.values().iter().zip(row.values()).all(|(a, b)| a.to_bits() == b.to_bits());
                    if !same {
                        return Err(Error::ReplayMismatch {
                            event: n,
                            detail: "recomputed row differs from the recorded row".into(),
                        });
                    }
                }
                if ev.token >= row.len() || row.get(ev.token).to_bits() != ev.prob.to_bits() {
                    return Err(Error::ReplayMismatch {
                        event: n,
                        detail: format!("probability of token {} differs from {}", ev.token, ev.prob),
                    });
                }
                Ok((ev.position, ev.token))
            }
        }
    }
}

/// Forwards the base model once per distinct string among `xs`.
fn dedup_forward(base: &dyn Denoiser, xs: Vec<TokenString>) -> Result<Vec<DenoiserOutput>> {
    let mut index: HashMap<&TokenString, usize> = HashMap::new();
    let mut unique = Vec::new();
    let mut slot = Vec::with_capacity(xs.len());
    for x in &xs {
        let next = unique.len();
        let i = *index.entry(x).or_insert_with(|| {
            unique.push(x.clone());
            next
        });
        slot.push(i);
    }
    let outs = base.forward_batch(&unique)?;
    Ok(slot.into_iter().map(|i| outs[i].clone()).collect())
}

pub(crate) fn validate_setup(
    procedure: Procedure,
    base: &dyn Denoiser,
    g: Option<&dyn JointSampler>,
    cfg: &SamplingConfig,
) -> Result<()> {
    cfg.validate()?;
    match procedure {
        Procedure::ExactJoint if cfg.k != 1 => Err(Error::InvalidArgument(format!(
            "exact joint sampling needs k = 1, got {}",
            cfg.k
        ))),
        Procedure::Adjust => match g {
            Some(g) => check_compatible(base, g),
            None if cfg.k == 1 => Ok(()),
            None => Err(Error::InvalidArgument("joint decoding needs a sampler".into())),
        },
        _ => Ok(()),
    }
}

/// Drives all cursors to completion in lockstep.
pub(crate) fn run(
    procedure: Procedure,
    base: &dyn Denoiser,
    g: Option<&dyn JointSampler>,
    cfg: &SamplingConfig,
    starts: &[TokenString],
    chooser: &mut Chooser<'_>,
    record_rows: bool,
) -> Result<Vec<Cursor>> {
    validate_setup(procedure, base, g, cfg)?;
    let mut cursors = starts
        .iter()
        .map(|x| Cursor::new(procedure, cfg, x.clone(), record_rows))
        .collect::<Result<Vec<_>>>()?;
    loop {
        for (i, c) in cursors.iter_mut().enumerate() {
            while c.need == Need::Choose {
                let (pos, tok) = chooser.decide(i, c)?;
                c.commit(pos, tok)?;
            }
        }
        let base_ids: Vec<usize> = (0..cursors.len()).filter(|&i| cursors[i].need == Need::Base).collect();
        if !base_ids.is_empty() {
            let xs = base_ids.iter().map(|&i| cursors[i].x.clone()).collect();
            let outs = dedup_forward(base, xs)?;
            for (&i, o) in base_ids.iter().zip(outs) {
                cursors[i].apply_base(o)?;
            }
        }
        let samp_ids: Vec<usize> =
            (0..cursors.len()).filter(|&i| cursors[i].need == Need::Sampler).collect();
        if !samp_ids.is_empty() {
            let g = g.expect("sampler steps only occur with a sampler");
            let xs: Vec<TokenString> = samp_ids.iter().map(|&i| cursors[i].x.clone()).collect();
            let outs = {
                let prev: Vec<&DenoiserOutput> = samp_ids
                    .iter()
                    .map(|&i| cursors[i].output.as_ref().expect("output after base step"))
                    .collect();
                g.refresh(&prev, &xs)?
            };
            for (&i, o) in samp_ids.iter().zip(outs) {
                cursors[i].apply_sampler(o)?;
            }
        }
        if base_ids.is_empty() && samp_ids.is_empty() {
            break;
        }
    }
    Ok(cursors)
}

fn check_same_length(starts: &[TokenString]) -> Result<()> {
    if let Some(first) = starts.first() {
        if starts.iter().any(|x| x.len() != first.len()) {
            return Err(Error::Shape("decode batch mixes string lengths".into()));
        }
    }
    Ok(())
}

/// Samples one decode per start string. String `i` draws tokens from stream
/// `first_stream + i` of `cfg.seed` and policy choices from a fork of it, so
/// results do not depend on batch composition.
pub fn decode_batch(
    procedure: Procedure,
    base: &dyn Denoiser,
    g: Option<&dyn JointSampler>,
    starts: &[TokenString],
    cfg: &SamplingConfig,
    first_stream: u64,
    record_rows: bool,
) -> Result<Vec<(TokenString, DecodeTrace)>> {
    check_same_length(starts)?;
    let mut out = Vec::with_capacity(starts.len());
    for (c, chunk) in starts.chunks(DECODE_CHUNK).enumerate() {
        let offset = first_stream + (c * DECODE_CHUNK) as u64;
        let mut tokens: Vec<RngStream> = (0..chunk.len())
            .map(|i| RngStream::new(cfg.seed, offset + i as u64))
            .collect();
        let policy = tokens.iter_mut().map(|r| r.fork()).collect();
        let mut chooser = Chooser::Sample { tokens, policy };
        let cursors = run(procedure, base, g, cfg, chunk, &mut chooser, record_rows)?;
        out.extend(cursors.into_iter().map(|c| (c.x, c.trace)));
    }
    Ok(out)
}

fn sample_one(
    procedure: Procedure,
    base: &dyn Denoiser,
    g: Option<&dyn JointSampler>,
    x: &TokenString,
    cfg: &SamplingConfig,
    rng: &mut RngStream,
) -> Result<(TokenString, DecodeTrace)> {
    let policy = rng.fork();
    let mut chooser = Chooser::Sample {
        tokens: vec![rng.clone()],
        policy: vec![policy],
    };
    let mut cursors = run(procedure, base, g, cfg, std::slice::from_ref(x), &mut chooser, true)?;
    if let Chooser::Sample { mut tokens, .. } = chooser {
        *rng = tokens.pop().expect("one stream");
    }
    let c = cursors.pop().expect("one cursor");
    Ok((c.x, c.trace))
}

/// Commits `cfg.k` tokens per base forward, drawn independently from the
/// same frozen rows.
pub fn parallel_sample(
    model: &dyn Denoiser,
    x: &TokenString,
    cfg: &SamplingConfig,
    rng: &mut RngStream,
) -> Result<(TokenString, DecodeTrace)> {
    sample_one(Procedure::Parallel, model, None, x, cfg, rng)
}

/// One token per base forward; requires `cfg.k == 1`.
pub fn exact_joint_sample(
    model: &dyn Denoiser,
    x: &TokenString,
    cfg: &SamplingConfig,
    rng: &mut RngStream,
) -> Result<(TokenString, DecodeTrace)> {
    sample_one(Procedure::ExactJoint, model, None, x, cfg, rng)
}

/// First token of each macro-step from the base rows, later ones from rows
/// refreshed by `g` after every commit.
pub fn adjust_sample(
    base: &dyn Denoiser,
    g: &dyn JointSampler,
    x: &TokenString,
    cfg: &SamplingConfig,
    rng: &mut RngStream,
) -> Result<(TokenString, DecodeTrace)> {
    if cfg.k == 1 {
        return exact_joint_sample(base, x, cfg, rng);
    }
    sample_one(Procedure::Adjust, base, Some(g), x, cfg, rng)
}

/// Replays a trace, checking every recomputed row and probability bit for
/// bit, and returns the trace's log-probability.
pub fn replay_logprob(base: &dyn Denoiser, g: Option<&dyn JointSampler>, trace: &DecodeTrace) -> Result<f64> {
    let mut chooser = Chooser::Traces(std::slice::from_ref(trace));
    let cursors = run(
        trace.procedure,
        base,
        g,
        &trace.config,
        std::slice::from_ref(&trace.initial),
        &mut chooser,
        false,
    )?;
    let c = &cursors[0];
    if c.trace.events.len() != trace.events.len() {
        return Err(Error::ReplayMismatch {
            event: c.trace.events.len(),
            detail: "replay finished before the recorded events".into(),
        });
    }
    if c.trace.base_forward_count != trace.base_forward_count
        || c.trace.sampler_forward_count != trace.sampler_forward_count
    {
        return Err(Error::ReplayMismatch {
            event: trace.events.len(),
            detail: "forward counters differ".into(),
        });
    }
    Ok(c.log_prob)
}

/// Log-probability of a trace produced by joint decoding with `g`.
pub fn adjust_string_logprob(base: &dyn Denoiser, g: &dyn JointSampler, trace: &DecodeTrace) -> Result<f64> {
    replay_logprob(base, Some(g), trace)
}

/// Probability (log) that `procedure` turns `starts[i]` into `targets[i]`.
///
/// With a deterministic policy every target is reached along exactly one
/// path, so forcing the target's tokens yields its probability.
pub fn forced_logprobs(
    procedure: Procedure,
    base: &dyn Denoiser,
    g: Option<&dyn JointSampler>,
    starts: &[TokenString],
    targets: &[TokenString],
    cfg: &SamplingConfig,
) -> Result<Vec<f64>> {
    if starts.len() != targets.len() {
        return Err(Error::Shape("starts and targets differ in count".into()));
    }
    check_same_length(starts)?;
    for (s, t) in starts.iter().zip(targets) {
        let consistent = s.len() == t.len()
            && t.is_complete()
            && s.tokens().iter().zip(t.tokens()).all(|(&a, &b)| a == s.mask_id() || a == b);
        if !consistent {
            return Err(Error::InvalidArgument(format!("target {t} is not a completion of {s}")));
        }
    }
    let mut out = Vec::with_capacity(starts.len());
    for (sc, tc) in starts.chunks(DECODE_CHUNK).zip(targets.chunks(DECODE_CHUNK)) {
        let mut chooser = Chooser::Targets(tc);
        let cursors = run(procedure, base, g, cfg, sc, &mut chooser, false)?;
        out.extend(cursors.into_iter().map(|c| c.log_prob));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjust::{oracle_g, IdentitySampler};
    use crate::decoding::PolicyKind;
    use crate::model::{TabularDenoiser, Vocab};
    use std::sync::Arc;

    fn aabb() -> Arc<TabularDenoiser> {
        let v = Vocab::from_labels(&["a", "b"]).unwrap();
        let s = vec![(v.parse("a a").unwrap(), 0.5), (v.parse("b b").unwrap(), 0.5)];
        Arc::new(TabularDenoiser::new(v, s, 0.0).unwrap())
    }

    fn chain(len: usize) -> Arc<TabularDenoiser> {
        let v = Vocab::from_labels(&["a", "b", "c"]).unwrap();
        let a: Vec<usize> = (0..len).map(|i| i % 3).collect();
        let b: Vec<usize> = (0..len).map(|i| (i + 1) % 3).collect();
        let s = vec![
            (TokenString::new(a, &v).unwrap(), 0.6),
            (TokenString::new(b, &v).unwrap(), 0.4),
        ];
        Arc::new(TabularDenoiser::new(v, s, 0.0).unwrap())
    }

    #[test]
    fn counters_follow_the_cost_model() {
        let tab = chain(8);
        let g = oracle_g(tab.clone());
        let x = TokenString::all_masked(8, tab.vocab());
        for k in 1..=5 {
            let cfg = SamplingConfig::default().with_k(k);
            let (y, t) = adjust_sample(tab.as_ref(), &g, &x, &cfg, &mut RngStream::new(1, 0)).unwrap();
            assert!(y.is_complete());
            assert_eq!(t.base_forward_count, 8usize.div_ceil(k));
            assert_eq!(t.sampler_forward_count, 8 - t.base_forward_count);
            let (_, p) = parallel_sample(tab.as_ref(), &x, &cfg, &mut RngStream::new(1, 0)).unwrap();
            assert_eq!(p.base_forward_count, 8usize.div_ceil(k));
            assert_eq!(p.sampler_forward_count, 0);
        }
    }

    #[test]
    fn exact_joint_rejects_k_above_one() {
        let tab = aabb();
        let x = TokenString::all_masked(2, tab.vocab());
        let cfg = SamplingConfig::default().with_k(2);
        assert!(exact_joint_sample(tab.as_ref(), &x, &cfg, &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn positions_are_distinct_and_trace_replays() {
        let tab = chain(6);
        let g = oracle_g(tab.clone());
        let x = TokenString::all_masked(6, tab.vocab());
        let cfg = SamplingConfig::default().with_k(3);
        let (y, t) = adjust_sample(tab.as_ref(), &g, &x, &cfg, &mut RngStream::new(5, 0)).unwrap();
        let mut seen: Vec<usize> = t.events.iter().map(|e| e.position).collect();
        seen.sort();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
        assert_eq!(t.final_string().unwrap(), y);
        let lp = adjust_string_logprob(tab.as_ref(), &g, &t).unwrap();
        assert_eq!(lp, t.log_prob());
        assert!((lp - 0.6f64.ln()).abs() < 1e-12 || (lp - 0.4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tampered_trace_is_a_replay_mismatch() {
        let tab = chain(4);
        let x = TokenString::all_masked(4, tab.vocab());
        let cfg = SamplingConfig::default();
        let (_, mut t) = exact_joint_sample(tab.as_ref(), &x, &cfg, &mut RngStream::new(2, 0)).unwrap();
        t.events[0].prob *= 0.5;
        assert!(matches!(
            replay_logprob(tab.as_ref(), None, &t),
            Err(Error::ReplayMismatch { .. })
        ));
    }

    #[test]
    fn same_seed_same_trace_and_batch_independence() {
        let tab = chain(6);
        let x = TokenString::all_masked(6, tab.vocab());
        let cfg = SamplingConfig::default().with_k(2).with_policy(PolicyKind::Random);
        let starts = vec![x.clone(); 5];
        let all = decode_batch(Procedure::Parallel, tab.as_ref(), None, &starts, &cfg, 0, true).unwrap();
        let tail = decode_batch(Procedure::Parallel, tab.as_ref(), None, &starts[3..], &cfg, 3, true).unwrap();
        assert_eq!(&all[3..], &tail[..]);
    }

    #[test]
    fn identity_sampler_matches_parallel_with_fixed_order() {
        let tab = chain(6);
        let x = TokenString::all_masked(6, tab.vocab());
        let cfg = SamplingConfig::default().with_k(3).with_policy(PolicyKind::LeftToRight);
        for seed in 0..20 {
            let (a, _) = adjust_sample(tab.as_ref(), &IdentitySampler, &x, &cfg, &mut RngStream::new(seed, 0)).unwrap();
            let (b, _) = parallel_sample(tab.as_ref(), &x, &cfg, &mut RngStream::new(seed, 0)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn forced_logprob_of_off_support_string_is_minus_infinity() {
        let tab = aabb();
        let v = tab.vocab().clone();
        let x = TokenString::all_masked(2, &v);
        let cfg = SamplingConfig::default();
        let lp = forced_logprobs(
            Procedure::ExactJoint,
            tab.as_ref(),
            None,
            &[x.clone(), x.clone()],
            &[v.parse("a b").unwrap(), v.parse("b b").unwrap()],
            &cfg,
        )
        .unwrap();
        assert_eq!(lp[0], f64::NEG_INFINITY);
        assert!((lp[1] - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fully_unmasked_input_is_an_error() {
        let tab = aabb();
        let x = tab.vocab().parse("a a").unwrap();
        let cfg = SamplingConfig::default();
        assert!(matches!(
            parallel_sample(tab.as_ref(), &x, &cfg, &mut RngStream::new(0, 0)),
            Err(Error::NothingMasked)
        ));
    }
}
