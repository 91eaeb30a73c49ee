use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adjust::JointSampler;
use crate::decoding::{decode_batch, Procedure, SamplingConfig};
use crate::error::{Error, Result};
use crate::model::{Denoiser, TokenString};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Untimed runs before measuring.
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            warmup: 3,
            repetitions: 5,
        }
    }
}

/// Decode counters and timing for one procedure and setting.
///
/// `layer_pass_equivalents` is an idealized cost: every base forward costs one
/// pass per block and every sampler forward costs one pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub procedure: Procedure,
    pub k: usize,
    pub n_strings: usize,
    pub blocks: usize,
    pub tokens_generated: usize,
    pub base_forwards: usize,
    pub sampler_forwards: usize,
    /// Median seconds to decode all `n_strings`.
    pub wall_time: f64,
    pub tokens_per_macro_step: f64,
    pub tokens_per_second: f64,
    pub layer_pass_equivalents: usize,
}

impl ThroughputReport {
    #[allow(clippy::too_many_arguments)]
    pub fn from_counters(
        procedure: Procedure,
        k: usize,
        n_strings: usize,
        blocks: usize,
        tokens_generated: usize,
        base_forwards: usize,
        sampler_forwards: usize,
        wall_time: f64,
    ) -> Self {
        ThroughputReport {
            procedure,
            k,
            n_strings,
            blocks,
            tokens_generated,
            base_forwards,
            sampler_forwards,
            wall_time,
            tokens_per_macro_step: tokens_generated as f64 / base_forwards as f64,
            tokens_per_second: tokens_generated as f64 / wall_time,
            layer_pass_equivalents: base_forwards * blocks + sampler_forwards,
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Decodes `n_strings` copies of `start` repeatedly and reports counters with
/// the median wall time. Runs on the calling thread only.
pub fn benchmark(
    procedure: Procedure,
    base: &dyn Denoiser,
    g: Option<&dyn JointSampler>,
    start: &TokenString,
    cfg: &SamplingConfig,
    n_strings: usize,
    bench: &BenchmarkConfig,
) -> Result<ThroughputReport> {
    if bench.repetitions == 0 || n_strings == 0 {
        return Err(Error::InvalidArgument("benchmark needs repetitions and strings".into()));
    }
    let starts = vec![start.clone(); n_strings];
    let run = || decode_batch(procedure, base, g, &starts, cfg, 0, false);
    for _ in 0..bench.warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(bench.repetitions);
    let mut last = Vec::new();
    for _ in 0..bench.repetitions {
        let t0 = Instant::now();
        last = run()?;
        times.push(t0.elapsed().as_secs_f64());
    }
    let (mut tokens, mut bf, mut sf) = (0, 0, 0);
    for (_, t) in &last {
        tokens += t.events.len();
        bf += t.base_forward_count;
        sf += t.sampler_forward_count;
    }
    Ok(ThroughputReport::from_counters(
        procedure,
        cfg.k,
        n_strings,
        base.layer_count(),
        tokens,
        bf,
        sf,
        median(times),
    ))
}
