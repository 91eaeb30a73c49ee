use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::decoding::{Procedure, SamplingConfig};
use crate::error::{Error, Result};
use crate::model::TokenString;
use crate::numerics::ProbRow;

pub const TRACE_SCHEMA: u32 = 1;

/// One committed token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub macro_step: usize,
    /// 1-based index within the macro-step.
    pub k: usize,
    pub position: usize,
    pub token: usize,
    /// Probability of `token` under the row it was drawn from.
    pub prob: f64,
    /// Counters after this event.
    pub base_forwards: usize,
    pub sampler_forwards: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row: Option<ProbRow>,
}

/// Full record of one decode.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeTrace {
    pub procedure: Procedure,
    pub config: SamplingConfig,
    pub initial: TokenString,
    pub events: Vec<TraceEvent>,
    pub base_forward_count: usize,
    pub sampler_forward_count: usize,
}

impl DecodeTrace {
    pub(crate) fn new(procedure: Procedure, config: SamplingConfig, initial: TokenString) -> Self {
        DecodeTrace {
            procedure,
            config,
            initial,
            events: Vec::new(),
            base_forward_count: 0,
            sampler_forward_count: 0,
        }
    }

    /// String after applying every event to the initial string.
    pub fn final_string(&self) -> Result<TokenString> {
        let mut x = self.initial.clone();
        for e in &self.events {
            x = x.splice(e.position, e.token)?;
        }
        Ok(x)
    }

    pub fn log_prob(&self) -> f64 {
        self.events.iter().map(|e| e.prob.ln()).sum()
    }

    pub fn macro_steps(&self) -> usize {
        self.events.last().map(|e| e.macro_step).unwrap_or(0)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header {
        schema: u32,
        procedure: Procedure,
        config: SamplingConfig,
        initial: TokenString,
    },
    Event(TraceEvent),
}

/// Writes traces as line-delimited JSON: a header line per trace followed by
/// one line per event.
pub fn write_traces<W: Write>(mut w: W, traces: &[DecodeTrace]) -> Result<()> {
    let io = |e: std::io::Error| Error::Format(e.to_string());
    for t in traces {
        let header = Line::Header {
            schema: TRACE_SCHEMA,
            procedure: t.procedure,
            config: t.config.clone(),
            initial: t.initial.clone(),
        };
        serde_json::to_writer(&mut w, &header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
        for e in &t.events {
            serde_json::to_writer(&mut w, &Line::Event(e.clone()))
                .map_err(|e| Error::Format(e.to_string()))?;
            w.write_all(b"\n").map_err(io)?;
        }
    }
    Ok(())
}

pub fn read_traces<R: BufRead>(r: R) -> Result<Vec<DecodeTrace>> {
    let mut out: Vec<DecodeTrace> = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("trace line {}: {e}", n + 1)))?;
        match parsed {
            Line::Header {
                schema,
                procedure,
                config,
                initial,
            } => {
                if schema != TRACE_SCHEMA {
                    return Err(Error::Format(format!("unsupported trace schema {schema}")));
                }
                out.push(DecodeTrace::new(procedure, config, initial));
            }
            Line::Event(e) => {
                let t = out
                    .last_mut()
                    .ok_or_else(|| Error::Format(format!("line {}: event before header", n + 1)))?;
                t.base_forward_count = e.base_forwards;
                t.sampler_forward_count = e.sampler_forwards;
                t.events.push(e);
            }
        }
    }
    Ok(out)
}
