use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One value in plot-ready long format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub procedure: String,
    pub k: usize,
    pub metric: String,
    pub value: f64,
}

fn io(e: std::io::Error) -> Error {
    Error::Format(e.to_string())
}

/// `procedure,K,metric,value` with one row per entry.
pub fn write_long_csv<W: Write>(mut w: W, rows: &[LongRow]) -> Result<()> {
    writeln!(w, "procedure,K,metric,value").map_err(io)?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.procedure, r.k, r.metric, r.value).map_err(io)?;
    }
    Ok(())
}

/// `key: value` per line.
pub fn write_summary<W: Write>(mut w: W, entries: &[(String, String)]) -> Result<()> {
    for (k, v) in entries {
        writeln!(w, "{k}: {v}").map_err(io)?;
    }
    Ok(())
}
