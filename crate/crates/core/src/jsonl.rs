//! Line-delimited JSON files with a schema header line.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    schema: u32,
    kind: String,
    count: usize,
}

pub fn write<W: Write, T: Serialize>(mut w: W, kind: &str, records: &[T]) -> Result<()> {
    let header = Header {
        schema: SCHEMA_VERSION,
        kind: kind.to_string(),
        count: records.len(),
    };
    let fmt = |e: serde_json::Error| Error::Format(e.to_string());
    let io = |e: std::io::Error| Error::Format(e.to_string());
    serde_json::to_writer(&mut w, &header).map_err(fmt)?;
    w.write_all(b"\n").map_err(io)?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(fmt)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read<R: BufRead, T: DeserializeOwned>(r: R, kind: &str) -> Result<Vec<T>> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format(format!("empty {kind} file")))?
        .map_err(|e| Error::Format(e.to_string()))?;
    let header: Header =
        serde_json::from_str(&first).map_err(|e| Error::Format(format!("{kind} header: {e}")))?;
    if header.schema != SCHEMA_VERSION {
        return Err(Error::Format(format!("unsupported {kind} schema {}", header.schema)));
    }
    if header.kind != kind {
        return Err(Error::Format(format!("expected a {kind} file, found {}", header.kind)));
    }
    let mut out = Vec::with_capacity(header.count);
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::Format(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{kind} line {}: {e}", n + 2)))?,
        );
    }
    if out.len() != header.count {
        return Err(Error::Format(format!(
            "{kind} header declares {} records, found {}",
            header.count,
            out.len()
        )));
    }
    Ok(out)
}
