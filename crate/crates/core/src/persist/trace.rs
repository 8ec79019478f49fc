//! Router outputs recorded during sampling, one JSON object per line.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ s = 1` for a stored routing vector.
pub const TRACE_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterRecord {
    /// Sampler step, `0` for the noisiest update.
    pub step: usize,
    pub layer: String,
    pub t: usize,
    pub instance: usize,
    pub s: Vec<f64>,
}

impl RouterRecord {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.s.iter().sum();
        let n = self.s.len();
        let in_range = |v: f64| if n == 1 { v > 0.0 && v <= 1.0 } else { v > 0.0 && v < 1.0 };
        if self.s.is_empty() || (sum - 1.0).abs() > TRACE_SUM_TOL || !self.s.iter().all(|&v| in_range(v)) {
            return Err(Error::Contract(format!(
                "routing vector at step {} layer `{}` instance {} is not a probability vector (sum {sum})",
                self.step, self.layer, self.instance
            )));
        }
        Ok(())
    }
}

pub fn write_trace(path: &Path, records: &[RouterRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<RouterRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RouterRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}
