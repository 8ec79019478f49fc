use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const TRAIN_HEADER: &[&str] = &["step", "loss", "lr", "checkpoint_id"];
pub const DISTILL_HEADER: &[&str] = &["step", "total", "outkd", "featkd", "lr", "checkpoint_id"];

/// CSV writer that flushes after every row so an aborted run leaves a
/// readable file.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    columns: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
            columns: header.len(),
        };
        w.write_line(&header.join(","))?;
        Ok(w)
    }

    /// Floats are written in shortest round-trip form.
    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        if fields.len() != self.columns {
            return Err(Error::Contract(format!(
                "metrics row has {} fields, header has {}",
                fields.len(),
                self.columns
            )));
        }
        self.write_line(&fields.join(","))
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn checkpoint_id(step: u64) -> String {
    format!("ckpt-{step:06}")
}
