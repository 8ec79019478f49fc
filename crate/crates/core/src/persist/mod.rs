//! Checkpoints, metrics, router traces and output-directory locking.

pub mod checkpoint;
pub mod metrics;
pub mod trace;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use checkpoint::{config_hash, Checkpoint, CheckpointMeta, ConfigHash, FORMAT_VERSION, MAGIC};
pub use metrics::{checkpoint_id, MetricsWriter, DISTILL_HEADER, TRAIN_HEADER};
pub use trace::{read_trace, write_trace, RouterRecord};

pub const LOCK_FILE: &str = ".styleinject.lock";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Contract(format!(
                "output directory {} is in use by another run (remove {} if that run died)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
