//! Layout of a run directory and its artifacts.
//!
//! ```text
//! run.json              resolved configuration
//! metrics.csv           one row per logging interval
//! gradnorms.csv         step,k,norm at logged updates
//! checkpoint-<step>.bin trainer state
//! replay-<step>.bin     replay memory at the same step
//! ```

use std::path::{Path, PathBuf};

use sacflow::checkpoint::Checkpoint;
use sacflow::diagnostics::WriterLock;
use sacflow::sac::ReplayBuffer;
use sacflow::{Error, Result};

use crate::config::RunConfig;

pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const GRADNORMS_FILE: &str = "gradnorms.csv";

/// An open run directory; holds the directory lock while alive.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    _lock: WriterLock,
}

impl RunDir {
    /// Creates the directory for a new run and writes `run.json`. A
    /// directory that already holds a run is refused.
    pub fn create(config: &RunConfig) -> Result<Self> {
        let path = config.out_dir();
        std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        let dir = Self::lock(path)?;
        if dir.file(RUN_FILE).exists() {
            return Err(Error::config(
                "out",
                format!("{} already holds a run; continue it with --resume", dir.path.display()),
            ));
        }
        config.write(&dir.file(RUN_FILE))?;
        Ok(dir)
    }

    /// Opens an existing run and reads its configuration.
    pub fn open(path: &Path) -> Result<(Self, RunConfig)> {
        let dir = Self::lock(path.to_path_buf())?;
        let config = RunConfig::read(&dir.file(RUN_FILE))?;
        Ok((dir, config))
    }

    fn lock(path: PathBuf) -> Result<Self> {
        let lock = WriterLock::acquire(&path.join("run"))?;
        Ok(Self { path, _lock: lock })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.file(&format!("checkpoint-{step}.bin"))
    }

    pub fn replay_path(&self, step: u64) -> PathBuf {
        self.file(&format!("replay-{step}.bin"))
    }

    pub fn save(&self, step: u64, state: &Checkpoint, buffer: &ReplayBuffer) -> Result<()> {
        buffer.write_snapshot(&self.replay_path(step))?;
        state.write(&self.checkpoint_path(step))
    }

    /// Latest step with both a checkpoint and a replay snapshot.
    pub fn latest_step(&self) -> Result<Option<u64>> {
        Ok(checkpoint_steps(&self.path)?
            .into_iter()
            .filter(|&s| self.replay_path(s).exists())
            .max())
    }

    /// Drops CSV rows logged after `step`, so a resumed run appends exactly
    /// where the checkpoint left off.
    pub fn truncate_logs(&self, step: u64) -> Result<()> {
        for name in [METRICS_FILE, GRADNORMS_FILE] {
            let path = self.file(name);
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let mut kept = String::with_capacity(text.len());
            for (i, line) in text.lines().enumerate() {
                let keep = i == 0 || {
                    let first = line.split(',').next().unwrap_or_default();
                    let row_step: u64 = first
                        .parse()
                        .map_err(|_| Error::format(path.display().to_string(), format!("bad step `{first}`")))?;
                    row_step <= step
                };
                if keep {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
            std::fs::write(&path, kept).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Steps of every `checkpoint-<step>.bin` in `dir`.
pub fn checkpoint_steps(dir: &Path) -> Result<Vec<u64>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut steps = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(step) = name
            .strip_prefix("checkpoint-")
            .and_then(|r| r.strip_suffix(".bin"))
            .and_then(|s| s.parse().ok())
        {
            steps.push(step);
        }
    }
    Ok(steps)
}
