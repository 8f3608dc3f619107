//! Run directories, loss logs and the checkpoint compatibility guard.

use std::fs;
use std::path::{Path, PathBuf};

use edgefill_core::nn::Checkpoint;
use edgefill_core::train::StepLosses;
use edgefill_core::{Error, Result};

use crate::config::RunConfig;

/// Meta key holding the structural hash in checkpoints.
pub const HASH_KEY: &str = "config_hash";

/// `<root>/<UTC timestamp>-<hash prefix>`.
pub fn new_run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    root.join(format!("{stamp}-{}", &cfg.hash()[..12]))
}

/// Resolves `--run-dir` / `--runs-root` into a created directory, and
/// stores the effective config next to the artifacts.
pub fn prepare_run_dir(explicit: Option<&Path>, root: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = match explicit {
        Some(d) => d.to_path_buf(),
        None => new_run_dir(root, cfg),
    };
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(dir)
}

/// Refuses a checkpoint trained under a different structural config.
pub fn check_hash(ckpt: &Checkpoint, expected: &str, what: &str, path: &Path) -> Result<()> {
    match ckpt.meta.get(HASH_KEY) {
        Some(h) if h == expected => Ok(()),
        Some(h) => Err(Error::Checkpoint(format!(
            "{what} checkpoint {} was trained with config hash {h}, but the current config hashes to {expected}",
            path.display()
        ))),
        None => Err(Error::Checkpoint(format!(
            "{what} checkpoint {} carries no config hash (current config hashes to {expected})",
            path.display()
        ))),
    }
}

/// Loss rows kept in memory and rewritten whole on every flush, so the
/// file always matches the last checkpoint.
pub struct CsvLog {
    path: PathBuf,
    header: &'static str,
    rows: Vec<(u64, String)>,
}

impl CsvLog {
    /// Opens a log, keeping existing rows up to and including `resume_step`.
    pub fn open(path: PathBuf, header: &'static str, resume_step: Option<u64>) -> Result<Self> {
        let mut rows = Vec::new();
        if let (Some(limit), Ok(text)) = (resume_step, fs::read_to_string(&path)) {
            for line in text.lines().skip(1) {
                let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                match step {
                    Some(s) if s <= limit => rows.push((s, line.to_string())),
                    Some(_) => {}
                    None => return Err(Error::Data(format!("unreadable row {line:?} in {}", path.display()))),
                }
            }
        }
        Ok(CsvLog { path, header, rows })
    }

    pub fn push(&mut self, step: u64, row: String) {
        self.rows.push((step, row));
    }

    pub fn flush(&self) -> Result<()> {
        let mut s = String::with_capacity(self.rows.len() * 64);
        s.push_str(self.header);
        s.push('\n');
        for (_, r) in &self.rows {
            s.push_str(r);
            s.push('\n');
        }
        fs::write(&self.path, s)?;
        Ok(())
    }
}

/// Main and auxiliary loss logs of one model.
pub struct LossLogs {
    pub main: CsvLog,
    pub aux: CsvLog,
}

impl LossLogs {
    pub fn open(dir: &Path, prefix: &str, resume_step: Option<u64>) -> Result<Self> {
        use edgefill_core::train::{AUX_CSV_HEADER, LOSS_CSV_HEADER};
        Ok(LossLogs {
            main: CsvLog::open(dir.join(format!("{prefix}_loss.csv")), LOSS_CSV_HEADER, resume_step)?,
            aux: CsvLog::open(dir.join(format!("{prefix}_aux.csv")), AUX_CSV_HEADER, resume_step)?,
        })
    }

    pub fn push(&mut self, l: &StepLosses) {
        self.main.push(l.step, l.csv_row());
        self.aux.push(l.step, l.aux_row());
    }

    pub fn flush(&self) -> Result<()> {
        self.main.flush()?;
        self.aux.flush()
    }
}

/// Writes a checkpoint through a temporary file so an interrupted save
/// never leaves a truncated checkpoint behind.
pub fn save_atomic(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    ckpt.save(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
