//! Output directories are filled in a hidden sibling staging directory and
//! renamed into place at the end, under a sibling lock file.

use std::fs;
use std::path::{Path, PathBuf};

use crate::CliError;

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!(".{name}.{suffix}"))
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Refuses an existing non-empty target unless `force`.
pub fn check_target(out: &Path, force: bool) -> Result<(), CliError> {
    if out.is_file() && !force {
        return Err(CliError::Usage(format!(
            "{} exists; pass --force to replace it",
            out.display()
        )));
    }
    if out.is_dir() && !force && fs::read_dir(out).map_err(|e| io(out, e))?.next().is_some() {
        return Err(CliError::Usage(format!(
            "{} is not empty; pass --force to replace it",
            out.display()
        )));
    }
    Ok(())
}

pub struct RunDir {
    out: PathBuf,
    staging: PathBuf,
    lock: PathBuf,
    committed: bool,
}

impl RunDir {
    pub fn create(out: &Path, force: bool) -> Result<Self, CliError> {
        if out.file_name().is_none() {
            return Err(CliError::Usage(format!(
                "{} cannot be used as an output directory",
                out.display()
            )));
        }
        check_target(out, force)?;
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
        }
        let lock = sibling(out, "lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => CliError::Runtime(format!(
                    "{} is locked by another run ({} exists)",
                    out.display(),
                    lock.display()
                )),
                _ => io(&lock, e),
            })?;
        let staging = sibling(out, "staging");
        let dir = RunDir {
            out: out.to_path_buf(),
            staging,
            lock,
            committed: false,
        };
        if dir.staging.exists() {
            fs::remove_dir_all(&dir.staging).map_err(|e| io(&dir.staging, e))?;
        }
        fs::create_dir_all(&dir.staging).map_err(|e| io(&dir.staging, e))?;
        Ok(dir)
    }

    /// Where files go until [`commit`](Self::commit).
    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn subdir(&self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.staging.join(name);
        fs::create_dir_all(&p).map_err(|e| io(&p, e))?;
        Ok(p)
    }

    pub fn commit(mut self) -> Result<PathBuf, CliError> {
        if self.out.is_dir() {
            fs::remove_dir_all(&self.out).map_err(|e| io(&self.out, e))?;
        } else if self.out.exists() {
            fs::remove_file(&self.out).map_err(|e| io(&self.out, e))?;
        }
        fs::rename(&self.staging, &self.out).map_err(|e| io(&self.out, e))?;
        self.committed = true;
        Ok(self.out.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
        let _ = fs::remove_file(&self.lock);
    }
}
