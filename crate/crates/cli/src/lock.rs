//! Advisory pid locks that keep profiling and training from overlapping in
//! one output directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

pub const TRAIN: &str = ".lock-train";
pub const PROFILE: &str = ".lock-profile";

#[derive(Debug)]
pub struct Lock {
    path: PathBuf,
}

/// Pid recorded in a lock file, if the process still exists. A lock naming
/// this process counts as free.
fn holder(path: &Path) -> Option<u32> {
    let pid: u32 = fs::read_to_string(path).ok()?.trim().parse().ok()?;
    if pid == std::process::id() {
        return None;
    }
    let proc_root = Path::new("/proc");
    if proc_root.is_dir() && !proc_root.join(pid.to_string()).exists() {
        return None;
    }
    Some(pid)
}

impl Lock {
    /// Takes lock `name` in `dir`, refusing while any of `conflicts` (or the
    /// lock itself) is held by a live process. Stale locks are replaced.
    pub fn acquire(dir: &Path, name: &str, conflicts: &[&str]) -> Result<Lock> {
        fs::create_dir_all(dir).map_err(|e| staircase::Error::io(dir, e))?;
        for other in conflicts.iter().chain(std::iter::once(&name)) {
            if let Some(pid) = holder(&dir.join(other)) {
                return Err(CliError::Pipeline(format!(
                    "{} is held by process {pid}; profiling and training cannot share a machine",
                    dir.join(other).display()
                )));
            }
        }
        let path = dir.join(name);
        fs::write(&path, std::process::id().to_string()).map_err(|e| staircase::Error::io(&path, e))?;
        Ok(Lock { path })
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn live_holder_blocks_and_stale_lock_is_replaced() {
        let dir = tempfile::tempdir().unwrap();
        // pid 1 always exists on Linux.
        fs::write(dir.path().join(TRAIN), "1").unwrap();
        if Path::new("/proc/1").exists() {
            let e = Lock::acquire(dir.path(), PROFILE, &[TRAIN]).unwrap_err();
            assert_eq!(e.exit_code(), 2);
        }
        fs::write(dir.path().join(TRAIN), u32::MAX.to_string()).unwrap();
        let lock = Lock::acquire(dir.path(), PROFILE, &[TRAIN]).unwrap();
        assert!(dir.path().join(PROFILE).exists());
        drop(lock);
        assert!(!dir.path().join(PROFILE).exists());
    }
}
