//! Output files appear complete or not at all.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

fn temp_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp{}", std::process::id()))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let tmp = temp_path(path);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(CliError::io(path, e));
    }
    Ok(())
}

/// Builds a directory under a temp name and renames it into place once
/// `fill` succeeds, replacing any previous directory at `path`.
pub fn write_dir_atomic(path: &Path, fill: impl FnOnce(&Path) -> CliResult<()>) -> CliResult<()> {
    let tmp = temp_path(path);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| CliError::io(path, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Stages files in a sibling temp directory and, once `fill` succeeds, moves
/// each top-level entry into `path`, replacing entries of the same name and
/// leaving other contents of `path` alone.
pub fn write_into_atomic(path: &Path, fill: impl FnOnce(&Path) -> CliResult<()>) -> CliResult<()> {
    let stage = temp_path(&absolute(path)?);
    write_dir_atomic(&stage, fill)?;
    let result = (|| {
        fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
        for entry in fs::read_dir(&stage).map_err(|e| CliError::io(&stage, e))? {
            let entry = entry.map_err(|e| CliError::io(&stage, e))?;
            let dest = path.join(entry.file_name());
            if dest.is_dir() {
                fs::remove_dir_all(&dest).map_err(|e| CliError::io(&dest, e))?;
            }
            fs::rename(entry.path(), &dest).map_err(|e| CliError::io(&dest, e))?;
        }
        Ok(())
    })();
    let _ = fs::remove_dir_all(&stage);
    result
}

fn absolute(path: &Path) -> CliResult<PathBuf> {
    std::path::absolute(path).map_err(|e| CliError::io(path, e))
}
