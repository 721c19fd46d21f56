use std::collections::HashSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use crate::error::{usage, CliResult};

/// An output directory that is rolled back unless the command commits.
///
/// On rollback, entries created since the guard was opened are removed, and
/// the directory itself is removed if the guard created it.
pub struct OutputDir {
    path: PathBuf,
    created: bool,
    existing: HashSet<OsString>,
    committed: bool,
}

impl OutputDir {
    pub fn open(path: &Path) -> CliResult<Self> {
        if path.exists() && !path.is_dir() {
            return Err(usage(format!(
                "output path {} exists and is not a directory",
                path.display()
            )));
        }
        let created = !path.exists();
        let existing = if created {
            HashSet::new()
        } else {
            std::fs::read_dir(path)
                .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?
                .filter_map(|e| e.ok().map(|e| e.file_name()))
                .collect()
        };
        std::fs::create_dir_all(path)
            .map_err(|e| usage(format!("cannot create {}: {e}", path.display())))?;
        Ok(Self {
            path: path.to_path_buf(),
            created,
            existing,
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Keeps everything written so far.
    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        if self.created {
            let _ = std::fs::remove_dir_all(&self.path);
            return;
        }
        if let Ok(entries) = std::fs::read_dir(&self.path) {
            for e in entries.flatten() {
                if !self.existing.contains(&e.file_name()) {
                    let p = e.path();
                    let _ = if p.is_dir() {
                        std::fs::remove_dir_all(&p)
                    } else {
                        std::fs::remove_file(&p)
                    };
                }
            }
        }
    }
}

/// Files written beside an existing path, removed unless committed.
#[derive(Default)]
pub struct FileSet {
    files: Vec<PathBuf>,
    committed: bool,
}

impl FileSet {
    /// Registers `path` as written by this command.
    pub fn claim(&mut self, path: PathBuf) -> PathBuf {
        self.files.push(path.clone());
        path
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for FileSet {
    fn drop(&mut self) {
        if !self.committed {
            for f in &self.files {
                let _ = std::fs::remove_file(f);
            }
        }
    }
}
