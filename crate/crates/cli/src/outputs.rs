//! Tracks files a command writes so a failed run leaves nothing behind.

use std::fs;
use std::path::{Path, PathBuf};

use crate::CliResult;

#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates `dir` and any missing parents, remembering the new ones.
    pub fn dir(&mut self, dir: &Path) -> CliResult<PathBuf> {
        let mut missing = Vec::new();
        let mut cur = Some(dir);
        while let Some(d) = cur {
            if d.as_os_str().is_empty() || d.exists() {
                break;
            }
            missing.push(d.to_path_buf());
            cur = d.parent();
        }
        fs::create_dir_all(dir)?;
        self.dirs.extend(missing.into_iter().rev());
        Ok(dir.to_path_buf())
    }

    /// Registers `path` as an output before anything is written to it.
    pub fn file(&mut self, path: PathBuf) -> PathBuf {
        self.files.push(path.clone());
        path
    }

    pub fn write(&mut self, path: PathBuf, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let path = self.file(path);
        fs::write(&path, contents)?;
        Ok(path)
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_outputs_are_removed() {
        let tmp = tempfile::tempdir().unwrap();
        let pre = tmp.path().join("existing.txt");
        fs::write(&pre, "keep").unwrap();
        {
            let mut o = Outputs::new();
            let d = o.dir(&tmp.path().join("a/b")).unwrap();
            o.write(d.join("x.csv"), "1").unwrap();
        }
        assert!(!tmp.path().join("a").exists());
        assert!(pre.exists());

        let mut o = Outputs::new();
        let d = o.dir(&tmp.path().join("c")).unwrap();
        o.write(d.join("y.csv"), "1").unwrap();
        o.commit();
        assert!(tmp.path().join("c/y.csv").exists());
    }
}
