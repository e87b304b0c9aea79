//! Output directories are assembled in a sibling staging directory and
//! renamed into place on success; a dropped stage removes itself.

use std::path::{Path, PathBuf};

use crate::{Error, Result};

#[derive(Debug)]
pub struct Staging {
    target: PathBuf,
    tmp: PathBuf,
    done: bool,
}

impl Staging {
    /// Refuses an existing non-empty target unless `force`.
    pub fn new(target: &Path, force: bool) -> Result<Self> {
        if (target.is_file() || (target.is_dir() && std::fs::read_dir(target)?.next().is_some())) && !force {
            return Err(Error::Config(format!(
                "output {} already exists; pass --force to overwrite",
                target.display()
            )));
        }
        let name = target
            .file_name()
            .ok_or_else(|| Error::Config(format!("output path {} has no final component", target.display())))?;
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&parent)
            .map_err(|e| Error::Config(format!("cannot create {}: {e}", parent.display())))?;
        let tmp = parent.join(format!(".{}.staging-{}", name.to_string_lossy(), std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir(&tmp)?;
        Ok(Self {
            target: target.to_path_buf(),
            tmp,
            done: false,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    pub fn write(&self, name: &str, contents: &[u8]) -> Result<()> {
        std::fs::write(self.path(name), contents)?;
        Ok(())
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.target.is_dir() {
            std::fs::remove_dir_all(&self.target)?;
        } else if self.target.exists() {
            std::fs::remove_file(&self.target)?;
        }
        std::fs::rename(&self.tmp, &self.target)?;
        self.done = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.done {
            let _ = std::fs::remove_dir_all(&self.tmp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_and_abort() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("run");
        let s = Staging::new(&target, false).unwrap();
        s.write("a.json", b"{}").unwrap();
        assert!(!target.exists());
        s.commit().unwrap();
        assert!(target.join("a.json").exists());

        assert!(Staging::new(&target, false).is_err());
        let s = Staging::new(&target, true).unwrap();
        s.write("b.json", b"{}").unwrap();
        drop(s);
        assert!(target.join("a.json").exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);

        let s = Staging::new(&target, true).unwrap();
        s.write("c.json", b"{}").unwrap();
        s.commit().unwrap();
        assert!(!target.join("a.json").exists() && target.join("c.json").exists());
    }

    #[test]
    fn empty_existing_directory_is_reused() {
        let dir = tempfile::tempdir().unwrap();
        Staging::new(dir.path(), false).unwrap().commit().unwrap();
        assert!(dir.path().is_dir());
    }
}
