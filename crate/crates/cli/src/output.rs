//! Output plumbing: everything lands in a temporary location first and is
//! moved into place only once complete.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use predattn::snn::{manifest_path, Checkpoint};
use tempfile::{NamedTempFile, TempDir};

fn parent_of(path: &Path) -> Result<PathBuf> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
    Ok(parent)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = NamedTempFile::new_in(parent_of(path)?)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Checkpoint plus its sidecar manifest, each written atomically.
pub fn write_checkpoint_atomic(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.encode()?)?;
    write_atomic(&manifest_path(path), ckpt.manifest().as_bytes())
}

/// A directory that replaces `target` on [`Staging::commit`] and vanishes
/// if dropped before that.
pub struct Staging {
    dir: TempDir,
    target: PathBuf,
}

impl Staging {
    pub fn new(target: &Path) -> Result<Self> {
        let dir = tempfile::Builder::new()
            .prefix(".staging-")
            .tempdir_in(parent_of(target)?)
            .with_context(|| format!("staging {}", target.display()))?;
        Ok(Self {
            dir,
            target: target.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn write(&self, relative: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.path().join(relative);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn commit(self) -> Result<PathBuf> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target).with_context(|| format!("replacing {}", self.target.display()))?;
        }
        let staged = self.dir.keep();
        fs::rename(&staged, &self.target).with_context(|| format!("promoting {}", self.target.display()))?;
        Ok(self.target)
    }
}

/// Fixed-precision float so reruns compare byte for byte.
pub fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn staging_replaces_target_only_on_commit() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("out");
        fs::create_dir(&target).unwrap();
        fs::write(target.join("old.txt"), "old").unwrap();
        {
            let s = Staging::new(&target).unwrap();
            s.write("new.txt", b"new").unwrap();
        }
        assert!(target.join("old.txt").exists());
        let s = Staging::new(&target).unwrap();
        s.write("sub/new.txt", b"new").unwrap();
        s.commit().unwrap();
        assert!(!target.join("old.txt").exists());
        assert_eq!(fs::read_to_string(target.join("sub/new.txt")).unwrap(), "new");
        assert_eq!(fs::read_dir(root.path()).unwrap().count(), 1);
    }

    #[test]
    fn atomic_write_creates_parents() {
        let root = tempfile::tempdir().unwrap();
        let p = root.path().join("a/b/c.csv");
        write_atomic(&p, b"x,y\n").unwrap();
        write_atomic(&p, b"x,y\n1,2\n").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "x,y\n1,2\n");
    }
}
