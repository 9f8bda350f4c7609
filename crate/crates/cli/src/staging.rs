//! Output directories are built beside their destination and swapped in only
//! once complete, so a failed command leaves earlier outputs untouched.

use anyhow::{Context, Result};
use std::fs;
use std::path::{Path, PathBuf};

pub struct Staging {
    dir: PathBuf,
    dest: PathBuf,
    done: bool,
}

fn sibling(dest: &Path, tag: &str) -> Result<PathBuf> {
    let name = dest
        .file_name()
        .with_context(|| format!("{} has no final path component", dest.display()))?
        .to_string_lossy()
        .into_owned();
    let parent = dest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    Ok(parent.join(format!(".{name}.{tag}-{}", std::process::id())))
}

impl Staging {
    pub fn new(dest: &Path) -> Result<Self> {
        let dir = sibling(dest, "staging")?;
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir,
            dest: dest.to_path_buf(),
            done: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Replace the destination with the staged directory.
    pub fn commit(mut self) -> Result<PathBuf> {
        let old = sibling(&self.dest, "old")?;
        let had_old = self.dest.exists();
        if had_old {
            fs::rename(&self.dest, &old).with_context(|| format!("moving aside {}", self.dest.display()))?;
        }
        if let Err(e) = fs::rename(&self.dir, &self.dest) {
            if had_old {
                let _ = fs::rename(&old, &self.dest);
            }
            return Err(e).with_context(|| format!("moving output into {}", self.dest.display()));
        }
        self.done = true;
        if had_old {
            fs::remove_dir_all(&old)?;
        }
        Ok(self.dest.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}
