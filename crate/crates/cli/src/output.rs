use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::RunConfig;

/// Output directory of one command run.
pub struct OutDir {
    pub dir: PathBuf,
    pub digest: String,
}

impl OutDir {
    /// Creates the directory and writes `resolved_config.json` into it.
    pub fn create(dir: &Path, config: &RunConfig, command: &str) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let digest = config.digest()?;
        let out = Self {
            dir: dir.to_path_buf(),
            digest,
        };
        #[derive(Serialize)]
        struct Resolved<'a> {
            command: &'a str,
            config_sha256: &'a str,
            config: &'a RunConfig,
        }
        out.write_json(
            "resolved_config.json",
            &Resolved {
                command,
                config_sha256: &out.digest,
                config,
            },
        )?;
        Ok(out)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        write_atomic(&path, bytes)?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
