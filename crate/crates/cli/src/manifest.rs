//! Run directories: a manifest written before any work, atomic output files
//! and their digests.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

/// A request the user can fix by changing flags.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Every setting of the run, defaults included.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub git_describe: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    /// sha256 of each input file.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of each file the run wrote.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub struct RunDir {
    pub path: PathBuf,
    pub manifest: RunManifest,
}

impl RunDir {
    /// Prepares `path` and writes the manifest. A non-empty existing
    /// directory is refused unless `force` is set.
    pub fn create(
        path: &Path,
        force: bool,
        command: &str,
        config: serde_json::Value,
        seed: Option<u64>,
        inputs: &[PathBuf],
    ) -> Result<Self> {
        if path.exists() {
            let occupied =
                std::fs::read_dir(path).with_context(|| format!("reading {}", path.display()))?.next().is_some();
            if occupied && !force {
                return Err(UsageError(format!(
                    "{} exists and is not empty; pass --force to reuse it",
                    path.display()
                ))
                .into());
            }
        }
        std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        let mut digests = BTreeMap::new();
        for p in inputs {
            digests.insert(p.display().to_string(), digest_file(p)?);
        }
        let manifest = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seed,
            git_describe: git_describe(),
            started_at: now(),
            finished_at: None,
            inputs: digests,
            outputs: BTreeMap::new(),
        };
        let run = RunDir { path: path.to_path_buf(), manifest };
        run.write_manifest()?;
        Ok(run)
    }

    fn write_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        write_atomic(&self.path.join("manifest.json"), text.as_bytes())
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.file(name);
        write_atomic(&path, contents.as_ref())?;
        self.manifest.outputs.insert(name.to_string(), sha256_hex(contents.as_ref()));
        Ok(path)
    }

    /// Records a file written by other means.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let d = digest_file(&self.file(name))?;
        self.manifest.outputs.insert(name.to_string(), d);
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.manifest.finished_at = Some(now());
        self.write_manifest()?;
        Ok(self.path)
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let p = dir.join("manifest.json");
    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    Ok(serde_json::from_str(&text)?)
}
