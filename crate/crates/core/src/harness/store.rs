//! On-disk artifact store: one directory per stage plus a `MANIFEST` listing
//! the stage's cache key and the sha256 of every file it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::HarnessError;

pub const MANIFEST: &str = "MANIFEST";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub key: String,
    /// `(file name, sha256)` in write order.
    pub files: Vec<(String, String)>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("key {}\n", self.key);
        for (name, sum) in &self.files {
            out.push_str(&format!("file {sum} {name}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        let key = lines
            .next()
            .and_then(|l| l.strip_prefix("key "))
            .ok_or("manifest lacks a key line")?
            .to_string();
        let mut files = Vec::new();
        for line in lines {
            let rest = line.strip_prefix("file ").ok_or_else(|| format!("bad manifest line {line:?}"))?;
            let (sum, name) = rest.split_once(' ').ok_or_else(|| format!("bad manifest line {line:?}"))?;
            if sum.len() != 64 || name.is_empty() || name.contains("..") {
                return Err(format!("bad manifest line {line:?}"));
            }
            files.push((name.to_string(), sum.to_string()));
        }
        Ok(Self { key, files })
    }

    /// Identity of the stage's output, fed into downstream cache keys.
    pub fn checksum(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

/// Cache key of a stage: its name, its config subtree and the checksums of
/// the stages it reads.
pub fn stage_key(stage: &str, config_subtree: &str, upstream: &[&Manifest]) -> String {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0]);
    h.update(config_subtree.as_bytes());
    for m in upstream {
        h.update([0]);
        h.update(m.checksum().as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone)]
pub struct ArtifactStore {
    root: PathBuf,
}

impl ArtifactStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    /// Stages with a manifest, sorted by name.
    pub fn stages(&self) -> Vec<String> {
        let Ok(entries) = fs::read_dir(&self.root) else {
            return Vec::new();
        };
        let mut out: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(MANIFEST).is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        out.sort();
        out
    }

    /// Loads a manifest and re-hashes every file it lists.
    pub fn verify(&self, stage: &str) -> Result<Manifest, HarnessError> {
        let dir = self.stage_dir(stage);
        let missing = |detail: String| HarnessError::MissingArtifact {
            stage: stage.to_string(),
            detail,
        };
        let text = fs::read_to_string(dir.join(MANIFEST)).map_err(|_| missing(format!("no manifest in {}", dir.display())))?;
        let manifest = Manifest::parse(&text).map_err(missing)?;
        for (name, sum) in &manifest.files {
            let bytes = fs::read(dir.join(name)).map_err(|_| missing(format!("{name} is missing")))?;
            if sha256_hex(&bytes) != *sum {
                return Err(missing(format!("{name} fails its checksum")));
            }
        }
        Ok(manifest)
    }

    /// A verified manifest whose key matches, or `None` if the stage must run.
    pub fn cached(&self, stage: &str, key: &str) -> Option<Manifest> {
        self.verify(stage).ok().filter(|m| m.key == key)
    }

    /// Replaces the stage directory with `files`; the manifest is written last
    /// so an interrupted stage never looks complete.
    pub fn commit(&self, stage: &str, key: &str, files: &[(String, Vec<u8>)]) -> Result<Manifest, HarnessError> {
        let dir = self.stage_dir(stage);
        let io = |e: std::io::Error| HarnessError::Stage {
            stage: stage.to_string(),
            message: format!("writing {}: {e}", dir.display()),
            telemetry: None,
        };
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io)?;
        }
        fs::create_dir_all(&dir).map_err(io)?;
        let mut manifest = Manifest {
            key: key.to_string(),
            files: Vec::with_capacity(files.len()),
        };
        for (name, bytes) in files {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io)?;
            }
            fs::write(&path, bytes).map_err(io)?;
            manifest.files.push((name.clone(), sha256_hex(bytes)));
        }
        fs::write(dir.join(MANIFEST), manifest.to_text()).map_err(io)?;
        Ok(manifest)
    }

    /// Reads one file of a stage, checking it against `manifest`.
    pub fn read(&self, stage: &str, manifest: &Manifest, name: &str) -> Result<Vec<u8>, HarnessError> {
        let missing = |detail: String| HarnessError::MissingArtifact {
            stage: stage.to_string(),
            detail,
        };
        let sum = manifest
            .files
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| missing(format!("{name} is not part of the stage")))?;
        let bytes = fs::read(self.stage_dir(stage).join(name)).map_err(|_| missing(format!("{name} is missing")))?;
        if sha256_hex(&bytes) != *sum {
            return Err(missing(format!("{name} fails its checksum")));
        }
        Ok(bytes)
    }

    pub fn read_text(&self, stage: &str, manifest: &Manifest, name: &str) -> Result<String, HarnessError> {
        String::from_utf8(self.read(stage, manifest, name)?).map_err(|_| HarnessError::MissingArtifact {
            stage: stage.to_string(),
            detail: format!("{name} is not UTF-8"),
        })
    }

    /// Records a stage failure next to the stage's artifacts.
    pub fn write_failure(&self, stage: &str, message: &str) -> Option<PathBuf> {
        let dir = self.stage_dir(stage);
        fs::create_dir_all(&dir).ok()?;
        let path = dir.join("error.txt");
        fs::write(&path, format!("{message}\n")).ok()?;
        Some(path)
    }
}
