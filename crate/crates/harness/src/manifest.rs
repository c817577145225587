//! JSON manifests recording which spec and seed produced a set of files.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};
use crate::spec::{hex, ExperimentSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub scenario: String,
    pub spec_hash: String,
    pub seed: u64,
    pub files: Vec<FileEntry>,
}

pub fn file_sha256(path: &Path) -> Result<(u64, String)> {
    let mut reader = BufReader::new(File::open(path).map_err(HarnessError::io(path))?);
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = reader.read(&mut buf).map_err(HarnessError::io(path))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    Ok((total, hex(&hasher.finalize())))
}

impl Manifest {
    pub fn new(command: &str, spec: &ExperimentSpec, seed: u64) -> Self {
        Self {
            tool: "irs-sim".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            scenario: spec.scenario.clone(),
            spec_hash: spec.hash(),
            seed,
            files: Vec::new(),
        }
    }

    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }

    /// Records a file below `dir`.
    pub fn add(&mut self, dir: &Path, path: &Path) -> Result<()> {
        let (bytes, sha256) = file_sha256(path)?;
        let rel = path.strip_prefix(dir).unwrap_or(path);
        self.files.push(FileEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            bytes,
            sha256,
        });
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(Self::file_name(&self.command));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(HarnessError::io(&path))?;
        Ok(path)
    }

    pub fn read(dir: &Path, command: &str) -> Result<Self> {
        let path = dir.join(Self::file_name(command));
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => HarnessError::NotFound {
                what: "manifest (run the earlier stages first)",
                path: path.clone(),
            },
            _ => HarnessError::io(&path)(e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Fails unless the manifest was produced by this spec and seed.
    pub fn check(&self, spec: &ExperimentSpec, seed: u64) -> Result<()> {
        let hash = spec.hash();
        if self.spec_hash != hash {
            return Err(HarnessError::Manifest(format!(
                "`{}` output was produced by spec {}, current spec is {}",
                self.command, self.spec_hash, hash
            )));
        }
        if self.seed != seed {
            return Err(HarnessError::Manifest(format!(
                "`{}` output was produced with seed {}, not {seed}",
                self.command, self.seed
            )));
        }
        Ok(())
    }

    /// Re-hashes every listed file.
    pub fn verify_files(&self, dir: &Path) -> Result<()> {
        for entry in &self.files {
            let path = dir.join(&entry.path);
            if !path.exists() {
                return Err(HarnessError::NotFound {
                    what: "file listed in manifest",
                    path,
                });
            }
            let (bytes, sha) = file_sha256(&path)?;
            if bytes != entry.bytes || sha != entry.sha256 {
                return Err(HarnessError::Manifest(format!("{} changed since `{}` wrote it", entry.path, self.command)));
            }
        }
        Ok(())
    }

    pub fn has(&self, rel: &str) -> bool {
        self.files.iter().any(|f| f.path == rel)
    }
}
