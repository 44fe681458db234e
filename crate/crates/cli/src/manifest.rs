//! Run manifests: resolved configuration, seeds, and artifact hashes,
//! enough to reproduce the run exactly. No timestamps, so repeated runs
//! produce byte-identical manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub struct RunManifest {
    command: String,
    entries: Vec<(String, String)>,
    inputs: Vec<(String, String)>,
    outputs: Vec<(String, String)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Hash of a checkpoint or other directory: the sorted relative paths and
/// their file hashes, hashed together.
fn sha256_dir(path: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in &files {
        hasher.update(rel.as_bytes());
        hasher.update(b"\0");
        hasher.update(sha256_file(&path.join(rel))?.as_bytes());
        hasher.update(b"\n");
    }
    Ok(hex(&hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(
                path.strip_prefix(root)
                    .expect("path under root")
                    .to_string_lossy()
                    .into_owned(),
            );
        }
    }
    Ok(())
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            entries: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let hash = if path.is_dir() { sha256_dir(path)? } else { sha256_file(path)? };
        self.inputs.push((path.display().to_string(), hash));
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let hash = if path.is_dir() { sha256_dir(path)? } else { sha256_file(path)? };
        self.outputs.push((path.display().to_string(), hash));
        Ok(())
    }

    /// Writes `manifest.txt` under the run directory.
    pub fn write(mut self, out_dir: &Path) -> Result<()> {
        self.entries.sort();
        let mut text = String::new();
        let _ = writeln!(text, "command={}", self.command);
        for (k, v) in &self.entries {
            let _ = writeln!(text, "{k}={v}");
        }
        for (p, h) in &self.inputs {
            let _ = writeln!(text, "input={p} sha256={h}");
        }
        for (p, h) in &self.outputs {
            let _ = writeln!(text, "output={p} sha256={h}");
        }
        let path = out_dir.join("manifest.txt");
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
