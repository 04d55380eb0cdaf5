use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub hash: String,
}

/// Record of one invocation: enough to replay it.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub seed: u64,
    pub threads: usize,
    pub config: serde_json::Value,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<PathBuf>,
}

/// Git-style object hash (`blob <len>\0<bytes>`) with SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hash files; directories contribute every regular file, sorted by name.
pub fn hash_inputs(paths: &[&Path]) -> Result<Vec<InputFile>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file())
                .collect();
            files.sort();
            for f in files {
                out.push(hash_file(&f)?);
            }
        } else {
            out.push(hash_file(p)?);
        }
    }
    Ok(out)
}

fn hash_file(p: &Path) -> Result<InputFile> {
    let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(InputFile {
        path: p.to_path_buf(),
        hash: content_hash(&bytes),
    })
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn git_style_hash() {
        // sha256 of "blob 0\0"
        assert_eq!(content_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
        assert_ne!(content_hash(b"a"), content_hash(b"b"));
    }
}
