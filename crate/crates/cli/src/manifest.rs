//! Content hashes of everything in a run directory.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub generated_at: String,
    /// Paths relative to the run directory, `/`-separated.
    pub files: BTreeMap<String, FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            walk(root, &path, out)?;
        } else if path != root.join(MANIFEST_FILE) {
            out.push(path);
        }
    }
    Ok(())
}

/// Hashes every file under `run_dir` except the manifest itself.
pub fn build(run_dir: &Path) -> io::Result<Manifest> {
    let mut paths = Vec::new();
    walk(run_dir, run_dir, &mut paths)?;
    let mut files = BTreeMap::new();
    for path in paths {
        let bytes = fs::read(&path)?;
        let rel = path.strip_prefix(run_dir).expect("walked under root");
        let key = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        files.insert(
            key,
            FileEntry {
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            },
        );
    }
    let generated_at = OffsetDateTime::now_utc()
        .format(&Rfc3339)
        .expect("RFC 3339 formats any UTC time");
    Ok(Manifest {
        generated_at,
        files,
    })
}

/// Rebuilds and writes `manifest.json` for `run_dir`.
pub fn write(run_dir: &Path) -> io::Result<Manifest> {
    let manifest = build(run_dir)?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(run_dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(manifest)
}

pub fn read(run_dir: &Path) -> io::Result<Manifest> {
    let text = fs::read_to_string(run_dir.join(MANIFEST_FILE))?;
    serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}
