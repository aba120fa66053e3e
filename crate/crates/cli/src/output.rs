use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never see a half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// One id per line.
pub fn id_list(ids: &[usize]) -> String {
    ids.iter().map(|i| format!("{i}\n")).collect()
}

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Canonical TOML of the effective configuration.
    pub config: String,
    pub complete: bool,
    pub artifacts: Vec<Artifact>,
}

/// Checksums every file under `root` except the manifest, sorted by path.
pub fn collect_artifacts(root: &Path) -> Result<Vec<Artifact>> {
    let mut files = Vec::new();
    walk(root, &mut files)?;
    files.sort();
    files
        .into_iter()
        .filter(|p| p.file_name().is_some_and(|n| n != "manifest.json"))
        .map(|p| {
            let bytes = std::fs::read(&p)?;
            Ok(Artifact {
                path: p
                    .strip_prefix(root)
                    .unwrap_or(&p)
                    .to_string_lossy()
                    .replace('\\', "/"),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            })
        })
        .collect()
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn atomic_write_and_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        write_atomic(&dir.path().join("a/b.txt"), b"hello").unwrap();
        write_atomic(&dir.path().join("manifest.json"), b"{}").unwrap();
        let arts = collect_artifacts(dir.path()).unwrap();
        assert_eq!(arts.len(), 1);
        assert_eq!(arts[0].path, "a/b.txt");
        assert_eq!(arts[0].bytes, 5);
        assert_eq!(id_list(&[3, 1]), "3\n1\n");
    }
}
