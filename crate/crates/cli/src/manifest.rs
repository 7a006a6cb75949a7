use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: PathBuf,
    /// `git hash-object` of the file contents.
    pub git_blob_sha1: String,
}

/// Record of one command execution, written next to its artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub toolkit_version: String,
    pub config_digest: String,
    pub dense_digest: String,
    pub inputs: Vec<InputHash>,
    pub seeds: BTreeMap<String, u64>,
    pub wall_clock_seconds: f64,
    /// Paths relative to the manifest's directory, sorted.
    pub artifacts: Vec<PathBuf>,
    pub config: ExperimentConfig,
}

/// Git blob id: SHA-1 over `"blob <len>\0"` followed by the contents.
pub fn git_blob_hash(path: &Path) -> CliResult<String> {
    let mut file = fs::File::open(path).map_err(|e| CliError::validation(format!("cannot read input {}: {e}", path.display())))?;
    let len = file.metadata()?.len();
    let mut hasher = Sha1::new();
    hasher.update(format!("blob {len}\0").as_bytes());
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn hash_inputs(paths: &[PathBuf]) -> CliResult<Vec<InputHash>> {
    paths
        .iter()
        .map(|p| {
            Ok(InputHash {
                path: p.clone(),
                git_blob_sha1: git_blob_hash(p)?,
            })
        })
        .collect()
}

/// Every regular file under `dir` except the manifest itself, relative and sorted.
pub fn list_artifacts(dir: &Path) -> CliResult<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walk stays under root").to_path_buf();
                if rel != Path::new(MANIFEST_FILE) {
                    out.push(rel);
                }
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

impl ExperimentManifest {
    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        fs::write(Self::path_in(dir), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::validation(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::validation(format!("manifest {}: {e}", path.display())))
    }

    /// Listed artifacts missing from `dir`.
    pub fn missing_artifacts(&self, dir: &Path) -> Vec<PathBuf> {
        self.artifacts.iter().map(|a| dir.join(a)).filter(|p| !p.is_file()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn git_blob_hash_matches_git() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        fs::write(&p, "hello\n").unwrap();
        // `printf 'hello\n' | git hash-object --stdin`
        assert_eq!(git_blob_hash(&p).unwrap(), "ce013625030ba8dba906f756967f9e9ca394464a");
        fs::write(&p, "").unwrap();
        assert_eq!(git_blob_hash(&p).unwrap(), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    }

    #[test]
    fn artifacts_are_listed_recursively_without_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("sub/deep")).unwrap();
        for f in ["b.csv", "sub/deep/x.bin", MANIFEST_FILE] {
            fs::write(dir.path().join(f), "x").unwrap();
        }
        assert_eq!(list_artifacts(dir.path()).unwrap(), vec![PathBuf::from("b.csv"), PathBuf::from("sub/deep/x.bin")]);
    }
}
