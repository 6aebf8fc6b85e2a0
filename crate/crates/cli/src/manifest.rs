//! Run manifests: the resolved config plus digests of every output file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{usage, CliResult};

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Output path relative to the run directory -> sha256.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> CliResult<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != MANIFEST_NAME) {
            let rel = p.strip_prefix(root).expect("walked under root");
            out.insert(rel.to_string_lossy().replace('\\', "/"), sha256_file(&p)?);
        }
    }
    Ok(())
}

/// Digests of all files under `dir` except the manifest itself.
pub fn digest_outputs(dir: &Path) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    collect(dir, dir, &mut out)?;
    Ok(out)
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> CliResult<()> {
        fs::write(dir.join(MANIFEST_NAME), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path)
            .map_err(|e| usage(format!("cannot read manifest {}: {e}", path.display())))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
