use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let mut f = std::fs::File::open(path).map_err(|_| CliError::MissingArtifact(path.to_path_buf()))?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h)?;
    Ok(format!("{:x}", h.finalize()))
}

/// Writes through a sibling temp file and renames it into place, so a
/// reader never sees a partial artifact.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        write(&mut out)?;
        out.flush()?;
        out.get_ref().sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_atomic_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, |w| w.write_all(bytes))
}

/// One completed stage run. Checksums are keyed by path relative to the
/// stage directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config_hash: String,
    /// Hash of the stage's own config sections and input checksums; a
    /// rerun with the same fingerprint is skipped.
    pub fingerprint: String,
    pub artifacts: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
    pub steps: Option<u64>,
    pub versions: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("study-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("format.dataset".to_string(), study_core::corpus::DATASET_VERSION.to_string()),
        ("format.packed".to_string(), study_core::pipeline::CACHE_VERSION.to_string()),
        ("format.checkpoint".to_string(), study_core::numkernel::CHECKPOINT_VERSION.to_string()),
        ("format.knn".to_string(), study_core::knnrec::INDEX_VERSION.to_string()),
    ])
}

pub fn read_manifests(stage_dir: &Path) -> Result<Vec<RunManifest>, CliError> {
    let path = stage_dir.join(MANIFEST_FILE);
    let Ok(f) = std::fs::File::open(&path) else { return Ok(Vec::new()) };
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::Stage(format!("{}: {e}", path.display())))?);
    }
    Ok(out)
}

pub fn append_manifest(stage_dir: &Path, entry: &RunManifest) -> Result<(), CliError> {
    std::fs::create_dir_all(stage_dir)?;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(stage_dir.join(MANIFEST_FILE))?;
    let line = serde_json::to_string(entry).map_err(|e| CliError::Stage(e.to_string()))?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// The latest run of `stage` if it had this fingerprint and its artifacts
/// are still on disk unchanged.
pub fn up_to_date(stage_dir: &Path, stage: &str, fingerprint: &str) -> Result<Option<RunManifest>, CliError> {
    let Some(last) = read_manifests(stage_dir)?.into_iter().rev().find(|m| m.stage == stage) else {
        return Ok(None);
    };
    if last.fingerprint != fingerprint {
        return Ok(None);
    }
    for (rel, sum) in &last.artifacts {
        match file_sha256(&stage_dir.join(rel)) {
            Ok(s) if &s == sum => {}
            _ => return Ok(None),
        }
    }
    Ok(Some(last))
}
