//! Per-run record of the configuration hash, input hashes and each stage's
//! outputs. Timings live here and nowhere else, so every other artifact of a
//! rerun is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    /// Output path (relative to the work dir) → SHA-256 of its content.
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Every regular file under `path` (or `path` itself), sorted.
pub fn files_under(path: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if path.is_file() {
        out.push(path.to_path_buf());
    } else if let Ok(rd) = fs::read_dir(path) {
        let mut entries: Vec<PathBuf> = rd.flatten().map(|e| e.path()).collect();
        entries.sort();
        for e in entries {
            out.extend(files_under(&e));
        }
    }
    out
}

impl RunManifest {
    pub fn load(work_dir: &Path) -> Result<Self, CliError> {
        let path = work_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    /// Records a finished stage and rewrites the manifest.
    pub fn record(
        cfg: &RunConfig,
        stage: &str,
        outputs: &[PathBuf],
        inputs: &[PathBuf],
        seconds: f64,
    ) -> Result<Self, CliError> {
        let mut m = Self::load(&cfg.work_dir)?;
        m.config_hash = cfg.hash();
        for p in inputs {
            m.inputs.insert(p.display().to_string(), file_hash(p)?);
        }
        let mut rec = StageRecord {
            config_hash: cfg.hash(),
            outputs: BTreeMap::new(),
            seconds,
        };
        for out in outputs {
            for f in files_under(out) {
                let rel = f.strip_prefix(&cfg.work_dir).unwrap_or(&f).display().to_string();
                rec.outputs.insert(rel, file_hash(&f)?);
            }
        }
        m.stages.insert(stage.to_string(), rec);
        fs::create_dir_all(&cfg.work_dir)?;
        let text = serde_json::to_string_pretty(&m).map_err(autornn::Error::from)? + "\n";
        fs::write(cfg.work_dir.join(MANIFEST_FILE), text)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_accumulate_with_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::toy();
        cfg.work_dir = dir.path().to_path_buf();
        let sub = dir.path().join("out");
        fs::create_dir_all(&sub).unwrap();
        fs::write(sub.join("a.txt"), "abc").unwrap();
        RunManifest::record(&cfg, "one", &[sub.clone()], &[], 0.5).unwrap();
        let m = RunManifest::record(&cfg, "two", &[sub.join("a.txt")], &[], 0.1).unwrap();
        assert_eq!(m.stages.len(), 2);
        let h = &m.stages["one"].outputs["out/a.txt"];
        assert_eq!(h, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(RunManifest::load(dir.path()).unwrap(), m);
    }
}
