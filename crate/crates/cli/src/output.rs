//! Writing artifacts and the checksum manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::run::{Artifact, RunOutput};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: String,
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    let mut b = serde_json::to_vec_pretty(v).map_err(mesoflow::Error::from)?;
    b.push(b'\n');
    Ok(b)
}

/// Writes `config.json`, `summary.json` and every artifact under `dir`, then `manifest.json`.
pub fn write_outputs(run: &RunOutput, cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest, CliError> {
    let mut files = vec![
        Artifact { path: "config.json".into(), bytes: json_bytes(cfg)? },
        Artifact { path: "summary.json".into(), bytes: json_bytes(&run.summary)? },
    ];
    files.extend(run.artifacts.iter().cloned());
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let mut entries = Vec::with_capacity(files.len());
    for f in &files {
        let target = dir.join(&f.path);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&target, &f.bytes)?;
        entries.push(ManifestEntry { path: f.path.clone(), sha256: format!("{:x}", Sha256::digest(&f.bytes)), bytes: f.bytes.len() });
    }
    let manifest = Manifest { model: cfg.model.name().to_string(), files: entries };
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST), json_bytes(&manifest)?)?;
    Ok(manifest)
}
