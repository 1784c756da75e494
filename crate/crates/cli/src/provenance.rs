//! Per-stage provenance records: which files went in, which came out, and
//! the hashes of the config sections the stage depends on.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::exit::Failure;

pub const TOOL: &str = concat!("mdclosure ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    Extract,
    Train,
    Predict,
    Stats,
    Verify,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Extract => "extract",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Stats => "stats",
            Stage::Verify => "verify",
        }
    }

    /// Config sections whose change invalidates this stage's output.
    pub fn sections(self) -> &'static [&'static str] {
        match self {
            Stage::Simulate | Stage::Extract => &["system", "data"],
            Stage::Train => &["system", "data", "closure"],
            Stage::Predict => &["system", "data", "closure", "prediction"],
            Stage::Stats => &["system", "data", "closure", "prediction", "stats"],
            Stage::Verify => &["system", "data", "closure", "verify"],
        }
    }

    pub fn record_path(self, out: &Path) -> PathBuf {
        out.join(format!("{}.provenance.json", self.name()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub stage: String,
    pub tool: String,
    pub config_name: String,
    pub config_sha256: String,
    pub sections: BTreeMap<String, String>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn section_hashes(cfg: &ExperimentConfig, names: &[&str]) -> anyhow::Result<BTreeMap<String, String>> {
    let v = serde_json::to_value(cfg)?;
    names
        .iter()
        .map(|n| {
            let part = v.get(*n).cloned().unwrap_or(serde_json::Value::Null);
            Ok((n.to_string(), sha256_hex(&serde_json::to_vec(&part)?)))
        })
        .collect()
}

pub fn config_hash(cfg: &ExperimentConfig) -> anyhow::Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(cfg)?))
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

/// Hash `files` (absolute or run-relative) into records.
pub fn hash_all(out: &Path, files: &[PathBuf]) -> anyhow::Result<Vec<FileHash>> {
    files
        .iter()
        .map(|f| {
            let abs = if f.is_absolute() || f.starts_with(out) { f.clone() } else { out.join(f) };
            Ok(FileHash {
                path: rel(out, &abs),
                sha256: hash_file(&abs)?,
            })
        })
        .collect()
}

pub fn write(out: &Path, stage: Stage, cfg: &ExperimentConfig, inputs: Vec<FileHash>, outputs: &[PathBuf]) -> anyhow::Result<Record> {
    let rec = Record {
        stage: stage.name().into(),
        tool: TOOL.into(),
        config_name: cfg.name.clone(),
        config_sha256: config_hash(cfg)?,
        sections: section_hashes(cfg, stage.sections())?,
        inputs,
        outputs: hash_all(out, outputs)?,
    };
    std::fs::write(stage.record_path(out), serde_json::to_vec_pretty(&rec)?)?;
    Ok(rec)
}

/// Load the upstream record, check that the config sections it used are
/// unchanged, and re-hash the named files it produced. Returns their
/// records for the consumer's input list.
pub fn require(out: &Path, upstream: Stage, cfg: &ExperimentConfig, files: &[&str]) -> Result<Vec<FileHash>, Failure> {
    let path = upstream.record_path(out);
    let text = std::fs::read(&path).map_err(|_| {
        Failure::provenance(anyhow!(
            "no {} record in {}; run `{}` first",
            upstream.name(),
            out.display(),
            upstream.name()
        ))
    })?;
    let rec: Record = serde_json::from_slice(&text)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::provenance)?;
    let now = section_hashes(cfg, upstream.sections()).map_err(Failure::config)?;
    for (name, h) in &rec.sections {
        if now.get(name) != Some(h) {
            return Err(Failure::provenance(anyhow!(
                "config section '{name}' changed since `{}` ran; rerun it",
                upstream.name()
            )));
        }
    }
    let mut used = Vec::new();
    for f in files {
        let entry = rec.outputs.iter().find(|o| o.path == *f).ok_or_else(|| {
            Failure::provenance(anyhow!("`{}` record does not list {f}", upstream.name()))
        })?;
        let actual = hash_file(&out.join(f)).map_err(Failure::provenance)?;
        if actual != entry.sha256 {
            return Err(Failure::provenance(anyhow!(
                "{f} does not match the hash recorded by `{}`",
                upstream.name()
            )));
        }
        used.push(entry.clone());
    }
    Ok(used)
}

/// Every output path listed by a record whose path starts with `prefix`.
pub fn listed(out: &Path, stage: Stage, prefix: &str) -> Result<Vec<String>, Failure> {
    let text = std::fs::read(stage.record_path(out)).map_err(Failure::provenance)?;
    let rec: Record = serde_json::from_slice(&text).map_err(Failure::provenance)?;
    Ok(rec.outputs.into_iter().map(|o| o.path).filter(|p| p.starts_with(prefix)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
