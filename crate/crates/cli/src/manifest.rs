//! Per-invocation run manifest. Contents depend only on the arguments and
//! the produced files, so identical runs write identical manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use convsplat_core::TrainConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    /// Arguments with the output directory replaced by `<out>`.
    pub args: Vec<String>,
    pub seed: u64,
    pub threads: usize,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    pub summary: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn entry(path: &Path, shown: String) -> std::io::Result<FileEntry> {
    let bytes = std::fs::read(path)?;
    Ok(FileEntry {
        path: shown,
        bytes: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
    })
}

pub fn config_map(cfg: &TrainConfig) -> BTreeMap<String, String> {
    cfg.values().into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// Collects files written during a run.
#[derive(Debug, Default)]
pub struct Recorder {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn input(&mut self, p: impl Into<PathBuf>) {
        self.inputs.push(p.into());
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.outputs.push(p.into());
    }

    pub fn entries(&self, out_dir: &Path) -> std::io::Result<(Vec<FileEntry>, Vec<FileEntry>)> {
        let inputs = self
            .inputs
            .iter()
            .map(|p| {
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                entry(p, name)
            })
            .collect::<std::io::Result<_>>()?;
        let mut outs: Vec<&PathBuf> = self.outputs.iter().collect();
        outs.sort();
        outs.dedup();
        let outputs = outs
            .into_iter()
            .map(|p| {
                let rel = p.strip_prefix(out_dir).unwrap_or(p);
                entry(p, rel.to_string_lossy().replace('\\', "/"))
            })
            .collect::<std::io::Result<_>>()?;
        Ok((inputs, outputs))
    }
}

/// Replaces the value of `--out` (either form) with a placeholder.
pub fn scrub_args(args: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut skip = false;
    for a in args {
        if skip {
            out.push("<out>".into());
            skip = false;
        } else if a == "--out" || a == "-o" {
            out.push(a.clone());
            skip = true;
        } else if a.starts_with("--out=") {
            out.push("--out=<out>".into());
        } else {
            out.push(a.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_dir_is_scrubbed() {
        let a: Vec<String> = ["synth", "--out", "/tmp/x", "--seed", "1", "--out=/y"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(
            scrub_args(&a),
            ["synth", "--out", "<out>", "--seed", "1", "--out=<out>"]
        );
    }
}
