//! Run manifests: config echo, seed and content digests of every input and
//! output, enough to rerun a command and check it bit for bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::sweep::run_lab;
use super::LabConfig;
use crate::error::{Error, Result};
use crate::io::{sha256_file, write_file};
use crate::tensor::RNG_ALGORITHM;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub rng: String,
    pub seed: Option<u64>,
    /// The command's full settings, as run.
    pub params: serde_json::Value,
    /// Input path to sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output path, relative to the output directory, to sha256.
    pub outputs: BTreeMap<String, String>,
}

/// Output digests of a replay compared with the original run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayReport {
    pub matched: usize,
    pub mismatched: Vec<String>,
    pub missing: Vec<String>,
    pub extra: Vec<String>,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.mismatched.is_empty() && self.missing.is_empty() && self.extra.is_empty()
    }
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            walk(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("walk stays under root").to_path_buf());
        }
    }
    Ok(())
}

fn rel_key(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

impl Manifest {
    pub fn new(command: &str, params: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            rng: RNG_ALGORITHM.to_string(),
            seed,
            params: serde_json::to_value(params).map_err(|e| Error::Lab(e.to_string()))?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Digests every file under `dir` except the manifest itself.
    pub fn record_outputs(&mut self, dir: &Path) -> Result<()> {
        let mut files = Vec::new();
        walk(dir, dir, &mut files)?;
        self.outputs.clear();
        for f in files {
            let key = rel_key(&f);
            if key == MANIFEST_FILE {
                continue;
            }
            self.outputs.insert(key, sha256_file(&dir.join(&f))?);
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self).map_err(|e| Error::Lab(e.to_string()))?;
        json.push(b'\n');
        write_file(&dir.join(MANIFEST_FILE), json)
    }

    /// Reads a manifest file, or `manifest.json` inside a directory.
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&text).map_err(|source| Error::Json { path, line: 1, source })
    }

    pub fn params<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.params.clone()).map_err(|e| Error::Lab(format!("manifest params: {e}")))
    }

    /// Fails if any input is missing or its content changed.
    pub fn check_inputs(&self) -> Result<()> {
        for (path, digest) in &self.inputs {
            let now = sha256_file(Path::new(path))?;
            if &now != digest {
                return Err(Error::Lab(format!("input {path} changed since the run (sha256 {now}, was {digest})")));
            }
        }
        Ok(())
    }

    pub fn compare_outputs(&self, replay: &Manifest) -> ReplayReport {
        let mut r = ReplayReport::default();
        for (k, d) in &self.outputs {
            match replay.outputs.get(k) {
                Some(x) if x == d => r.matched += 1,
                Some(_) => r.mismatched.push(k.clone()),
                None => r.missing.push(k.clone()),
            }
        }
        r.extra = replay.outputs.keys().filter(|k| !self.outputs.contains_key(*k)).cloned().collect();
        r
    }
}

/// Reruns a tune/sweep manifest into `out` and compares output digests.
pub fn replay_lab(manifest: &Path, out: &Path) -> Result<ReplayReport> {
    let original = Manifest::load(manifest)?;
    if original.command != "lab" {
        return Err(Error::Lab(format!("`{}` manifests are replayed by the command line tool", original.command)));
    }
    original.check_inputs()?;
    let cfg: LabConfig = original.params()?;
    run_lab(&cfg, out, 1)?;
    Ok(original.compare_outputs(&Manifest::load(out)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outputs_digest_and_compare() {
        let dir = tempfile::tempdir().unwrap();
        write_file(&dir.path().join("a.csv"), "x\n").unwrap();
        write_file(&dir.path().join("sub/b.bin"), [1u8, 2]).unwrap();
        let mut m = Manifest::new("t", &serde_json::json!({"k": 1}), Some(7)).unwrap();
        m.record_outputs(dir.path()).unwrap();
        m.write(dir.path()).unwrap();
        let back = Manifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.outputs.keys().collect::<Vec<_>>(), ["a.csv", "sub/b.bin"]);
        assert!(m.compare_outputs(&back).identical());
        let mut changed = back.clone();
        changed.outputs.insert("a.csv".into(), "0".into());
        changed.outputs.insert("c".into(), "0".into());
        let r = m.compare_outputs(&changed);
        assert_eq!((r.matched, r.mismatched.len(), r.extra.len()), (1, 1, 1));
    }
}
