//! Provenance manifests written beside every stage output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
    /// Manifest of the stage that produced this input, if any.
    pub manifest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    /// The file this manifest sits beside.
    pub artifact: FileRecord,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<FileRecord>,
    pub scalars: BTreeMap<String, toml::Value>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.toml");
    s.into()
}

pub fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::input(path, &e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn read(path: &Path) -> Result<Manifest, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::input(path, &e))?;
    toml::from_str(&text).map_err(|e| Failure {
        code: crate::failure::EXIT_INPUT,
        kind: "manifest_invalid",
        message: format!("{}: {}", path.display(), e.message()),
    })
}

/// Hash an input and, when a manifest sits beside it, check the hash against
/// the one recorded there.
pub fn check_input(shown: &Path, actual: &Path) -> Result<InputRecord, Failure> {
    let sha = sha256_file(actual)?;
    let mpath = manifest_path(actual);
    let manifest = if mpath.exists() {
        let m = read(&mpath)?;
        if m.artifact.sha256 != sha {
            return Err(Failure::checksum(actual, &m.artifact.sha256, &sha));
        }
        Some(display(&manifest_path(shown)))
    } else {
        None
    };
    Ok(InputRecord {
        path: display(shown),
        sha256: sha,
        manifest,
    })
}

pub fn display(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

/// Collects the inputs, outputs and key scalars of one stage run.
pub struct Recorder {
    pub stage: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<InputRecord>,
    /// `(shown path, actual path)` of every output that gets a manifest.
    pub outputs: Vec<(PathBuf, PathBuf)>,
    pub scalars: BTreeMap<String, toml::Value>,
}

impl Recorder {
    pub fn new(stage: &'static str, config_hash: String, seed: u64) -> Self {
        Recorder {
            stage,
            config_hash,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            scalars: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, shown: &Path, actual: &Path) -> Result<(), Failure> {
        self.inputs.push(check_input(shown, actual)?);
        Ok(())
    }

    pub fn output(&mut self, shown: &Path, actual: &Path) {
        self.outputs.push((shown.to_path_buf(), actual.to_path_buf()));
    }

    pub fn scalar(&mut self, key: &str, value: impl Into<toml::Value>) {
        self.scalars.insert(key.to_string(), value.into());
    }

    /// Write one manifest beside every recorded output.
    pub fn finish(self) -> Result<(), Failure> {
        let mut records = Vec::with_capacity(self.outputs.len());
        for (shown, actual) in &self.outputs {
            records.push(FileRecord {
                path: display(shown),
                sha256: sha256_file(actual)?,
            });
        }
        for ((_, actual), record) in self.outputs.iter().zip(&records) {
            let m = Manifest {
                stage: self.stage.to_string(),
                config_hash: self.config_hash.clone(),
                seed: self.seed,
                artifact: record.clone(),
                inputs: self.inputs.clone(),
                outputs: records.clone(),
                scalars: self.scalars.clone(),
            };
            let text = toml::to_string(&m).expect("manifest serializes");
            let mpath = manifest_path(actual);
            std::fs::write(&mpath, text).map_err(|e| Failure::output(&mpath, &e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("a.txt");
        std::fs::write(&out, "hello").unwrap();
        let mut r = Recorder::new("mine", "abc".into(), 7);
        r.output(Path::new("a.txt"), &out);
        r.scalar("f", 300_i64);
        r.finish().unwrap();
        let m = read(&manifest_path(&out)).unwrap();
        assert_eq!(m.stage, "mine");
        assert_eq!(m.scalars["f"], toml::Value::Integer(300));
        assert_eq!(m.artifact.sha256, hex::encode(Sha256::digest(b"hello")));

        let rec = check_input(Path::new("a.txt"), &out).unwrap();
        assert_eq!(rec.manifest.as_deref(), Some("a.txt.manifest.toml"));
        std::fs::write(&out, "tampered").unwrap();
        let e = check_input(Path::new("a.txt"), &out).unwrap_err();
        assert_eq!(e.code, 3);
        assert_eq!(e.kind, "checksum_mismatch");
    }

    #[test]
    fn plain_inputs_have_no_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("raw.txt");
        std::fs::write(&p, "x").unwrap();
        assert!(check_input(&p, &p).unwrap().manifest.is_none());
        assert_eq!(check_input(&dir.path().join("missing"), &dir.path().join("missing")).unwrap_err().code, 3);
    }
}
