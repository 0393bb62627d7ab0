use std::collections::BTreeMap;
use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ehr_synth::data::{PATIENTS_FILE, PATIENTS_GZ_FILE, VOCAB_FILE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

/// What ran, with which settings, on which bytes. Rerunning the recorded
/// command with the same seed on inputs with matching digests reproduces
/// the primary outputs byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    /// Fully resolved settings, defaults included.
    pub config: serde_json::Value,
    /// Input path to lowercase hex SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn file_digest(path: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    io::copy(&mut File::open(path)?, &mut hasher)?;
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: impl Serialize) -> Result<Self, Failure> {
        Ok(Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config: serde_json::to_value(config).map_err(|e| Failure::Input(format!("configuration: {e}")))?,
            inputs: BTreeMap::new(),
            started_unix: now(),
            finished_unix: None,
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), Failure> {
        let digest = file_digest(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Digests the vocabulary and patients files of a dataset directory.
    pub fn add_dataset(&mut self, dir: &Path) -> Result<(), Failure> {
        for name in [VOCAB_FILE, PATIENTS_FILE, PATIENTS_GZ_FILE] {
            let p = dir.join(name);
            if p.is_file() {
                self.add_input(&p)?;
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
    }

    /// Stamps the finish time and rewrites the file.
    pub fn finish(&mut self, path: &Path) -> Result<(), Failure> {
        self.finished_unix = Some(now());
        self.write(path)
    }
}

/// `dir/name`, creating `dir` first.
pub fn in_dir(dir: &Path, name: &str) -> Result<PathBuf, Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?;
    Ok(dir.join(name))
}

/// Sibling of `path` named `<stem>.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(
            file_digest(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn round_trips_through_json() {
        let mut m = RunManifest::new("train", 3, serde_json::json!({"iterations": 5})).unwrap();
        m.finished_unix = Some(m.started_unix + 1);
        let back: RunManifest = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn sibling_names() {
        assert_eq!(sibling(Path::new("/a/pre.mtgn"), "loss.csv"), Path::new("/a/pre.loss.csv"));
        assert_eq!(sibling(Path::new("report.json"), "manifest.json"), Path::new("report.manifest.json"));
    }
}
