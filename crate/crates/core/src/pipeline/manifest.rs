//! Run manifests: a small JSON record written next to every produced artifact
//! so a run can be audited later — which config produced it, from which
//! inputs (by content hash), under which seed, and how long it took.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Hex SHA-256 of a file's bytes.
pub fn content_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hash_bytes(&bytes))
}

/// Hex SHA-256 of a byte slice.
pub fn hash_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// One named input with its content hash.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct InputRef {
    pub name: String,
    pub path: String,
    pub sha256: String,
}

/// The audit record for one pipeline stage.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    /// Which stage produced this artifact ("gen-data", "train-vae", ...).
    pub stage: String,
    /// Master seed the stage ran under.
    pub seed: u64,
    /// Full config echoed as a JSON value, so the manifest is self-contained.
    pub config: serde_json::Value,
    /// Content hashes of every input artifact the stage consumed.
    pub inputs: Vec<InputRef>,
    /// Wall-clock duration of the stage in seconds.
    pub wall_seconds: f64,
}

impl Manifest {
    pub fn new<C: Serialize>(stage: &str, seed: u64, config: &C) -> Result<Self> {
        Ok(Manifest {
            stage: stage.to_string(),
            seed,
            config: serde_json::to_value(config)?,
            inputs: Vec::new(),
            wall_seconds: 0.0,
        })
    }

    pub fn add_input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.push(InputRef {
            name: name.to_string(),
            path: path.display().to_string(),
            sha256: content_hash(path)?,
        });
        Ok(())
    }

    /// Write as pretty JSON, typically to `<artifact>.manifest.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input_matches_the_published_value() {
        // Well-known digest of the empty string.
        assert_eq!(
            hash_bytes(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn sha256_of_abc_matches_the_published_value() {
        assert_eq!(
            hash_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_roundtrips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("input.bin");
        std::fs::write(&input, b"payload").unwrap();

        let mut m = Manifest::new("train-vae", 7, &serde_json::json!({"lr": 1e-3})).unwrap();
        m.add_input("dataset", &input).unwrap();
        m.wall_seconds = 1.25;

        let path = dir.path().join("out.manifest.json");
        m.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(m, back);
        assert_eq!(back.inputs[0].sha256, content_hash(&input).unwrap());
    }
}
