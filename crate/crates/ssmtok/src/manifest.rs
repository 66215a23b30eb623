//! Run manifests: every CLI entry point records the exact configuration,
//! seed, and version needed to reproduce its outputs bit-for-bit.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Result;

/// sha256 hex of a JSON value in canonical (sorted-key) serialization.
pub fn digest_json(value: &serde_json::Value) -> String {
    // serde_json's default map is ordered (BTreeMap), so serialization is
    // canonical for values built through Value.
    let bytes = serde_json::to_vec(value).expect("json serializes");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub config_digest: String,
    pub package_version: String,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, seed: u64, config: serde_json::Value) -> RunManifest {
        let config_digest = digest_json(&config);
        RunManifest {
            command: command.to_string(),
            args,
            seed,
            config,
            config_digest,
            package_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// Write `manifest.json` into the run directory.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

/// Resolve the output root: an explicit flag wins, then the SSMTOK_OUT
/// environment variable, then ./runs.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Ok(env) = std::env::var("SSMTOK_OUT") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("runs")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_stable_across_key_insertion_order() {
        let a = serde_json::json!({"b": 1, "a": {"y": 2, "x": 3}});
        let b = serde_json::json!({"a": {"x": 3, "y": 2}, "b": 1});
        assert_eq!(digest_json(&a), digest_json(&b));
        assert_eq!(digest_json(&a).len(), 64);
    }

    #[test]
    fn manifest_roundtrip_write() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new(
            "synth",
            vec!["--seed".into(), "1".into()],
            1,
            serde_json::json!({"k": 4}),
        );
        let path = m.write(dir.path()).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.contains("config_digest"));
    }
}
