//! Run manifests: every CLI invocation records enough to rerun bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// Flag name → value, exactly as resolved for the run.
    pub args: BTreeMap<String, String>,
    /// Full resolved configuration, embedded for self-containment.
    pub config_toml: String,
    pub config_sha256: String,
    pub created_unix_s: u64,
}

impl RunManifest {
    pub fn new(subcommand: &str, args: BTreeMap<String, String>, config_toml: String) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(config_toml.as_bytes());
        let config_sha256 = hex::encode(hasher.finalize());
        Self {
            tool: "settler".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            args,
            config_toml,
            config_sha256,
            created_unix_s: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| Error::Numeric(e.to_string()))?;
        super::write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        let mut hasher = Sha256::new();
        hasher.update(manifest.config_toml.as_bytes());
        let digest = hex::encode(hasher.finalize());
        if digest != manifest.config_sha256 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 0,
                message: "embedded config does not match its recorded hash".into(),
            });
        }
        Ok(manifest)
    }
}

/// Reconstructs a CLI argument vector from a manifest, overriding output
/// locations with the given directory. The embedded config is materialized
/// next to the outputs so the rerun resolves identically.
pub fn replay_args(manifest: &RunManifest, out_dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(out_dir)?;
    let config_path = out_dir.join("replayed-config.toml");
    super::write_atomic(&config_path, manifest.config_toml.as_bytes())?;
    let mut argv = vec![manifest.subcommand.clone()];
    for (key, value) in &manifest.args {
        if key == "config" {
            continue;
        }
        let value = if key == "out" || key == "out-dir" {
            out_dir.display().to_string()
        } else {
            value.clone()
        };
        argv.push(format!("--{key}"));
        argv.push(value);
    }
    argv.push("--config".to_string());
    argv.push(config_path.display().to_string());
    Ok(argv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrips_and_checks_hash() {
        let mut args = BTreeMap::new();
        args.insert("seed".to_string(), "42".to_string());
        args.insert("out".to_string(), "/tmp/x".to_string());
        let m = RunManifest::new("generate-data", args, "[geometry]\nlength_l = 1.0\n".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(m, back);

        let mut tampered: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        tampered["config_toml"] = serde_json::Value::String("[geometry]".into());
        std::fs::write(&path, serde_json::to_string(&tampered).unwrap()).unwrap();
        assert!(RunManifest::load(&path).is_err());
    }
}
