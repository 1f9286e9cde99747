//! Artifact provenance: config hashes and input digests, embedded in every
//! output's metadata so a result can be traced to the exact run that
//! produced it.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use stereolca::{Error, Result};

/// SHA-256 of a serialized config (compact JSON, struct field order).
pub fn config_hash<C: Serialize>(config: &C) -> String {
    let text = serde_json::to_string(config).expect("configs serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// SHA-256 of a file's bytes.
pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Provenance block for sidecars: the producing config hash plus digests
/// of the named input files.
pub fn provenance<C: Serialize>(
    config: &C,
    inputs: &[(&str, &Path)],
) -> Result<serde_json::Value> {
    let mut input_map = serde_json::Map::new();
    for (name, path) in inputs {
        input_map.insert(
            (*name).to_string(),
            serde_json::json!({
                "path": path.display().to_string(),
                "sha256": sha256_file(path)?,
            }),
        );
    }
    Ok(serde_json::json!({
        "config_hash": config_hash(config),
        "inputs": serde_json::Value::Object(input_map),
    }))
}
