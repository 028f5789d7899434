//! Config hashes that link each artifact to the artifacts it was built from.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// SHA-256 of the compact JSON encoding of `config`. Object keys serialize in sorted order,
/// so equal configs hash equally.
pub fn config_hash(config: &Value) -> String {
    let bytes = serde_json::to_vec(config).expect("JSON values serialize");
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Fails unless `found` equals `expected`, or only logs a warning when `force` is set.
pub fn check_link(what: &str, expected: Option<&str>, found: Option<&str>, force: bool) -> Result<()> {
    if expected == found {
        return Ok(());
    }
    let show = |h: Option<&str>| {
        h.map(|s| s[..s.len().min(12)].to_owned())
            .unwrap_or_else(|| "none".into())
    };
    let message = format!(
        "{what} config hash mismatch: expected {}, found {}",
        show(expected),
        show(found)
    );
    if force {
        log::warn!("{message} (continuing because of --force)");
        Ok(())
    } else {
        bail!(crate::ValidationError(format!("{message}; pass --force to override")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn hash_ignores_key_order() {
        let a = json!({"k": 8, "seed": 1});
        let b: Value = serde_json::from_str(r#"{"seed": 1, "k": 8}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_ne!(config_hash(&a), config_hash(&json!({"k": 9, "seed": 1})));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn link_checks() {
        assert!(check_link("vocab", Some("abc"), Some("abc"), false).is_ok());
        assert!(check_link("vocab", Some("abc"), Some("abd"), false).is_err());
        assert!(check_link("vocab", Some("abc"), None, false).is_err());
        assert!(check_link("vocab", Some("abc"), Some("abd"), true).is_ok());
    }
}
