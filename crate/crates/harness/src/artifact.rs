//! Hash-sealed JSON records marking completed work on disk.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a value's canonical JSON encoding.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("records serialise"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sealed<T> {
    pub hash: String,
    pub body: T,
}

impl<T: Serialize + DeserializeOwned> Sealed<T> {
    pub fn new(body: T) -> Self {
        Self { hash: content_hash(&body), body }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        // write-then-rename so a crash never leaves a half record behind
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// The record at `path` if it exists, parses and its hash verifies.
    pub fn read_valid(path: &Path) -> Option<Self> {
        let bytes = std::fs::read(path).ok()?;
        let sealed: Self = serde_json::from_slice(&bytes).ok()?;
        (content_hash(&sealed.body) == sealed.hash).then_some(sealed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tampered_records_are_not_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.json");
        let s = Sealed::new(vec![1.5f64, 2.0]);
        s.write(&path).unwrap();
        assert_eq!(Sealed::<Vec<f64>>::read_valid(&path), Some(s));
        let text = std::fs::read_to_string(&path).unwrap().replace("1.5", "1.25");
        std::fs::write(&path, text).unwrap();
        assert_eq!(Sealed::<Vec<f64>>::read_valid(&path), None);
        assert_eq!(Sealed::<Vec<f64>>::read_valid(&dir.path().join("missing.json")), None);
    }
}
