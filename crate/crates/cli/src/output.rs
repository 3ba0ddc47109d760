//! Output directory, CSV helpers and the run manifest.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Lowercase hex SHA-256 of a git-style blob header followed by `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Formats a float with 17 significant digits.
pub fn f(v: f64) -> String {
    format!("{v:.16e}")
}

/// Collects the files written by one command.
pub struct OutDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    /// Writes `name` through `body`; library errors keep their category.
    pub fn write(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
    ) -> Result<(), CliError> {
        let path = self.root.join(name);
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        body(&mut w).map_err(|e| e.at(&path))?;
        w.flush().map_err(|e| CliError::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Writes `manifest.json` listing the config hash and every output.
    pub fn finish(self, command: &str, seed: u64, config: &[u8]) -> Result<(), CliError> {
        let mut outputs = Vec::new();
        for name in &self.files {
            let path = self.root.join(name);
            let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            outputs.push(json!({ "file": name, "bytes": bytes.len(), "sha256": content_hash(&bytes) }));
        }
        let manifest = json!({
            "command": command,
            "schema": crate::config::SCHEMA,
            "seed": seed,
            "config_sha256": content_hash(config),
            "version": env!("CARGO_PKG_VERSION"),
            "outputs": outputs,
        });
        let path = self.root.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }
}

/// Wraps an IO failure inside a CSV body.
pub fn w<T>(r: std::io::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Io { path: PathBuf::new(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn git_blob_hash() {
        // sha256 over git's `blob <len>\0` framing, computed externally
        assert_eq!(content_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
        assert_eq!(content_hash(b"hello\n"), "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4");
        assert_ne!(content_hash(b"a"), content_hash(b"b"));
    }

    #[test]
    fn round_trip_digits() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23] {
            assert_eq!(f(v).parse::<f64>().unwrap(), v);
        }
    }
}
