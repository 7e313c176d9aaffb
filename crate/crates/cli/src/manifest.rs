//! Run manifests: what was run, on which inputs, producing which outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{read_input, write_output, CliResult};

/// Content hash in the style of a git blob id: SHA-256 over
/// `"blob <len>\0"` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> CliResult<String> {
    Ok(content_hash(&read_input(path)?))
}

#[derive(Debug, Serialize)]
pub struct RunManifest<C: Serialize, M: Serialize> {
    pub command: &'static str,
    pub version: &'static str,
    pub config: C,
    /// File name to content hash.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub metrics: M,
}

impl<C: Serialize, M: Serialize> RunManifest<C, M> {
    pub fn new(command: &'static str, config: C, metrics: M) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            metrics,
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.insert(display_name(path), file_hash(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> CliResult<()> {
        self.outputs.insert(display_name(path), file_hash(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let mut json = serde_json::to_vec_pretty(self).map_err(qann_core::Error::from)?;
        json.push(b'\n');
        write_output(path, &json)
    }
}

fn display_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
