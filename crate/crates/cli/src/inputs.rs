//! Config files and datasets as the commands see them.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use qann_core::data::{canonical, cbt};
use qann_core::{Dataset, Vocab};
use serde::de::DeserializeOwned;

use crate::error::{input_context, read_input, CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// One JSON record per line (`.jsonl`).
    Canonical,
    /// Children's Book Test plain text (`.txt`).
    Cbt,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Canonical => "jsonl",
            Format::Cbt => "txt",
        }
    }

    /// `.txt` files are CBT, everything else canonical.
    pub fn infer(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("txt") => Format::Cbt,
            _ => Format::Canonical,
        }
    }
}

/// Parses a TOML config, falling back to defaults when no file is given.
pub fn load_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let bytes = read_input(path)?;
    let text = String::from_utf8(bytes).map_err(|e| CliError::ConfigFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    toml::from_str(&text).map_err(|e| CliError::ConfigFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_into(path: &Path, format: Format, vocab: &mut Vocab) -> CliResult<Dataset> {
    let ds = match format {
        Format::Canonical => canonical::load_canonical_with_vocab(path, vocab),
        Format::Cbt => cbt::load_cbt_with_vocab(path, vocab),
    };
    ds.map_err(input_context(path))
}

/// Loads a dataset and re-expresses it in a model's vocabulary.
pub fn load_for_model(path: &Path, format: Option<Format>, vocab: &Vocab) -> CliResult<Dataset> {
    let format = format.unwrap_or_else(|| Format::infer(path));
    let mut own = Vocab::new();
    let ds = load_into(path, format, &mut own)?;
    Ok(ds.remap(vocab)?)
}

pub fn split_path(dir: &Path, split: &str, format: Format) -> PathBuf {
    dir.join(format!("{split}.{}", format.extension()))
}
