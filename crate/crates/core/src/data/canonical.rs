//! Line-delimited JSON records:
//! `{"document":[…],"query":[…],"candidates":[…],"answer":"…"}`.
//! The query holds exactly one `@blank`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{example_from_tokens, Dataset};
use crate::error::{Error, Result};
use crate::support::Example;
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub document: Vec<String>,
    pub query: Vec<String>,
    pub candidates: Vec<String>,
    pub answer: String,
}

impl Record {
    pub fn from_example(ex: &Example, vocab: &Vocab) -> Record {
        Record {
            document: ex.document.raw_tokens.clone(),
            query: ex.query.raw_tokens.clone(),
            candidates: ex.candidates.iter().map(|&c| vocab.token(c).to_string()).collect(),
            answer: vocab.token(ex.gold).to_string(),
        }
    }
}

/// Parses one record per non-empty line, adding unseen tokens to `vocab`.
pub fn read_records(reader: impl BufRead, source: &str, vocab: &mut Vocab) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{source}:{}", i + 1);
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            location: location.clone(),
            message: e.to_string(),
        })?;
        let ex = example_from_tokens(vocab, &rec.document, &rec.query, &rec.candidates, &rec.answer)
            .map_err(|e| match e {
                Error::EmptyCandidates => Error::Data(format!("{location}: field `candidates` is empty")),
                Error::Data(m) => Error::Data(format!("{location}: {m}")),
                other => other,
            })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_canonical(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut vocab = Vocab::new();
    load_canonical_with_vocab(path, &mut vocab)
}

/// Loads a split into a vocab shared with other splits.
pub fn load_canonical_with_vocab(path: impl AsRef<Path>, vocab: &mut Vocab) -> Result<Dataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let examples = read_records(reader, &path.display().to_string(), vocab)?;
    Ok(Dataset {
        split: split_name(path),
        vocab: vocab.clone(),
        examples,
    })
}

fn split_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn write_records(ds: &Dataset, mut writer: impl Write) -> Result<()> {
    for ex in &ds.examples {
        serde_json::to_writer(&mut writer, &Record::from_example(ex, &ds.vocab))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_canonical(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_records(ds, BufWriter::new(File::create(path)?))
}
