//! Datasets: synthetic multi-hop cloze tasks, the canonical line format and
//! a Children's Book Test adapter.

pub mod canonical;
pub mod cbt;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::encoder::Document;
use crate::error::{Error, Result};
use crate::support::Example;
use crate::vocab::{self, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub split: String,
    pub vocab: Vocab,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Replaces every id with the id of the same token in `target`,
    /// mapping unseen tokens to `@unk`.
    pub fn remap(&self, target: &Vocab) -> Result<Dataset> {
        let map_doc = |d: &Document| -> Result<Document> {
            let ids = d.raw_tokens.iter().map(|t| target.lookup(t)).collect();
            Document::new(ids, d.raw_tokens.clone())
        };
        let examples = self
            .examples
            .iter()
            .map(|ex| {
                let candidates: Vec<usize> =
                    ex.candidates.iter().map(|&c| target.lookup(self.vocab.token(c))).collect();
                let gold = target.lookup(self.vocab.token(ex.gold));
                Example::new(map_doc(&ex.document)?, map_doc(&ex.query)?, candidates, gold)
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            split: self.split.clone(),
            vocab: target.clone(),
            examples,
        })
    }
}

/// Builds an example from raw tokens, interning them in `vocab`.
pub fn example_from_tokens(
    vocab: &mut Vocab,
    document: &[String],
    query: &[String],
    candidates: &[String],
    answer: &str,
) -> Result<Example> {
    let blanks = query.iter().filter(|t| *t == vocab::BLANK_TOKEN).count();
    if blanks != 1 {
        return Err(Error::Data(format!(
            "query must contain exactly one {} token, found {blanks}",
            vocab::BLANK_TOKEN
        )));
    }
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if !candidates.iter().any(|c| c == answer) {
        return Err(Error::Data(format!("answer `{answer}` is not among the candidates")));
    }
    let mut doc = |toks: &[String]| -> Result<Document> {
        let ids = toks.iter().map(|t| vocab.insert(t)).collect();
        Document::new(ids, toks.to_vec())
    };
    let document = doc(document)?;
    let query = doc(query)?;
    let candidates = candidates.iter().map(|c| vocab.insert(c)).collect();
    let gold = vocab.insert(answer);
    Example::new(document, query, candidates, gold)
}
