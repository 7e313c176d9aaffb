//! Children's Book Test plain-text layout.
//!
//! A passage is 20 numbered context lines (`1 text` … `20 text`) followed by
//! `21 cloze\tanswer\t\tcand1|cand2|…`, where the cloze sentence marks the
//! removed word with `XXXXX`. Passages are separated by blank lines.
//! Context lines are concatenated into one document; tokens are split on
//! whitespace as distributed.

use std::fs;
use std::path::Path;

use super::{example_from_tokens, Dataset};
use crate::error::{Error, Result};
use crate::support::Example;
use crate::vocab::{self, Vocab};

pub const CLOZE_MARK: &str = "XXXXX";
const CONTEXT_LINES: usize = 20;

fn parse_err(passage: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        location: format!("passage {passage}"),
        message: message.into(),
    }
}

fn strip_number(line: &str, expected: usize, passage: usize) -> Result<&str> {
    let (num, rest) = line.split_once(' ').unwrap_or((line, ""));
    match num.parse::<usize>() {
        Ok(n) if n == expected => Ok(rest),
        _ => Err(parse_err(passage, format!("expected line {expected}, found `{line}`"))),
    }
}

fn parse_passage(lines: &[&str], passage: usize, vocab: &mut Vocab) -> Result<Example> {
    if lines.len() != CONTEXT_LINES + 1 {
        return Err(parse_err(
            passage,
            format!("expected {} lines, found {}", CONTEXT_LINES + 1, lines.len()),
        ));
    }
    let mut document = Vec::new();
    for (i, line) in lines[..CONTEXT_LINES].iter().enumerate() {
        let text = strip_number(line, i + 1, passage)?;
        document.extend(text.split_whitespace().map(String::from));
    }
    let last = strip_number(lines[CONTEXT_LINES], CONTEXT_LINES + 1, passage)?;
    let fields: Vec<&str> = last.split('\t').collect();
    let field = |i: usize, name: &str| -> Result<&str> {
        match fields.get(i).map(|f| f.trim()) {
            Some(f) if !f.is_empty() => Ok(f),
            _ => Err(Error::Data(format!("passage {passage}: missing {name} field"))),
        }
    };
    let cloze = field(0, "cloze")?;
    let answer = field(1, "answer")?;
    let candidates: Vec<String> = field(3, "candidates")?
        .split('|')
        .filter(|c| !c.is_empty())
        .map(String::from)
        .collect();
    let query: Vec<String> = cloze
        .split_whitespace()
        .map(|t| if t == CLOZE_MARK { vocab::BLANK_TOKEN.to_string() } else { t.to_string() })
        .collect();
    example_from_tokens(vocab, &document, &query, &candidates, answer).map_err(|e| match e {
        Error::EmptyCandidates => Error::Data(format!("passage {passage}: empty candidate list")),
        Error::Data(m) => Error::Data(format!("passage {passage}: {m}")),
        other => other,
    })
}

/// Parses passages from text. Passage indices in errors are 0-based.
pub fn parse_cbt(text: &str, vocab: &mut Vocab) -> Result<Vec<Example>> {
    let mut examples = Vec::new();
    let mut block: Vec<&str> = Vec::new();
    let mut flush = |block: &mut Vec<&str>, vocab: &mut Vocab| -> Result<()> {
        if !block.is_empty() {
            examples.push(parse_passage(block, examples.len(), vocab)?);
            block.clear();
        }
        Ok(())
    };
    for line in text.lines() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut block, vocab)?;
        } else {
            block.push(line);
        }
    }
    flush(&mut block, vocab)?;
    Ok(examples)
}

pub fn load_cbt(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut vocab = Vocab::new();
    load_cbt_with_vocab(path, &mut vocab)
}

pub fn load_cbt_with_vocab(path: impl AsRef<Path>, vocab: &mut Vocab) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let examples = parse_cbt(&text, vocab)?;
    if examples.is_empty() {
        log::warn!("{}: no passages found", path.display());
    }
    Ok(Dataset {
        split: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        vocab: vocab.clone(),
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn passage(answer: &str) -> String {
        let mut s = String::new();
        for i in 1..=20 {
            s.push_str(&format!("{i} line {i} mentions Tom and Ann .\n"));
        }
        s.push_str(&format!("21 Then XXXXX went home .\t{answer}\t\tTom|Ann|home\n"));
        s
    }

    #[test]
    fn parses_layout() {
        let ex = parse_cbt(&passage("Tom"), &mut Vocab::new()).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].document.len(), 20 * 7);
        assert_eq!(ex[0].query.placeholder, Some(1));
        assert_eq!(ex[0].candidates.len(), 3);
    }

    #[test]
    fn errors_carry_passage_index() {
        let text = format!("{}\n{}", passage("Tom"), passage("Bob"));
        let err = parse_cbt(&text, &mut Vocab::new()).unwrap_err();
        assert!(err.to_string().contains("passage 1"), "{err}");

        let truncated: String = passage("Tom").lines().skip(1).collect::<Vec<_>>().join("\n");
        assert!(matches!(parse_cbt(&truncated, &mut Vocab::new()), Err(Error::Parse { .. })));

        let no_cands = passage("Tom").replace("\t\tTom|Ann|home", "");
        assert!(matches!(parse_cbt(&no_cands, &mut Vocab::new()), Err(Error::Data(_))));
    }

    #[test]
    fn empty_text_is_empty() {
        assert!(parse_cbt("", &mut Vocab::new()).unwrap().is_empty());
    }
}
