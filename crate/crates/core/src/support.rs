//! Spans of interest and the query-answer memory built from them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{self, Document, EncoderStates, Mode, Span};
use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::vocab;

/// One cloze question with its context document and candidate answers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub document: Document,
    pub query: Document,
    pub candidates: Vec<usize>,
    pub gold: usize,
}

impl Example {
    pub fn new(document: Document, query: Document, candidates: Vec<usize>, gold: usize) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        if !candidates.contains(&gold) {
            return Err(Error::Data(format!("gold symbol {gold} is not a candidate")));
        }
        if query.placeholder.is_none() {
            return Err(Error::Data("query has no placeholder".into()));
        }
        if document.is_empty() {
            return Err(Error::Data("empty document".into()));
        }
        Ok(Self {
            document,
            query,
            candidates,
            gold,
        })
    }

    /// Position of the gold symbol within `candidates`.
    pub fn gold_index(&self) -> usize {
        self.candidates
            .iter()
            .position(|&c| c == self.gold)
            .expect("validated on construction")
    }

    /// Document, separator and query as one encoder input.
    pub fn encoder_input(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.document.len() + 1 + self.query.len());
        ids.extend_from_slice(&self.document.symbols);
        ids.push(vocab::SEP);
        ids.extend_from_slice(&self.query.symbols);
        ids
    }

    /// The query's own span within the encoder input (1-based).
    pub fn query_span(&self) -> Span {
        let p = self.query.placeholder.expect("validated on construction");
        Span::at(self.document.len() + 1 + p + 1)
    }

    /// Largest symbol id used anywhere in the example.
    pub fn max_symbol(&self) -> usize {
        self.document
            .symbols
            .iter()
            .chain(&self.query.symbols)
            .chain(&self.candidates)
            .copied()
            .max()
            .unwrap_or(0)
    }
}

/// One single-token span per document position holding a candidate, in
/// document order.
pub fn extract_sois(doc: &Document, candidates: &[usize]) -> Vec<Span> {
    doc.symbols
        .iter()
        .enumerate()
        .filter(|(_, s)| candidates.contains(s))
        .map(|(l, _)| Span::at(l + 1))
        .collect()
}

#[derive(Clone, Debug)]
pub struct SupportPair {
    pub span: Span,
    pub answer_symbol: usize,
    pub z: Var,
    pub y_i: Var,
    pub y_o: Var,
}

/// The model's memory for one example.
#[derive(Clone, Debug)]
pub struct SupportSet {
    pub pairs: Vec<SupportPair>,
    pub candidates: Vec<usize>,
    /// Encoded actual query, `q₀`.
    pub query_z: Var,
}

impl SupportSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn spans(&self) -> Vec<Span> {
        self.pairs.iter().map(|p| p.span).collect()
    }
}

/// Forms a `(z, y)` pair per span from one shared encoding pass.
pub fn build_support(
    tape: &mut Tape<'_>,
    states: &EncoderStates,
    doc: &Document,
    spans: &[Span],
    query_span: Span,
    candidates: &[usize],
    params: &BoundParams,
) -> Result<SupportSet> {
    let mut pairs = Vec::with_capacity(spans.len());
    for &span in spans {
        if span.end > doc.len() {
            return Err(Error::Index {
                what: "support span",
                index: span.end,
                bound: doc.len(),
            });
        }
        let answer_symbol = doc.symbols[span.start - 1];
        let z = encoder::encode_span_query(tape, states, span, params.w_q)?;
        let (y_i, y_o) =
            encoder::embed_answer(tape, answer_symbol, params.e_i, params.e_o, params.dims.vocab)?;
        pairs.push(SupportPair {
            span,
            answer_symbol,
            z,
            y_i,
            y_o,
        });
    }
    let query_z = encoder::encode_span_query(tape, states, query_span, params.w_q)?;
    Ok(SupportSet {
        pairs,
        candidates: candidates.to_vec(),
        query_z,
    })
}

/// Embeds and encodes `example`, then materialises its support set.
pub fn encode_example(
    tape: &mut Tape<'_>,
    params: &BoundParams,
    example: &Example,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(EncoderStates, SupportSet)> {
    let ids = example.encoder_input();
    let embedded = encoder::embed_sequence(tape, params.e_i, &ids, mode, rng)?;
    let states = encoder::bigru_encode(tape, embedded, &params.gru_fwd, &params.gru_bwd)?;
    let spans = extract_sois(&example.document, &example.candidates);
    let support = build_support(
        tape,
        &states,
        &example.document,
        &spans,
        example.query_span(),
        &example.candidates,
        params,
    )?;
    Ok((states, support))
}
