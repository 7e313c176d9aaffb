//! Input embedding, bi-directional GRU encoding and span-query construction.
//!
//! Positions follow the 1-based convention of spans: a document of `N`
//! symbols has forward states `h^f_0..h^f_N` and backward states
//! `h^b_1..h^b_{N+1}`, where `h^f_0` and `h^b_{N+1}` are the zero initial
//! states. A span `(l_s, l_e)` is encoded from `h^f_{l_s-1}` and
//! `h^b_{l_e+1}` only, so the symbols inside the span never reach its query
//! vector directly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{gaussian, BoundGru};
use crate::tensor::Tensor;

/// A symbol sequence with its raw tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub symbols: Vec<usize>,
    pub raw_tokens: Vec<String>,
    /// 0-based index of the cloze placeholder, if any.
    pub placeholder: Option<usize>,
}

impl Document {
    pub fn new(symbols: Vec<usize>, raw_tokens: Vec<String>) -> Result<Self> {
        if symbols.len() != raw_tokens.len() {
            return Err(Error::Data(format!(
                "{} symbols but {} raw tokens",
                symbols.len(),
                raw_tokens.len()
            )));
        }
        let placeholder = symbols.iter().position(|&s| s == crate::vocab::BLANK);
        Ok(Self {
            symbols,
            raw_tokens,
            placeholder,
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// Inclusive, 1-based span `(l_s, l_e)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start == 0 || start > end {
            return Err(Error::Index {
                what: "span start",
                index: start,
                bound: end,
            });
        }
        Ok(Self { start, end })
    }

    /// Single-token span at 1-based position `pos`.
    pub fn at(pos: usize) -> Self {
        debug_assert!(pos >= 1);
        Self {
            start: pos,
            end: pos,
        }
    }
}

/// Forward and backward hidden states of one encoded sequence.
#[derive(Clone, Debug)]
pub struct EncoderStates {
    /// `fwd[l]` is `h^f_l`, `l = 0..=N`.
    fwd: Vec<Var>,
    /// `bwd[l - 1]` is `h^b_l`, `l = 1..=N+1`.
    bwd: Vec<Var>,
}

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.fwd.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&self, l: usize) -> Var {
        self.fwd[l]
    }

    pub fn backward(&self, l: usize) -> Var {
        self.bwd[l - 1]
    }

    pub fn forward_all(&self) -> &[Var] {
        &self.fwd
    }

    pub fn backward_all(&self) -> &[Var] {
        &self.bwd
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Train { dropout: f64 },
    Eval,
}

/// Looks up `ids` in `e_i`; in training mode applies inverted dropout to
/// every embedded entry.
pub fn embed_sequence(
    tape: &mut Tape<'_>,
    e_i: Var,
    ids: &[usize],
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    let rows = tape.gather_rows(e_i, ids)?;
    match mode {
        Mode::Eval => Ok(rows),
        Mode::Train { dropout } => {
            if !(0.0..1.0).contains(&dropout) {
                return Err(Error::Config(format!("dropout rate {dropout} not in [0, 1)")));
            }
            if dropout == 0.0 {
                return Ok(rows);
            }
            let keep = 1.0 / (1.0 - dropout);
            let shape = tape.shape(rows).to_vec();
            let n = shape.iter().product();
            let mask: Vec<f64> = (0..n)
                .map(|_| if rng.gen::<f64>() < dropout { 0.0 } else { keep })
                .collect();
            let mask = tape.constant(Tensor::new(shape, mask)?);
            tape.mul(rows, mask)
        }
    }
}

/// One GRU step: `h' = z ⊙ h + (1 − z) ⊙ h̃`, so an update gate near 1
/// keeps the previous state.
pub fn gru_step(tape: &mut Tape<'_>, p: &BoundGru, x: Var, h: Var) -> Result<Var> {
    let gate = |tape: &mut Tape<'_>, w: Var, u: Var, b: Var| -> Result<Var> {
        let wx = tape.matmul(w, x)?;
        let uh = tape.matmul(u, h)?;
        let s = tape.add(wx, uh)?;
        let s = tape.add(s, b)?;
        Ok(tape.sigmoid(s))
    };
    let z = gate(tape, p.w_z, p.u_z, p.b_z)?;
    let r = gate(tape, p.w_r, p.u_r, p.b_r)?;
    let rh = tape.mul(r, h)?;
    let wx = tape.matmul(p.w_h, x)?;
    let urh = tape.matmul(p.u_h, rh)?;
    let c = tape.add(wx, urh)?;
    let c = tape.add(c, p.b_h)?;
    let c = tape.tanh(c);
    let keep = tape.mul(z, h)?;
    let one_minus_z = tape.one_minus(z);
    let fresh = tape.mul(one_minus_z, c)?;
    tape.add(keep, fresh)
}

/// Runs the forward GRU left-to-right and the backward GRU right-to-left
/// over the rows of `embedded` (`N × h`), both from zero states.
pub fn bigru_encode(
    tape: &mut Tape<'_>,
    embedded: Var,
    fwd: &BoundGru,
    bwd: &BoundGru,
) -> Result<EncoderStates> {
    let shape = tape.shape(embedded).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape("bigru_encode", &shape, &[1, 0]));
    }
    let (n, d) = (shape[0], shape[1]);
    let hidden = tape.shape(fwd.b_z)[0];
    let xs: Vec<Var> = (0..n)
        .map(|l| tape.slice(embedded, l * d, d))
        .collect::<Result<_>>()?;

    let mut fwd_states = Vec::with_capacity(n + 1);
    fwd_states.push(tape.constant(Tensor::zeros(&[hidden])));
    for &x in &xs {
        let prev = *fwd_states.last().expect("non-empty");
        fwd_states.push(gru_step(tape, fwd, x, prev)?);
    }

    let mut bwd_rev = Vec::with_capacity(n + 1);
    bwd_rev.push(tape.constant(Tensor::zeros(&[hidden])));
    for &x in xs.iter().rev() {
        let prev = *bwd_rev.last().expect("non-empty");
        bwd_rev.push(gru_step(tape, bwd, x, prev)?);
    }
    bwd_rev.reverse();

    Ok(EncoderStates {
        fwd: fwd_states,
        bwd: bwd_rev,
    })
}

/// `z = W_q · [h^f_{l_s−1} ; h^b_{l_e+1}]`.
pub fn encode_span_query(
    tape: &mut Tape<'_>,
    states: &EncoderStates,
    span: Span,
    w_q: Var,
) -> Result<Var> {
    let n = states.len();
    if span.start == 0 || span.start > span.end || span.end > n {
        return Err(Error::Index {
            what: "span end",
            index: span.end,
            bound: n,
        });
    }
    let left = states.forward(span.start - 1);
    let right = states.backward(span.end + 1);
    let ctx = tape.concat(&[left, right])?;
    tape.matmul(w_q, ctx)
}

/// `[I_h, I_h]` plus Gaussian noise, shape `h × 2h`.
pub fn init_wq(h: usize, noise_stddev: f64, rng: &mut impl Rng) -> Tensor {
    let mut w = gaussian(&[h, 2 * h], noise_stddev, rng);
    for i in 0..h {
        w.data_mut()[i * 2 * h + i] += 1.0;
        w.data_mut()[i * 2 * h + h + i] += 1.0;
    }
    w
}

/// Input- and output-space embeddings of an answer symbol. With `e_o` absent
/// (identity mode) `y_o` is the one-hot row over a `vocab`-sized space.
pub fn embed_answer(
    tape: &mut Tape<'_>,
    symbol: usize,
    e_i: Var,
    e_o: Option<Var>,
    vocab: usize,
) -> Result<(Var, Var)> {
    let h = tape.shape(e_i)[1];
    let yi = tape.gather_rows(e_i, &[symbol])?;
    let yi = tape.reshape(yi, &[h])?;
    let yo = match e_o {
        Some(e_o) => {
            let yo = tape.gather_rows(e_o, &[symbol])?;
            let d = tape.shape(e_o)[1];
            tape.reshape(yo, &[d])?
        }
        None => tape.constant(one_hot(symbol, vocab)?),
    };
    Ok((yi, yo))
}

pub(crate) fn one_hot(index: usize, len: usize) -> Result<Tensor> {
    if index >= len {
        return Err(Error::Index {
            what: "answer symbol",
            index,
            bound: len,
        });
    }
    let mut t = Tensor::zeros(&[len]);
    t.data_mut()[index] = 1.0;
    Ok(t)
}
