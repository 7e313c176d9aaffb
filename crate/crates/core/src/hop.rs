//! Multi-hop support retrieval with separate query and answer pathways.
//!
//! Every hop softly selects a `(z̃, ỹ^i, ỹ^o)` triple from the support set
//! using `α = softmax(Z·q)`, adds the gated retrieved answer `ỹ^o` to the
//! running answer `a`, and moves the query towards
//! `tanh(U^q_c [q; ỹ^i; z̃])` through an elementwise gate. The final answer is
//! scored against the candidate output embeddings. Hop parameters are shared,
//! so a model can be run with a different number of hops than it was
//! trained with.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{one_hot, Mode, Span};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ModelParams};
use crate::support::{encode_example, Example, SupportSet};
use crate::tensor::{self, Tensor};

/// Probes applied on top of the learned computation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    /// Force `g^a_q → −∞`, i.e. `a₀ = 0`.
    pub ablate_query_gate: bool,
    /// Replace every answer gate `g^a_t` with this constant.
    pub answer_gate: Option<f64>,
    /// Replace every query gate entry `g^q_t` with this constant.
    pub query_gate: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub hops: usize,
    pub mode: Mode,
    pub overrides: Overrides,
}

impl ForwardOptions {
    pub fn eval(hops: usize) -> Self {
        Self {
            hops,
            mode: Mode::Eval,
            overrides: Overrides::default(),
        }
    }
}

/// Support stacked into matrices: `Z` and `Y^i` are `M × h`, `Y^o` is `M × d`.
#[derive(Clone, Copy, Debug)]
pub struct SupportMatrices {
    pub z: Var,
    pub y_i: Var,
    pub y_o: Var,
}

pub fn stack_support(tape: &mut Tape<'_>, support: &SupportSet) -> Result<SupportMatrices> {
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    let m = support.len();
    let stack = |tape: &mut Tape<'_>, vars: Vec<Var>| -> Result<Var> {
        let d = tape.shape(vars[0])[0];
        let flat = tape.concat(&vars)?;
        tape.reshape(flat, &[m, d])
    };
    Ok(SupportMatrices {
        z: stack(tape, support.pairs.iter().map(|p| p.z).collect())?,
        y_i: stack(tape, support.pairs.iter().map(|p| p.y_i).collect())?,
        y_o: stack(tape, support.pairs.iter().map(|p| p.y_o).collect())?,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Retrieved {
    pub alpha: Var,
    pub z_tilde: Var,
    pub y_i_tilde: Var,
    pub y_o_tilde: Var,
}

/// `α = softmax(Z·q)` and the α-weighted sums of `z`, `y^i`, `y^o`.
pub fn retrieve(tape: &mut Tape<'_>, q: Var, support: &SupportMatrices) -> Result<Retrieved> {
    let scores = tape.matmul(support.z, q)?;
    let alpha = tape.softmax(scores)?;
    Ok(Retrieved {
        alpha,
        z_tilde: tape.matmul(alpha, support.z)?,
        y_i_tilde: tape.matmul(alpha, support.y_i)?,
        y_o_tilde: tape.matmul(alpha, support.y_o)?,
    })
}

/// Returns `(q_{t+1}, g^q_t)`. The gate keeps the old query where it is 1.
pub fn update_query(
    tape: &mut Tape<'_>,
    q: Var,
    r: &Retrieved,
    p: &BoundParams,
    forced_gate: Option<f64>,
) -> Result<(Var, Var)> {
    let cand_in = tape.concat(&[q, r.y_i_tilde, r.z_tilde])?;
    let cand = tape.matmul(p.u_q_c, cand_in)?;
    let cand = tape.tanh(cand);
    let gate = match forced_gate {
        Some(g) => tape.constant(Tensor::full(tape.shape(q), g)),
        None => {
            let gate_in = tape.concat(&[q, r.z_tilde])?;
            let s = tape.matmul(p.u_q_g, gate_in)?;
            let s = tape.add(s, p.b_q_g)?;
            tape.sigmoid(s)
        }
    };
    let keep = tape.mul(gate, q)?;
    let one_minus = tape.one_minus(gate);
    let fresh = tape.mul(one_minus, cand)?;
    Ok((tape.add(keep, fresh)?, gate))
}

/// `a₀ = sigmoid(g^a_q) · U^a_q · q₀`; zero when ablated or in identity mode.
pub fn init_answer(tape: &mut Tape<'_>, q0: Var, p: &BoundParams, ablate: bool) -> Result<Var> {
    if ablate || p.dims.identity_eo {
        return Ok(tape.constant(Tensor::zeros(&[p.dims.answer_dim()])));
    }
    let gate = tape.sigmoid(p.g_a_q);
    let proj = tape.matmul(p.u_a_q, q0)?;
    tape.mul_scalar(gate, proj)
}

/// Candidate output embeddings as rows, `|A_q| × d`.
pub fn candidate_matrix(tape: &mut Tape<'_>, candidates: &[usize], p: &BoundParams) -> Result<Var> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    match p.e_o {
        Some(e_o) => tape.gather_rows(e_o, candidates),
        None => {
            let v = p.dims.vocab;
            let mut data = Vec::with_capacity(candidates.len() * v);
            for &c in candidates {
                data.extend(one_hot(c, v)?.into_data());
            }
            Ok(tape.constant(Tensor::matrix(candidates.len(), v, data)?))
        }
    }
}

/// Highest candidate probability if `ỹ^o` were the final answer.
pub fn eta(tape: &mut Tape<'_>, y_o_tilde: Var, candidates: Var) -> Result<Var> {
    let scores = tape.matmul(candidates, y_o_tilde)?;
    let probs = tape.softmax(scores)?;
    tape.max(probs)
}

/// `g^a = sigmoid(u^a_g · [q ⊙ z̃ ; a₀ ⊙ ỹ^o ; η] + b_a)`.
pub fn answer_gate(
    tape: &mut Tape<'_>,
    q: Var,
    z_tilde: Var,
    a0: Var,
    y_o_tilde: Var,
    eta: Var,
    p: &BoundParams,
) -> Result<Var> {
    let qz = tape.mul(q, z_tilde)?;
    let ay = tape.mul(a0, y_o_tilde)?;
    let gate_in = tape.concat(&[qz, ay, eta])?;
    let s = tape.dot(p.u_a_g, gate_in)?;
    let s = tape.add(s, p.b_a)?;
    Ok(tape.sigmoid(s))
}

/// `a_{t+1} = a_t + g^a · ỹ^o`.
pub fn update_answer(tape: &mut Tape<'_>, a: Var, g_a: Var, y_o_tilde: Var) -> Result<Var> {
    let add = tape.mul_scalar(g_a, y_o_tilde)?;
    tape.add(a, add)
}

/// Candidate scores `s_c = a · c`.
pub fn score_candidates(tape: &mut Tape<'_>, a: Var, candidates: Var) -> Result<Var> {
    tape.matmul(candidates, a)
}

/// Tape handles of one hop.
#[derive(Clone, Copy, Debug)]
pub struct HopVars {
    pub alpha: Var,
    pub g_q: Var,
    pub g_a: Var,
    pub eta: Var,
    pub y_o_tilde: Var,
    /// Query before this hop's update.
    pub query: Var,
    /// Answer after this hop's update.
    pub answer: Var,
}

/// Everything recorded by [`forward`].
#[derive(Clone, Debug)]
pub struct ForwardGraph {
    pub support: SupportSet,
    pub q0: Var,
    pub a0: Var,
    pub hops: Vec<HopVars>,
    pub scores: Var,
    pub probs: Var,
}

/// Full model on one example: encode, build support, `T` hops, scoring.
pub fn forward(
    tape: &mut Tape<'_>,
    p: &BoundParams,
    example: &Example,
    opts: &ForwardOptions,
    rng: &mut impl Rng,
) -> Result<ForwardGraph> {
    if opts.hops == 0 {
        return Err(Error::Config("number of hops must be at least 1".into()));
    }
    let (_, support) = encode_example(tape, p, example, opts.mode, rng)?;
    let mats = stack_support(tape, &support)?;
    let cands = candidate_matrix(tape, &example.candidates, p)?;
    let q0 = support.query_z;
    let a0 = init_answer(tape, q0, p, opts.overrides.ablate_query_gate)?;

    let (mut q, mut a) = (q0, a0);
    let mut hops = Vec::with_capacity(opts.hops);
    for _ in 0..opts.hops {
        let r = retrieve(tape, q, &mats)?;
        let eta = eta(tape, r.y_o_tilde, cands)?;
        let g_a = match opts.overrides.answer_gate {
            Some(g) => tape.constant(Tensor::scalar(g)),
            None => answer_gate(tape, q, r.z_tilde, a0, r.y_o_tilde, eta, p)?,
        };
        a = update_answer(tape, a, g_a, r.y_o_tilde)?;
        let (q_next, g_q) = update_query(tape, q, &r, p, opts.overrides.query_gate)?;
        hops.push(HopVars {
            alpha: r.alpha,
            g_q,
            g_a,
            eta,
            y_o_tilde: r.y_o_tilde,
            query: q,
            answer: a,
        });
        q = q_next;
    }
    let scores = score_candidates(tape, a, cands)?;
    let probs = tape.softmax(scores)?;
    Ok(ForwardGraph {
        support,
        q0,
        a0,
        hops,
        scores,
        probs,
    })
}

/// Per-hop quantities for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopTrace {
    pub alpha: Vec<f64>,
    pub g_q: Vec<f64>,
    pub g_a: f64,
    pub eta: f64,
}

/// Line-delimited trace record, one per hop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopTraceRecord {
    pub hop: usize,
    pub alpha: Vec<f64>,
    pub spans: Vec<[usize; 2]>,
    pub g_a: f64,
    pub eta: f64,
    pub g_q_mean: f64,
}

/// Values of a forward pass, detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    /// Index into the example's candidates; lowest index wins ties.
    pub prediction: usize,
    pub traces: Vec<HopTrace>,
    pub spans: Vec<Span>,
    pub support_symbols: Vec<usize>,
    pub q0: Vec<f64>,
    pub a0: Vec<f64>,
    /// `ỹ^o_t` per hop.
    pub retrieved_answers: Vec<Vec<f64>>,
    /// `a_{t+1}` per hop.
    pub answers: Vec<Vec<f64>>,
}

impl ForwardOutput {
    pub fn predicted_symbol(&self, example: &Example) -> usize {
        example.candidates[self.prediction]
    }

    pub fn trace_records(&self) -> Vec<HopTraceRecord> {
        let spans: Vec<[usize; 2]> = self.spans.iter().map(|s| [s.start, s.end]).collect();
        self.traces
            .iter()
            .enumerate()
            .map(|(t, h)| HopTraceRecord {
                hop: t + 1,
                alpha: h.alpha.clone(),
                spans: spans.clone(),
                g_a: h.g_a,
                eta: h.eta,
                g_q_mean: h.g_q.iter().sum::<f64>() / h.g_q.len().max(1) as f64,
            })
            .collect()
    }
}

pub(crate) fn read_output(tape: &Tape<'_>, g: &ForwardGraph) -> ForwardOutput {
    let vals = |v: Var| tape.value(v).data().to_vec();
    let scores = vals(g.scores);
    let probs = vals(g.probs);
    let prediction = tensor::argmax(&scores).expect("non-empty candidates");
    ForwardOutput {
        prediction,
        traces: g
            .hops
            .iter()
            .map(|h| HopTrace {
                alpha: vals(h.alpha),
                g_q: vals(h.g_q),
                g_a: tape.value(h.g_a).item(),
                eta: tape.value(h.eta).item(),
            })
            .collect(),
        spans: g.support.spans(),
        support_symbols: g.support.pairs.iter().map(|p| p.answer_symbol).collect(),
        q0: vals(g.q0),
        a0: vals(g.a0),
        retrieved_answers: g.hops.iter().map(|h| vals(h.y_o_tilde)).collect(),
        answers: g.hops.iter().map(|h| vals(h.answer)).collect(),
        scores,
        probs,
    }
}

/// Runs the model on `example` and returns detached values.
pub fn forward_pass(
    params: &ModelParams,
    example: &Example,
    opts: &ForwardOptions,
    rng: &mut impl Rng,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let graph = forward(&mut tape, &bound, example, opts, rng)?;
    Ok(read_output(&tape, &graph))
}
