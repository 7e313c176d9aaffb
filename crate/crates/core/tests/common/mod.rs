//! Shared helpers for integration tests: random small instances and an
//! independent, tape-free evaluation of the model.
#![allow(dead_code)]

pub mod invariants;

use qann_core::autodiff::{grad_check, GradCheckReport};
use qann_core::encoder::Document;
use qann_core::hop::forward;
use qann_core::params::BoundParams;
use qann_core::params::GruParams;
use qann_core::vocab::{BLANK, SEP};
use qann_core::{Example, ForwardOptions, InitOptions, ModelDims, ModelParams, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// First id usable for ordinary tokens.
pub const FIRST_WORD: usize = 3;

pub fn doc_of(symbols: Vec<usize>) -> Document {
    let raw = symbols.iter().map(|s| format!("w{s}")).collect();
    Document::new(symbols, raw).unwrap()
}

/// A random example over `vocab` ids with document length in `doc_len`;
/// at least one candidate occurs in the document.
pub fn random_example(rng: &mut impl Rng, vocab: usize, doc_len: std::ops::RangeInclusive<usize>, n_cands: usize) -> Example {
    assert!(vocab >= FIRST_WORD + n_cands);
    let words: Vec<usize> = (FIRST_WORD..vocab).collect();
    let mut cands: Vec<usize> = words.choose_multiple(rng, n_cands).copied().collect();
    cands.sort_unstable();
    let n = rng.gen_range(doc_len).max(n_cands);
    let mut doc: Vec<usize> = (0..n).map(|_| *words.choose(rng).unwrap()).collect();
    // make sure at least one candidate occurs
    let pos = rng.gen_range(0..n);
    doc[pos] = *cands.choose(rng).unwrap();
    let q_len = rng.gen_range(1..=3);
    let mut query: Vec<usize> = (0..q_len).map(|_| *words.choose(rng).unwrap()).collect();
    let blank_at = rng.gen_range(0..=q_len);
    query.insert(blank_at, BLANK);
    let gold = *cands.choose(rng).unwrap();
    Example::new(doc_of(doc), doc_of(query), cands, gold).unwrap()
}

/// Freshly initialised parameters with every entry perturbed, so biases and
/// gate scalars are non-trivial too.
pub fn random_params(rng: &mut impl Rng, dims: ModelDims, noise: f64) -> ModelParams {
    let opts = InitOptions {
        embed_stddev: 0.5,
        ..InitOptions::default()
    };
    let mut p = ModelParams::init(dims, &opts, rng).unwrap();
    let dist = Normal::new(0.0, noise).unwrap();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += dist.sample(rng);
        }
    }
    p
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mv(m: &Tensor, x: &[f64]) -> Vec<f64> {
    assert_eq!(m.cols(), x.len());
    (0..m.rows())
        .map(|i| m.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn cat(parts: &[&[f64]]) -> Vec<f64> {
    parts.concat()
}

pub fn gru_step(p: &GruParams, x: &[f64], h: &[f64]) -> Vec<f64> {
    let pre = |w: &Tensor, u: &Tensor, b: &Tensor, hh: &[f64]| -> Vec<f64> {
        let wx = mv(w, x);
        let uh = mv(u, hh);
        (0..wx.len()).map(|i| wx[i] + uh[i] + b.data()[i]).collect()
    };
    let z: Vec<f64> = pre(&p.w_z, &p.u_z, &p.b_z, h).into_iter().map(sigmoid).collect();
    let r: Vec<f64> = pre(&p.w_r, &p.u_r, &p.b_r, h).into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let c: Vec<f64> = pre(&p.w_h, &p.u_h, &p.b_h, &rh).into_iter().map(f64::tanh).collect();
    (0..h.len()).map(|i| z[i] * h[i] + (1.0 - z[i]) * c[i]).collect()
}

/// Forward states `h^f_0..h^f_N` and backward states `h^b_1..h^b_{N+1}`.
pub fn bigru(p: &ModelParams, ids: &[usize]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let h = p.dims.hidden;
    let xs: Vec<&[f64]> = ids.iter().map(|&i| p.e_i.row(i)).collect();
    let mut fwd = vec![vec![0.0; h]];
    for x in &xs {
        let next = gru_step(&p.gru_fwd, x, fwd.last().unwrap());
        fwd.push(next);
    }
    let mut bwd = vec![vec![0.0; h]];
    for x in xs.iter().rev() {
        let next = gru_step(&p.gru_bwd, x, bwd.last().unwrap());
        bwd.push(next);
    }
    bwd.reverse();
    (fwd, bwd)
}

pub struct OracleHop {
    pub alpha: Vec<f64>,
    pub g_q: Vec<f64>,
    pub g_a: f64,
    pub eta: f64,
    pub answer: Vec<f64>,
}

pub struct OracleOutput {
    pub q0: Vec<f64>,
    pub a0: Vec<f64>,
    pub hops: Vec<OracleHop>,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Straight-line evaluation of the whole model in eval mode.
pub fn oracle_forward(p: &ModelParams, ex: &Example, hops: usize, ablate: bool) -> OracleOutput {
    let mut ids = ex.document.symbols.clone();
    ids.push(SEP);
    ids.extend(&ex.query.symbols);
    let (fwd, bwd) = bigru(p, &ids);
    // 1-based position `pos`: left context h^f_{pos-1}, right context h^b_{pos+1}
    let span_query = |pos: usize| mv(&p.w_q, &cat(&[&fwd[pos - 1], &bwd[pos]]));

    let answer_row = |sym: usize| -> Vec<f64> {
        match &p.e_o {
            Some(e_o) => e_o.row(sym).to_vec(),
            None => {
                let mut v = vec![0.0; p.dims.vocab];
                v[sym] = 1.0;
                v
            }
        }
    };

    let mut z = Vec::new();
    let mut y_i = Vec::new();
    let mut y_o = Vec::new();
    for (l, &s) in ex.document.symbols.iter().enumerate() {
        if ex.candidates.contains(&s) {
            z.push(span_query(l + 1));
            y_i.push(p.e_i.row(s).to_vec());
            y_o.push(answer_row(s));
        }
    }
    let q0 = span_query(ex.document.len() + 1 + ex.query.placeholder.unwrap() + 1);
    let cands: Vec<Vec<f64>> = ex.candidates.iter().map(|&c| answer_row(c)).collect();

    let hp = &p.hop;
    let a0: Vec<f64> = if ablate || p.dims.identity_eo {
        vec![0.0; p.dims.answer_dim()]
    } else {
        let g = sigmoid(hp.g_a_q.item());
        mv(&hp.u_a_q, &q0).into_iter().map(|v| g * v).collect()
    };

    let weighted = |alpha: &[f64], rows: &[Vec<f64>]| -> Vec<f64> {
        let mut out = vec![0.0; rows[0].len()];
        for (a, r) in alpha.iter().zip(rows) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += a * v;
            }
        }
        out
    };

    let mut q = q0.clone();
    let mut a = a0.clone();
    let mut trace = Vec::new();
    for _ in 0..hops {
        let alpha = softmax(&z.iter().map(|zk| dot(zk, &q)).collect::<Vec<_>>());
        let zt = weighted(&alpha, &z);
        let yit = weighted(&alpha, &y_i);
        let yot = weighted(&alpha, &y_o);
        let cand_probs = softmax(&cands.iter().map(|c| dot(c, &yot)).collect::<Vec<_>>());
        let eta = cand_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let qz: Vec<f64> = q.iter().zip(&zt).map(|(x, y)| x * y).collect();
        let ay: Vec<f64> = a0.iter().zip(&yot).map(|(x, y)| x * y).collect();
        let g_a = sigmoid(dot(hp.u_a_g.data(), &cat(&[&qz, &ay, &[eta]])) + hp.b_a.item());
        for (ai, yi) in a.iter_mut().zip(&yot) {
            *ai += g_a * yi;
        }
        let cand_q: Vec<f64> = mv(&hp.u_q_c, &cat(&[&q, &yit, &zt])).into_iter().map(f64::tanh).collect();
        let g_q: Vec<f64> = mv(&hp.u_q_g, &cat(&[&q, &zt]))
            .iter()
            .zip(hp.b_q_g.data())
            .map(|(s, b)| sigmoid(s + b))
            .collect();
        q = (0..q.len()).map(|i| g_q[i] * q[i] + (1.0 - g_q[i]) * cand_q[i]).collect();
        trace.push(OracleHop {
            alpha,
            g_q,
            g_a,
            eta,
            answer: a.clone(),
        });
    }
    let scores: Vec<f64> = cands.iter().map(|c| dot(c, &a)).collect();
    let probs = softmax(&scores);
    OracleOutput {
        q0,
        a0,
        hops: trace,
        scores,
        probs,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central-difference check of the cross-entropy gradient through the whole
/// model: h = 4, two hops, three support pairs, 9 encoder inputs.
pub fn end_to_end_grad_check(identity_eo: bool, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ModelDims {
        vocab: 9,
        hidden: 4,
        identity_eo,
    };
    let p = random_params(&mut rng, dims, 0.3);
    let ex = Example::new(doc_of(vec![3, 6, 4, 7, 5, 6]), doc_of(vec![8, 0]), vec![3, 4, 5], 4).unwrap();
    assert_eq!(ex.document.symbols.iter().filter(|s| ex.candidates.contains(s)).count(), 3);
    let tensors: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
    grad_check(&tensors, 1e-5, |tape, vars| {
        let bound = BoundParams::from_vars(dims, vars)?;
        let g = forward(tape, &bound, &ex, &ForwardOptions::eval(2), &mut ChaCha8Rng::seed_from_u64(0))?;
        tape.cross_entropy(g.scores, ex.gold_index())
    })
    .unwrap()
}
