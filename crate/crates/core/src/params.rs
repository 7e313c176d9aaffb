//! Trainable tensors of the model and their initialisation.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sizes that fix every parameter shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub hidden: usize,
    /// Output embeddings frozen to the identity over the vocabulary.
    pub identity_eo: bool,
}

impl ModelDims {
    /// Dimension of answer-space vectors (`a_t`, `y^o`, candidate embeddings).
    pub fn answer_dim(&self) -> usize {
        if self.identity_eo {
            self.vocab
        } else {
            self.hidden
        }
    }

    /// Length of the answer-gate weight vector: `[q ⊙ z̃ ; a₀ ⊙ ỹ^o ; η]`.
    pub fn gate_input_dim(&self) -> usize {
        self.hidden + self.answer_dim() + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitOptions {
    pub embed_stddev: f64,
    pub wq_noise_stddev: f64,
    pub update_gate_bias: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            embed_stddev: 0.1,
            wq_noise_stddev: 0.1,
            update_gate_bias: 1.0,
        }
    }
}

/// One GRU direction. Matrices are `[out × in]`; `z` is the update gate and
/// `r` the reset gate.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

/// Hop-shared parameters of the query/answer update.
#[derive(Clone, Debug, PartialEq)]
pub struct HopParams {
    /// `h × 3h`, candidate query from `[q; ỹ^i; z̃]`.
    pub u_q_c: Tensor,
    /// `h × 2h`, query gate from `[q; z̃]`.
    pub u_q_g: Tensor,
    pub b_q_g: Tensor,
    /// `h × h`, initial answer from the encoded query.
    pub u_a_q: Tensor,
    /// Scalar query-answer gate logit.
    pub g_a_q: Tensor,
    /// Answer accumulation gate weights over `[q ⊙ z̃ ; a₀ ⊙ ỹ^o ; η]`.
    pub u_a_g: Tensor,
    pub b_a: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub e_i: Tensor,
    /// `None` in identity mode.
    pub e_o: Option<Tensor>,
    pub gru_fwd: GruParams,
    pub gru_bwd: GruParams,
    pub w_q: Tensor,
    pub hop: HopParams,
}

/// Glorot/Xavier uniform: variance `2 / (fan_in + fan_out)`.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("sized by construction")
}

pub fn gaussian(shape: &[usize], stddev: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = if stddev > 0.0 {
        let dist = Normal::new(0.0, stddev).expect("positive stddev");
        (0..n).map(|_| dist.sample(rng)).collect()
    } else {
        vec![0.0; n]
    };
    Tensor::new(shape.to_vec(), data).expect("sized by construction")
}

impl GruParams {
    pub fn init(input: usize, hidden: usize, update_bias: f64, rng: &mut impl Rng) -> Self {
        Self {
            w_z: glorot(hidden, input, rng),
            u_z: glorot(hidden, hidden, rng),
            b_z: Tensor::full(&[hidden], update_bias),
            w_r: glorot(hidden, input, rng),
            u_r: glorot(hidden, hidden, rng),
            b_r: Tensor::zeros(&[hidden]),
            w_h: glorot(hidden, input, rng),
            u_h: glorot(hidden, hidden, rng),
            b_h: Tensor::zeros(&[hidden]),
        }
    }

    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_h,
            &self.u_h, &self.b_h,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_h,
            &mut self.u_h,
            &mut self.b_h,
        ]
    }
}

const GRU_NAMES: [&str; 9] = ["W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h"];

impl ModelParams {
    pub fn init(dims: ModelDims, opts: &InitOptions, rng: &mut impl Rng) -> Result<Self> {
        if dims.vocab == 0 || dims.hidden == 0 {
            return Err(Error::Config(format!(
                "vocab and hidden size must be positive, got {dims:?}"
            )));
        }
        let h = dims.hidden;
        let e_i = gaussian(&[dims.vocab, h], opts.embed_stddev, rng);
        let e_o = (!dims.identity_eo).then(|| gaussian(&[dims.vocab, h], opts.embed_stddev, rng));
        let gru_fwd = GruParams::init(h, h, opts.update_gate_bias, rng);
        let gru_bwd = GruParams::init(h, h, opts.update_gate_bias, rng);
        let w_q = crate::encoder::init_wq(h, opts.wq_noise_stddev, rng);
        let hop = HopParams {
            u_q_c: glorot(h, 3 * h, rng),
            u_q_g: glorot(h, 2 * h, rng),
            b_q_g: Tensor::zeros(&[h]),
            u_a_q: glorot(h, h, rng),
            g_a_q: Tensor::scalar(0.0),
            u_a_g: glorot(1, dims.gate_input_dim(), rng)
                .reshaped(&[dims.gate_input_dim()])?,
            b_a: Tensor::scalar(0.0),
        };
        Ok(Self {
            dims,
            e_i,
            e_o,
            gru_fwd,
            gru_bwd,
            w_q,
            hop,
        })
    }

    /// Parameter names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["E_i".to_string()];
        if self.e_o.is_some() {
            names.push("E_o".into());
        }
        for dir in ["gru_fwd", "gru_bwd"] {
            names.extend(GRU_NAMES.iter().map(|n| format!("{dir}.{n}")));
        }
        names.extend(
            ["W_q", "U_q_c", "U_q_g", "b_q_g", "U_a_q", "g_a_q", "u_a_g", "b_a"]
                .iter()
                .map(|s| s.to_string()),
        );
        names
    }

    /// Tensors in the same order as [`ModelParams::names`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.e_i];
        if let Some(e_o) = &self.e_o {
            out.push(e_o);
        }
        out.extend(self.gru_fwd.tensors());
        out.extend(self.gru_bwd.tensors());
        let hp = &self.hop;
        out.extend([
            &self.w_q, &hp.u_q_c, &hp.u_q_g, &hp.b_q_g, &hp.u_a_q, &hp.g_a_q, &hp.u_a_g, &hp.b_a,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.e_i];
        if let Some(e_o) = &mut self.e_o {
            out.push(e_o);
        }
        out.extend(self.gru_fwd.tensors_mut());
        out.extend(self.gru_bwd.tensors_mut());
        let hp = &mut self.hop;
        out.extend([
            &mut self.w_q,
            &mut hp.u_q_c,
            &mut hp.u_q_g,
            &mut hp.b_q_g,
            &mut hp.u_a_q,
            &mut hp.g_a_q,
            &mut hp.u_a_g,
            &mut hp.b_a,
        ]);
        out
    }

    pub fn num_tensors(&self) -> usize {
        if self.e_o.is_some() {
            28
        } else {
            27
        }
    }

    /// Rebuilds parameters from tensors in canonical order, checking shapes.
    pub fn from_tensors(dims: ModelDims, tensors: Vec<Tensor>) -> Result<Self> {
        let template = Self::zeros(dims);
        if tensors.len() != template.num_tensors() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                template.num_tensors(),
                tensors.len()
            )));
        }
        let mut out = template;
        for ((slot, t), name) in out.tensors_mut().into_iter().zip(tensors).zip(Self::zeros(dims).names()) {
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected shape {:?}, got {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(out)
    }

    /// All-zero parameters of the right shapes.
    pub fn zeros(dims: ModelDims) -> Self {
        let h = dims.hidden;
        let gru = || GruParams {
            w_z: Tensor::zeros(&[h, h]),
            u_z: Tensor::zeros(&[h, h]),
            b_z: Tensor::zeros(&[h]),
            w_r: Tensor::zeros(&[h, h]),
            u_r: Tensor::zeros(&[h, h]),
            b_r: Tensor::zeros(&[h]),
            w_h: Tensor::zeros(&[h, h]),
            u_h: Tensor::zeros(&[h, h]),
            b_h: Tensor::zeros(&[h]),
        };
        Self {
            dims,
            e_i: Tensor::zeros(&[dims.vocab, h]),
            e_o: (!dims.identity_eo).then(|| Tensor::zeros(&[dims.vocab, h])),
            gru_fwd: gru(),
            gru_bwd: gru(),
            w_q: Tensor::zeros(&[h, 2 * h]),
            hop: HopParams {
                u_q_c: Tensor::zeros(&[h, 3 * h]),
                u_q_g: Tensor::zeros(&[h, 2 * h]),
                b_q_g: Tensor::zeros(&[h]),
                u_a_q: Tensor::zeros(&[h, h]),
                g_a_q: Tensor::scalar(0.0),
                u_a_g: Tensor::zeros(&[dims.gate_input_dim()]),
                b_a: Tensor::scalar(0.0),
            },
        }
    }

    /// Registers every tensor as a trainable leaf, borrowing the storage.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> BoundParams {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| tape.param(t)).collect();
        BoundParams::from_vars(self.dims, &vars).expect("canonical order")
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGru {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

/// Tape handles for every parameter, mirroring [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub dims: ModelDims,
    pub e_i: Var,
    pub e_o: Option<Var>,
    pub gru_fwd: BoundGru,
    pub gru_bwd: BoundGru,
    pub w_q: Var,
    pub u_q_c: Var,
    pub u_q_g: Var,
    pub b_q_g: Var,
    pub u_a_q: Var,
    pub g_a_q: Var,
    pub u_a_g: Var,
    pub b_a: Var,
    /// All handles in canonical order.
    pub all: Vec<Var>,
}

impl BoundParams {
    /// Interprets `vars` as parameters in canonical order.
    pub fn from_vars(dims: ModelDims, vars: &[Var]) -> Result<Self> {
        let expected = if dims.identity_eo { 27 } else { 28 };
        if vars.len() != expected {
            return Err(Error::Config(format!(
                "expected {expected} parameter handles, got {}",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let e_i = next();
        let e_o = (!dims.identity_eo).then(&mut next);
        let mut gru = || BoundGru {
            w_z: next(),
            u_z: next(),
            b_z: next(),
            w_r: next(),
            u_r: next(),
            b_r: next(),
            w_h: next(),
            u_h: next(),
            b_h: next(),
        };
        let gru_fwd = gru();
        let gru_bwd = gru();
        Ok(Self {
            dims,
            e_i,
            e_o,
            gru_fwd,
            gru_bwd,
            w_q: next(),
            u_q_c: next(),
            u_q_g: next(),
            b_q_g: next(),
            u_a_q: next(),
            g_a_q: next(),
            u_a_g: next(),
            b_a: next(),
            all: vars.to_vec(),
        })
    }
}
