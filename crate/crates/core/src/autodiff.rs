//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations append nodes in
//! execution order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep. Leaves are either trainable
//! parameters (gradients are reported) or constants (no gradient flows).
//!
//! ```
//! use qann_core::autodiff::Tape;
//! use qann_core::tensor::Tensor;
//!
//! let w = Tensor::vector(vec![1.0, -2.0]);
//! let mut tape = Tape::new();
//! let x = tape.param(&w);
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0]);
//! ```

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Softmax(Var),
    GatherRows(Var, Vec<usize>),
    Concat(Vec<Var>),
    Reshape(Var),
    Slice(Var, usize),
    Sum(Var),
    Dot(Var, Var),
    MulScalar(Var, Var),
    /// Input and the attained maximiser.
    Max(Var, usize),
    /// Scores, gold index, cached softmax.
    CrossEntropy(Var, usize, Vec<f64>),
}

#[derive(Debug)]
struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    requires_grad: bool,
    is_param: bool,
}

/// Records one forward pass.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    backward_done: bool,
}

/// Gradients of the loss with respect to every parameter leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_var: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_var.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.by_var.remove(&var)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Trainable leaf. Borrowed tensors are not copied.
    pub fn param(&mut self, value: impl Into<Cow<'a, Tensor>>) -> Var {
        self.push_leaf(value.into(), true)
    }

    pub fn constant(&mut self, value: impl Into<Cow<'a, Tensor>>) -> Var {
        self.push_leaf(value.into(), false)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, is_param: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: is_param,
            is_param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            requires_grad,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), v, &[a])
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let ones = Tensor::full(self.shape(x), 1.0);
        let ones = self.constant(ones);
        self.sub(ones, x).expect("shapes agree by construction")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::sigmoid);
        self.push(Op::Sigmoid(a), v, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v, &[a, b]))
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let x = self.value(logits);
        if x.rank() != 1 {
            return Err(Error::shape("softmax", x.shape(), &[x.len()]));
        }
        let p = tensor::softmax(x.data()).ok_or(Error::EmptySupport)?;
        Ok(self.push(Op::Softmax(logits), Tensor::vector(p), &[logits]))
    }

    /// Rows of a matrix by index; repeated ids accumulate in backward.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("gather_rows", t.shape(), &[ids.len()]));
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "gather_rows table",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let v = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push(Op::GatherRows(table, ids.to_vec()), v, &[table]))
    }

    /// Concatenation along axis 0. Vectors and scalars may be mixed, which
    /// yields a vector; matrices must agree on their column count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat", &[], &[]));
        };
        let matrix_mode = self.value(first).rank() == 2;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let ok = if matrix_mode {
                t.rank() == 2 && t.cols() == cols
            } else {
                t.rank() <= 1
            };
            if !ok {
                return Err(Error::shape("concat", self.shape(first), t.shape()));
            }
            rows += if matrix_mode { t.rows() } else { t.len() };
            data.extend_from_slice(t.data());
        }
        let shape = if matrix_mode {
            vec![rows, cols]
        } else {
            vec![rows]
        };
        let v = Tensor::new(shape, data)?;
        Ok(self.push(Op::Concat(parts.to_vec()), v, parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(a), v, &[a]))
    }

    /// Contiguous slice `[start, start + len)` of the flattened input, as a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.len() {
            return Err(Error::Index {
                what: "slice",
                index: start + len,
                bound: t.len(),
            });
        }
        let v = Tensor::vector(t.data()[start..start + len].to_vec());
        Ok(self.push(Op::Slice(a, start), v, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), &[a])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::shape("dot", self.shape(a), self.shape(b)));
        }
        let s = self.value(a).dot(self.value(b));
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(s), &[a, b]))
    }

    /// Scalar times tensor.
    pub fn mul_scalar(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(s), self.shape(x)));
        }
        let k = self.value(s).item();
        let v = self.value(x).map(|e| e * k);
        Ok(self.push(Op::MulScalar(s, x), v, &[s, x]))
    }

    /// Maximum entry; the gradient goes to the lowest-index maximiser.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let idx = tensor::argmax(t.data()).ok_or(Error::EmptyCandidates)?;
        let v = Tensor::scalar(t.data()[idx]);
        Ok(self.push(Op::Max(a, idx), v, &[a]))
    }

    /// `-log softmax(scores)[gold]` via log-sum-exp.
    pub fn cross_entropy(&mut self, scores: Var, gold: usize) -> Result<Var> {
        let s = self.value(scores);
        if s.rank() != 1 {
            return Err(Error::shape("cross_entropy", s.shape(), &[]));
        }
        if gold >= s.len() {
            return Err(Error::Index {
                what: "cross_entropy gold",
                index: gold,
                bound: s.len(),
            });
        }
        let loss = tensor::log_sum_exp(s.data()) - s.data()[gold];
        let probs = tensor::softmax(s.data()).ok_or(Error::EmptyCandidates)?;
        Ok(self.push(
            Op::CrossEntropy(scores, gold, probs),
            Tensor::scalar(loss),
            &[scores],
        ))
    }

    /// Reverse sweep from a scalar `loss`. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if node.is_param {
                out.by_var.insert(Var(i), g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_param {
                out.by_var
                    .entry(Var(i))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut send = |var: Var, d: Tensor| {
            if !self.nodes[var.0].requires_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(acc) => acc.add_assign(&d),
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(self.value(*b), |x, y| x * y));
                send(*b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::Scale(a, k) => send(*a, g.map(|x| x * k)),
            Op::Tanh(a) => send(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
            Op::Sigmoid(a) => send(*a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y))),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                // Vectors act as a row (left) or column (right) matrix;
                // dA = dC·Bᵀ, dB = Aᵀ·dC.
                let (m, k) = if av.rank() == 1 { (1, av.len()) } else { (av.rows(), av.cols()) };
                let n = if bv.rank() == 1 { 1 } else { bv.cols() };
                if self.nodes[a.0].requires_grad {
                    let da = tensor::matmul_bt(g.data(), bv.data(), m, n, k);
                    send(*a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.nodes[b.0].requires_grad {
                    let db = tensor::matmul_at(av.data(), g.data(), m, k, n);
                    send(*b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let gp = g.dot(p);
                send(*a, g.zip_map(p, |x, y| y * (x - gp)));
            }
            Op::GatherRows(table, ids) => {
                let t = self.value(*table);
                let cols = t.cols();
                let mut d = Tensor::zeros(t.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * cols..(r + 1) * cols];
                    let dst = &mut d.data_mut()[id * cols..(id + 1) * cols];
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o += s;
                    }
                }
                send(*table, d);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.len();
                    let chunk = g.data()[offset..offset + n].to_vec();
                    send(*p, Tensor::new(pv.shape().to_vec(), chunk)?);
                    offset += n;
                }
            }
            Op::Reshape(a) => send(*a, g.clone().reshaped(self.shape(*a))?),
            Op::Slice(a, start) => {
                let mut d = Tensor::zeros(self.shape(*a));
                d.data_mut()[*start..*start + g.len()].copy_from_slice(g.data());
                send(*a, d);
            }
            Op::Sum(a) => send(*a, Tensor::full(self.shape(*a), g.item())),
            Op::Dot(a, b) => {
                let k = g.item();
                send(*a, self.value(*b).map(|x| x * k));
                send(*b, self.value(*a).map(|x| x * k));
            }
            Op::MulScalar(s, x) => {
                let k = self.value(*s).item();
                let ds = g.dot(self.value(*x));
                send(*s, Tensor::full(self.shape(*s), ds));
                send(*x, g.map(|v| v * k));
            }
            Op::Max(a, idx) => {
                let mut d = Tensor::zeros(self.shape(*a));
                d.data_mut()[*idx] = g.item();
                send(*a, d);
            }
            Op::CrossEntropy(a, gold, probs) => {
                let k = g.item();
                let mut d: Vec<f64> = probs.iter().map(|p| p * k).collect();
                d[*gold] -= k;
                send(*a, Tensor::vector(d));
            }
        }
        Ok(())
    }
}

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat entry)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    /// First coordinate where a value or gradient was not finite.
    pub non_finite: Option<(usize, usize)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_error < tolerance
    }
}

/// Compares tape gradients against central differences over every entry of
/// every parameter. `build` must be deterministic and return a scalar.
pub fn grad_check<F>(params: &[Tensor], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = build(&mut tape, &vars)?;
        let mut grads = tape.backward(loss)?;
        vars.iter()
            .map(|&v| grads.take(v).expect("every param has a gradient"))
            .collect()
    };

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        non_finite: None,
        entries_checked: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[j];
            report.entries_checked += 1;
            if !numeric.is_finite() || !a.is_finite() {
                report.non_finite.get_or_insert((pi, j));
                report.max_rel_error = f64::INFINITY;
                continue;
            }
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, j));
            }
        }
    }
    Ok(report)
}
