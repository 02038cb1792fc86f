//! Reverse-mode differentiation over a fixed set of primitives.
//!
//! A [`Tape`] records every value produced while evaluating a loss. Calling
//! [`Tape::backward`] walks the record in reverse and accumulates exact
//! gradients for every node. The primitive set is what the MLP policies and
//! the GFlowNet objectives need: matmul, bias add, elementwise arithmetic,
//! ReLU/tanh, masked log-softmax, gather, sparse linear combination, square,
//! sum/mean and logsumexp.

use super::tensor::{gemm, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One term `coef · inputs[input].flat[index]` of a [`LinearMap`] row.
#[derive(Clone, Copy, Debug)]
pub struct LinearTerm {
    pub input: u32,
    pub index: u32,
    pub coef: f64,
}

/// Sparse linear map from several flattened inputs to a vector:
/// `out[r] = bias[r] + Σ coef · input.flat[index]` over the terms of row `r`.
#[derive(Clone, Debug, Default)]
pub struct LinearMap {
    offsets: Vec<usize>,
    terms: Vec<LinearTerm>,
    bias: Vec<f64>,
}

impl LinearMap {
    pub fn new() -> Self {
        LinearMap {
            offsets: vec![0],
            terms: Vec::new(),
            bias: Vec::new(),
        }
    }

    pub fn push_row(&mut self, terms: impl IntoIterator<Item = LinearTerm>, bias: f64) {
        self.terms.extend(terms);
        self.offsets.push(self.terms.len());
        self.bias.push(bias);
    }

    pub fn rows(&self) -> usize {
        self.bias.len()
    }

    fn row(&self, r: usize) -> &[LinearTerm] {
        &self.terms[self.offsets[r]..self.offsets[r + 1]]
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    LogSoftmax {
        x: Var,
        start: usize,
        mask: Vec<bool>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Linear {
        inputs: Vec<Var>,
        map: LinearMap,
    },
    Square(Var),
    Sum(Var),
    Mean(Var),
    LogSumExp(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters and constants both enter as leaves.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, av.data(), bv.data(), 0.0, out.data_mut());
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(Error::Shape(format!(
                "bias of {} for {:?}",
                bv.len(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        let n = xv.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % n];
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::Shape(format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| f(*v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    /// Row-wise log-softmax over columns `start..start + width` of `x`,
    /// restricted to the entries where `mask` (row-major, `rows × width`) is
    /// true. Masked entries come out as `-inf`. Every row needs at least one
    /// legal entry.
    pub fn masked_log_softmax(
        &mut self,
        x: Var,
        start: usize,
        width: usize,
        mask: Vec<bool>,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (m, c) = (xv.rows(), xv.cols());
        if start + width > c || mask.len() != m * width {
            return Err(Error::Shape(format!(
                "log-softmax block {start}+{width} of {:?} with mask {}",
                xv.shape(),
                mask.len()
            )));
        }
        let mut out = Tensor::filled(&[m, width], f64::NEG_INFINITY);
        for i in 0..m {
            let row = &xv.row(i)[start..start + width];
            let mrow = &mask[i * width..(i + 1) * width];
            let lse = super::tensor::masked_logsumexp(row, mrow);
            if !lse.is_finite() {
                return Err(Error::Numeric(format!(
                    "log-softmax row {i} has no legal entry or non-finite logits"
                )));
            }
            let orow = out.row_mut(i);
            for j in 0..width {
                if mrow[j] {
                    orow[j] = row[j] - lse;
                }
            }
        }
        Ok(self.push(out, Op::LogSoftmax { x, start, mask }))
    }

    /// Flat gather into a vector.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::Shape(format!("gather index {bad} of {}", xv.len())));
        }
        let out = Tensor::vector(index.iter().map(|&i| xv.data()[i]).collect());
        Ok(self.push(out, Op::Gather { x, index }))
    }

    pub fn linear(&mut self, inputs: Vec<Var>, map: LinearMap) -> Result<Var> {
        let mut out = Vec::with_capacity(map.rows());
        for r in 0..map.rows() {
            let mut acc = map.bias[r];
            for t in map.row(r) {
                let input = inputs.get(t.input as usize).ok_or_else(|| {
                    Error::Shape(format!("linear term refers to input {}", t.input))
                })?;
                let data = self.value(*input).data();
                let v = *data.get(t.index as usize).ok_or_else(|| {
                    Error::Shape(format!("linear term index {} of {}", t.index, data.len()))
                })?;
                acc += t.coef * v;
            }
            out.push(acc);
        }
        Ok(self.push(Tensor::vector(out), Op::Linear { inputs, map }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    pub fn logsumexp(&mut self, x: Var) -> Var {
        let s = super::tensor::logsumexp(self.value(x).data());
        self.push(Tensor::scalar(s), Op::LogSumExp(x))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                out.shape()
            )));
        }
        if !out.item().is_finite() {
            return Err(Error::Numeric(format!("loss is {}", out.item())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let ga = slot(&mut grads, *a, av);
                    gemm_nt(m, n, k, g.data(), bv.data(), ga.data_mut());
                    let gb = slot(&mut grads, *b, bv);
                    gemm_tn(k, m, n, av.data(), g.data(), gb.data_mut());
                }
                Op::AddRow(x, bias) => {
                    let n = self.value(*bias).len();
                    accumulate(slot(&mut grads, *x, self.value(*x)), g.data(), 1.0);
                    let gb = slot(&mut grads, *bias, self.value(*bias));
                    for (j, v) in g.data().iter().enumerate() {
                        gb.data_mut()[j % n] += v;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(slot(&mut grads, *a, self.value(*a)), g.data(), 1.0);
                    accumulate(slot(&mut grads, *b, self.value(*b)), g.data(), 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate(slot(&mut grads, *a, self.value(*a)), g.data(), 1.0);
                    accumulate(slot(&mut grads, *b, self.value(*b)), g.data(), -1.0);
                }
                Op::Scale(x, c) => {
                    accumulate(slot(&mut grads, *x, self.value(*x)), g.data(), *c);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let gx = slot(&mut grads, *x, xv);
                    for ((d, gv), xv) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let gx = slot(&mut grads, *x, self.value(*x));
                    for ((d, gv), yv) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
                Op::LogSoftmax { x, start, mask } => {
                    let y = &node.value;
                    let width = y.cols();
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let gx = slot(&mut grads, *x, xv);
                    for r in 0..y.rows() {
                        let mrow = &mask[r * width..(r + 1) * width];
                        let grow = g.row(r);
                        let total: f64 = grow
                            .iter()
                            .zip(mrow)
                            .filter(|(_, &m)| m)
                            .map(|(v, _)| *v)
                            .sum();
                        let yrow = y.row(r);
                        let dst = &mut gx.data_mut()[r * c + start..r * c + start + width];
                        for j in 0..width {
                            if mrow[j] {
                                dst[j] += grow[j] - yrow[j].exp() * total;
                            }
                        }
                    }
                }
                Op::Gather { x, index } => {
                    let gx = slot(&mut grads, *x, self.value(*x));
                    for (k, &i) in index.iter().enumerate() {
                        gx.data_mut()[i] += g.data()[k];
                    }
                }
                Op::Linear { inputs, map } => {
                    for r in 0..map.rows() {
                        let gr = g.data()[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for t in map.row(r) {
                            let v = inputs[t.input as usize];
                            let gv = slot(&mut grads, v, self.value(v));
                            gv.data_mut()[t.index as usize] += t.coef * gr;
                        }
                    }
                }
                Op::Square(x) => {
                    let xv = self.value(*x);
                    let gx = slot(&mut grads, *x, xv);
                    for ((d, gv), v) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *d += 2.0 * v * gv;
                    }
                }
                Op::Sum(x) => {
                    let gv = g.item();
                    for d in slot(&mut grads, *x, self.value(*x)).data_mut() {
                        *d += gv;
                    }
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len().max(1) as f64;
                    let gv = g.item() / n;
                    for d in slot(&mut grads, *x, self.value(*x)).data_mut() {
                        *d += gv;
                    }
                }
                Op::LogSumExp(x) => {
                    let lse = node.value.item();
                    let xv = self.value(*x);
                    let gv = g.item();
                    let gx = slot(&mut grads, *x, xv);
                    for (d, v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        *d += gv * (v - lse).exp();
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

fn accumulate(dst: &mut Tensor, src: &[f64], c: f64) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += c * s;
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; nodes the output does not depend on get zeros.
    pub fn get(&self, v: Var, tape: &Tape) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }

    /// Collects gradients for a list of leaves and checks they are finite.
    pub fn collect(&self, vars: &[Var], tape: &Tape) -> Result<Vec<Tensor>> {
        let out: Vec<Tensor> = vars.iter().map(|v| self.get(*v, tape)).collect();
        if out.iter().any(|g| !g.all_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Ok(out)
    }
}

/// Runs `build` on a fresh tape with `params` as leaves and returns the loss
/// value together with the gradient for each parameter.
pub fn grad<F>(params: &[Tensor], build: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = tape.value(out).item();
    let grads = tape.backward(out)?.collect(&vars, &tape)?;
    Ok((loss, grads))
}
