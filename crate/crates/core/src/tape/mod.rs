//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] owns every value computed during a forward pass. Each
//! operation appends a record holding whatever it needs for the backward
//! pass; [`Tape::backward`] then walks the records in strict reverse
//! insertion order and accumulates gradients additively, so a node consumed
//! by several operations receives the sum of all contributions.
//!
//! The vocabulary is deliberately fixed to what the acquisition pipeline
//! uses: elementwise arithmetic with scalar broadcasting, softmax,
//! reductions, a few structural ops, 2-D convolution, per-pixel kernel
//! application, constant sub-pixel translation, and the stochastic samplers
//! in [`stochastic`].
//!
//! ```
//! use exposim::tape::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.scalar(x), 6.0);
//! ```

mod conv;
mod elementwise;
pub mod gradcheck;
pub mod stochastic;
mod structural;
mod tensor;

pub use conv::Padding;
pub use stochastic::NoiseStream;
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Local derivative of an elementwise op, per output element.
#[derive(Clone, Debug)]
pub(crate) enum Local {
    Const(f64),
    Values(Vec<f64>),
}

impl Local {
    #[inline]
    fn at(&self, i: usize) -> f64 {
        match self {
            Local::Const(c) => *c,
            Local::Values(v) => v[i],
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    /// `y_i = f(x_i)` with `dy_i/dx_i` stored.
    Unary { x: Var, local: Local },
    /// Elementwise binary op; a scalar operand is broadcast.
    Binary {
        a: Var,
        b: Var,
        da: Local,
        db: Local,
    },
    Softmax { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    L1 { x: Var },
    /// Output is a contiguous flat range of the input.
    Slice { x: Var, offset: usize },
    /// Output is the flat concatenation of the parts.
    Concat { parts: Vec<Var> },
    Reshape { x: Var },
    /// `[F*g, rest..] -> [F, rest..]` summing groups of `g` leading slices.
    GroupSum { x: Var, group: usize },
    Conv2d(conv::ConvRecord),
    AddBias { x: Var, b: Var },
    ApplyKernels(conv::KernelRecord),
    Translate(conv::TranslateRecord),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
}

struct Record {
    op: Op,
    out: usize,
}

/// Recording structure for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    records: Vec<Record>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, false)
    }

    /// Inserts a value gradients are requested for.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_node(value, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded (differentiable) operations.
    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    fn push_node(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends an op result, rejecting non-finite values. The op is only
    /// recorded when at least one input requires a gradient.
    pub(crate) fn push_op(
        &mut self,
        name: &'static str,
        value: Tensor,
        inputs: &[Var],
        op: impl FnOnce() -> Op,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let out = self.push_node(value, requires_grad);
        if requires_grad {
            self.records.push(Record { op: op(), out: out.0 });
        }
        Ok(out)
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for rec in self.records.iter().rev() {
            let Some(g) = grads[rec.out].take() else {
                continue;
            };
            self.propagate(&rec.op, rec.out, &g, &mut grads);
            grads[rec.out] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Unary { x, local } => {
                if let Some(gx) = self.grad_slot(*x, grads) {
                    for (i, gi) in gx.iter_mut().enumerate() {
                        *gi += g[i] * local.at(i);
                    }
                }
            }
            Op::Binary { a, b, da, db } => {
                for (v, local) in [(*a, da), (*b, db)] {
                    if let Some(gv) = self.grad_slot(v, grads) {
                        if gv.len() == g.len() {
                            for (i, gi) in gv.iter_mut().enumerate() {
                                *gi += g[i] * local.at(i);
                            }
                        } else {
                            let s: f64 = g.iter().enumerate().map(|(i, &gi)| gi * local.at(i)).sum();
                            gv[0] += s;
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let s = self.nodes[out].value.data();
                let dot: f64 = g.iter().zip(s).map(|(a, b)| a * b).sum();
                if let Some(gx) = self.grad_slot(*x, grads) {
                    for i in 0..gx.len() {
                        gx[i] += s[i] * (g[i] - dot);
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.grad_slot(*x, grads) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(gx) = self.grad_slot(*x, grads) {
                    let c = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|v| *v += c);
                }
            }
            Op::L1 { x } => {
                let xv = self.nodes[x.0].value.data();
                if let Some(gx) = self.grad_slot(*x, grads) {
                    for (gi, &v) in gx.iter_mut().zip(xv) {
                        *gi += g[0] * sign0(v);
                    }
                }
            }
            Op::Slice { x, offset } => {
                if let Some(gx) = self.grad_slot(*x, grads) {
                    for (i, &gi) in g.iter().enumerate() {
                        gx[offset + i] += gi;
                    }
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    if let Some(gp) = self.grad_slot(*p, grads) {
                        for i in 0..n {
                            gp[i] += g[offset + i];
                        }
                    }
                    offset += n;
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.grad_slot(*x, grads) {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            Op::GroupSum { x, group } => {
                let inner = g.len() / (self.nodes[x.0].value.shape()[0] / group);
                if let Some(gx) = self.grad_slot(*x, grads) {
                    for (j, chunk) in gx.chunks_mut(inner).enumerate() {
                        let f = j / group;
                        for (a, b) in chunk.iter_mut().zip(&g[f * inner..(f + 1) * inner]) {
                            *a += b;
                        }
                    }
                }
            }
            Op::AddBias { x, b } => {
                let c = self.nodes[b.0].value.len();
                let inner = g.len() / c;
                if let Some(gx) = self.grad_slot(*x, grads) {
                    for (a, v) in gx.iter_mut().zip(g) {
                        *a += v;
                    }
                }
                if let Some(gb) = self.grad_slot(*b, grads) {
                    for (ch, gbc) in gb.iter_mut().enumerate() {
                        *gbc += g[ch * inner..(ch + 1) * inner].iter().sum::<f64>();
                    }
                }
            }
            Op::Conv2d(rec) => conv::conv2d_backward(self, rec, g, grads),
            Op::ApplyKernels(rec) => conv::apply_kernels_backward(self, rec, g, grads),
            Op::Translate(rec) => conv::translate_backward(self, rec, g, grads),
        }
    }

    /// Lazily allocated gradient buffer for `v`, or `None` when `v` does
    /// not require a gradient.
    fn grad_slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }
}

#[inline]
pub(crate) fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient store produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the output w.r.t. `v`; `None` when no path exists.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient w.r.t. `v`, zero-filled to `len` when no path exists.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.get(v).map(|g| g[0]).unwrap_or(0.0)
    }
}
