use super::{Op, Tape, Tensor, Var};
use crate::error::{Error, Result};

impl Tape {
    /// Softmax of a 1-D vector, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.shape().len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "softmax needs a 1-D input, got {:?}",
                src.shape()
            )));
        }
        if src.is_empty() {
            return Err(Error::InvalidArgument("softmax of an empty vector".into()));
        }
        let m = src.max();
        let e: Vec<f64> = src.data().iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let value = Tensor::vector(e.into_iter().map(|v| v / z).collect());
        self.push_op("softmax", value, &[x], || Op::Softmax { x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push_op("sum", value, &[x], || Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mean());
        self.push_op("mean", value, &[x], || Op::Mean { x })
    }

    /// `sum |x|`; the backward pass uses `sign(x)` with `sign(0) = 0`.
    pub fn l1_norm(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().map(|v| v.abs()).sum());
        self.push_op("l1_norm", value, &[x], || Op::L1 { x })
    }

    /// Mean absolute value.
    pub fn mean_abs(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let l1 = self.l1_norm(x)?;
        self.scale(l1, 1.0 / n)
    }

    /// Element `i` of the flattened input, as a scalar.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let n = self.value(x).len();
        if i >= n {
            return Err(Error::InvalidArgument(format!("index {i} out of range {n}")));
        }
        self.slice_flat(x, i, 1, Vec::new())
    }

    /// `len` slices along the leading axis starting at `start`.
    pub fn slice0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} out of range for shape {shape:?}",
                start + len
            )));
        }
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        self.slice_flat(x, start * inner, len * inner, out_shape)
    }

    /// Single leading-axis slice with that axis dropped.
    pub fn select0(&mut self, x: Var, i: usize) -> Result<Var> {
        let s = self.slice0(x, i, 1)?;
        let shape = self.value(s).shape()[1..].to_vec();
        self.reshape(s, shape)
    }

    fn slice_flat(&mut self, x: Var, offset: usize, len: usize, shape: Vec<usize>) -> Result<Var> {
        let data = self.value(x).data()[offset..offset + len].to_vec();
        let value = Tensor::new(shape, data)?;
        self.push_op("slice", value, &[x], || Op::Slice { x, offset })
    }

    /// Flat concatenation of 1-D (or scalar) parts into a vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::vector(data);
        self.push_op("concat", value, parts, || Op::Concat {
            parts: parts.to_vec(),
        })
    }

    /// Stacks equally shaped parts along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("stack of zero tensors".into()));
        };
        let inner_shape = self.value(first).shape().to_vec();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape() != inner_shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: inner_shape,
                    rhs: v.shape().to_vec(),
                });
            }
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner_shape);
        let value = Tensor::new(shape, data)?;
        self.push_op("stack", value, parts, || Op::Concat {
            parts: parts.to_vec(),
        })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push_op("reshape", value, &[x], || Op::Reshape { x })
    }

    /// Sums consecutive groups of `group` leading slices:
    /// `[F*group, rest..] -> [F, rest..]`.
    pub fn group_sum0(&mut self, x: Var, group: usize) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape();
        if shape.is_empty() || group == 0 || shape[0] % group != 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot group leading axis of {shape:?} by {group}"
            )));
        }
        let inner: usize = shape[1..].iter().product();
        let groups = shape[0] / group;
        let mut out = vec![0.0; groups * inner];
        for (j, chunk) in src.data().chunks(inner).enumerate() {
            let f = j / group;
            for (o, v) in out[f * inner..(f + 1) * inner].iter_mut().zip(chunk) {
                *o += v;
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = groups;
        let value = Tensor::new(out_shape, out)?;
        self.push_op("group_sum0", value, &[x], || Op::GroupSum { x, group })
    }

    /// Sum over the leading axis.
    pub fn sum0(&mut self, x: Var) -> Result<Var> {
        let lead = *self.value(x).shape().first().unwrap_or(&1);
        let s = self.group_sum0(x, lead)?;
        let shape = self.value(s).shape()[1..].to_vec();
        self.reshape(s, shape)
    }

    /// Adds a per-channel bias `b[C]` to `x[C, ..]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x), self.value(b));
        let c = bs.len();
        if xs.shape().first() != Some(&c) {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: xs.shape().to_vec(),
                rhs: bs.shape().to_vec(),
            });
        }
        let inner = xs.len() / c;
        let mut out = xs.data().to_vec();
        for (ch, chunk) in out.chunks_mut(inner).enumerate() {
            let bv = bs.data()[ch];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let value = Tensor::new(xs.shape().to_vec(), out)?;
        self.push_op("add_bias", value, &[x, b], || Op::AddBias { x, b })
    }
}
