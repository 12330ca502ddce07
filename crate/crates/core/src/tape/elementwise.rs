use super::{Local, Op, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Broadcast layout of a binary op: output shape plus whether each operand
/// is a broadcast scalar.
struct Broadcast {
    shape: Vec<usize>,
    len: usize,
    a_scalar: bool,
    b_scalar: bool,
}

impl Tape {
    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.value(a), self.value(b));
        let (la, lb) = (sa.len(), sb.len());
        if sa.shape() == sb.shape() || (la == lb && la == 1) {
            return Ok(Broadcast {
                shape: sa.shape().to_vec(),
                len: la,
                a_scalar: false,
                b_scalar: false,
            });
        }
        if la == 1 {
            Ok(Broadcast {
                shape: sb.shape().to_vec(),
                len: lb,
                a_scalar: true,
                b_scalar: false,
            })
        } else if lb == 1 {
            Ok(Broadcast {
                shape: sa.shape().to_vec(),
                len: la,
                a_scalar: false,
                b_scalar: true,
            })
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.shape().to_vec(),
                rhs: sb.shape().to_vec(),
            })
        }
    }

    /// Generic binary op: `f(a, b) -> (value, d/da, d/db)`.
    fn binary_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> (f64, f64, f64),
    ) -> Result<Var> {
        let bc = self.broadcast(name, a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(bc.len);
        let mut da = Vec::with_capacity(bc.len);
        let mut db = Vec::with_capacity(bc.len);
        for i in 0..bc.len {
            let x = if bc.a_scalar { av[0] } else { av[i] };
            let y = if bc.b_scalar { bv[0] } else { bv[i] };
            let (v, ga, gb) = f(x, y);
            out.push(v);
            da.push(ga);
            db.push(gb);
        }
        let value = Tensor::new(bc.shape, out)?;
        self.push_op(name, value, &[a, b], || Op::Binary {
            a,
            b,
            da: Local::Values(da),
            db: Local::Values(db),
        })
    }

    /// Binary op whose partial derivatives are constants.
    fn binary_linear(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        ca: f64,
        cb: f64,
    ) -> Result<Var> {
        let bc = self.broadcast(name, a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = (0..bc.len)
            .map(|i| {
                let x = if bc.a_scalar { av[0] } else { av[i] };
                let y = if bc.b_scalar { bv[0] } else { bv[i] };
                ca * x + cb * y
            })
            .collect();
        let value = Tensor::new(bc.shape, out)?;
        self.push_op(name, value, &[a, b], || Op::Binary {
            a,
            b,
            da: Local::Const(ca),
            db: Local::Const(cb),
        })
    }

    /// Generic unary op: `f(x) -> (value, dy/dx)`.
    pub(crate) fn unary_with(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(f64) -> (f64, f64),
    ) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let (out, local): (Vec<f64>, Vec<f64>) = src.data().iter().map(|&v| f(v)).unzip();
        let value = Tensor::new(shape, out)?;
        self.push_op(name, value, &[x], || Op::Unary {
            x,
            local: Local::Values(local),
        })
    }

    pub(crate) fn unary_linear(
        &mut self,
        name: &'static str,
        x: Var,
        scale: f64,
        offset: f64,
    ) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + offset);
        self.push_op(name, value, &[x], || Op::Unary {
            x,
            local: Local::Const(scale),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_linear("add", a, b, 1.0, 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_linear("sub", a, b, 1.0, -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_with("mul", a, b, |x, y| (x * y, y, x))
    }

    /// Elementwise division; a zero divisor is a domain error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary_with("div", a, b, |x, y| (x / y, 1.0 / y, -x / (y * y)))
    }

    /// `c * x`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary_linear("scale", x, c, 0.0)
    }

    /// `x + c`.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary_linear("add_scalar", x, 1.0, c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary_linear("neg", x, -1.0, 0.0)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary_with("exp", x, |v| {
            let e = v.exp();
            (e, e)
        })
    }

    /// Natural log; nonpositive inputs are a domain error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::domain("log", "nonpositive operand"));
        }
        self.unary_with("log", x, |v| (v.ln(), 1.0 / v))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary_with("abs", x, |v| (v.abs(), super::sign0(v)))
    }

    /// `x^p` for a constant exponent.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary_with("powf", x, |v| (v.powf(p), p * v.powf(p - 1.0)))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::domain("sqrt", "nonpositive operand"));
        }
        self.powf(x, 0.5)
    }

    /// Clamp into `[lo, hi]`; gradient 1 inside the closed interval and
    /// 0 strictly outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary_with("clamp", x, |v| {
            if v < lo {
                (lo, 0.0)
            } else if v > hi {
                (hi, 0.0)
            } else {
                (v, 1.0)
            }
        })
    }

    /// Elementwise minimum; ties split the gradient evenly.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_with("minimum", a, b, |x, y| {
            if x < y {
                (x, 1.0, 0.0)
            } else if y < x {
                (y, 0.0, 1.0)
            } else {
                (x, 0.5, 0.5)
            }
        })
    }

    /// Elementwise maximum; ties split the gradient evenly.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_with("maximum", a, b, |x, y| {
            if x > y {
                (x, 1.0, 0.0)
            } else if y > x {
                (y, 0.0, 1.0)
            } else {
                (x, 0.5, 0.5)
            }
        })
    }

    /// `max(x, c)` for a constant `c`.
    pub fn max_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary_with("max_scalar", x, |v| {
            if v > c {
                (v, 1.0)
            } else if v < c {
                (c, 0.0)
            } else {
                (c, 0.5)
            }
        })
    }

    /// `min(x, c)` for a constant `c`.
    pub fn min_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary_with("min_scalar", x, |v| {
            if v < c {
                (v, 1.0)
            } else if v > c {
                (c, 0.0)
            } else {
                (c, 0.5)
            }
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary_with("relu", x, |v| if v > 0.0 { (v, 1.0) } else { (0.0, 0.0) })
    }

    /// `sign(x) * max(|x|, eps)`, with `sign(0) = +1`. Keeps a divisor away
    /// from zero; the gradient is 1 where `|x| > eps` and 0 elsewhere.
    pub fn magnitude_floor(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.unary_with("magnitude_floor", x, |v| {
            if v.abs() > eps {
                (v, 1.0)
            } else if v < 0.0 {
                (-eps, 0.0)
            } else {
                (eps, 0.0)
            }
        })
    }
}
