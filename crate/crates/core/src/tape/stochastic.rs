//! Stochastic and non-smooth nodes with pathwise gradients.
//!
//! Random draws are made once at forward time from counter-based streams
//! (one generator per element index) and kept on the tape; the backward
//! pass treats them as constants. Results therefore depend only on the
//! stream key and the element index, not on iteration order.

use rand::distr::Open01;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rand_pcg::Pcg64Mcg;
use statrs::function::gamma::ln_gamma;

use super::{Local, Op, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Bins whose log-probability falls this far below the mode's are skipped
/// when relaxing a Poisson draw. An excluded bin could only matter if its
/// Gumbel perturbation exceeded roughly this margin, which has probability
/// below `1e-16` per bin.
const GENGS_LOG_WINDOW: f64 = 60.0;

/// Largest tolerated truncated Poisson tail mass.
const GENGS_MAX_TAIL: f64 = 1e-6;

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based random stream: each element index gets its own generator
/// derived from `(key, index)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseStream {
    key: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self { key: mix64(seed) }
    }

    /// Independent child stream identified by `tag`.
    pub fn derive(self, tag: u64) -> Self {
        Self {
            key: mix64(self.key ^ mix64(tag.wrapping_add(0x632B_E59B_D9B4_E019))),
        }
    }

    pub fn key(self) -> u64 {
        self.key
    }

    /// Generator for element `index`.
    pub fn element_rng(self, index: u64) -> Pcg64Mcg {
        let hi = mix64(self.key ^ mix64(index));
        let lo = mix64(hi ^ 0xD1B5_4A32_D192_ED03 ^ index);
        Pcg64Mcg::new(((hi as u128) << 64) | lo as u128)
    }
}

/// Standard deviation argument of [`Tape::sample_gaussian`].
#[derive(Clone, Copy, Debug)]
pub enum Sigma {
    Const(f64),
    Node(Var),
}

/// One draw from a Poisson distribution truncated to `{0, .., n_bins - 1}`,
/// with a relaxed pathwise derivative. Returns `(sample, d sample / d rate)`.
///
/// The forward value is the Gumbel-max category `argmax_k (log p_k + g_k)`,
/// an exact draw from the truncated pmf. The derivative is that of the
/// relaxed sample `sum_k k * softmax_k((log p_k + g_k) / temperature)`
/// under the same Gumbels (straight-through). Because
/// `d log p_k / d rate = k / rate - 1 + c` with `c` constant over `k`, it
/// reduces to `Var_s(k) / (temperature * rate)` under the softmax weights.
pub fn gengs_draw(rate: f64, temperature: f64, n_bins: usize, rng: &mut impl Rng) -> (f64, f64) {
    let ln_rate = rate.ln();
    let mode = (rate.floor() as usize).min(n_bins - 1);
    let lp_mode = mode as f64 * ln_rate - rate - ln_gamma(mode as f64 + 1.0);

    let mut lo = mode;
    let mut lp_lo = lp_mode;
    while lo > 0 {
        let next = lp_lo - ln_rate + (lo as f64).ln();
        if next < lp_mode - GENGS_LOG_WINDOW {
            break;
        }
        lo -= 1;
        lp_lo = next;
    }

    let mut logits = Vec::with_capacity(2 * (mode - lo) + 8);
    let mut lp = lp_lo;
    let mut k = lo;
    loop {
        let u: f64 = rng.sample(Open01);
        let g = -(-u.ln()).ln();
        logits.push((lp + g) / temperature);
        if k + 1 >= n_bins {
            break;
        }
        let next = lp + ln_rate - ((k + 1) as f64).ln();
        if k >= mode && next < lp_mode - GENGS_LOG_WINDOW {
            break;
        }
        lp = next;
        k += 1;
    }

    let (hard, m) = logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bm), (j, &l)| if l > bm { (j, l) } else { (bi, bm) });
    let mut z = 0.0;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for (j, &l) in logits.iter().enumerate() {
        let s = (l - m).exp();
        // offsets from `lo` keep the variance free of cancellation
        let d = j as f64;
        z += s;
        m1 += s * d;
        m2 += s * d * d;
    }
    let mean_off = m1 / z;
    let var = (m2 / z - mean_off * mean_off).max(0.0);
    ((lo + hard) as f64, var / (temperature * rate))
}

/// Natural log of an upper bound on `P(X >= n)` for `X ~ Poisson(rate)`,
/// or `0` when no useful bound exists (`n <= rate + 1`).
pub fn poisson_log_tail_bound(rate: f64, n: usize) -> f64 {
    let nf = n as f64;
    if nf <= rate + 1.0 {
        return 0.0;
    }
    let log_pn = nf * rate.ln() - rate - ln_gamma(nf + 1.0);
    log_pn - (1.0 - rate / (nf + 1.0)).ln()
}

impl Tape {
    /// Rounds half away from zero; the backward pass is the identity
    /// (straight-through estimator).
    pub fn round_ste(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::round);
        self.push_op("round_ste", value, &[x], || Op::Unary {
            x,
            local: Local::Const(1.0),
        })
    }

    /// `mean + sigma * z` with `z ~ N(0, 1)` fixed on the tape.
    /// Gradients: `1` w.r.t. the mean, `z` w.r.t. a node sigma.
    pub fn sample_gaussian(&mut self, mean: Var, sigma: Sigma, stream: NoiseStream) -> Result<Var> {
        let n = self.value(mean).len();
        let shape = self.value(mean).shape().to_vec();
        let z: Vec<f64> = (0..n as u64)
            .map(|i| stream.element_rng(i).sample(StandardNormal))
            .collect();
        match sigma {
            Sigma::Const(s) => {
                if s < 0.0 {
                    return Err(Error::domain("sample_gaussian", "negative sigma"));
                }
                let m = self.value(mean).data();
                let data = m.iter().zip(&z).map(|(a, b)| a + s * b).collect();
                let value = Tensor::new(shape, data)?;
                self.push_op("sample_gaussian", value, &[mean], || Op::Unary {
                    x: mean,
                    local: Local::Const(1.0),
                })
            }
            Sigma::Node(sv) => {
                let sd = self.value(sv).data();
                if sd.iter().any(|&s| s < 0.0) {
                    return Err(Error::domain("sample_gaussian", "negative sigma"));
                }
                let scalar = sd.len() == 1;
                if !scalar && sd.len() != n {
                    return Err(Error::ShapeMismatch {
                        op: "sample_gaussian",
                        lhs: shape,
                        rhs: self.value(sv).shape().to_vec(),
                    });
                }
                let m = self.value(mean).data();
                let data = (0..n)
                    .map(|i| m[i] + if scalar { sd[0] } else { sd[i] } * z[i])
                    .collect();
                let value = Tensor::new(shape, data)?;
                self.push_op("sample_gaussian", value, &[mean, sv], || Op::Binary {
                    a: mean,
                    b: sv,
                    da: Local::Const(1.0),
                    db: Local::Values(z),
                })
            }
        }
    }

    /// Poisson sample per element over the truncated support
    /// `{0, .., n_bins - 1}`, differentiable through [`gengs_draw`].
    pub fn sample_gengs(
        &mut self,
        rate: Var,
        temperature: f64,
        n_bins: usize,
        stream: NoiseStream,
    ) -> Result<Var> {
        if n_bins < 2 {
            return Err(Error::InvalidArgument(format!("n_bins must be >= 2, got {n_bins}")));
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let rates = self.value(rate).data();
        for &r in rates {
            check_gengs_rate(r, n_bins)?;
        }
        self.sample_pathwise("sample_gengs", rate, |i, r| {
            gengs_draw(r, temperature, n_bins, &mut stream.element_rng(i as u64))
        })
    }

    /// Exact Poisson variates. The result is a constant: no gradient flows
    /// back to the rate.
    pub fn sample_poisson_exact(&mut self, rate: Var, stream: NoiseStream) -> Result<Var> {
        let src = self.value(rate);
        let mut data = Vec::with_capacity(src.len());
        for (i, &r) in src.data().iter().enumerate() {
            data.push(poisson_draw(r, stream, i as u64)?);
        }
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.constant(value))
    }

    /// Elementwise sampler with a user supplied `(index, input) -> (sample,
    /// d sample / d input)` rule.
    pub(crate) fn sample_pathwise(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(usize, f64) -> (f64, f64),
    ) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let (out, local): (Vec<f64>, Vec<f64>) =
            src.data().iter().enumerate().map(|(i, &v)| f(i, v)).unzip();
        let value = Tensor::new(shape, out)?;
        self.push_op(name, value, &[x], || Op::Unary {
            x,
            local: Local::Values(local),
        })
    }
}

pub(crate) fn check_gengs_rate(rate: f64, n_bins: usize) -> Result<()> {
    if !(rate > 0.0) {
        return Err(Error::domain("sample_gengs", format!("rate must be positive, got {rate}")));
    }
    if poisson_log_tail_bound(rate, n_bins) > GENGS_MAX_TAIL.ln() {
        return Err(Error::domain(
            "sample_gengs",
            format!(
                "rate {rate} loses more than {GENGS_MAX_TAIL:e} of its mass outside {n_bins} bins; \
                 use the Gaussian mode for rates this large"
            ),
        ));
    }
    Ok(())
}

pub(crate) fn poisson_draw(rate: f64, stream: NoiseStream, index: u64) -> Result<f64> {
    let dist = Poisson::new(rate)
        .map_err(|e| Error::domain("sample_poisson", format!("rate {rate}: {e}")))?;
    Ok(dist.sample(&mut stream.element_rng(index)))
}
