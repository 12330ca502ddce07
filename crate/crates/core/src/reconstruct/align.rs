//! Global translational alignment by phase correlation.
//!
//! Shifts are estimated on plain values and then applied with the tape's
//! bilinear `translate`, so gradients reach the frames but not the shift
//! estimates.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tape::{Tape, Tensor, Var};

/// Estimated translation `moving(x) ~ reference(x - d)`, pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Shift {
    pub dx: f64,
    pub dy: f64,
    /// The frames carried no usable structure; the shift was set to zero.
    pub degenerate: bool,
}

fn fft2(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in buf.chunks_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

fn hann(n: usize, i: usize) -> f64 {
    if n < 2 {
        1.0
    } else {
        0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()
    }
}

fn prepare(img: &Tensor, window: bool) -> Result<(Vec<Complex64>, f64)> {
    let (h, w) = img.hw()?;
    let mean = img.mean();
    let var = img.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / img.len() as f64;
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let wt = if window { hann(h, i / w) * hann(w, i % w) } else { 1.0 };
            Complex64::new((v - mean) * wt, 0.0)
        })
        .collect();
    Ok((data, var))
}

/// Sub-pixel peak offset from three samples around a maximum.
fn parabolic(l: f64, c: f64, r: f64) -> f64 {
    let denom = l - 2.0 * c + r;
    if denom.abs() < 1e-300 {
        0.0
    } else {
        (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
    }
}

/// Phase-correlation estimate of the translation taking `reference` to
/// `moving`. `window` applies a Hann taper before the transform.
pub fn estimate_shift(reference: &Tensor, moving: &Tensor, window: bool) -> Result<Shift> {
    let (h, w) = reference.hw()?;
    if moving.hw()? != (h, w) {
        return Err(Error::ShapeMismatch {
            op: "estimate_shift",
            lhs: reference.shape().to_vec(),
            rhs: moving.shape().to_vec(),
        });
    }
    let (mut a, var_a) = prepare(reference, window)?;
    let (mut b, var_b) = prepare(moving, window)?;
    let scale = reference.data().iter().chain(moving.data()).fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = 1e-20 * scale * scale + 1e-300;
    if var_a <= floor || var_b <= floor {
        return Ok(Shift {
            degenerate: true,
            ..Shift::default()
        });
    }
    fft2(&mut a, h, w, false);
    fft2(&mut b, h, w, false);
    let peak_mag = a.iter().zip(&b).map(|(x, y)| x.norm() * y.norm()).fold(0.0, f64::max);
    let eps = 1e-12 * peak_mag;
    let mut r: Vec<Complex64> = a
        .iter()
        .zip(&b)
        .map(|(fa, fb)| {
            let c = fb * fa.conj();
            let m = c.norm();
            if m > eps {
                c / m
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    fft2(&mut r, h, w, true);

    let (mut best, mut best_v) = (0, f64::NEG_INFINITY);
    for (i, c) in r.iter().enumerate() {
        if c.re > best_v {
            best_v = c.re;
            best = i;
        }
    }
    let (py, px) = (best / w, best % w);
    let at = |y: usize, x: usize| r[(y % h) * w + (x % w)].re;
    let ox = parabolic(at(py, px + w - 1), best_v, at(py, px + 1));
    let oy = parabolic(at(py + h - 1, px), best_v, at(py + 1, px));
    let wrap = |p: usize, n: usize| if p > n / 2 { p as f64 - n as f64 } else { p as f64 };
    Ok(Shift {
        dx: wrap(px, w) + ox,
        dy: wrap(py, h) + oy,
        degenerate: false,
    })
}

/// The merge input and the shifts that produced it.
#[derive(Clone, Debug)]
pub struct Alignment {
    /// `[2n - 1, H, W]`: normalized frames, then aligned non-reference frames.
    pub stack: Var,
    /// Per frame; the reference's entry is zero.
    pub shifts: Vec<Shift>,
}

impl Alignment {
    pub fn any_degenerate(&self) -> bool {
        self.shifts.iter().any(|s| s.degenerate)
    }
}

/// Registers every non-reference frame to `frames[reference]` and builds
/// the merge stack.
pub fn align_burst(tape: &mut Tape, frames: &[Var], reference: usize) -> Result<Alignment> {
    if frames.is_empty() || reference >= frames.len() {
        return Err(Error::InvalidArgument(format!(
            "reference {reference} out of range for {} frames",
            frames.len()
        )));
    }
    let ref_img = tape.value(frames[reference]).clone();
    let mut shifts = vec![Shift::default(); frames.len()];
    let mut aligned = Vec::with_capacity(frames.len() - 1);
    for (i, &f) in frames.iter().enumerate() {
        if i == reference {
            continue;
        }
        let s = estimate_shift(&ref_img, tape.value(f), true)?;
        shifts[i] = s;
        aligned.push(tape.translate(f, s.dx, s.dy)?);
    }
    let mut parts = frames.to_vec();
    parts.extend(aligned);
    let stack = tape.stack(&parts)?;
    Ok(Alignment { stack, shifts })
}
