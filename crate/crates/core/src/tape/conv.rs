//! Spatial ops: 2-D convolution, per-pixel kernel application and constant
//! translation. Forward and backward kernels split work by output channel
//! (or input channel for the input gradient) so every output element is
//! reduced in a fixed order regardless of the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Op, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Border handling for spatial ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Replicate,
    Zero,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvRecord {
    x: Var,
    k: Var,
    padding: Padding,
    cin: usize,
    cout: usize,
    ks: usize,
    h: usize,
    w: usize,
    padded: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct KernelRecord {
    x: Var,
    k: Var,
    frames: usize,
    ks: usize,
    h: usize,
    w: usize,
    padded: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct TranslateRecord {
    x: Var,
    sx: f64,
    sy: f64,
    h: usize,
    w: usize,
}

/// Pads each `h x w` plane of `src` by `r` on every side.
fn pad_planes(src: &[f64], planes: usize, h: usize, w: usize, r: usize, mode: Padding) -> Vec<f64> {
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut out = vec![0.0; planes * ph * pw];
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ph * pw..(p + 1) * ph * pw];
        for py in 0..ph {
            let sy = match mode {
                Padding::Replicate => (py as isize - r as isize).clamp(0, h as isize - 1) as usize,
                Padding::Zero => {
                    if py < r || py >= r + h {
                        continue;
                    }
                    py - r
                }
            };
            for px in 0..pw {
                let sx = match mode {
                    Padding::Replicate => {
                        (px as isize - r as isize).clamp(0, w as isize - 1) as usize
                    }
                    Padding::Zero => {
                        if px < r || px >= r + w {
                            continue;
                        }
                        px - r
                    }
                };
                dst[py * pw + px] = plane[sy * w + sx];
            }
        }
    }
    out
}

/// Adjoint of [`pad_planes`]: folds a padded gradient back onto the
/// unpadded planes.
fn unpad_planes(gpad: &[f64], planes: usize, h: usize, w: usize, r: usize, mode: Padding) -> Vec<f64> {
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &gpad[p * ph * pw..(p + 1) * ph * pw];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for py in 0..ph {
            let iy = py as isize - r as isize;
            if mode == Padding::Zero && (iy < 0 || iy >= h as isize) {
                continue;
            }
            let sy = iy.clamp(0, h as isize - 1) as usize;
            for px in 0..pw {
                let ix = px as isize - r as isize;
                if mode == Padding::Zero && (ix < 0 || ix >= w as isize) {
                    continue;
                }
                let sx = ix.clamp(0, w as isize - 1) as usize;
                dst[sy * w + sx] += src[py * pw + px];
            }
        }
    }
    out
}

impl Tape {
    /// 2-D cross-correlation with "same" output size.
    ///
    /// Accepts an `[H, W]` image with a `[k, k]` kernel, or a `[C, H, W]`
    /// stack with a `[C_out, C, k, k]` kernel bank. `k` must be odd.
    pub fn conv2d(&mut self, x: Var, k: Var, padding: Padding) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ksh = self.value(k).shape().to_vec();
        let (cin, h, w, cout, ks, out_shape) = match (xs.as_slice(), ksh.as_slice()) {
            ([h, w], [a, b]) if a == b => (1, *h, *w, 1, *a, vec![*h, *w]),
            ([c, h, w], [co, ci, a, b]) if a == b && ci == c => {
                (*c, *h, *w, *co, *a, vec![*co, *h, *w])
            }
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: xs,
                    rhs: ksh,
                })
            }
        };
        if ks % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel side must be odd, got {ks}"
            )));
        }
        let r = ks / 2;
        let padded = pad_planes(self.value(x).data(), cin, h, w, r, padding);
        let kern = self.value(k).data();
        let pw = w + 2 * r;
        let plane_p = (h + 2 * r) * pw;
        let mut out = vec![0.0; cout * h * w];
        out.par_chunks_mut(h * w).enumerate().for_each(|(co, o)| {
            for ci in 0..cin {
                let src = &padded[ci * plane_p..(ci + 1) * plane_p];
                for ky in 0..ks {
                    for kx in 0..ks {
                        let wv = kern[((co * cin + ci) * ks + ky) * ks + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..h {
                            let row = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                            let orow = &mut o[y * w..(y + 1) * w];
                            for (ov, sv) in orow.iter_mut().zip(row) {
                                *ov += wv * sv;
                            }
                        }
                    }
                }
            }
        });
        let value = Tensor::new(out_shape, out)?;
        self.push_op("conv2d", value, &[x, k], || {
            Op::Conv2d(ConvRecord {
                x,
                k,
                padding,
                cin,
                cout,
                ks,
                h,
                w,
                padded,
            })
        })
    }

    /// Applies a separate `k x k` kernel at every pixel of every frame.
    ///
    /// `x` is `[F, H, W]` (or `[H, W]` for `F = 1`); `kernels` is
    /// `[F * k * k, H, W]` with entry `f*k*k + dy*k + dx` weighting the
    /// neighbour at offset `(dy - k/2, dx - k/2)`. Borders replicate.
    pub fn apply_kernels(&mut self, x: Var, kernels: Var, k: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (frames, h, w) = match xs.as_slice() {
            [h, w] => (1, *h, *w),
            [f, h, w] => (*f, *h, *w),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "apply_kernels needs an image stack, got {xs:?}"
                )))
            }
        };
        let ksh = self.value(kernels).shape().to_vec();
        if k % 2 == 0 || ksh != [frames * k * k, h, w] {
            return Err(Error::ShapeMismatch {
                op: "apply_kernels",
                lhs: xs,
                rhs: ksh,
            });
        }
        let r = k / 2;
        let padded = pad_planes(self.value(x).data(), frames, h, w, r, Padding::Replicate);
        let kern = self.value(kernels).data();
        let pw = w + 2 * r;
        let plane_p = (h + 2 * r) * pw;
        let mut out = vec![0.0; frames * h * w];
        for f in 0..frames {
            let src = &padded[f * plane_p..(f + 1) * plane_p];
            let o = &mut out[f * h * w..(f + 1) * h * w];
            for dy in 0..k {
                for dx in 0..k {
                    let kp = &kern[(f * k * k + dy * k + dx) * h * w..][..h * w];
                    for y in 0..h {
                        let row = &src[(y + dy) * pw + dx..(y + dy) * pw + dx + w];
                        let krow = &kp[y * w..(y + 1) * w];
                        let orow = &mut o[y * w..(y + 1) * w];
                        for ((ov, sv), kv) in orow.iter_mut().zip(row).zip(krow) {
                            *ov += kv * sv;
                        }
                    }
                }
            }
        }
        let out_shape = if xs.len() == 2 { vec![h, w] } else { vec![frames, h, w] };
        let value = Tensor::new(out_shape, out)?;
        self.push_op("apply_kernels", value, &[x, kernels], || {
            Op::ApplyKernels(KernelRecord {
                x,
                k: kernels,
                frames,
                ks: k,
                h,
                w,
                padded,
            })
        })
    }

    /// Resamples `x[H, W]` at `(col + sx, row + sy)` with bilinear weights;
    /// sample coordinates are clamped to the image (replicate border).
    pub fn translate(&mut self, x: Var, sx: f64, sy: f64) -> Result<Var> {
        let (h, w) = match self.value(x).shape() {
            [h, w] => (*h, *w),
            s => {
                return Err(Error::InvalidArgument(format!(
                    "translate needs an [H, W] image, got {s:?}"
                )))
            }
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; h * w];
        for_each_bilinear(h, w, sx, sy, |o, i, wt| out[o] += wt * src[i]);
        let value = Tensor::new(vec![h, w], out)?;
        self.push_op("translate", value, &[x], || {
            Op::Translate(TranslateRecord { x, sx, sy, h, w })
        })
    }
}

/// Visits `(output index, source index, weight)` triples of a clamped
/// bilinear translation.
fn for_each_bilinear(h: usize, w: usize, sx: f64, sy: f64, mut f: impl FnMut(usize, usize, f64)) {
    let axis = |p: usize, s: f64, n: usize| {
        let c = (p as f64 + s).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    for y in 0..h {
        let (y0, y1, fy) = axis(y, sy, h);
        for x in 0..w {
            let (x0, x1, fx) = axis(x, sx, w);
            let o = y * w + x;
            f(o, y0 * w + x0, (1.0 - fy) * (1.0 - fx));
            f(o, y0 * w + x1, (1.0 - fy) * fx);
            f(o, y1 * w + x0, fy * (1.0 - fx));
            f(o, y1 * w + x1, fy * fx);
        }
    }
}

/// Dot product with four interleaved partial sums, so the loop vectorizes
/// while the summation order stays fixed.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            lanes[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

pub(super) fn conv2d_backward(
    tape: &Tape,
    rec: &ConvRecord,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let ConvRecord {
        cin,
        cout,
        ks,
        h,
        w,
        ..
    } = *rec;
    let r = ks / 2;
    let pw = w + 2 * r;
    let plane_p = (h + 2 * r) * pw;

    if let Some(gk) = tape.grad_slot(rec.k, grads) {
        let padded = &rec.padded;
        gk.par_chunks_mut(cin * ks * ks)
            .enumerate()
            .for_each(|(co, gk_co)| {
                let go = &g[co * h * w..(co + 1) * h * w];
                for ci in 0..cin {
                    let src = &padded[ci * plane_p..(ci + 1) * plane_p];
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let mut acc = 0.0;
                            for y in 0..h {
                                let row = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                                let grow = &go[y * w..(y + 1) * w];
                                acc += dot(grow, row);
                            }
                            gk_co[(ci * ks + ky) * ks + kx] += acc;
                        }
                    }
                }
            });
    }

    if tape.requires_grad(rec.x) {
        let kern = tape.value(rec.k).data();
        let mut gpad = vec![0.0; cin * plane_p];
        gpad.par_chunks_mut(plane_p).enumerate().for_each(|(ci, gp)| {
            for co in 0..cout {
                let go = &g[co * h * w..(co + 1) * h * w];
                for ky in 0..ks {
                    for kx in 0..ks {
                        let wv = kern[((co * cin + ci) * ks + ky) * ks + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..h {
                            let prow = &mut gp[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                            let grow = &go[y * w..(y + 1) * w];
                            for (p, gv) in prow.iter_mut().zip(grow) {
                                *p += wv * gv;
                            }
                        }
                    }
                }
            }
        });
        let gin = unpad_planes(&gpad, cin, h, w, r, rec.padding);
        if let Some(gx) = tape.grad_slot(rec.x, grads) {
            for (a, b) in gx.iter_mut().zip(&gin) {
                *a += b;
            }
        }
    }
}

pub(super) fn apply_kernels_backward(
    tape: &Tape,
    rec: &KernelRecord,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let KernelRecord {
        frames, ks, h, w, ..
    } = *rec;
    let r = ks / 2;
    let pw = w + 2 * r;
    let plane_p = (h + 2 * r) * pw;

    if let Some(gk) = tape.grad_slot(rec.k, grads) {
        for f in 0..frames {
            let src = &rec.padded[f * plane_p..(f + 1) * plane_p];
            let go = &g[f * h * w..(f + 1) * h * w];
            for dy in 0..ks {
                for dx in 0..ks {
                    let gkp = &mut gk[(f * ks * ks + dy * ks + dx) * h * w..][..h * w];
                    for y in 0..h {
                        let row = &src[(y + dy) * pw + dx..(y + dy) * pw + dx + w];
                        for ((a, gv), sv) in gkp[y * w..(y + 1) * w]
                            .iter_mut()
                            .zip(&go[y * w..(y + 1) * w])
                            .zip(row)
                        {
                            *a += gv * sv;
                        }
                    }
                }
            }
        }
    }

    if tape.requires_grad(rec.x) {
        let kern = tape.value(rec.k).data();
        let mut gpad = vec![0.0; frames * plane_p];
        for f in 0..frames {
            let gp = &mut gpad[f * plane_p..(f + 1) * plane_p];
            let go = &g[f * h * w..(f + 1) * h * w];
            for dy in 0..ks {
                for dx in 0..ks {
                    let kp = &kern[(f * ks * ks + dy * ks + dx) * h * w..][..h * w];
                    for y in 0..h {
                        let prow = &mut gp[(y + dy) * pw + dx..(y + dy) * pw + dx + w];
                        for ((p, gv), kv) in prow
                            .iter_mut()
                            .zip(&go[y * w..(y + 1) * w])
                            .zip(&kp[y * w..(y + 1) * w])
                        {
                            *p += gv * kv;
                        }
                    }
                }
            }
        }
        let gin = unpad_planes(&gpad, frames, h, w, r, Padding::Replicate);
        if let Some(gx) = tape.grad_slot(rec.x, grads) {
            for (a, b) in gx.iter_mut().zip(&gin) {
                *a += b;
            }
        }
    }
}

pub(super) fn translate_backward(
    tape: &Tape,
    rec: &TranslateRecord,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    if let Some(gx) = tape.grad_slot(rec.x, grads) {
        for_each_bilinear(rec.h, rec.w, rec.sx, rec.sy, |o, i, wt| gx[i] += wt * g[o]);
    }
}
