//! PSNR and SSIM on plain images with values in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tape::Tensor;

/// `10 log10(peak^2 / MSE)`; `f64::INFINITY` for identical images.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_TAPS: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_taps() -> [f64; SSIM_TAPS] {
    let mut t = [0.0; SSIM_TAPS];
    let c = (SSIM_TAPS / 2) as f64;
    for (i, v) in t.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Separable filtering over the valid region only.
fn filter_valid(v: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = taps.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * v[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity with an 11-tap Gaussian window
/// (`sigma = 1.5`), `K1 = 0.01`, `K2 = 0.03`, dynamic range 1, over the
/// positions where the window fits entirely inside the image.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (h, w) = a.hw()?;
    if h < SSIM_TAPS || w < SSIM_TAPS {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images of at least {SSIM_TAPS}x{SSIM_TAPS}, got {w}x{h}"
        )));
    }
    let taps = gaussian_taps();
    let (x, y) = (a.data(), b.data());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let (mx, _, _) = filter_valid(x, h, w, &taps);
    let (my, _, _) = filter_valid(y, h, w, &taps);
    let (sxx, _, _) = filter_valid(&xx, h, w, &taps);
    let (syy, _, _) = filter_valid(&yy, h, w, &taps);
    let (sxy, _, _) = filter_valid(&xy, h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}
