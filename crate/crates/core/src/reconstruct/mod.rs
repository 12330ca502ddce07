//! Burst reconstruction: exposure normalization, global alignment, per-pixel
//! kernel prediction, merging, losses and image metrics.
//!
//! The merge of a burst of `n` frames works on a stack of `2n - 1` images:
//! the `n` normalized frames followed by the `n - 1` non-reference frames
//! aligned to the reference (the middle frame).

mod align;
mod kpn;
mod metrics;

pub use align::{align_burst, estimate_shift, Alignment, Shift};
pub use kpn::{KpnVars, MiniKpn, PARAM_NAMES};
pub use metrics::{psnr, ssim};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensor::{photon_flux, Burst, SensorSpec};
use crate::tape::{Padding, Tape, Tensor, Var};

/// Display gamma exponent applied by [`gamma_correct`].
pub const DISPLAY_GAMMA: f64 = 2.2;

/// Smallest magnitude allowed for the annealed merge's normalizer.
pub const KAPPA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the Sobel term.
    pub mu: f64,
    /// Initial weight of the annealed-merge loss.
    pub beta: f64,
    /// Per-iteration decay of that weight.
    pub anneal_rate: f64,
    /// Below this the gamma curve continues linearly.
    pub gamma_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            beta: 100.0,
            anneal_rate: 0.9999886,
            gamma_eps: 1e-4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.anneal_rate > 0.0 && self.anneal_rate < 1.0) {
            return Err(Error::Config(format!(
                "loss.anneal_rate must be in (0, 1), got {}",
                self.anneal_rate
            )));
        }
        if !(self.mu >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "loss.mu and loss.beta must be nonnegative, got {} and {}",
                self.mu, self.beta
            )));
        }
        if !(self.gamma_eps > 0.0 && self.gamma_eps < 1.0) {
            return Err(Error::Config(format!("loss.gamma_eps must be in (0, 1), got {}", self.gamma_eps)));
        }
        Ok(())
    }

    /// `beta * anneal_rate^t`.
    pub fn anneal_coefficient(&self, iteration: u64) -> f64 {
        self.beta * self.anneal_rate.powf(iteration as f64)
    }
}

/// `x^(1/2.2)` above `eps`, continued linearly (matching value and slope)
/// below it; negative inputs are clamped to zero first.
pub fn gamma_correct(tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
    let p = 1.0 / DISPLAY_GAMMA;
    let slope = p * eps.powf(p - 1.0);
    let x = tape.clamp(x, 0.0, f64::INFINITY)?;
    let upper = tape.max_scalar(x, eps)?;
    let upper = tape.powf(upper, p)?;
    let lower = tape.min_scalar(x, eps)?;
    let lower = tape.add_scalar(lower, -eps)?;
    let lower = tape.scale(lower, slope)?;
    tape.add(upper, lower)
}

/// Plain-number [`gamma_correct`].
pub fn gamma_value(x: f64, eps: f64) -> f64 {
    let p = 1.0 / DISPLAY_GAMMA;
    let x = x.max(0.0);
    if x >= eps {
        x.powf(p)
    } else {
        eps.powf(p) + p * eps.powf(p - 1.0) * (x - eps)
    }
}

/// Scales frame `i` by `T / dt_i`, with the factor on the tape.
pub fn normalize_burst(tape: &mut Tape, burst: &Burst) -> Result<Vec<Var>> {
    let horizon = tape.scalar(burst.horizon);
    let mut out = Vec::with_capacity(burst.len());
    for (i, f) in burst.frames.iter().enumerate() {
        let dt = tape.index(burst.dts, i)?;
        if !(tape.item(dt) > 0.0) {
            return Err(Error::domain(
                "normalize_burst",
                format!("frame {i} has exposure {} s; normalization needs dt > 0", tape.item(dt)),
            ));
        }
        let factor = tape.div(horizon, dt)?;
        out.push(tape.mul(f.pixels, factor)?);
    }
    Ok(out)
}

/// A merged image before and after gamma.
#[derive(Clone, Copy, Debug)]
pub struct Merged {
    pub linear: Var,
    pub image: Var,
}

/// Applies each stack frame's per-pixel kernels, averages the `2n - 1`
/// results and gamma corrects.
pub fn merge(tape: &mut Tape, stack: Var, kernels: Var, k: usize, gamma_eps: f64) -> Result<Merged> {
    let frames = stack_frames(tape, stack)?;
    let applied = tape.apply_kernels(stack, kernels, k)?;
    let total = tape.sum0(applied)?;
    let linear = tape.scale(total, 1.0 / frames as f64)?;
    let image = gamma_correct(tape, linear, gamma_eps)?;
    Ok(Merged { linear, image })
}

fn stack_frames(tape: &Tape, stack: Var) -> Result<usize> {
    match tape.shape(stack) {
        [f, _, _] if f % 2 == 1 => Ok(*f),
        s => Err(Error::InvalidArgument(format!(
            "stack must be [2n - 1, H, W], got {s:?}"
        ))),
    }
}

/// Merge with each kernel collapsed to its sum (a 1x1 kernel), over the
/// reference frame and the aligned frames only, rescaled by the ratio of
/// all kernel sums `kappa` to the used ones `kappa_a`:
///
/// ```text
/// E_a = gamma( kappa / ((2n - 1) kappa_a) * (Y_ref s_ref + sum_i Y_i^a s_i^a) )
/// ```
///
/// `kappa_a` is kept at least [`KAPPA_FLOOR`] in magnitude.
pub fn annealed_merge(tape: &mut Tape, stack: Var, kernels: Var, k: usize, gamma_eps: f64) -> Result<Merged> {
    let frames = stack_frames(tape, stack)?;
    let n = frames.div_ceil(2);
    let reference = n / 2;
    let sums = tape.group_sum0(kernels, k * k)?;
    if tape.shape(sums)[0] != frames {
        return Err(Error::ShapeMismatch {
            op: "annealed_merge",
            lhs: tape.shape(stack).to_vec(),
            rhs: tape.shape(kernels).to_vec(),
        });
    }
    let kappa = tape.sum0(sums)?;
    let weighted = tape.mul(stack, sums)?;

    let ref_sum = tape.select0(sums, reference)?;
    let ref_term = tape.select0(weighted, reference)?;
    let (kappa_a, numerator) = if n > 1 {
        let aligned_sums = tape.slice0(sums, n, n - 1)?;
        let aligned_sums = tape.sum0(aligned_sums)?;
        let aligned_terms = tape.slice0(weighted, n, n - 1)?;
        let aligned_terms = tape.sum0(aligned_terms)?;
        (tape.add(ref_sum, aligned_sums)?, tape.add(ref_term, aligned_terms)?)
    } else {
        (ref_sum, ref_term)
    };
    let kappa_a = tape.magnitude_floor(kappa_a, KAPPA_FLOOR)?;
    let ratio = tape.div(kappa, kappa_a)?;
    let ratio = tape.scale(ratio, 1.0 / frames as f64)?;
    let linear = tape.mul(ratio, numerator)?;
    let image = gamma_correct(tape, linear, gamma_eps)?;
    Ok(Merged { linear, image })
}

/// Exposure-weighted mean of the reference and the aligned frames,
/// `sum_i dt_i Y_i / sum_i dt_i`, then gamma. No learned component.
pub fn average_merge(tape: &mut Tape, stack: Var, dts: Var, gamma_eps: f64) -> Result<Merged> {
    let frames = stack_frames(tape, stack)?;
    let n = frames.div_ceil(2);
    let reference = n / 2;
    let total = tape.sum(dts)?;
    let mut acc: Option<Var> = None;
    for i in 0..n {
        let slot = match i.cmp(&reference) {
            std::cmp::Ordering::Equal => reference,
            std::cmp::Ordering::Less => n + i,
            std::cmp::Ordering::Greater => n + i - 1,
        };
        let img = tape.select0(stack, slot)?;
        let dt = tape.index(dts, i)?;
        let w = tape.div(dt, total)?;
        let term = tape.mul(img, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    let linear = acc.expect("at least one frame");
    let image = gamma_correct(tape, linear, gamma_eps)?;
    Ok(Merged { linear, image })
}

/// Standard 3x3 Sobel pair, `[x, y]`.
pub fn sobel_kernels() -> [Tensor; 2] {
    let x = Tensor::new(vec![3, 3], vec![-1., 0., 1., -2., 0., 2., -1., 0., 1.]).expect("3x3");
    let y = Tensor::new(vec![3, 3], vec![-1., -2., -1., 0., 0., 0., 1., 2., 1.]).expect("3x3");
    [x, y]
}

/// `mean |E - G| + mu * mean |[Sx; Sy] * (E - G)|`, Sobel with replicate
/// borders.
pub fn loss_basic(tape: &mut Tape, estimate: Var, target: Var, mu: f64) -> Result<Var> {
    if tape.shape(estimate) != tape.shape(target) {
        return Err(Error::ShapeMismatch {
            op: "loss_basic",
            lhs: tape.shape(estimate).to_vec(),
            rhs: tape.shape(target).to_vec(),
        });
    }
    let diff = tape.sub(estimate, target)?;
    let pixel = tape.mean_abs(diff)?;
    if mu == 0.0 {
        return Ok(pixel);
    }
    let [sx, sy] = sobel_kernels();
    let kx = tape.constant(sx);
    let ky = tape.constant(sy);
    let gx = tape.conv2d(diff, kx, Padding::Replicate)?;
    let gy = tape.conv2d(diff, ky, Padding::Replicate)?;
    let grad = tape.stack(&[gx, gy])?;
    let edge = tape.mean_abs(grad)?;
    let edge = tape.scale(edge, mu)?;
    tape.add(pixel, edge)
}

/// `loss_basic(E, G) + beta * rate^t * loss_basic(E_a, G)`; the coefficient
/// is a constant.
pub fn loss_total(
    tape: &mut Tape,
    estimate: Var,
    annealed: Var,
    target: Var,
    cfg: &LossConfig,
    iteration: u64,
) -> Result<Var> {
    let main = loss_basic(tape, estimate, target, cfg.mu)?;
    let coef = cfg.anneal_coefficient(iteration);
    if coef == 0.0 {
        return Ok(main);
    }
    let aux = loss_basic(tape, annealed, target, cfg.mu)?;
    let aux = tape.scale(aux, coef)?;
    tape.add(main, aux)
}

/// The reconstruction target for a ground-truth irradiance: the noise-free
/// linear DN a single exposure over the whole budget would record
/// (clipped to `[0, 1]`), gamma corrected.
pub fn target_image(irradiance: &Tensor, spec: &SensorSpec, horizon: f64, gamma_eps: f64) -> Result<Tensor> {
    let scale = spec.quantum_efficiency * horizon * spec.dn_per_electron();
    let flux = photon_flux(irradiance, spec)?;
    Ok(flux.map(|g| gamma_value((scale * g).clamp(0.0, 1.0), gamma_eps)))
}

/// Which merge turns a burst into an image.
#[derive(Clone, Debug)]
pub enum Reconstructor {
    AverageMerge,
    Kpn(MiniKpn),
}

/// Output of [`reconstruct_burst`].
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub merged: Merged,
    /// Present for the kernel predictor only.
    pub annealed: Option<Merged>,
    pub alignment: Alignment,
}

/// Normalize, align and merge. `model` holds the predictor's parameters
/// already bound to `tape` (required for [`Reconstructor::Kpn`]).
pub fn reconstruct_burst(
    tape: &mut Tape,
    burst: &Burst,
    model: Option<&KpnVars>,
    gamma_eps: f64,
) -> Result<Reconstruction> {
    let normalized = normalize_burst(tape, burst)?;
    let alignment = align_burst(tape, &normalized, burst.reference_index())?;
    match model {
        None => {
            let merged = average_merge(tape, alignment.stack, burst.dts, gamma_eps)?;
            Ok(Reconstruction {
                merged,
                annealed: None,
                alignment,
            })
        }
        Some(vars) => {
            let kernels = vars.predict_kernels(tape, alignment.stack)?;
            let merged = merge(tape, alignment.stack, kernels, vars.kernel_side, gamma_eps)?;
            let annealed = annealed_merge(tape, alignment.stack, kernels, vars.kernel_side, gamma_eps)?;
            Ok(Reconstruction {
                merged,
                annealed: Some(annealed),
                alignment,
            })
        }
    }
}

/// Per-pixel delta kernels for a `frames`-deep stack (center tap 1).
pub fn delta_kernels(frames: usize, k: usize, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(&[frames * k * k, h, w]);
    let center = (k / 2) * k + k / 2;
    for f in 0..frames {
        let ch = f * k * k + center;
        t.data_mut()[ch * h * w..(ch + 1) * h * w].fill(1.0);
    }
    t
}
