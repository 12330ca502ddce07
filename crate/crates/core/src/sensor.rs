//! Differentiable image formation: irradiance sequence and exposure window
//! in, quantized raw frame out.
//!
//! Per pixel the chain is
//!
//! ```text
//! flux      = wavelength * area * E / (h * c)                  photons/s
//! mean_e    = qe * integral of flux over [t_open, t_open + dt]  (trapezoid)
//! dark_e    = I0 * dt / q_e
//! collected = Poisson(mean_e + dark_e) + N(0, read_noise)
//! raw       = response(collected - dark_e)                     DN
//! pixel     = clamp(round(raw) / (2^bits - 1), 0, 1)
//! ```
//!
//! Everything is recorded on one [`Tape`], so the pixel values can be
//! differentiated with respect to the window bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::IrradianceSequence;
use crate::tape::stochastic::{check_gengs_rate, gengs_draw};
use crate::tape::{Local, NoiseStream, Op, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

pub const PLANCK: f64 = 6.626_070_15e-34;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;

/// Smallest Poisson rate handed to a sampler.
pub const MIN_RATE: f64 = 1e-12;

/// Physical camera constants, SI units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    /// Metres.
    pub wavelength: f64,
    /// Square metres.
    pub pixel_area: f64,
    pub quantum_efficiency: f64,
    /// Amperes.
    pub dark_current: f64,
    /// Electrons (standard deviation).
    pub read_noise: f64,
    /// Raw DN per electron.
    pub gain: f64,
    /// Electrons up to which the response is linear.
    pub linear_limit: f64,
    /// Electrons over which the response saturates past `linear_limit`.
    pub rolloff: f64,
    pub bits: u32,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self::with_full_well(550e-9, 25e-12, 0.6, 1e-18, 2.0, 3.5, 1000.0, 10)
    }
}

impl SensorSpec {
    /// Spec whose linear region ends at 90% of `full_well`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_full_well(
        wavelength: f64,
        pixel_area: f64,
        quantum_efficiency: f64,
        dark_current: f64,
        read_noise: f64,
        gain: f64,
        full_well: f64,
        bits: u32,
    ) -> Self {
        Self {
            wavelength,
            pixel_area,
            quantum_efficiency,
            dark_current,
            read_noise,
            gain,
            linear_limit: 0.9 * full_well,
            rolloff: 0.1 * full_well,
            bits,
        }
    }

    pub fn full_well(&self) -> f64 {
        self.linear_limit + self.rolloff
    }

    /// Largest raw code, `2^bits - 1`.
    pub fn max_code(&self) -> f64 {
        ((1u64 << self.bits) - 1) as f64
    }

    /// Photons per second per pixel for one W/m².
    pub fn photons_per_watt(&self) -> f64 {
        self.wavelength * self.pixel_area / (PLANCK * SPEED_OF_LIGHT)
    }

    /// Normalized DN per electron in the linear region.
    pub fn dn_per_electron(&self) -> f64 {
        self.gain / self.max_code()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("wavelength", self.wavelength),
            ("pixel_area", self.pixel_area),
            ("gain", self.gain),
            ("rolloff", self.rolloff),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("sensor.{name} must be positive, got {v}")));
            }
        }
        if !(self.quantum_efficiency > 0.0 && self.quantum_efficiency <= 1.0) {
            return Err(Error::Config(format!(
                "sensor.quantum_efficiency must be in (0, 1], got {}",
                self.quantum_efficiency
            )));
        }
        for (name, v) in [
            ("dark_current", self.dark_current),
            ("read_noise", self.read_noise),
            ("linear_limit", self.linear_limit),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("sensor.{name} must be nonnegative, got {v}")));
            }
        }
        if !(8..=16).contains(&self.bits) {
            return Err(Error::Config(format!("sensor.bits must be in 8..=16, got {}", self.bits)));
        }
        Ok(())
    }
}

/// Shot-noise sampler selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Relaxed Poisson below the electron threshold, Gaussian above.
    #[default]
    GengsBelowThreshold,
    GaussianOnly,
    /// True Poisson variates; gradients do not reach the rate.
    ExactPoissonNoGrad,
    /// No shot or read noise; for deterministic checks.
    Noiseless,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseMode {
    pub kind: NoiseKind,
    pub electron_threshold: f64,
    pub n_gengs: usize,
}

impl Default for NoiseMode {
    fn default() -> Self {
        Self {
            kind: NoiseKind::GengsBelowThreshold,
            electron_threshold: 1000.0,
            n_gengs: 1200,
        }
    }
}

impl NoiseMode {
    pub fn of(kind: NoiseKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }
}

/// `wavelength * area * E / (h * c)` elementwise.
pub fn photon_flux(irradiance: &Tensor, spec: &SensorSpec) -> Result<Tensor> {
    if irradiance.data().iter().any(|&e| e < 0.0) {
        return Err(Error::domain("photon_flux", "irradiance must be nonnegative"));
    }
    let k = spec.photons_per_watt();
    Ok(irradiance.map(|e| k * e))
}

/// Photon flux of every sequence sample plus running trapezoid integrals,
/// so any window integral costs one pass over the pixels.
#[derive(Clone, Debug)]
pub struct FluxSequence {
    flux: Vec<Vec<f64>>,
    cumulative: Vec<Vec<f64>>,
    step: f64,
    horizon: f64,
    height: usize,
    width: usize,
}

impl FluxSequence {
    pub fn new(seq: &IrradianceSequence, spec: &SensorSpec) -> Result<Self> {
        let n = seq.frames.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("sequence needs at least 2 samples, got {n}")));
        }
        let (height, width) = seq.frames[0].hw()?;
        let step = seq.horizon / (n - 1) as f64;
        let mut flux = Vec::with_capacity(n);
        for f in &seq.frames {
            if f.hw()? != (height, width) {
                return Err(Error::ShapeMismatch {
                    op: "flux_sequence",
                    lhs: seq.frames[0].shape().to_vec(),
                    rhs: f.shape().to_vec(),
                });
            }
            flux.push(photon_flux(f, spec)?.into_data());
        }
        let mut cumulative = Vec::with_capacity(n);
        cumulative.push(vec![0.0; height * width]);
        for k in 1..n {
            let prev = &cumulative[k - 1];
            let c: Vec<f64> = (0..height * width)
                .map(|p| prev[p] + 0.5 * step * (flux[k - 1][p] + flux[k][p]))
                .collect();
            cumulative.push(c);
        }
        Ok(Self {
            flux,
            cumulative,
            step,
            horizon: seq.horizon,
            height,
            width,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let last = self.flux.len() - 2;
        let u = (t / self.step).clamp(0.0, (last + 1) as f64);
        let k = (u.floor() as usize).min(last);
        (k, u - k as f64)
    }

    /// Linearly interpolated flux at `t`.
    pub fn flux_at(&self, t: f64) -> Vec<f64> {
        let (k, a) = self.locate(t);
        self.flux[k]
            .iter()
            .zip(&self.flux[k + 1])
            .map(|(f0, f1)| (1.0 - a) * f0 + a * f1)
            .collect()
    }

    /// Trapezoid integral of the flux from `0` to `t`, exact for the
    /// piecewise-linear interpolant.
    pub fn integral_to(&self, t: f64) -> Vec<f64> {
        let (k, a) = self.locate(t);
        let h = a * self.step;
        (0..self.height * self.width)
            .map(|p| {
                let f0 = self.flux[k][p];
                let ft = (1.0 - a) * f0 + a * self.flux[k + 1][p];
                self.cumulative[k][p] + 0.5 * h * (f0 + ft)
            })
            .collect()
    }

    fn check_window(&self, t_open: f64, dt: f64) -> Result<()> {
        let slack = 1e-12 * self.horizon;
        if !(dt >= 0.0) {
            return Err(Error::domain("integrate_exposure", format!("negative exposure {dt}")));
        }
        if t_open < -slack || t_open + dt > self.horizon + slack {
            return Err(Error::domain(
                "integrate_exposure",
                format!(
                    "window [{t_open}, {}] leaves the sequence horizon [0, {}]",
                    t_open + dt,
                    self.horizon
                ),
            ));
        }
        Ok(())
    }
}

/// Mean photoelectrons collected over `[t_open, t_open + dt]`, with
/// Leibniz-rule gradients to both scalar window nodes.
pub fn integrate_exposure(
    tape: &mut Tape,
    flux: &FluxSequence,
    spec: &SensorSpec,
    t_open: Var,
    dt: Var,
) -> Result<Var> {
    let a = tape.item(t_open);
    let d = tape.item(dt);
    flux.check_window(a, d)?;
    let b = a + d;
    let eta = spec.quantum_efficiency;
    let lo = flux.integral_to(a);
    let hi = flux.integral_to(b);
    let value: Vec<f64> = hi.iter().zip(&lo).map(|(h, l)| eta * (h - l)).collect();
    let f_start = flux.flux_at(a);
    let f_end = flux.flux_at(b);
    let value = Tensor::new(vec![flux.height, flux.width], value)?;
    tape.push_op("integrate_exposure", value, &[t_open, dt], || {
        let da = f_end.iter().zip(&f_start).map(|(e, s)| eta * (e - s)).collect();
        let db = f_end.iter().map(|e| eta * e).collect();
        Op::Binary {
            a: t_open,
            b: dt,
            da: Local::Values(da),
            db: Local::Values(db),
        }
    })
}

/// Mean dark electrons `I0 * dt / q_e`.
pub fn dark_mean(tape: &mut Tape, spec: &SensorSpec, dt: Var) -> Result<Var> {
    tape.scale(dt, spec.dark_current / ELEMENTARY_CHARGE)
}

/// One `N(rate, sqrt(rate))` draw with its pathwise derivative
/// `1 + z / (2 sqrt(rate))`.
fn gaussian_shot(rate: f64, stream: NoiseStream, index: usize) -> (f64, f64) {
    let z: f64 = stream.element_rng(index as u64).sample(StandardNormal);
    let s = rate.sqrt();
    (rate + s * z, 1.0 + z / (2.0 * s))
}

/// Shot-noise realization of a per-pixel Poisson rate.
pub fn sample_photoelectrons(
    tape: &mut Tape,
    rate: Var,
    mode: &NoiseMode,
    temperature: f64,
    stream: NoiseStream,
) -> Result<Var> {
    if let Some(&r) = tape.value(rate).data().iter().find(|&&r| !(r > 0.0)) {
        return Err(Error::domain("sample_photoelectrons", format!("rate must be positive, got {r}")));
    }
    match mode.kind {
        NoiseKind::Noiseless => Ok(rate),
        NoiseKind::ExactPoissonNoGrad => tape.sample_poisson_exact(rate, stream),
        NoiseKind::GaussianOnly => {
            tape.sample_pathwise("sample_photoelectrons", rate, |i, r| gaussian_shot(r, stream, i))
        }
        NoiseKind::GengsBelowThreshold => {
            if !(temperature > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "temperature must be positive, got {temperature}"
                )));
            }
            for &r in tape.value(rate).data() {
                if r < mode.electron_threshold {
                    check_gengs_rate(r, mode.n_gengs)?;
                }
            }
            let threshold = mode.electron_threshold;
            let bins = mode.n_gengs;
            tape.sample_pathwise("sample_photoelectrons", rate, |i, r| {
                if r < threshold {
                    gengs_draw(r, temperature, bins, &mut stream.element_rng(i as u64))
                } else {
                    gaussian_shot(r, stream, i)
                }
            })
        }
    }
}

/// Concave response `K * (min(e, t1) + t2 * (1 - exp(-(max(e, t1) - t1) / t2)))`,
/// linear up to `t1 = linear_limit` and saturating at `K * full_well`.
pub fn response(tape: &mut Tape, electrons: Var, spec: &SensorSpec) -> Result<Var> {
    let t1 = spec.linear_limit;
    let t2 = spec.rolloff;
    let linear = tape.min_scalar(electrons, t1)?;
    let over = tape.max_scalar(electrons, t1)?;
    let over = tape.add_scalar(over, -t1)?;
    let decay = tape.scale(over, -1.0 / t2)?;
    let decay = tape.exp(decay)?;
    let knee = tape.scale(decay, -t2)?;
    let knee = tape.add_scalar(knee, t2)?;
    let total = tape.add(linear, knee)?;
    tape.scale(total, spec.gain)
}

/// Plain-number [`response`].
pub fn response_value(e: f64, spec: &SensorSpec) -> f64 {
    let t1 = spec.linear_limit;
    let t2 = spec.rolloff;
    if e <= t1 {
        spec.gain * e
    } else {
        spec.gain * (t1 + (1.0 - (-(e - t1) / t2).exp()) * t2)
    }
}

/// `clamp(round(v) / (2^bits - 1), 0, 1)` with a straight-through round.
pub fn quantize(tape: &mut Tape, raw: Var, spec: &SensorSpec) -> Result<Var> {
    let r = tape.round_ste(raw)?;
    let s = tape.scale(r, 1.0 / spec.max_code())?;
    tape.clamp(s, 0.0, 1.0)
}

/// One captured frame.
#[derive(Clone, Copy, Debug)]
pub struct Frame {
    /// Normalized DN in `[0, 1]`, `[H, W]`.
    pub pixels: Var,
    /// Collected electrons before dark subtraction and response.
    pub electrons: Var,
    pub t_open: f64,
    pub dt: f64,
}

const SHOT_TAG: u64 = 0;
const READ_TAG: u64 = 1;

/// Captures one frame. `t_open` and `dt` are scalar nodes; noise comes from
/// `stream` split into independent shot and read streams.
#[allow(clippy::too_many_arguments)]
pub fn capture_frame(
    tape: &mut Tape,
    flux: &FluxSequence,
    spec: &SensorSpec,
    t_open: Var,
    dt: Var,
    mode: &NoiseMode,
    temperature: f64,
    stream: NoiseStream,
) -> Result<Frame> {
    let mean = integrate_exposure(tape, flux, spec, t_open, dt)?;
    let dark = dark_mean(tape, spec, dt)?;
    let rate = tape.add(mean, dark)?;
    let rate = tape.clamp(rate, MIN_RATE, f64::INFINITY)?;
    let shot = sample_photoelectrons(tape, rate, mode, temperature, stream.derive(SHOT_TAG))?;
    let electrons = if mode.kind == NoiseKind::Noiseless || spec.read_noise == 0.0 {
        shot
    } else {
        tape.sample_gaussian(
            shot,
            crate::tape::stochastic::Sigma::Const(spec.read_noise),
            stream.derive(READ_TAG),
        )?
    };
    let corrected = tape.sub(electrons, dark)?;
    let raw = response(tape, corrected, spec)?;
    let pixels = quantize(tape, raw, spec)?;
    Ok(Frame {
        pixels,
        electrons,
        t_open: tape.item(t_open),
        dt: tape.item(dt),
    })
}

/// Frames captured at a schedule's windows, in opening order.
#[derive(Clone, Debug)]
pub struct Burst {
    pub frames: Vec<Frame>,
    /// Exposure times `[n]` as a node, for normalization.
    pub dts: Var,
    pub horizon: f64,
}

impl Burst {
    /// Middle frame index, `floor(n / 2)`.
    pub fn reference_index(&self) -> usize {
        self.frames.len() / 2
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Captures every frame of `schedule`. Frame `i` draws noise from
/// `stream.derive(i)`.
pub fn capture_burst(
    tape: &mut Tape,
    flux: &FluxSequence,
    spec: &SensorSpec,
    schedule: &crate::schedule::ExposureSchedule,
    mode: &NoiseMode,
    temperature: f64,
    stream: NoiseStream,
) -> Result<Burst> {
    if (schedule.horizon - flux.horizon).abs() > 1e-12 * flux.horizon {
        return Err(Error::InvalidArgument(format!(
            "schedule horizon {} s does not match sequence horizon {} s",
            schedule.horizon, flux.horizon
        )));
    }
    let n = schedule.frames(tape);
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let t_open = tape.index(schedule.t_opens, i)?;
        let dt = tape.index(schedule.dts, i)?;
        frames.push(capture_frame(
            tape,
            flux,
            spec,
            t_open,
            dt,
            mode,
            temperature,
            stream.derive(i as u64),
        )?);
    }
    Ok(Burst {
        frames,
        dts: schedule.dts,
        horizon: schedule.horizon,
    })
}
