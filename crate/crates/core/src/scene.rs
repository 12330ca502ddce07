//! Procedural scenes, rotational camera shake and dense irradiance
//! sequences.
//!
//! A scene is a nonnegative texture rendered at twice the output resolution
//! plus a safety margin. The camera follows a random walk of small 3-D
//! rotations; sample `k` of the sequence is the scene warped by the
//! homography `H_k = K R_k K^-1`, center-cropped, low-passed with the
//! separable `[1, 4, 6, 4, 1] / 16` filter and decimated by two.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_pcg::Pcg64Mcg;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Tensor;

/// Uniformly time-sampled irradiance over `[0, horizon]`, W/m².
#[derive(Clone, Debug, PartialEq)]
pub struct IrradianceSequence {
    pub frames: Vec<Tensor>,
    pub horizon: f64,
}

impl IrradianceSequence {
    pub fn new(frames: Vec<Tensor>, horizon: f64) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a sequence needs at least 2 samples, got {}",
                frames.len()
            )));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        let hw = frames[0].hw()?;
        for f in &frames {
            if f.hw()? != hw {
                return Err(Error::ShapeMismatch {
                    op: "irradiance_sequence",
                    lhs: frames[0].shape().to_vec(),
                    rhs: f.shape().to_vec(),
                });
            }
            if f.data().iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::domain("irradiance_sequence", "irradiance must be nonnegative"));
            }
        }
        Ok(Self { frames, horizon })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Sample times `k * T / (N - 1)`.
    pub fn timestamps(&self) -> Vec<f64> {
        let n = self.frames.len();
        (0..n).map(|k| k as f64 * self.horizon / (n - 1) as f64).collect()
    }

    /// The middle sample, `(N - 1) / 2`.
    pub fn ground_truth(&self) -> &Tensor {
        &self.frames[(self.frames.len() - 1) / 2]
    }

    pub fn hw(&self) -> (usize, usize) {
        self.frames[0].hw().expect("frames are 2-D")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Checkerboard,
    GaussianBlobs,
    FilteredNoise,
    #[default]
    Composite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub kind: SceneKind,
    /// Peak irradiance is drawn uniformly from `[lo, hi]`, W/m².
    pub irradiance_range: [f64; 2],
    /// Output side length in pixels.
    pub size: usize,
    /// Extra scene border, in render pixels (twice the output resolution),
    /// available to the warp on each side.
    pub margin: usize,
    /// Sequence samples `N`; must be odd.
    pub samples: usize,
    /// Checker square side in render pixels.
    pub checker_period: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            kind: SceneKind::Composite,
            irradiance_range: [1.0e-3, 2.0e-3],
            size: 64,
            margin: 32,
            samples: 241,
            checker_period: 12,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.irradiance_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!(
                "scene.irradiance_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
            )));
        }
        if self.size < 8 {
            return Err(Error::Config(format!("scene.size must be at least 8, got {}", self.size)));
        }
        if self.samples < 3 || self.samples % 2 == 0 {
            return Err(Error::Config(format!(
                "scene.samples must be odd and at least 3, got {}",
                self.samples
            )));
        }
        if self.checker_period == 0 {
            return Err(Error::Config("scene.checker_period must be positive".into()));
        }
        Ok(())
    }

    /// Side length of the generated scene in render pixels.
    pub fn render_side(&self) -> usize {
        2 * self.size + 2 * self.margin
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionConfig {
    /// Focal length in render pixels.
    pub focal_px: f64,
    /// Per-axis rotation bound per sequence step, radians.
    pub max_step_angle: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            focal_px: 200.0,
            max_step_angle: 0.004,
        }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_px > 0.0) {
            return Err(Error::Config(format!("motion.focal_px must be positive, got {}", self.focal_px)));
        }
        if !(self.max_step_angle >= 0.0 && self.max_step_angle.is_finite()) {
            return Err(Error::Config(format!(
                "motion.max_step_angle must be nonnegative, got {}",
                self.max_step_angle
            )));
        }
        Ok(())
    }
}

fn normalize_range(v: &mut [f64], lo: f64, hi: f64) {
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-300);
    for x in v.iter_mut() {
        *x = lo + (hi - lo) * (*x - min) / span;
    }
}

fn checkerboard(side: usize, period: usize, rng: &mut impl Rng) -> Vec<f64> {
    let ox = rng.random_range(0..period);
    let oy = rng.random_range(0..period);
    let mut v = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let parity = ((x + ox) / period + (y + oy) / period) % 2;
            v[y * side + x] = if parity == 0 { 0.15 } else { 1.0 };
        }
    }
    v
}

fn gaussian_blobs(side: usize, rng: &mut impl Rng) -> Vec<f64> {
    let s = side as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..12)
        .map(|_| {
            (
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(0.04 * s..0.15 * s),
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    let mut v = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let mut acc = 0.0;
            for &(cx, cy, sig, amp) in &blobs {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                acc += amp * (-d2 / (2.0 * sig * sig)).exp();
            }
            v[y * side + x] = acc;
        }
    }
    normalize_range(&mut v, 0.05, 1.0);
    v
}

/// Separable binomial blur with replicate borders.
fn blur(v: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = taps.len() as isize / 2;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += t * v[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += t * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn filtered_noise(side: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..side * side).map(|_| rng.sample(StandardNormal)).collect();
    for _ in 0..4 {
        v = blur(&v, side, side, &BINOMIAL5);
    }
    normalize_range(&mut v, 0.05, 1.0);
    v
}

/// Procedural texture scaled to a peak drawn from the irradiance range.
/// Returned at render resolution ([`SceneConfig::render_side`]).
pub fn make_scene(cfg: &SceneConfig, rng: &mut impl Rng) -> Result<Tensor> {
    cfg.validate()?;
    let side = cfg.render_side();
    let texture = match cfg.kind {
        SceneKind::Checkerboard => checkerboard(side, cfg.checker_period, rng),
        SceneKind::GaussianBlobs => gaussian_blobs(side, rng),
        SceneKind::FilteredNoise => filtered_noise(side, rng),
        SceneKind::Composite => {
            let c = checkerboard(side, cfg.checker_period, rng);
            let b = gaussian_blobs(side, rng);
            let n = filtered_noise(side, rng);
            let mut v: Vec<f64> = (0..side * side).map(|i| 0.5 * c[i] + 0.3 * b[i] + 0.2 * n[i]).collect();
            normalize_range(&mut v, 0.05, 1.0);
            v
        }
    };
    let [lo, hi] = cfg.irradiance_range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    Tensor::new(vec![side, side], texture.into_iter().map(|v| v * scale).collect())
}

/// Camera intrinsics with the principal point at the scene center.
pub fn intrinsics(focal_px: f64, side: usize) -> Matrix3<f64> {
    let c = (side as f64 - 1.0) / 2.0;
    Matrix3::new(focal_px, 0.0, c, 0.0, focal_px, c, 0.0, 0.0, 1.0)
}

/// Cumulative rotations of a random walk with per-axis steps uniform in
/// `[-max_step_angle, max_step_angle]`; the first is the identity.
pub fn make_rotations(motion: &MotionConfig, samples: usize, rng: &mut impl Rng) -> Vec<Rotation3<f64>> {
    let a = motion.max_step_angle;
    let mut out = Vec::with_capacity(samples);
    let mut r = Rotation3::identity();
    out.push(r);
    for _ in 1..samples {
        let mut step = [0.0; 3];
        for s in &mut step {
            *s = if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
        }
        r *= Rotation3::from_euler_angles(step[0], step[1], step[2]);
        out.push(r);
    }
    out
}

/// Homographies `K R_k K^-1` of a rotation random walk.
pub fn make_trajectory(motion: &MotionConfig, samples: usize, side: usize, rng: &mut impl Rng) -> Result<Vec<Matrix3<f64>>> {
    motion.validate()?;
    if samples < 2 {
        return Err(Error::InvalidArgument(format!("trajectory needs at least 2 samples, got {samples}")));
    }
    let k = intrinsics(motion.focal_px, side);
    let k_inv = k.try_inverse().expect("intrinsics are invertible");
    Ok(make_rotations(motion, samples, rng)
        .into_iter()
        .map(|r| k * r.matrix() * k_inv)
        .collect())
}

/// Bilinear sample at a real position, with replicate borders.
fn bilinear(v: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = x - x0 as f64;
    let ay = y - y0 as f64;
    let top = (1.0 - ax) * v[y0 * w + x0] + ax * v[y0 * w + x1];
    let bot = (1.0 - ax) * v[y1 * w + x0] + ax * v[y1 * w + x1];
    (1.0 - ay) * top + ay * bot
}

/// `out(p) = img(H^-1 p)` over the centered `crop x crop` window, in render
/// coordinates. Errors when a source position falls outside the image.
pub fn warp_crop(img: &Tensor, homography: &Matrix3<f64>, crop: usize) -> Result<Tensor> {
    let (h, w) = img.hw()?;
    let inv = homography
        .try_inverse()
        .ok_or_else(|| Error::domain("warp", "singular homography"))?;
    let off_y = (h - crop) / 2;
    let off_x = (w - crop) / 2;
    let src = img.data();
    let mut out = vec![0.0; crop * crop];
    let tol = 1e-9;
    for cy in 0..crop {
        for cx in 0..crop {
            let p = inv * Vector3::new((cx + off_x) as f64, (cy + off_y) as f64, 1.0);
            let (sx, sy) = (p.x / p.z, p.y / p.z);
            if !(sx >= -tol && sy >= -tol && sx <= (w - 1) as f64 + tol && sy <= (h - 1) as f64 + tol) {
                return Err(Error::domain(
                    "render_sequence",
                    format!(
                        "warped footprint leaves the scene at ({sx:.1}, {sy:.1}) of a {w}x{h} scene; \
                         increase scene.margin or reduce motion.max_step_angle"
                    ),
                ));
            }
            out[cy * crop + cx] = bilinear(src, h, w, sx, sy);
        }
    }
    Tensor::new(vec![crop, crop], out)
}

/// Anti-alias with `[1, 4, 6, 4, 1] / 16` (replicate borders) and keep
/// every second pixel.
pub fn downsample2(img: &Tensor) -> Result<Tensor> {
    let (h, w) = img.hw()?;
    let b = blur(img.data(), h, w, &BINOMIAL5);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = b[(2 * y) * w + 2 * x];
        }
    }
    Tensor::new(vec![oh, ow], out)
}

/// Renders one output-resolution sample per homography.
pub fn render_sequence(
    scene: &Tensor,
    trajectory: &[Matrix3<f64>],
    horizon: f64,
    out_size: usize,
) -> Result<IrradianceSequence> {
    if trajectory.len() % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "sequence length must be odd so a middle sample exists, got {}",
            trajectory.len()
        )));
    }
    let (h, w) = scene.hw()?;
    let crop = 2 * out_size;
    if crop > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "output {out_size}px needs a {crop}px crop but the scene is {w}x{h}"
        )));
    }
    let frames: Vec<Tensor> = trajectory
        .par_iter()
        .map(|hk| downsample2(&warp_crop(scene, hk, crop)?))
        .collect::<Result<_>>()?;
    IrradianceSequence::new(frames, horizon)
}

/// Scene and trajectory drawn from `seed`, rendered over `[0, horizon]`.
pub fn draw_sequence(scene: &SceneConfig, motion: &MotionConfig, horizon: f64, seed: u64) -> Result<IrradianceSequence> {
    let mut rng = Pcg64Mcg::seed_from_u64(seed);
    let texture = make_scene(scene, &mut rng)?;
    let traj = make_trajectory(motion, scene.samples, scene.render_side(), &mut rng)?;
    render_sequence(&texture, &traj, horizon, scene.size)
}

/// Irradiance from display-referred frames in `[0, 1]`:
/// `E = scale * frame^gamma`.
pub fn from_gamma_frames(frames: &[Tensor], gamma: f64, scale: f64, horizon: f64) -> Result<IrradianceSequence> {
    if !(gamma > 0.0 && scale >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma must be positive and scale nonnegative, got {gamma} and {scale}"
        )));
    }
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        if f.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::domain("from_gamma_frames", "frame values must lie in [0, 1]"));
        }
        out.push(f.map(|v| scale * v.powf(gamma)));
    }
    IrradianceSequence::new(out, horizon)
}
