//! Two-layer convolutional predictor of per-pixel merge kernels.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_pcg::Pcg64Mcg;
use serde::{Deserialize, Serialize};

use super::delta_kernels;
use crate::error::{Error, Result};
use crate::tape::{Padding, Tape, Tensor, Var};

/// Side of both convolution layers' filters.
pub const LAYER_KERNEL: usize = 5;

/// `conv(5x5) -> relu -> conv(5x5)` from a `2n - 1` frame stack to
/// `(2n - 1) k^2` raw kernel channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiniKpn {
    /// Stack depth `2n - 1`.
    pub frames: usize,
    pub hidden: usize,
    /// Predicted kernel side `k`.
    pub kernel_side: usize,
    pub conv1_weight: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_weight: Tensor,
    pub conv2_bias: Tensor,
}

pub const PARAM_NAMES: [&str; 4] = ["conv1_weight", "conv1_bias", "conv2_weight", "conv2_bias"];

impl MiniKpn {
    /// Random first layer, near-zero second layer whose bias is the delta
    /// kernel, so the untrained model merges by plain averaging.
    pub fn new(burst_frames: usize, hidden: usize, kernel_side: usize, seed: u64) -> Result<Self> {
        if burst_frames == 0 || hidden == 0 {
            return Err(Error::InvalidArgument("MiniKpn needs at least one frame and one hidden channel".into()));
        }
        if kernel_side % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel side must be odd, got {kernel_side}")));
        }
        let frames = 2 * burst_frames - 1;
        let out = frames * kernel_side * kernel_side;
        let taps = LAYER_KERNEL * LAYER_KERNEL;
        let mut rng = Pcg64Mcg::seed_from_u64(seed);
        let mut normal = |n: usize, std: f64| -> Vec<f64> {
            (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let std1 = (2.0 / (frames * taps) as f64).sqrt();
        let conv1_weight = Tensor::new(vec![hidden, frames, LAYER_KERNEL, LAYER_KERNEL], normal(hidden * frames * taps, std1))?;
        let std2 = 1e-2 / ((hidden * taps) as f64).sqrt();
        let conv2_weight = Tensor::new(vec![out, hidden, LAYER_KERNEL, LAYER_KERNEL], normal(out * hidden * taps, std2))?;
        let conv2_bias = delta_kernels(frames, kernel_side, 1, 1).reshape(vec![out])?;
        Ok(Self {
            frames,
            hidden,
            kernel_side,
            conv1_weight,
            conv1_bias: Tensor::zeros(&[hidden]),
            conv2_weight,
            conv2_bias,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Parameters in [`PARAM_NAMES`] order.
    pub fn params(&self) -> [&Tensor; 4] {
        [&self.conv1_weight, &self.conv1_bias, &self.conv2_weight, &self.conv2_bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.conv1_weight,
            &mut self.conv1_bias,
            &mut self.conv2_weight,
            &mut self.conv2_bias,
        ]
    }

    /// Inserts the parameters into `tape`, as trainable leaves or as
    /// constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> KpnVars {
        let mut put = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        KpnVars {
            params: [
                put(&self.conv1_weight),
                put(&self.conv1_bias),
                put(&self.conv2_weight),
                put(&self.conv2_bias),
            ],
            frames: self.frames,
            kernel_side: self.kernel_side,
        }
    }
}

/// A [`MiniKpn`] bound to a tape.
#[derive(Clone, Debug)]
pub struct KpnVars {
    /// In [`PARAM_NAMES`] order.
    pub params: [Var; 4],
    pub frames: usize,
    pub kernel_side: usize,
}

impl KpnVars {
    /// Raw per-pixel kernels `[(2n - 1) k^2, H, W]` for a merge stack.
    pub fn predict_kernels(&self, tape: &mut Tape, stack: Var) -> Result<Var> {
        let shape = tape.shape(stack).to_vec();
        match shape.as_slice() {
            [f, h, w] if *f == self.frames && *h >= self.kernel_side && *w >= self.kernel_side => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "kernel predictor expects a [{}, H, W] stack with H, W >= {}, got {shape:?}",
                    self.frames, self.kernel_side
                )))
            }
        }
        let [w1, b1, w2, b2] = self.params;
        let hidden = tape.conv2d(stack, w1, Padding::Replicate)?;
        let hidden = tape.add_bias(hidden, b1)?;
        let hidden = tape.relu(hidden)?;
        let out = tape.conv2d(hidden, w2, Padding::Replicate)?;
        tape.add_bias(out, b2)
    }
}
