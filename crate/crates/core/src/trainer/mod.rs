//! Optimization of exposure logits and the kernel predictor, plus the
//! exhaustive schedule oracle and held-out evaluation.

mod adam;
mod oracle;
mod run;

pub use adam::Adam;
pub use oracle::{
    evaluate, evaluate_fractions, grid_oracle, simplex_grid, ConditionSummary, EvalDraw, EvalReport, OracleConfig,
    OracleMerge, OraclePoint, OracleResult,
};
pub use run::{load_model, train, MetricRow, RunManifest, RunStatus, TrainOptions, HISTORY_FILE, MANIFEST_FILE};

use serde::{Deserialize, Serialize};

use crate::config::RootConfig;
use crate::error::{Error, Result};
use crate::reconstruct::{loss_basic, loss_total, reconstruct_burst, target_image, KpnVars, LossConfig, Reconstruction};
use crate::scene::{draw_sequence, MotionConfig, SceneConfig};
use crate::schedule::{realize_schedule, BudgetConfig, ExposureSchedule, ScheduleRecord};
use crate::sensor::{capture_burst, FluxSequence, NoiseMode, SensorSpec};
use crate::tape::{NoiseStream, Tape, Tensor, Var};

/// `max(exp(-rate * t), floor)`.
pub fn anneal_temperature(iteration: u64, rate: f64, floor: f64) -> f64 {
    (-rate * iteration as f64).exp().max(floor)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeKind {
    /// Exposure-weighted mean of the aligned frames; nothing to learn but
    /// the schedule.
    AverageMerge,
    #[default]
    Kpn,
}

/// The `[train]` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    /// Scenes per optimizer step.
    pub batch: usize,
    pub merge: MergeKind,
    /// Adam step size for the exposure logits.
    pub lr_delta: f64,
    /// Adam step size for the kernel predictor.
    pub lr_model: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub temperature_rate: f64,
    pub temperature_floor: f64,
    /// Keep the logits at their initial value throughout.
    pub freeze_delta: bool,
    /// Iterations during which only the kernel predictor trains.
    pub warmup_iterations: u64,
    /// Start from these logits instead of the uniform split.
    pub initial_delta: Option<Vec<f64>>,
    pub hidden: usize,
    pub kernel_side: usize,
    /// History rows and checkpoints every this many iterations.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch: 1,
            merge: MergeKind::Kpn,
            lr_delta: 0.05,
            lr_model: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            temperature_rate: 1e-5,
            temperature_floor: 0.1,
            freeze_delta: false,
            warmup_iterations: 0,
            initial_delta: None,
            hidden: 16,
            kernel_side: 5,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 {
            return bad("train.batch must be at least 1".into());
        }
        if self.log_every == 0 {
            return bad("train.log_every must be at least 1".into());
        }
        for (name, v) in [("lr_delta", self.lr_delta), ("lr_model", self.lr_model), ("adam_eps", self.adam_eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("train.{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("train.{name} must be in [0, 1), got {v}"));
            }
        }
        if !(self.temperature_rate >= 0.0 && self.temperature_floor > 0.0 && self.temperature_floor <= 1.0) {
            return bad(format!(
                "train.temperature_rate must be >= 0 and temperature_floor in (0, 1], got {} and {}",
                self.temperature_rate, self.temperature_floor
            ));
        }
        if self.hidden == 0 || self.kernel_side % 2 == 0 {
            return bad(format!(
                "train.hidden must be positive and train.kernel_side odd, got {} and {}",
                self.hidden, self.kernel_side
            ));
        }
        Ok(())
    }

    pub fn temperature(&self, iteration: u64) -> f64 {
        anneal_temperature(iteration, self.temperature_rate, self.temperature_floor)
    }
}

// Purposes for seed derivation; every random draw is a function of the
// root seed, the purpose and an index.
pub(crate) const TRAIN_SCENES: u64 = 1;
pub(crate) const TRAIN_NOISE: u64 = 2;
pub(crate) const MODEL_INIT: u64 = 3;
pub(crate) const EVAL_SCENES: u64 = 4;
pub(crate) const EVAL_NOISE: u64 = 5;

pub(crate) fn derive_seed(root: u64, purpose: u64, index: u64) -> u64 {
    NoiseStream::new(root).derive(purpose).derive(index).key()
}

/// The simulation settings a run shares across scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub sensor: SensorSpec,
    pub noise: NoiseMode,
    pub budget: BudgetConfig,
    pub scene: SceneConfig,
    pub motion: MotionConfig,
    pub loss: LossConfig,
}

/// One rendered scene: its flux sequence and reconstruction target.
#[derive(Clone, Debug)]
pub struct Draw {
    pub flux: FluxSequence,
    pub target: Tensor,
}

/// Output of [`Experiment::simulate`].
#[derive(Clone, Debug)]
pub struct SimulatedBurst {
    /// Normalized DN, one `[H, W]` image per frame.
    pub frames: Vec<Tensor>,
    pub target: Tensor,
    pub schedule: ScheduleRecord,
}

impl Experiment {
    pub fn from_config(cfg: &RootConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            sensor: cfg.sensor.spec()?,
            noise: cfg.sensor.noise,
            budget: cfg.budget.clone(),
            scene: cfg.scene.clone(),
            motion: cfg.motion.clone(),
            loss: cfg.loss.clone(),
        })
    }

    pub fn draw(&self, seed: u64) -> Result<Draw> {
        let seq = draw_sequence(&self.scene, &self.motion, self.budget.horizon, seed)?;
        let target = target_image(seq.ground_truth(), &self.sensor, self.budget.horizon, self.loss.gamma_eps)?;
        let flux = FluxSequence::new(&seq, &self.sensor)?;
        Ok(Draw { flux, target })
    }

    /// Captures and reconstructs one burst under `schedule`.
    #[allow(clippy::too_many_arguments)]
    pub fn reconstruct(
        &self,
        tape: &mut Tape,
        draw: &Draw,
        schedule: &ExposureSchedule,
        mode: &NoiseMode,
        temperature: f64,
        stream: NoiseStream,
        model: Option<&KpnVars>,
    ) -> Result<Reconstruction> {
        let burst = capture_burst(tape, &draw.flux, &self.sensor, schedule, mode, temperature, stream)?;
        reconstruct_burst(tape, &burst, model, self.loss.gamma_eps)
    }

    /// One burst of held-out scene 0 for `seed` under the schedule realized
    /// from `delta`, at temperature 1.
    pub fn simulate(&self, delta: &[f64], seed: u64) -> Result<SimulatedBurst> {
        let draw = self.draw(derive_seed(seed, EVAL_SCENES, 0))?;
        let mut tape = Tape::new();
        let d = tape.constant(Tensor::vector(delta.to_vec()));
        let schedule = realize_schedule(&mut tape, d, &self.budget)?;
        let stream = NoiseStream::new(derive_seed(seed, EVAL_NOISE, 0));
        let burst = capture_burst(&mut tape, &draw.flux, &self.sensor, &schedule, &self.noise, 1.0, stream)?;
        Ok(SimulatedBurst {
            frames: burst.frames.iter().map(|f| tape.value(f.pixels).clone()).collect(),
            target: draw.target,
            schedule: schedule.record(&tape, &self.budget),
        })
    }

    /// Training objective for a reconstruction: the annealed total when an
    /// annealed merge is present, the basic loss otherwise.
    pub fn objective(&self, tape: &mut Tape, rec: &Reconstruction, target: Var, iteration: u64) -> Result<Var> {
        match &rec.annealed {
            Some(a) => loss_total(tape, rec.merged.image, a.image, target, &self.loss, iteration),
            None => loss_basic(tape, rec.merged.image, target, self.loss.mu),
        }
    }
}
