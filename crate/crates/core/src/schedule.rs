//! Exposure budget and the softmax shutter schedule.
//!
//! A burst of `n` frames shares a time budget `T`. Each frame gets at least
//! `min_exposure`, each readout costs `readout`, and whatever is left (the
//! free budget) is split according to `alpha = softmax(delta)`:
//!
//! ```text
//! dt_i = min_exposure + alpha_i * free
//! t_1 = 0,  t_{i+1} = t_i + dt_i + readout
//! ```
//!
//! With an idle slot `delta` has `n + 1` entries and the last alpha is
//! budget that no frame uses. The readout policy decides how many readouts
//! the free budget pays for: one per frame, or only the `n - 1` gaps.

use serde::{Deserialize, Serialize};

use crate::config::seconds;
use crate::error::{Error, Result};
use crate::tape::gradcheck::{max_relative_error, numeric_gradient};
use crate::tape::{Tape, Tensor, Var};

/// How many readout intervals the budget reserves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutPolicy {
    /// `free = T - n * (min_exposure + readout)`.
    #[default]
    PerFrameN,
    /// `free = T - n * min_exposure - (n - 1) * readout`.
    #[serde(rename = "gaps_n_minus_1")]
    GapsNMinus1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    /// Total budget `T`.
    #[serde(with = "seconds")]
    pub horizon: f64,
    pub frames: usize,
    #[serde(with = "seconds", default)]
    pub min_exposure: f64,
    #[serde(with = "seconds", default)]
    pub readout: f64,
    #[serde(default)]
    pub idle_slot: bool,
    #[serde(default)]
    pub readout_policy: ReadoutPolicy,
}

impl BudgetConfig {
    pub fn new(horizon: f64, frames: usize, min_exposure: f64, readout: f64) -> Self {
        Self {
            horizon,
            frames,
            min_exposure,
            readout,
            idle_slot: false,
            readout_policy: ReadoutPolicy::PerFrameN,
        }
    }

    pub fn with_idle_slot(mut self, idle: bool) -> Self {
        self.idle_slot = idle;
        self
    }

    pub fn with_policy(mut self, policy: ReadoutPolicy) -> Self {
        self.readout_policy = policy;
        self
    }

    /// Length of the logit vector.
    pub fn delta_dim(&self) -> usize {
        self.frames + usize::from(self.idle_slot)
    }

    /// Readout intervals charged against the budget.
    pub fn readouts(&self) -> usize {
        match self.readout_policy {
            ReadoutPolicy::PerFrameN => self.frames,
            ReadoutPolicy::GapsNMinus1 => self.frames.saturating_sub(1),
        }
    }

    /// Budget left after minimum exposures and readouts.
    pub fn free_budget(&self) -> f64 {
        self.horizon
            - self.frames as f64 * self.min_exposure
            - self.readouts() as f64 * self.readout
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("budget.frames must be at least 1".into()));
        }
        for (name, v) in [
            ("horizon", self.horizon),
            ("min_exposure", self.min_exposure),
            ("readout", self.readout),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("budget.{name} must be finite and nonnegative, got {v}")));
            }
        }
        let free = self.free_budget();
        if free <= 0.0 {
            return Err(Error::Infeasible(format!(
                "{} frames with min exposure {} s and {} readouts of {} s leave {free} s of a {} s budget",
                self.frames,
                self.min_exposure,
                self.readouts(),
                self.readout,
                self.horizon
            )));
        }
        Ok(())
    }

    /// Equal split of the whole free budget across frames (no idle time),
    /// as the logits for this config.
    pub fn uniform_delta(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.delta_dim()];
        if self.idle_slot {
            // the idle share can only approach zero; this leaves ~1e-13 of T idle
            d[self.frames] = -30.0;
        }
        d
    }
}

/// A realized schedule living on a tape.
#[derive(Clone, Debug)]
pub struct ExposureSchedule {
    pub delta: Var,
    pub alphas: Var,
    /// Frame exposures `[n]`, seconds.
    pub dts: Var,
    /// Shutter opening times `[n]`, seconds.
    pub t_opens: Var,
    pub horizon: f64,
}

impl ExposureSchedule {
    pub fn frames(&self, tape: &Tape) -> usize {
        tape.value(self.dts).len()
    }

    /// Plain values, for reporting and validation.
    pub fn record(&self, tape: &Tape, cfg: &BudgetConfig) -> ScheduleRecord {
        ScheduleRecord {
            budget: cfg.clone(),
            delta_params: tape.value(self.delta).data().to_vec(),
            alphas: tape.value(self.alphas).data().to_vec(),
            dts_us: tape.value(self.dts).data().iter().map(|v| v * 1e6).collect(),
            t_opens_us: tape.value(self.t_opens).data().iter().map(|v| v * 1e6).collect(),
        }
    }
}

/// Maps logits to exposure times and opening times on the tape.
pub fn realize_schedule(tape: &mut Tape, delta: Var, cfg: &BudgetConfig) -> Result<ExposureSchedule> {
    cfg.validate()?;
    let dim = tape.value(delta).len();
    if tape.shape(delta).len() != 1 || dim != cfg.delta_dim() {
        return Err(Error::InvalidArgument(format!(
            "delta has shape {:?}, expected [{}] (frames = {}, idle slot = {})",
            tape.shape(delta),
            cfg.delta_dim(),
            cfg.frames,
            cfg.idle_slot
        )));
    }
    let n = cfg.frames;
    let alphas = tape.softmax(delta)?;
    let frame_alphas = if cfg.idle_slot {
        tape.slice0(alphas, 0, n)?
    } else {
        alphas
    };
    let scaled = tape.scale(frame_alphas, cfg.free_budget())?;
    let dts = tape.add_scalar(scaled, cfg.min_exposure)?;

    let mut opens = Vec::with_capacity(n);
    opens.push(tape.scalar(0.0));
    for i in 1..n {
        let before = tape.slice0(dts, 0, i)?;
        let s = tape.sum(before)?;
        opens.push(tape.add_scalar(s, i as f64 * cfg.readout)?);
    }
    let t_opens = tape.concat(&opens)?;
    Ok(ExposureSchedule {
        delta,
        alphas,
        dts,
        t_opens,
        horizon: cfg.horizon,
    })
}

/// Constant schedule from explicit frame fractions of the free budget; the
/// idle share is whatever the fractions leave. Used where fractions may be
/// exactly zero (the grid oracle) and no logits exist.
pub fn fixed_schedule(tape: &mut Tape, fractions: &[f64], cfg: &BudgetConfig) -> Result<ExposureSchedule> {
    cfg.validate()?;
    if fractions.len() != cfg.frames {
        return Err(Error::InvalidArgument(format!(
            "{} fractions for {} frames",
            fractions.len(),
            cfg.frames
        )));
    }
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| !(f >= 0.0)) || total > 1.0 + 1e-12 || (!cfg.idle_slot && (total - 1.0).abs() > 1e-12) {
        return Err(Error::InvalidArgument(format!("fractions {fractions:?} are not on the simplex")));
    }
    let free = cfg.free_budget();
    let dts: Vec<f64> = fractions.iter().map(|a| cfg.min_exposure + a * free).collect();
    let mut opens = Vec::with_capacity(dts.len());
    let mut acc = 0.0;
    for (i, dt) in dts.iter().enumerate() {
        opens.push(acc + i as f64 * cfg.readout);
        acc += dt;
    }
    let mut alphas = fractions.to_vec();
    if cfg.idle_slot {
        alphas.push((1.0 - total).max(0.0));
    }
    Ok(ExposureSchedule {
        delta: tape.constant(Tensor::vector(Vec::new())),
        alphas: tape.constant(Tensor::vector(alphas)),
        dts: tape.constant(Tensor::vector(dts)),
        t_opens: tape.constant(Tensor::vector(opens)),
        horizon: cfg.horizon,
    })
}

/// Realizes `delta` on a throwaway tape.
pub fn schedule_values(delta: &[f64], cfg: &BudgetConfig) -> Result<ScheduleRecord> {
    let mut tape = Tape::new();
    let d = tape.constant(Tensor::vector(delta.to_vec()));
    let s = realize_schedule(&mut tape, d, cfg)?;
    Ok(s.record(&tape, cfg))
}

/// Serializable snapshot of a realized schedule. Times in microseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub budget: BudgetConfig,
    pub delta_params: Vec<f64>,
    pub alphas: Vec<f64>,
    pub dts_us: Vec<f64>,
    pub t_opens_us: Vec<f64>,
}

impl ScheduleRecord {
    /// Record of [`fixed_schedule`].
    pub fn from_fractions(fractions: &[f64], cfg: &BudgetConfig) -> Result<Self> {
        let mut tape = Tape::new();
        let s = fixed_schedule(&mut tape, fractions, cfg)?;
        Ok(s.record(&tape, cfg))
    }

    pub fn dts(&self) -> Vec<f64> {
        self.dts_us.iter().map(|v| v * 1e-6).collect()
    }

    pub fn t_opens(&self) -> Vec<f64> {
        self.t_opens_us.iter().map(|v| v * 1e-6).collect()
    }
}

/// A violated schedule constraint and by how much (seconds, or unitless
/// for `alpha_sum`).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub name: &'static str,
    pub frame: Option<usize>,
    pub margin: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BudgetReport {
    pub violations: Vec<Violation>,
}

impl BudgetReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.violations.iter().map(|v| v.name).collect()
    }
}

/// Checks a schedule against its budget. Times are in seconds. Boundaries
/// are closed: a window ending exactly at `T` passes. Comparisons allow a
/// rounding slack of `1e-12 * T`.
pub fn validate_budget(alphas: &[f64], dts: &[f64], t_opens: &[f64], cfg: &BudgetConfig) -> BudgetReport {
    let slack = 1e-12 * cfg.horizon.max(f64::MIN_POSITIVE);
    let mut violations = Vec::new();
    let mut push = |name, frame, margin| violations.push(Violation { name, frame, margin });

    if dts.len() != cfg.frames || t_opens.len() != cfg.frames {
        push("frame_count", None, dts.len() as f64 - cfg.frames as f64);
        return BudgetReport { violations };
    }
    if alphas.len() != cfg.delta_dim() {
        push("alpha_count", None, alphas.len() as f64 - cfg.delta_dim() as f64);
    } else {
        let s: f64 = alphas.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            push("alpha_sum", None, s - 1.0);
        }
    }
    if t_opens[0] < -slack {
        push("start", Some(0), t_opens[0]);
    }
    for i in 0..cfg.frames {
        if dts[i] < cfg.min_exposure - slack {
            push("min_exposure", Some(i), dts[i] - cfg.min_exposure);
        }
        if i + 1 < cfg.frames {
            let end = t_opens[i] + dts[i];
            let next = t_opens[i + 1];
            if next < t_opens[i] - slack {
                push("order", Some(i + 1), next - t_opens[i]);
            }
            if next < end - slack {
                push("overlap", Some(i + 1), next - end);
            } else if next < end + cfg.readout - slack {
                push("readout_gap", Some(i + 1), next - end - cfg.readout);
            }
        }
    }
    let last = cfg.frames - 1;
    let end = t_opens[last] + dts[last];
    if end > cfg.horizon + slack {
        push("horizon", Some(last), cfg.horizon - end);
    }
    BudgetReport { violations }
}

/// Outcome of [`schedule_gradient_sanity`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientReport {
    /// Largest relative error between tape and finite-difference Jacobians.
    pub fd_max_rel_error: f64,
    /// `max_j |sum_i d dt_i / d delta_j|` over frame logits (should vanish
    /// without an idle slot).
    pub zero_sum_residual: f64,
    /// `sum_i d dt_i / d delta_idle`, when an idle slot exists.
    pub idle_column_sum: Option<f64>,
    pub passed: bool,
}

/// Jacobian `d dts / d delta` as rows `[i][j]`, from the tape.
pub fn schedule_jacobian(delta: &[f64], cfg: &BudgetConfig) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(cfg.frames);
    for i in 0..cfg.frames {
        let mut tape = Tape::new();
        let d = tape.param(Tensor::vector(delta.to_vec()));
        let s = realize_schedule(&mut tape, d, cfg)?;
        let dti = tape.index(s.dts, i)?;
        let g = tape.backward(dti)?;
        rows.push(g.get_or_zeros(d, delta.len()));
    }
    Ok(rows)
}

/// Compares the tape Jacobian of the schedule with central differences and
/// checks the budget-conservation property at `delta`.
pub fn schedule_gradient_sanity(delta: &[f64], cfg: &BudgetConfig) -> Result<GradientReport> {
    let jac = schedule_jacobian(delta, cfg)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, row) in jac.iter().enumerate() {
        let fd = numeric_gradient(|d| Ok(schedule_values(d, cfg)?.dts()[i]), delta, 1e-5)?;
        analytic.extend_from_slice(row);
        numeric.extend(fd);
    }
    let fd_max_rel_error = max_relative_error(&analytic, &numeric);

    let column_sum = |j: usize| jac.iter().map(|row| row[j]).sum::<f64>();
    let zero_sum_residual = (0..cfg.frames).map(|j| column_sum(j).abs()).fold(0.0, f64::max);
    let idle_column_sum = cfg.idle_slot.then(|| column_sum(cfg.frames));

    let scale = cfg.free_budget();
    let passed = fd_max_rel_error < 1e-6
        && match idle_column_sum {
            None => zero_sum_residual <= 1e-10 * scale.max(1.0),
            Some(s) => s < 0.0,
        };
    Ok(GradientReport {
        fd_max_rel_error,
        zero_sum_residual,
        idle_column_sum,
        passed,
    })
}
