//! Exhaustive search over exposure splits and held-out evaluation, both
//! in inference mode (exact Poisson noise, no gradients) with common
//! random numbers: every candidate sees the same scenes and noise seeds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, Draw, Experiment, EVAL_NOISE, EVAL_SCENES};
use crate::error::{Error, Result};
use crate::reconstruct::{loss_basic, psnr, ssim, MiniKpn};
use crate::schedule::{fixed_schedule, realize_schedule, BudgetConfig, ExposureSchedule};
use crate::sensor::{NoiseKind, NoiseMode};
use crate::tape::{NoiseStream, Tape, Tensor};

/// A scene plus the noise stream its captures use.
#[derive(Clone, Debug)]
pub struct EvalDraw {
    pub draw: Draw,
    pub stream: NoiseStream,
}

impl EvalDraw {
    /// Draws `count` held-out scenes for `seed`.
    pub fn family(exp: &Experiment, seed: u64, count: usize) -> Result<Vec<Self>> {
        (0..count as u64)
            .into_par_iter()
            .map(|i| {
                Ok(Self {
                    draw: exp.draw(derive_seed(seed, EVAL_SCENES, i))?,
                    stream: NoiseStream::new(derive_seed(seed, EVAL_NOISE, i)),
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Score {
    loss: f64,
    psnr: f64,
    ssim: f64,
}

fn score(
    exp: &Experiment,
    budget: &BudgetConfig,
    d: &EvalDraw,
    model: Option<&MiniKpn>,
    schedule: impl FnOnce(&mut Tape) -> Result<ExposureSchedule>,
) -> Result<Score> {
    let mode = NoiseMode::of(NoiseKind::ExactPoissonNoGrad);
    let mut tape = Tape::new();
    let sched = schedule(&mut tape)?;
    debug_assert_eq!(sched.frames(&tape), budget.frames);
    let vars = model.map(|m| m.bind(&mut tape, false));
    let rec = exp.reconstruct(&mut tape, &d.draw, &sched, &mode, 1.0, d.stream, vars.as_ref())?;
    let target = tape.constant(d.draw.target.clone());
    let loss = loss_basic(&mut tape, rec.merged.image, target, exp.loss.mu)?;
    let image = tape.value(rec.merged.image);
    Ok(Score {
        loss: tape.item(loss),
        psnr: psnr(image, &d.draw.target, 1.0)?,
        ssim: ssim(image, &d.draw.target)?,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Frame fractions on the grid with spacing `1 / (resolution - 1)`. Each
/// frame gets at least one step unless a minimum exposure keeps it open
/// anyway; without an idle slot the fractions sum to one.
pub fn simplex_grid(budget: &BudgetConfig, resolution: usize) -> Result<Vec<Vec<f64>>> {
    if resolution < 2 {
        return Err(Error::InvalidArgument(format!("grid resolution must be at least 2, got {resolution}")));
    }
    let steps = resolution - 1;
    let lo = usize::from(budget.min_exposure == 0.0);
    let n = budget.frames;
    let mut out = Vec::new();
    let mut current = vec![0usize; n];
    fn rec(i: usize, left: usize, lo: usize, idle: bool, cur: &mut Vec<usize>, steps: usize, out: &mut Vec<Vec<f64>>) {
        let n = cur.len();
        if i == n - 1 {
            let choices: Vec<usize> = if idle { (lo..=left).collect() } else { vec![left] };
            for k in choices {
                if k < lo {
                    continue;
                }
                cur[i] = k;
                out.push(cur.iter().map(|&c| c as f64 / steps as f64).collect());
            }
            return;
        }
        for k in lo..=left {
            cur[i] = k;
            rec(i + 1, left - k, lo, idle, cur, steps, out);
        }
    }
    rec(0, steps, lo, budget.idle_slot, &mut current, steps, &mut out);
    Ok(out)
}

#[derive(Clone, Debug)]
pub enum OracleMerge {
    AverageMerge,
    /// A trained predictor, frozen.
    Model(MiniKpn),
}

impl OracleMerge {
    fn model(&self) -> Option<&MiniKpn> {
        match self {
            OracleMerge::AverageMerge => None,
            OracleMerge::Model(m) => Some(m),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OracleConfig {
    pub resolution: usize,
    pub draws: usize,
    pub seed: u64,
    pub merge: OracleMerge,
}

/// Expected loss of one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OraclePoint {
    /// Frame fractions of the free budget, `;`-separated.
    pub fractions: String,
    pub dts_us: String,
    pub loss_mean: f64,
    /// Standard error of `loss_mean`.
    pub loss_se: f64,
    pub psnr_mean: f64,
}

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub points: Vec<OraclePoint>,
    pub fractions: Vec<Vec<f64>>,
    /// Index of the smallest `loss_mean`.
    pub best: usize,
}

impl OracleResult {
    pub fn best_point(&self) -> &OraclePoint {
        &self.points[self.best]
    }
}

fn join(v: &[f64], digits: usize) -> String {
    v.iter().map(|x| format!("{x:.digits$}")).collect::<Vec<_>>().join(";")
}

/// Per-draw statistics for explicit frame fractions.
pub fn evaluate_fractions(
    exp: &Experiment,
    fractions: &[f64],
    draws: &[EvalDraw],
    model: Option<&MiniKpn>,
) -> Result<(f64, f64, f64)> {
    let scores: Vec<Score> = draws
        .iter()
        .map(|d| score(exp, &exp.budget, d, model, |t| fixed_schedule(t, fractions, &exp.budget)))
        .collect::<Result<_>>()?;
    let losses: Vec<f64> = scores.iter().map(|s| s.loss).collect();
    let (mean, std) = mean_std(&losses);
    let psnr_mean = scores.iter().map(|s| s.psnr).sum::<f64>() / scores.len() as f64;
    Ok((mean, std / (losses.len() as f64).sqrt(), psnr_mean))
}

/// Expected loss at every feasible grid point, averaged over the same
/// `cfg.draws` scenes.
pub fn grid_oracle(exp: &Experiment, cfg: &OracleConfig) -> Result<OracleResult> {
    if cfg.draws == 0 {
        return Err(Error::InvalidArgument("the oracle needs at least one draw".into()));
    }
    let fractions = simplex_grid(&exp.budget, cfg.resolution)?;
    if fractions.is_empty() {
        return Err(Error::Infeasible(format!(
            "no grid point of resolution {} opens all {} frames",
            cfg.resolution, exp.budget.frames
        )));
    }
    let draws = EvalDraw::family(exp, cfg.seed, cfg.draws)?;
    let free = exp.budget.free_budget();
    let points: Vec<OraclePoint> = fractions
        .par_iter()
        .map(|f| {
            let (loss_mean, loss_se, psnr_mean) = evaluate_fractions(exp, f, &draws, cfg.merge.model())?;
            let dts: Vec<f64> = f.iter().map(|a| 1e6 * (exp.budget.min_exposure + a * free)).collect();
            Ok(OraclePoint {
                fractions: join(f, 6),
                dts_us: join(&dts, 3),
                loss_mean,
                loss_se,
                psnr_mean,
            })
        })
        .collect::<Result<_>>()?;
    let best = points
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.loss_mean.total_cmp(&b.1.loss_mean))
        .map(|(i, _)| i)
        .expect("at least one point");
    Ok(OracleResult { points, fractions, best })
}

/// Mean and sample standard deviation of one condition's metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub n_scenes: usize,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub summaries: Vec<ConditionSummary>,
    /// Per-scene PSNR, one vector per summary, scenes in draw order.
    pub psnr: Vec<Vec<f64>>,
}

impl EvalReport {
    pub fn condition(&self, name: &str) -> Option<(&ConditionSummary, &[f64])> {
        self.summaries
            .iter()
            .zip(&self.psnr)
            .find(|(s, _)| s.condition == name)
            .map(|(s, p)| (s, p.as_slice()))
    }
}

/// Compares the learned schedule against an equal split of the whole
/// budget and a single exposure filling it, on `n_scenes` held-out scenes.
/// `model` merges the learned bursts; `baseline_model` (or `model` when
/// absent) merges the equal-split bursts. The single exposure is never
/// merged with a predictor.
pub fn evaluate(
    exp: &Experiment,
    learned_delta: &[f64],
    model: Option<&MiniKpn>,
    baseline_model: Option<&MiniKpn>,
    n_scenes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_scenes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one scene".into()));
    }
    let budget = &exp.budget;
    let n = budget.frames;
    let single = BudgetConfig {
        frames: 1,
        idle_slot: false,
        ..budget.clone()
    };
    let single_exp = Experiment {
        budget: single.clone(),
        ..exp.clone()
    };
    let draws = EvalDraw::family(exp, seed, n_scenes)?;
    let baseline = baseline_model.or(model);
    let per_scene: Vec<[Score; 3]> = draws
        .par_iter()
        .map(|d| {
            let learned = score(exp, budget, d, model, |t| {
                let delta = t.constant(Tensor::vector(learned_delta.to_vec()));
                realize_schedule(t, delta, budget)
            })?;
            let uniform = score(exp, budget, d, baseline, |t| fixed_schedule(t, &vec![1.0 / n as f64; n], budget))?;
            let full = score(&single_exp, &single, d, None, |t| fixed_schedule(t, &[1.0], &single))?;
            Ok([learned, uniform, full])
        })
        .collect::<Result<_>>()?;
    let names = ["learned", "uniform", "full_exposure"];
    let mut summaries = Vec::new();
    let mut psnrs = Vec::new();
    for (c, name) in names.iter().enumerate() {
        let p: Vec<f64> = per_scene.iter().map(|s| s[c].psnr).collect();
        let q: Vec<f64> = per_scene.iter().map(|s| s[c].ssim).collect();
        let (psnr_mean, psnr_std) = mean_std(&p);
        let (ssim_mean, ssim_std) = mean_std(&q);
        summaries.push(ConditionSummary {
            condition: name.to_string(),
            psnr_mean,
            psnr_std,
            ssim_mean,
            ssim_std,
            n_scenes,
        });
        psnrs.push(p);
    }
    Ok(EvalReport { summaries, psnr: psnrs })
}
