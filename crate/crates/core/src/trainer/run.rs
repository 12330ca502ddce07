//! The training loop, its manifest and checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{derive_seed, Adam, Experiment, MergeKind, MODEL_INIT, TRAIN_NOISE, TRAIN_SCENES};
use crate::config::RootConfig;
use crate::error::{Error, Result};
use crate::io::{load_tensors, read_json, save_tensors, write_csv, write_json};
use crate::reconstruct::{psnr, MiniKpn, PARAM_NAMES};
use crate::schedule::{realize_schedule, schedule_values, ScheduleRecord};
use crate::tape::{NoiseStream, Tape, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const HISTORY_FILE: &str = "history.csv";
const CHECKPOINT_STEM: &str = "checkpoint";
const MODEL_STEM: &str = "model";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Diverged,
}

/// One history row: means over the iterations since the previous row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Iterations completed.
    pub iteration: u64,
    pub loss: f64,
    pub psnr: f64,
    pub temperature: f64,
    /// Frame exposures after the row's last step, microseconds,
    /// `;`-separated.
    pub dts_us: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub status: RunStatus,
    pub config: RootConfig,
    pub iterations_done: u64,
    /// Current logits and the schedule they realize.
    pub schedule: ScheduleRecord,
    pub history: Vec<MetricRow>,
    /// File stem of the saved kernel predictor, relative to the run
    /// directory.
    pub model: Option<String>,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST_FILE))
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Continue from the checkpoint in `out_dir`.
    pub resume: bool,
    /// Stop after this many iterations in this session, leaving the run
    /// resumable.
    pub stop_after: Option<u64>,
}

/// Loads the kernel predictor referenced by a manifest.
pub fn load_model(dir: &Path, manifest: &RunManifest) -> Result<Option<MiniKpn>> {
    match &manifest.model {
        None => Ok(None),
        Some(stem) => {
            let (header, mut tensors) = load_tensors(&dir.join(stem))?;
            let field = |k: &str| {
                header.meta[k]
                    .as_u64()
                    .map(|v| v as usize)
                    .ok_or_else(|| Error::Serde(format!("model header lacks {k}")))
            };
            let (frames, hidden, kernel_side) = (field("frames")?, field("hidden")?, field("kernel_side")?);
            if tensors.len() != 4 {
                return Err(Error::Serde(format!("model holds {} tensors, expected 4", tensors.len())));
            }
            let conv2_bias = tensors.pop().expect("4 tensors");
            let conv2_weight = tensors.pop().expect("4 tensors");
            let conv1_bias = tensors.pop().expect("4 tensors");
            let conv1_weight = tensors.pop().expect("4 tensors");
            Ok(Some(MiniKpn {
                frames,
                hidden,
                kernel_side,
                conv1_weight,
                conv1_bias,
                conv2_weight,
                conv2_bias,
            }))
        }
    }
}

fn save_model(dir: &Path, model: &MiniKpn) -> Result<()> {
    let meta = serde_json::json!({
        "frames": model.frames,
        "hidden": model.hidden,
        "kernel_side": model.kernel_side,
    });
    let named: Vec<(&str, &Tensor)> = PARAM_NAMES.iter().copied().zip(model.params()).collect();
    save_tensors(&dir.join(MODEL_STEM), meta, &named)
}

struct State {
    iteration: u64,
    delta: Vec<f64>,
    delta_adam: Adam,
    model: Option<MiniKpn>,
    model_adam: Vec<Adam>,
    history: Vec<MetricRow>,
    /// Loss sum, PSNR sum and count since the last history row.
    pending: (f64, f64, u64),
}

impl State {
    fn fresh(cfg: &RootConfig) -> Result<Self> {
        let t = &cfg.train;
        let dim = cfg.budget.delta_dim();
        let delta = match &t.initial_delta {
            Some(d) if d.len() != dim => {
                return Err(Error::Config(format!(
                    "train.initial_delta has {} entries, the budget needs {dim}",
                    d.len()
                )))
            }
            Some(d) => d.clone(),
            None => vec![0.0; dim],
        };
        let model = match t.merge {
            MergeKind::AverageMerge => None,
            MergeKind::Kpn => Some(MiniKpn::new(
                cfg.budget.frames,
                t.hidden,
                t.kernel_side,
                derive_seed(cfg.seed, MODEL_INIT, 0),
            )?),
        };
        let adam = |len, lr| Adam::with_hyper(len, lr, t.beta1, t.beta2, t.adam_eps);
        let model_adam = model
            .as_ref()
            .map(|m| m.params().iter().map(|p| adam(p.len(), t.lr_model)).collect())
            .unwrap_or_default();
        Ok(Self {
            iteration: 0,
            delta_adam: adam(dim, t.lr_delta),
            delta,
            model,
            model_adam,
            history: Vec::new(),
            pending: (0.0, 0.0, 0),
        })
    }

    fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let vec = |v: &[f64]| Tensor::vector(v.to_vec());
        let mut owned: Vec<(String, Tensor)> = vec![
            ("delta".into(), vec(&self.delta)),
            ("delta_m".into(), vec(&self.delta_adam.m)),
            ("delta_v".into(), vec(&self.delta_adam.v)),
        ];
        if let Some(m) = &self.model {
            for ((name, p), a) in PARAM_NAMES.iter().zip(m.params()).zip(&self.model_adam) {
                owned.push((name.to_string(), p.clone()));
                owned.push((format!("{name}_m"), vec(&a.m)));
                owned.push((format!("{name}_v"), vec(&a.v)));
            }
        }
        let meta = serde_json::json!({
            "iteration": self.iteration,
            "delta_step": self.delta_adam.step,
            "model_steps": self.model_adam.iter().map(|a| a.step).collect::<Vec<_>>(),
            "pending": [self.pending.0, self.pending.1, self.pending.2],
        });
        let named: Vec<(&str, &Tensor)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save_tensors(&dir.join(CHECKPOINT_STEM), meta, &named)
    }

    fn restore(cfg: &RootConfig, dir: &Path, manifest: &RunManifest) -> Result<Self> {
        let mut state = Self::fresh(cfg)?;
        let (header, tensors) = load_tensors(&dir.join(CHECKPOINT_STEM))?;
        let mut by_name = header.tensors.iter().map(|e| e.name.as_str()).zip(tensors);
        let mut take = |name: &str| -> Result<Vec<f64>> {
            match by_name.next() {
                Some((n, t)) if n == name => Ok(t.data().to_vec()),
                _ => Err(Error::Serde(format!("checkpoint is missing {name}"))),
            }
        };
        state.delta = take("delta")?;
        state.delta_adam.m = take("delta_m")?;
        state.delta_adam.v = take("delta_v")?;
        let meta = &header.meta;
        state.iteration = meta["iteration"].as_u64().ok_or_else(|| Error::Serde("checkpoint lacks iteration".into()))?;
        state.delta_adam.step = meta["delta_step"].as_u64().unwrap_or(0);
        let pending = &meta["pending"];
        state.pending = (
            pending[0].as_f64().unwrap_or(0.0),
            pending[1].as_f64().unwrap_or(0.0),
            pending[2].as_u64().unwrap_or(0),
        );
        if let Some(model) = state.model.as_mut() {
            let steps = meta["model_steps"].as_array().cloned().unwrap_or_default();
            for (i, (p, a)) in model.params_mut().into_iter().zip(state.model_adam.iter_mut()).enumerate() {
                let name = PARAM_NAMES[i];
                let values = take(name)?;
                if values.len() != p.len() {
                    return Err(Error::Serde(format!("checkpoint {name} has the wrong size")));
                }
                p.data_mut().copy_from_slice(&values);
                a.m = take(&format!("{name}_m"))?;
                a.v = take(&format!("{name}_v"))?;
                a.step = steps.get(i).and_then(|s| s.as_u64()).unwrap_or(0);
            }
        }
        state.history = manifest
            .history
            .iter()
            .filter(|r| r.iteration <= state.iteration)
            .cloned()
            .collect();
        Ok(state)
    }

    fn manifest(&self, cfg: &RootConfig, status: RunStatus, error: Option<String>) -> Result<RunManifest> {
        Ok(RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            status,
            config: cfg.clone(),
            iterations_done: self.iteration,
            schedule: schedule_values(&self.delta, &cfg.budget)?,
            history: self.history.clone(),
            model: self.model.as_ref().map(|_| MODEL_STEM.to_string()),
            error,
        })
    }

    fn persist(&self, cfg: &RootConfig, dir: &Path, status: RunStatus, error: Option<String>) -> Result<RunManifest> {
        self.save_checkpoint(dir)?;
        if let Some(m) = &self.model {
            save_model(dir, m)?;
        }
        write_csv(&dir.join(HISTORY_FILE), &self.history)?;
        let manifest = self.manifest(cfg, status, error)?;
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

fn is_numerical(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Divergence(_))
}

struct StepOutcome {
    loss: f64,
    psnr: f64,
}

fn train_step(exp: &Experiment, cfg: &RootConfig, state: &mut State) -> Result<StepOutcome> {
    let t = state.iteration;
    let tc = &cfg.train;
    let temperature = tc.temperature(t);
    let train_delta = !tc.freeze_delta && t >= tc.warmup_iterations;
    let batch = tc.batch;
    let mut g_delta = vec![0.0; state.delta.len()];
    let mut g_model: Vec<Vec<f64>> = state.model_adam.iter().map(|a| vec![0.0; a.m.len()]).collect();
    let (mut loss_sum, mut psnr_sum) = (0.0, 0.0);
    for b in 0..batch {
        let index = t * batch as u64 + b as u64;
        let draw = exp.draw(derive_seed(cfg.seed, TRAIN_SCENES, index))?;
        let stream = NoiseStream::new(derive_seed(cfg.seed, TRAIN_NOISE, index));
        let mut tape = Tape::new();
        let dv = Tensor::vector(state.delta.clone());
        let delta = if train_delta { tape.param(dv) } else { tape.constant(dv) };
        let schedule = realize_schedule(&mut tape, delta, &exp.budget)?;
        let vars = state.model.as_ref().map(|m| m.bind(&mut tape, true));
        let rec = exp.reconstruct(&mut tape, &draw, &schedule, &exp.noise, temperature, stream, vars.as_ref())?;
        let target = tape.constant(draw.target.clone());
        let loss = exp.objective(&mut tape, &rec, target, t)?;
        let value = tape.item(loss);
        if !value.is_finite() {
            return Err(Error::Divergence(format!("loss is {value} at iteration {t}")));
        }
        loss_sum += value;
        psnr_sum += psnr(tape.value(rec.merged.image), &draw.target, 1.0)?;
        let grads = tape.backward(loss)?;
        if train_delta {
            for (acc, g) in g_delta.iter_mut().zip(grads.get_or_zeros(delta, state.delta.len())) {
                *acc += g / batch as f64;
            }
        }
        if let Some(vars) = &vars {
            for (acc, &p) in g_model.iter_mut().zip(&vars.params) {
                let n = acc.len();
                for (a, g) in acc.iter_mut().zip(grads.get_or_zeros(p, n)) {
                    *a += g / batch as f64;
                }
            }
        }
    }
    if train_delta {
        state.delta_adam.step("delta", &mut state.delta, &g_delta)?;
    }
    if let Some(model) = state.model.as_mut() {
        for ((p, a), (g, name)) in model
            .params_mut()
            .into_iter()
            .zip(state.model_adam.iter_mut())
            .zip(g_model.iter().zip(PARAM_NAMES))
        {
            a.step(name, p.data_mut(), g)?;
        }
    }
    state.iteration += 1;
    Ok(StepOutcome {
        loss: loss_sum / batch as f64,
        psnr: psnr_sum / batch as f64,
    })
}

/// Trains until `cfg.train.iterations`, writing the manifest, history and
/// checkpoints to `opts.out_dir` every `log_every` iterations. A numerical
/// failure writes a manifest with status `diverged` and returns
/// [`Error::Divergence`]. `progress` sees every history row as it is
/// written.
pub fn train(cfg: &RootConfig, opts: &TrainOptions, progress: &mut dyn FnMut(&MetricRow)) -> Result<RunManifest> {
    let exp = Experiment::from_config(cfg)?;
    let dir = opts.out_dir.as_path();
    let mut state = if opts.resume {
        let manifest = RunManifest::load(dir)?;
        let mut expected = manifest.config.clone();
        expected.train.iterations = cfg.train.iterations;
        if &expected != cfg {
            return Err(Error::Config(format!(
                "{} was produced by a different configuration; only train.iterations may change on resume",
                dir.display()
            )));
        }
        State::restore(cfg, dir, &manifest)?
    } else {
        State::fresh(cfg)?
    };

    let start = state.iteration;
    let log_every = cfg.train.log_every;
    while state.iteration < cfg.train.iterations {
        if opts.stop_after.is_some_and(|s| state.iteration - start >= s) {
            return state.persist(cfg, dir, RunStatus::Running, None);
        }
        let outcome = match train_step(&exp, cfg, &mut state) {
            Ok(o) => o,
            Err(e) if is_numerical(&e) => {
                let msg = format!("iteration {}: {e}", state.iteration);
                state.persist(cfg, dir, RunStatus::Diverged, Some(msg.clone()))?;
                return Err(Error::Divergence(msg));
            }
            Err(e) => return Err(e),
        };
        let (loss_acc, psnr_acc, count) = &mut state.pending;
        *loss_acc += outcome.loss;
        *psnr_acc += outcome.psnr;
        *count += 1;
        let done = state.iteration;
        if done % log_every == 0 || done == cfg.train.iterations {
            let record = schedule_values(&state.delta, &cfg.budget)?;
            let row = MetricRow {
                iteration: done,
                loss: state.pending.0 / state.pending.2 as f64,
                psnr: state.pending.1 / state.pending.2 as f64,
                temperature: cfg.train.temperature(done - 1),
                dts_us: record.dts_us.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>().join(";"),
            };
            progress(&row);
            state.history.push(row);
            state.pending = (0.0, 0.0, 0);
            state.persist(cfg, dir, RunStatus::Running, None)?;
        }
    }
    state.persist(cfg, dir, RunStatus::Completed, None)
}
