use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::loss::{attention_score_regularizer, gate_regularizer, total_loss};
use super::optim::{AdamW, AdamWConfig, LrSchedule};
use super::pi::{pi_update, PIControllerState};
use crate::data::{collate, Task, TaskExample};
use crate::model::{checkpoint, forward, Baseline, Batch, ForwardOptions, Model};
use crate::numerics::{Float, Graph};
use crate::{Error, Result};

pub const METRICS_HEADER: &str = "step,loss,ce,lg,ls,alpha,delta_hat,lr,seq_len_reduction";

fn default_gamma() -> f64 {
    0.9
}
fn default_kp() -> f64 {
    0.5
}
fn default_ki() -> f64 {
    1e-5
}
fn default_beta() -> f64 {
    5.0
}
fn default_m() -> f64 {
    5.0
}

/// How the gate regularizer weight is chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaMode {
    Fixed {
        alpha: f64,
    },
    Controller {
        delta: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default = "default_kp")]
        k_p: f64,
        #[serde(default = "default_ki")]
        k_i: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub alpha: AlphaMode,
    /// Weight of the attention-score regularizer.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Clamp threshold of the attention-score regularizer.
    #[serde(default = "default_m")]
    pub m: f64,
    /// Before this step the gate regularizer weight is 0 and the controller is idle.
    #[serde(default)]
    pub reg_enable_step: usize,
    #[serde(default)]
    pub seed: u64,
    /// Run the evaluation hook every this many steps (0 disables it).
    #[serde(default)]
    pub eval_every: usize,
    /// Write an intermediate checkpoint every this many steps (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.beta >= 0.0) || !self.m.is_finite() {
            return bad(format!("need beta >= 0 and finite m, got {} and {}", self.beta, self.m));
        }
        if self.reg_enable_step > self.steps {
            return bad(format!("reg_enable_step {} exceeds steps {}", self.reg_enable_step, self.steps));
        }
        if !(self.lr.peak() >= 0.0) {
            return bad("learning rate must be non-negative".into());
        }
        match self.alpha {
            AlphaMode::Fixed { alpha } if !(alpha >= 0.0) => bad(format!("alpha must be >= 0, got {alpha}")),
            AlphaMode::Controller { delta, gamma, .. } if !(0.0..=1.0).contains(&delta) || !(0.0..1.0).contains(&gamma) => {
                bad(format!("controller needs delta in [0,1] and gamma in [0,1), got {delta}, {gamma}"))
            }
            _ => Ok(()),
        }
    }

    pub fn initial_controller(&self) -> Option<PIControllerState> {
        match self.alpha {
            AlphaMode::Controller { delta, gamma, k_p, k_i } => Some(PIControllerState::new(delta, gamma, k_p, k_i)),
            AlphaMode::Fixed { .. } => None,
        }
    }
}

/// Supplies the batch for a given step; `None` means the data is exhausted.
pub trait BatchSource {
    fn batch(&self, step: usize, batch_size: usize) -> Result<Option<Batch>>;
}

/// Unbounded generated stream: batch `s` holds examples `s·B .. (s+1)·B`.
pub struct TaskSource {
    pub task: Task,
    pub seed: u64,
}

impl BatchSource for TaskSource {
    fn batch(&self, step: usize, batch_size: usize) -> Result<Option<Batch>> {
        let ex = self.task.examples(self.seed, (step * batch_size) as u64, batch_size)?;
        collate(&ex).map(Some)
    }
}

/// A finite dataset read once, in order.
pub struct DatasetSource {
    pub examples: Vec<TaskExample>,
}

impl BatchSource for DatasetSource {
    fn batch(&self, step: usize, batch_size: usize) -> Result<Option<Batch>> {
        let start = step * batch_size;
        if start + batch_size > self.examples.len() {
            return Ok(None);
        }
        collate(&self.examples[start..start + batch_size]).map(Some)
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub ce: f64,
    pub lg: f64,
    pub ls: f64,
    pub alpha: f64,
    pub delta_hat: f64,
    pub lr: f64,
    pub seq_len_reduction: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.loss, self.ce, self.lg, self.ls, self.alpha, self.delta_hat, self.lr, self.seq_len_reduction
        )
    }
}

/// Everything besides tensors needed to resume exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed steps.
    pub step: usize,
    pub controller: Option<PIControllerState>,
    pub optimizer_updates: u64,
    pub skipped_steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps_run: usize,
    pub final_step: usize,
    pub skipped_steps: u64,
    pub data_exhausted: bool,
    pub last: Option<MetricsRow>,
}

/// Seed of the stochastic choices made at `step`.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(step as u64).rotate_left(17)
}

/// Forward, controller update, backward and optimizer step for one batch.
pub fn train_step<T: Float>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    batch: &Batch,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<MetricsRow> {
    let step = state.step;
    let mut g = Graph::<T>::new();
    let p = model.params.bind(&mut g);
    let mut opts = ForwardOptions::training(model.cfg.deletion_mode, step_seed(cfg.seed, step));
    opts.collect_scores = cfg.beta > 0.0;
    let f = forward(&mut g, &p, &model.cfg, batch, &opts)?;
    let learned_gate = matches!(model.cfg.baseline, Baseline::None);
    let lg = match (f.enc.gate_var, learned_gate) {
        (Some(gv), true) => Some(gate_regularizer(&mut g, gv, &batch.enc_valid)?),
        _ => None,
    };
    let delta_hat = f.enc.gate.as_ref().map_or(0.0, |o| o.deletion_ratio());
    let alpha = if step < cfg.reg_enable_step {
        0.0
    } else {
        match (&cfg.alpha, state.controller.as_mut()) {
            (AlphaMode::Fixed { alpha }, _) => *alpha,
            (AlphaMode::Controller { .. }, Some(c)) => {
                *c = pi_update(*c, delta_hat);
                c.alpha
            }
            (AlphaMode::Controller { .. }, None) => {
                return Err(Error::Invalid("controller mode without controller state".into()));
            }
        }
    };
    let mut scores = f.enc.score_vars.clone();
    scores.extend(&f.dec.cross_scores);
    let ls = if cfg.beta > 0.0 && !scores.is_empty() {
        Some(attention_score_regularizer(&mut g, &scores, cfg.m)?)
    } else {
        None
    };
    let mut loss = total_loss(&mut g, f.ce, lg, ls, alpha, cfg.beta)?;
    if let Some(aux) = f.enc.aux_loss {
        loss = g.add(loss, aux)?;
    }
    let value = |g: &Graph<T>, v: Option<crate::numerics::Var>| v.map_or(0.0, |v| g.value(v).item().f64());
    let row_values = (value(&g, Some(loss)), value(&g, Some(f.ce)), value(&g, lg), value(&g, ls));
    g.backward(loss)?;
    let mut grads: Vec<Option<Vec<T>>> = p.vars().iter().map(|&v| g.grad(v).map(<[T]>::to_vec)).collect();
    if let Some(clip) = cfg.grad_clip {
        let norm = grads.iter().flatten().flatten().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
        if norm.is_finite() && norm > clip {
            let s = T::of(clip / norm);
            grads.iter_mut().flatten().flatten().for_each(|x| *x *= s);
        }
    }
    let lr = cfg.lr.at(step + 1, cfg.steps);
    drop(g);
    opt.step(&mut model.params, &grads, lr)?;
    state.step += 1;
    state.optimizer_updates = opt.t;
    state.skipped_steps = opt.skipped;
    Ok(MetricsRow {
        step,
        loss: row_values.0,
        ce: row_values.1,
        lg: row_values.2,
        ls: row_values.3,
        alpha,
        delta_hat,
        lr,
        seq_len_reduction: f.enc.stats.reduction(),
    })
}

/// Writes `model.bin` (parameters and optimizer moments), `config.json` and `train_state.json`.
pub fn save_training_checkpoint<T: Float>(dir: &Path, model: &Model<T>, opt: &AdamW<T>, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir)?;
    let moments = opt.state_tensors(&model.params);
    let mut named: Vec<(&str, &crate::numerics::Tensor<T>)> =
        model.params.names().iter().map(String::as_str).zip(model.params.tensors()).collect();
    named.extend(moments.iter().map(|(n, t)| (n.as_str(), t)));
    checkpoint::save(&dir.join("model.bin"), &named)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&model.cfg)?)?;
    fs::write(dir.join("train_state.json"), serde_json::to_string_pretty(state)?)?;
    Ok(())
}

/// Restores parameters, optimizer moments and train state written by [`save_training_checkpoint`].
pub fn load_training_checkpoint<T: Float>(dir: &Path, model: &mut Model<T>, opt: &mut AdamW<T>) -> Result<TrainState> {
    let stored_cfg: crate::model::ModelConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
    if stored_cfg != model.cfg {
        return Err(Error::Checkpoint("checkpoint configuration differs from the requested model".into()));
    }
    let state: TrainState = serde_json::from_str(&fs::read_to_string(dir.join("train_state.json"))?)?;
    let stored = checkpoint::load::<T>(&dir.join("model.bin"))?;
    opt.load_state(&model.params, &stored, state.optimizer_updates, state.skipped_steps)?;
    model.params.load_from(stored)?;
    Ok(state)
}

fn open_metrics(path: &Path, keep_rows: Option<usize>) -> Result<fs::File> {
    let mut lines = vec![METRICS_HEADER.to_string()];
    if let Some(k) = keep_rows {
        if path.exists() {
            let old: Vec<String> = BufReader::new(fs::File::open(path)?).lines().collect::<std::io::Result<_>>()?;
            lines.extend(old.into_iter().skip(1).take(k));
        }
    }
    let mut f = fs::File::create(path)?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(f)
}

/// Evaluation callback run every `eval_every` steps with the completed step count.
pub type EvalHook<'a, T> = dyn FnMut(&Model<T>, usize) -> Result<()> + 'a;

/// Runs `cfg.steps` training steps.
///
/// With `out_dir`, metrics go to `metrics.csv` and checkpoints to `checkpoint/`;
/// `resume` continues from that checkpoint. Exhausted data stops the loop early.
pub fn train_loop<T: Float>(
    model: &mut Model<T>,
    source: &dyn BatchSource,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: bool,
    mut eval: Option<&mut EvalHook<'_, T>>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    model.cfg.validate()?;
    let mut opt = AdamW::new(cfg.optimizer, &model.params);
    let ckpt_dir = out_dir.map(|d| d.join("checkpoint"));
    let mut state = TrainState { step: 0, controller: cfg.initial_controller(), optimizer_updates: 0, skipped_steps: 0 };
    if resume {
        let dir = ckpt_dir.as_ref().ok_or_else(|| Error::Invalid("resume needs an output directory".into()))?;
        state = load_training_checkpoint(dir, model, &mut opt)?;
        log::info!("resumed at step {}", state.step);
    }
    let mut metrics = match out_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            Some(open_metrics(&d.join("metrics.csv"), resume.then_some(state.step))?)
        }
        None => None,
    };
    let start_step = state.step;
    let mut last = None;
    let mut exhausted = false;
    while state.step < cfg.steps {
        let Some(batch) = source.batch(state.step, cfg.batch_size)? else {
            log::info!("data exhausted after {} steps", state.step);
            exhausted = true;
            break;
        };
        let row = train_step(model, &mut opt, &batch, cfg, &mut state)?;
        if let Some(f) = metrics.as_mut() {
            writeln!(f, "{}", row.csv())?;
        }
        if state.step % 100 == 0 {
            log::info!(
                "step {} loss {:.4} ce {:.4} alpha {:.3e} delta_hat {:.3} lr {:.2e}",
                state.step,
                row.loss,
                row.ce,
                row.alpha,
                row.delta_hat,
                row.lr
            );
        }
        last = Some(row);
        if cfg.eval_every > 0 && state.step % cfg.eval_every == 0 {
            if let Some(h) = eval.as_mut() {
                h(model, state.step)?;
            }
        }
        if let Some(dir) = &ckpt_dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < cfg.steps {
                save_training_checkpoint(dir, model, &opt, &state)?;
            }
        }
    }
    if let Some(dir) = &ckpt_dir {
        save_training_checkpoint(dir, model, &opt, &state)?;
    }
    Ok(TrainSummary {
        steps_run: state.step - start_step,
        final_step: state.step,
        skipped_steps: opt.skipped,
        data_exhausted: exhausted,
        last,
    })
}
