//! Flow-matching optimisation of the velocity model.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SpfError};
use crate::grid::FieldGrid;
use crate::model::checkpoint::save_checkpoint;
use crate::model::VelocityModel;
use crate::path::{make_training_sample, PathSample};
use crate::rng::substream;
use crate::schedule::PyramidSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warm-up length in steps; 0 disables warm-up.
    pub warmup_steps: u64,
    /// Cosine decay to zero over the steps after warm-up.
    pub cosine_decay: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub multi_timescale: bool,
    pub log_every: u64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 2000,
            learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 50,
            cosine_decay: true,
            clip_norm: Some(1.0),
            seed: 0,
            multi_timescale: true,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.eps > 0.0) {
            return Err(invalid("learning rate and epsilon must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(invalid("clip norm must be positive"));
            }
        }
        if self.log_every == 0 {
            return Err(invalid("log interval must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.cosine_decay || self.steps <= self.warmup_steps {
            return self.learning_rate;
        }
        let frac = (step - self.warmup_steps) as f64 / (self.steps - self.warmup_steps) as f64;
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
    }
}

/// One training member: finest-resolution targets and aligned forcings.
#[derive(Debug, Clone)]
pub struct TrainingMember {
    pub targets: FieldGrid,
    pub forcings: FieldGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// Trailing mean over the last `MOVING_WINDOW` steps.
    pub moving_average: Vec<f64>,
    pub log: Vec<TrainLogRecord>,
    pub wall_ms: u64,
    pub checkpoint: Option<PathBuf>,
}

pub const MOVING_WINDOW: usize = 50;

/// Mean squared velocity error of the batch (mean over elements, then over
/// samples) and its parameter gradient.
pub fn loss_on_batch(model: &VelocityModel, batch: &[PathSample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mut grad = vec![0.0; model.num_params()];
    let mut total = 0.0;
    let inv_b = 1.0 / batch.len() as f64;
    for sample in batch {
        let (v, tape) = model.forward_tape(&sample.x_t, &sample.cond)?;
        let resid = v.sub(&sample.target)?;
        let n = resid.len() as f64;
        let loss = resid.data().iter().map(|r| r * r).sum::<f64>() / n;
        if !loss.is_finite() {
            return Err(SpfError::NonFinite {
                context: format!("loss at stage {} t={:.4}", sample.stage, sample.t),
            });
        }
        total += loss * inv_b;
        let cot = resid.scale(2.0 * inv_b / n);
        model.backward_tape(&tape, &cot, &mut grad)?;
    }
    Ok((total, grad))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

fn clip(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// Draw one batch of training tuples from randomly chosen members.
pub fn draw_batch<R: Rng + ?Sized>(
    members: &[TrainingMember],
    schedule: &PyramidSchedule,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<PathSample>> {
    (0..config.batch_size)
        .map(|_| {
            let m = &members[rng.random_range(0..members.len())];
            make_training_sample(&m.targets, &m.forcings, schedule, config.multi_timescale, rng)
        })
        .collect()
}

/// Run `config.steps` Adam updates. A checkpoint is written into
/// `checkpoint_dir` at the configured cadence and at the end.
pub fn train(
    model: &mut VelocityModel,
    members: &[TrainingMember],
    schedule: &PyramidSchedule,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    config.validate()?;
    if members.is_empty() {
        return Err(invalid("no training members"));
    }
    let start = Instant::now();
    let mut rng = substream(config.seed, &["train"]);
    let mut opt = Adam::new(model.num_params(), config.beta1, config.beta2, config.eps);
    let mut report = TrainReport::default();

    for step in 0..config.steps {
        let batch = draw_batch(members, schedule, config, &mut rng)?;
        let (loss, mut grad) = loss_on_batch(model, &batch)?;
        let norm = match config.clip_norm {
            Some(c) => clip(&mut grad, c),
            None => grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        };
        let lr = config.lr_at(step);
        opt.step(model.params_mut(), &grad, lr);
        if let Some(i) = model.params().iter().position(|p| !p.is_finite()) {
            return Err(SpfError::NonFinite {
                context: format!("parameter {i} after step {step}"),
            });
        }

        report.losses.push(loss);
        let lo = report.losses.len().saturating_sub(MOVING_WINDOW);
        let window = &report.losses[lo..];
        report.moving_average.push(window.iter().sum::<f64>() / window.len() as f64);
        debug!("step {step} loss {loss:.5} grad norm {norm:.4}");
        if (step + 1) % config.log_every == 0 || step + 1 == config.steps {
            let rec = TrainLogRecord {
                step: step + 1,
                loss,
                lr,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            info!(
                "step {} loss {:.5} avg {:.5} lr {:.2e}",
                rec.step,
                loss,
                report.moving_average.last().copied().unwrap_or(loss),
                lr
            );
            report.log.push(rec);
        }
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && step + 1 < config.steps {
                save_checkpoint(model, &dir.join(format!("step-{:06}", step + 1)), step + 1)?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(model, dir, config.steps)?;
        report.checkpoint = Some(dir.to_path_buf());
    }
    report.wall_ms = start.elapsed().as_millis() as u64;
    Ok(report)
}
