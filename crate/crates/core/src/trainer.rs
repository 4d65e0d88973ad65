//! Training loop: AdamW on the denoising loss with best-validation selection.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{model_loss_and_grad, Triplet};
use crate::error::{Error, Result};
use crate::networks::RefineBridgeModel;
use crate::optim::{AdamW, AdamWConfig};
use crate::parallel::Exec;
use crate::params::ParamStore;
use crate::sampler::{refine_batch, RefinementConfig};
use crate::schedule::Schedule;

/// Steps of the ODE sampler used for the validation metric.
pub const VALIDATION_STEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub adam_betas: (f64, f64),
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Validate every this many steps (0 disables validation).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_eps: 1e-8,
            adam_betas: (0.9, 0.999),
            weight_decay: 0.01,
            batch_size: 512,
            max_steps: 5000,
            seed: 0,
            eval_every: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            errs.push(format!(
                "train.learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            errs.push(format!("train.adam_eps must be > 0, got {}", self.adam_eps));
        }
        for (name, b) in [("beta1", self.adam_betas.0), ("beta2", self.adam_betas.1)] {
            if !(b > 0.0 && b < 1.0) {
                errs.push(format!(
                    "train.adam_betas {name} must lie in (0, 1), got {b}"
                ));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            errs.push(format!(
                "train.weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be >= 1".into());
        }
        errs
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossHistory {
    pub records: Vec<StepRecord>,
}

impl LossHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Trailing moving average of the loss with the given window, one value
    /// per step (shorter windows at the start).
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let losses = self.losses();
        let w = window.max(1);
        (0..losses.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(f, "step,loss,val_mse").map_err(io)?;
        for r in &self.records {
            match r.val_mse {
                Some(v) => writeln!(f, "{},{},{}", r.step, r.loss, v),
                None => writeln!(f, "{},{},", r.step, r.loss),
            }
            .map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: LossHistory,
    /// Step and validation MSE of the retained parameters, when validation ran.
    pub best: Option<(usize, f64)>,
    pub steps: usize,
}

/// Refined MSE over a split using the deterministic ODE sampler.
pub fn validation_mse(
    model: &RefineBridgeModel,
    samples: &[Triplet<'_>],
    schedule: &Schedule,
    exec: Exec,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let items: Vec<(&[f64], &[f64])> = samples.iter().map(|s| (s.context, s.prior)).collect();
    let out = refine_batch(
        model,
        &items,
        schedule,
        &RefinementConfig::ode(VALIDATION_STEPS),
        exec,
    )?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (r, s) in out.iter().zip(samples) {
        for (a, b) in r.output.iter().zip(s.target) {
            sum += (a - b) * (a - b);
        }
        n += s.target.len();
    }
    Ok(sum / n as f64)
}

/// Train `model` in place; `max_steps = 0` leaves it untouched. When `val`
/// is non-empty and `eval_every > 0`, the parameters with the lowest
/// validation MSE are restored at the end.
pub fn train(
    model: &mut RefineBridgeModel,
    train_set: &[Triplet<'_>],
    val: &[Triplet<'_>],
    schedule: &Schedule,
    config: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome> {
    train_with_progress(model, train_set, val, schedule, config, exec, |_| {})
}

pub fn train_with_progress(
    model: &mut RefineBridgeModel,
    train_set: &[Triplet<'_>],
    val: &[Triplet<'_>],
    schedule: &Schedule,
    config: &TrainConfig,
    exec: Exec,
    mut progress: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let (h, c) = (model.config().horizon, model.config().context);
    for (i, s) in train_set.iter().chain(val).enumerate() {
        if s.prior.len() != h || s.target.len() != h || s.context.len() != c {
            return Err(Error::Data(format!(
                "sample {i} has shapes (C={}, prior={}, target={}), model expects (C={c}, H={h})",
                s.context.len(),
                s.prior.len(),
                s.target.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(config.optimizer(), model.params());
    let batch_size = config.batch_size.min(train_set.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut batch = Vec::with_capacity(batch_size);

    let mut history = LossHistory::default();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let validate = !val.is_empty() && config.eval_every > 0;

    for step in 1..=config.max_steps {
        if cursor + batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        batch.clear();
        batch.extend(
            order[cursor..cursor + batch_size]
                .iter()
                .map(|&i| train_set[i]),
        );
        cursor += batch_size;

        let (loss, grads) =
            model_loss_and_grad(model, &batch, schedule, &mut rng, exec).map_err(|e| match e {
                Error::NonFinite { layer } => Error::NanLoss {
                    step,
                    detail: format!("non-finite value in {layer}"),
                },
                other => other,
            })?;
        opt.step(model.params_mut(), &grads);

        let val_mse = if validate && (step % config.eval_every == 0 || step == config.max_steps) {
            let v = validation_mse(model, val, schedule, exec)?;
            if best.as_ref().is_none_or(|(_, b, _)| v < *b) {
                best = Some((step, v, model.params().clone()));
            }
            Some(v)
        } else {
            None
        };
        let record = StepRecord {
            step,
            loss,
            val_mse,
        };
        progress(&record);
        history.records.push(record);
    }

    let best = best.map(|(step, v, params)| {
        *model.params_mut() = params;
        (step, v)
    });
    Ok(TrainOutcome {
        history,
        best,
        steps: config.max_steps,
    })
}
