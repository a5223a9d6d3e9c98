use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{accuracy, mean_loss_and_gradient, predict};
use super::params::ViTParams;
use crate::error::Error;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Full-batch gradient norm under which the model counts as converged.
    pub grad_norm_threshold: f64,
    pub schedule: LrSchedule,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to zero over all steps.
    #[default]
    Cosine,
}

impl LrSchedule {
    fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 16,
            seed: 7,
            grad_norm_threshold: 0.05,
            schedule: LrSchedule::Cosine,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub grad_norm_threshold: f64,
    pub converged: bool,
    pub train_accuracy: f64,
    /// Mini-batch loss of every optimisation step.
    pub step_losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real> {
    pub params: ViTParams<T>,
    pub report: TrainReport,
}

/// Training failure, carrying the last parameters that produced a finite loss.
#[derive(Debug)]
pub struct TrainError<T: Real> {
    pub error: Error,
    pub last_valid: Option<ViTParams<T>>,
}

impl<T: Real> From<Error> for TrainError<T> {
    fn from(error: Error) -> Self {
        Self {
            error,
            last_valid: None,
        }
    }
}

/// Mini-batch SGD with heavy-ball momentum on the mean cross-entropy.
pub fn train_toy<T: Real>(
    params: &ViTParams<T>,
    samples: &[Tensor<T>],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError<T>> {
    if samples.is_empty() {
        return Err(Error::Input("training set is empty".into()).into());
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("train.batch_size must be at least 1".into()).into());
    }
    let (initial_loss, _) = mean_loss_and_gradient(params, samples, labels)?;
    let mut current = params.clone();
    let mut velocity = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step_losses = Vec::new();
    let total_steps = cfg.epochs * samples.len().div_ceil(cfg.batch_size);
    let mut step = 0;
    let mu = T::from_f64_lossy(cfg.momentum);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<Tensor<T>> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grad) = mean_loss_and_gradient(&current, &xs, &ys)?;
            if !loss.is_finite() || grad.global_norm().is_nan() {
                return Err(TrainError {
                    error: Error::Training {
                        epoch,
                        message: format!("non-finite loss {loss}"),
                    },
                    last_valid: Some(current),
                });
            }
            step_losses.push(loss);
            let lr = T::from_f64_lossy(cfg.lr * cfg.schedule.factor(step, total_steps));
            step += 1;
            let mut next = Vec::new();
            let mut next_v = Vec::new();
            for ((w, v), g) in current
                .tensors()
                .into_iter()
                .zip(velocity.tensors())
                .zip(grad.tensors())
            {
                let nv = v.zip_map(g, |vv, gv| mu * vv + gv)?;
                next.push(w.zip_map(&nv, |wv, vv| wv - lr * vv)?);
                next_v.push(nv);
            }
            current = ViTParams::from_tensors(&current.config, next)?;
            velocity = ViTParams::from_tensors(&current.config, next_v)?;
        }
    }

    let (final_loss, grad) = mean_loss_and_gradient(&current, samples, labels)?;
    if !final_loss.is_finite() {
        return Err(TrainError {
            error: Error::Training {
                epoch: cfg.epochs,
                message: format!("non-finite final loss {final_loss}"),
            },
            last_valid: None,
        });
    }
    let final_grad_norm = grad.global_norm();
    let logits = predict(&current, samples, None)?;
    let report = TrainReport {
        epochs: cfg.epochs,
        initial_loss,
        final_loss,
        final_grad_norm,
        grad_norm_threshold: cfg.grad_norm_threshold,
        converged: final_grad_norm < cfg.grad_norm_threshold,
        train_accuracy: accuracy(&logits, labels),
        step_losses,
    };
    Ok(TrainOutcome {
        params: current,
        report,
    })
}
