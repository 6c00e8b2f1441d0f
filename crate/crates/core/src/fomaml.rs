//! First-order MAML.
//!
//! The inner loop adapts a copy of the shared parameters on a task's support
//! set; the outer step applies the query-set gradient taken at the adapted
//! parameters directly to the shared parameters. An optional gradient mask
//! confines both loops to a sub-network, which is how retraining keeps
//! pruned weights at zero.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{accuracy, loss_and_gradients, Batch, Gradients, ParamSet, Stage};
use crate::pruning::Mask;
use crate::tasks::{Split, Task, TaskSource};

#[derive(Debug, Clone, PartialEq)]
pub struct MetaTrainConfig {
    pub inner_lr: f32,
    pub outer_lr: f32,
    pub inner_steps: usize,
    pub task_batch: usize,
    pub iterations: usize,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub mask: Option<Mask>,
    pub seed: u64,
    /// Divide the summed task gradients by the batch size.
    pub average_tasks: bool,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.4,
            outer_lr: 0.001,
            inner_steps: 1,
            task_batch: 16,
            iterations: 2000,
            way: 5,
            shot: 1,
            query: 15,
            mask: None,
            seed: 0,
            average_tasks: false,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0 && self.outer_lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be positive (inner {}, outer {})",
                self.inner_lr, self.outer_lr
            )));
        }
        if self.task_batch == 0 || self.inner_steps == 0 {
            return Err(Error::Config("task batch and inner steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// One row of the meta-training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub mean_query_loss: f64,
    pub mean_query_accuracy: f64,
    pub wall_ms: f64,
}

fn check_adaptable(params: &ParamSet) -> Result<()> {
    if matches!(params.stage, Stage::Adapted | Stage::TestAdapted) {
        return Err(Error::PipelineOrder {
            expected: "initial, pretrained, pruned or retrained".into(),
            found: params.stage,
        });
    }
    Ok(())
}

fn diverged(err: Error, phase: &'static str, step: usize) -> Error {
    match err {
        Error::NonFinite { .. } => Error::Divergence {
            phase,
            iteration: 0,
            step,
            last_state: None,
        },
        other => other,
    }
}

/// Gradient of the batch loss, with non-finite results reported as divergence.
fn gradient(params: &ParamSet, batch: &Batch, phase: &'static str, step: usize) -> Result<(f32, Gradients, f64)> {
    let (loss, grads, logits) = loss_and_gradients(params, batch).map_err(|e| diverged(e, phase, step))?;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(diverged(Error::NonFinite { op: "loss" }, phase, step));
    }
    Ok((loss, grads, accuracy(&logits, &batch.targets)))
}

/// `steps` full-batch descent updates on `support`, without the trailing gradient.
pub(crate) fn adapt(
    params: &ParamSet,
    support: &Batch,
    lr: f32,
    steps: usize,
    mask: Option<&Mask>,
    phase: &'static str,
) -> Result<ParamSet> {
    let mut phi = params.clone();
    for step in 0..steps {
        let (_, grads, _) = gradient(&phi, support, phase, step)?;
        phi.descend(&grads, lr, mask)?;
    }
    Ok(phi)
}

/// Adapts `params` on `support` and returns the adapted parameters with the
/// masked support gradient evaluated at them. `params` is not modified.
pub fn inner_adapt(
    params: &ParamSet,
    support: &Batch,
    lr: f32,
    steps: usize,
    mask: Option<&Mask>,
) -> Result<(ParamSet, Gradients)> {
    check_adaptable(params)?;
    if let Some(mask) = mask {
        mask.check_aligned(params)?;
    }
    let phi = adapt(params, support, lr, steps, mask, "inner")?;
    let (_, mut grads, _) = gradient(&phi, support, "inner", steps)?;
    if let Some(mask) = mask {
        grads.apply_mask(mask);
    }
    Ok((phi.with_stage(Stage::Adapted), grads))
}

/// Result of one outer step.
#[derive(Debug, Clone)]
pub struct OuterStep {
    pub params: ParamSet,
    pub mean_query_loss: f64,
    pub mean_query_accuracy: f64,
}

/// First-order meta-update over a batch of tasks:
/// `theta' = theta - outer_lr * sum_i grad L_query_i(phi_i)`, summed in task order.
pub fn outer_update(params: &ParamSet, tasks: &[Task], cfg: &MetaTrainConfig) -> Result<OuterStep> {
    if tasks.len() != cfg.task_batch {
        return Err(Error::Config(format!(
            "expected {} tasks, got {}",
            cfg.task_batch,
            tasks.len()
        )));
    }
    check_adaptable(params)?;
    let mask = cfg.mask.as_ref();
    if let Some(mask) = mask {
        mask.check_aligned(params)?;
    }
    let per_task: Vec<Result<(f32, Gradients, f64)>> = tasks
        .par_iter()
        .map(|task| {
            let phi = adapt(
                params,
                &task.support_batch(),
                cfg.inner_lr,
                cfg.inner_steps,
                mask,
                "inner",
            )?;
            let (loss, mut grads, acc) = gradient(&phi, &task.query_batch(), "outer", cfg.inner_steps)?;
            if let Some(mask) = mask {
                grads.apply_mask(mask);
            }
            Ok((loss, grads, acc))
        })
        .collect();
    let mut total = Gradients::zeros_like(params);
    let (mut loss_sum, mut acc_sum) = (0.0f64, 0.0f64);
    for result in per_task {
        let (loss, grads, acc) = result?;
        total.add_assign(&grads);
        loss_sum += loss as f64;
        acc_sum += acc;
    }
    if cfg.average_tasks {
        total.scale(1.0 / tasks.len() as f32);
    }
    let mut next = params.clone();
    next.descend(&total, cfg.outer_lr, mask)?;
    if !next.is_finite() {
        return Err(Error::Divergence {
            phase: "outer",
            iteration: 0,
            step: 0,
            last_state: None,
        });
    }
    Ok(OuterStep {
        params: next,
        mean_query_loss: loss_sum / tasks.len() as f64,
        mean_query_accuracy: acc_sum / tasks.len() as f64,
    })
}

/// Stage after training from `stage`.
fn trained_stage(stage: Stage) -> Result<Stage> {
    match stage {
        Stage::Initial | Stage::Pretrained => Ok(Stage::Pretrained),
        Stage::Pruned | Stage::Retrained => Ok(Stage::Retrained),
        found => Err(Error::PipelineOrder {
            expected: "initial, pretrained, pruned or retrained".into(),
            found,
        }),
    }
}

pub fn meta_train(params: &ParamSet, src: &TaskSource, cfg: &MetaTrainConfig) -> Result<(ParamSet, Vec<TrainLogRow>)> {
    meta_train_with(params, src, cfg, |_, _| {})
}

/// Runs `cfg.iterations` outer steps on fresh train-split task batches.
/// `observe` sees every log row with the parameters after that step.
pub fn meta_train_with(
    params: &ParamSet,
    src: &TaskSource,
    cfg: &MetaTrainConfig,
    mut observe: impl FnMut(&TrainLogRow, &ParamSet),
) -> Result<(ParamSet, Vec<TrainLogRow>)> {
    cfg.validate()?;
    let stage = trained_stage(params.stage)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = params.clone();
    let mut log = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let start = Instant::now();
        let tasks = (0..cfg.task_batch)
            .map(|_| src.sample_task(Split::Train, cfg.way, cfg.shot, cfg.query, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let step = match outer_update(&theta, &tasks, cfg) {
            Ok(step) => step,
            Err(Error::Divergence { phase, step, .. }) => {
                return Err(Error::Divergence {
                    phase,
                    iteration,
                    step,
                    last_state: Some(Box::new(theta)),
                })
            }
            Err(e) => return Err(e),
        };
        theta = step.params;
        let row = TrainLogRow {
            iteration,
            mean_query_loss: step.mean_query_loss,
            mean_query_accuracy: step.mean_query_accuracy,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        observe(&row, &theta);
        log.push(row);
    }
    Ok((theta.with_stage(stage), log))
}
