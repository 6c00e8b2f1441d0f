//! Meta-test adaptation and evaluation.
//!
//! Each mode picks a gradient mask G; adaptation runs
//! `theta <- theta - lr * (grad L_support(theta) * G)` and coordinates with
//! `G = 0` never change. In `MetaLth` mode G is the complement of the
//! pruning mask, so only the pruned connections learn.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fomaml::adapt;
use crate::model::{accuracy, predict, Batch, ParamSet, Stage};
use crate::pruning::{complement, Mask};
use crate::tasks::{Split, TaskSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdaptMode {
    /// Train only the pruned connections (complement mask).
    MetaLth,
    /// No adaptation.
    ZeroShot,
    /// Train only the surviving connections plus exempt layers.
    UnprunedOnly,
    /// Train only the classifier weight and bias.
    ClassifierOnly,
    /// Train everything.
    Full,
}

impl AdaptMode {
    pub const ABLATIONS: [AdaptMode; 4] = [
        AdaptMode::ZeroShot,
        AdaptMode::UnprunedOnly,
        AdaptMode::ClassifierOnly,
        AdaptMode::MetaLth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AdaptMode::MetaLth => "meta-lth",
            AdaptMode::ZeroShot => "zero-shot",
            AdaptMode::UnprunedOnly => "unpruned-only",
            AdaptMode::ClassifierOnly => "classifier-only",
            AdaptMode::Full => "full",
        }
    }

    fn needs_mask(self) -> bool {
        matches!(self, AdaptMode::MetaLth | AdaptMode::UnprunedOnly)
    }
}

impl fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "meta-lth" => AdaptMode::MetaLth,
            "zero-shot" => AdaptMode::ZeroShot,
            "unpruned-only" => AdaptMode::UnprunedOnly,
            "classifier-only" => AdaptMode::ClassifierOnly,
            "full" => AdaptMode::Full,
            other => return Err(Error::Config(format!("unknown adaptation mode `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestConfig {
    pub lr: f32,
    pub steps: usize,
    pub tasks: usize,
    pub mode: AdaptMode,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub seed: u64,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            steps: 10,
            tasks: 100,
            mode: AdaptMode::MetaLth,
            way: 5,
            shot: 1,
            query: 15,
            seed: 0,
        }
    }
}

impl TestConfig {
    /// Larger step, fewer steps: the setting used for character-style data.
    pub fn omniglot_preset() -> Self {
        Self {
            lr: 0.1,
            steps: 5,
            ..Self::default()
        }
    }

    /// Adaptation steps actually taken.
    pub fn effective_steps(&self) -> usize {
        if self.mode == AdaptMode::ZeroShot {
            0
        } else {
            self.steps
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: AdaptMode,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across tasks.
    pub std: f64,
    /// Per-layer `||theta' - theta||_2`, averaged over tasks.
    pub layer_deltas: Vec<(String, f64)>,
    /// Input digest of every evaluated task, in order.
    pub fingerprints: Vec<String>,
    pub config: TestConfig,
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Gradient mask G for a mode; `None` means no adaptation.
pub fn gradient_mask(mode: AdaptMode, params: &ParamSet, mask: Option<&Mask>) -> Result<Option<Mask>> {
    let need = || {
        mask.cloned()
            .ok_or_else(|| Error::Config(format!("{mode} adaptation needs a pruning mask")))
    };
    let g = match mode {
        AdaptMode::ZeroShot => return Ok(None),
        AdaptMode::MetaLth => complement(&need()?),
        AdaptMode::UnprunedOnly => need()?,
        AdaptMode::ClassifierOnly => Mask::classifier_only(params),
        AdaptMode::Full => Mask::ones(params),
    };
    g.check_aligned(params)?;
    Ok(Some(g))
}

fn check_stage(params: &ParamSet, mode: AdaptMode) -> Result<()> {
    let ok = if mode.needs_mask() {
        params.stage == Stage::Retrained
    } else {
        !matches!(params.stage, Stage::Adapted | Stage::TestAdapted)
    };
    if ok {
        Ok(())
    } else {
        Err(Error::PipelineOrder {
            expected: if mode.needs_mask() {
                "retrained"
            } else {
                "a non-adapted stage"
            }
            .into(),
            found: params.stage,
        })
    }
}

fn adapt_with(params: &ParamSet, grad_mask: Option<&Mask>, support: &Batch, cfg: &TestConfig) -> Result<ParamSet> {
    let adapted = match grad_mask {
        Some(g) if cfg.effective_steps() > 0 => {
            adapt(params, support, cfg.lr, cfg.effective_steps(), Some(g), "meta-test")?
        }
        _ => params.clone(),
    };
    Ok(adapted.with_stage(Stage::TestAdapted))
}

/// Adapts meta-trained parameters to one task's support set under `cfg.mode`.
pub fn adapt_test(params: &ParamSet, mask: Option<&Mask>, support: &Batch, cfg: &TestConfig) -> Result<ParamSet> {
    check_stage(params, cfg.mode)?;
    let g = gradient_mask(cfg.mode, params, mask)?;
    adapt_with(params, g.as_ref(), support, cfg)
}

/// Query accuracy and per-layer deltas of one adapted task.
type TaskOutcome = (f64, Vec<(String, f64)>);

/// Evaluates `cfg.tasks` test-split tasks. Each task adapts from the same
/// `params`; accuracy is measured on its query set with the adapted copy.
pub fn evaluate(params: &ParamSet, mask: Option<&Mask>, src: &TaskSource, cfg: &TestConfig) -> Result<EvalReport> {
    check_stage(params, cfg.mode)?;
    let g = gradient_mask(cfg.mode, params, mask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tasks = (0..cfg.tasks)
        .map(|_| src.sample_task(Split::Test, cfg.way, cfg.shot, cfg.query, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let per_task: Vec<Result<TaskOutcome>> = tasks
        .par_iter()
        .map(|task| {
            let adapted = adapt_with(params, g.as_ref(), &task.support_batch(), cfg)?;
            let query = task.query_batch();
            let fwd = predict(&adapted, &query.inputs)?;
            Ok((
                accuracy(fwd.logits(), &query.targets),
                adapted.layer_delta_norms(params),
            ))
        })
        .collect();
    let mut accuracies = Vec::with_capacity(tasks.len());
    let mut delta_sums: Vec<(String, f64)> = Vec::new();
    for result in per_task {
        let (acc, deltas) = result?;
        accuracies.push(acc);
        if delta_sums.is_empty() {
            delta_sums = deltas.iter().map(|(n, _)| (n.clone(), 0.0)).collect();
        }
        for (sum, (_, d)) in delta_sums.iter_mut().zip(deltas) {
            sum.1 += d;
        }
    }
    let n = accuracies.len().max(1) as f64;
    let layer_deltas = delta_sums.into_iter().map(|(name, s)| (name, s / n)).collect();
    let (mean, std) = mean_std(&accuracies);
    Ok(EvalReport {
        mode: cfg.mode,
        accuracies,
        mean,
        std,
        layer_deltas,
        fingerprints: tasks.iter().map(|t| t.fingerprint()).collect(),
        config: cfg.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    /// Zero-shot, unpruned-only, classifier-only, meta-lth, in that order.
    pub reports: Vec<EvalReport>,
    /// Mean per-layer update norm of the meta-lth run.
    pub layer_deltas: Vec<(String, f64)>,
}

impl AblationReport {
    pub fn get(&self, mode: AdaptMode) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.mode == mode)
    }
}

/// Evaluates every ablation mode over the same task stream (`cfg.seed`).
pub fn run_ablations(params: &ParamSet, mask: &Mask, src: &TaskSource, cfg: &TestConfig) -> Result<AblationReport> {
    let reports = AdaptMode::ABLATIONS
        .iter()
        .map(|&mode| {
            let cfg = TestConfig { mode, ..cfg.clone() };
            evaluate(params, Some(mask), src, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let layer_deltas = reports
        .iter()
        .find(|r| r.mode == AdaptMode::MetaLth)
        .map(|r| r.layer_deltas.clone())
        .unwrap_or_default();
    Ok(AblationReport { reports, layer_deltas })
}
