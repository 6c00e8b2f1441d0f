//! Flat `key = value` pipeline configuration with dotted keys.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fomaml::MetaTrainConfig;
use crate::metatest::{AdaptMode, TestConfig};
use crate::model::{parse_list, Architecture, NetworkSpec, Stage};
use crate::pruning::Scope;
use crate::tasks::{load_image_dir, GeneratorKind, TaskSource};

/// Settings of one FOMAML phase (pretraining or retraining).
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseConfig {
    pub alpha: f32,
    pub beta: f32,
    pub inner_steps: usize,
    pub batch: usize,
    pub iterations: usize,
    pub average_tasks: bool,
}

impl PhaseConfig {
    fn with_iterations(iterations: usize) -> Self {
        let d = MetaTrainConfig::default();
        Self {
            alpha: d.inner_lr,
            beta: d.outer_lr,
            inner_steps: d.inner_steps,
            batch: d.task_batch,
            iterations,
            average_tasks: d.average_tasks,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub arch: Architecture,
    /// `None` keeps the architecture's default widths.
    pub widths: Option<Vec<usize>>,

    pub task_kind: GeneratorKind,
    pub task_dim: usize,
    pub task_noise: f32,
    pub train_classes: usize,
    pub test_classes: usize,
    pub task_seed: u64,
    pub task_path: Option<PathBuf>,
    /// `None` means `shot + query`.
    pub min_images: Option<usize>,
    pub rotations: bool,
    pub glyph_shift: usize,
    pub glyph_flip: f32,

    pub way: usize,
    pub shot: usize,
    pub query: usize,

    pub pretrain: PhaseConfig,
    pub retrain: PhaseConfig,

    pub prune_percent: f64,
    pub prune_scope: Scope,

    pub test_lr: f32,
    pub test_steps: usize,
    pub test_tasks: usize,
    pub test_mode: AdaptMode,

    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub ablate: bool,
    pub baseline: bool,
    pub resume: bool,
    pub force: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let test = TestConfig::default();
        Self {
            arch: Architecture::MlpTiny,
            widths: None,
            task_kind: GeneratorKind::Blobs,
            task_dim: 8,
            task_noise: 0.1,
            train_classes: 64,
            test_classes: 20,
            task_seed: 0,
            task_path: None,
            min_images: None,
            rotations: false,
            glyph_shift: 3,
            glyph_flip: 0.05,
            way: test.way,
            shot: test.shot,
            query: test.query,
            pretrain: PhaseConfig::with_iterations(2000),
            retrain: PhaseConfig::with_iterations(600),
            prune_percent: 90.0,
            prune_scope: Scope::Global,
            test_lr: test.lr,
            test_steps: test.steps,
            test_tasks: test.tasks,
            test_mode: test.mode,
            seeds: vec![0],
            out: PathBuf::from("out"),
            ablate: false,
            baseline: false,
            resume: false,
            force: false,
        }
    }
}

/// Every recognised key, in canonical order.
pub const KEYS: &[&str] = &[
    "model.arch",
    "model.widths",
    "tasks.kind",
    "tasks.dim",
    "tasks.noise",
    "tasks.train_classes",
    "tasks.test_classes",
    "tasks.seed",
    "tasks.path",
    "tasks.min_images",
    "tasks.rotations",
    "tasks.shift",
    "tasks.flip",
    "episode.way",
    "episode.shot",
    "episode.query",
    "pretrain.alpha",
    "pretrain.beta",
    "pretrain.inner_steps",
    "pretrain.batch",
    "pretrain.iterations",
    "pretrain.average_tasks",
    "retrain.alpha",
    "retrain.beta",
    "retrain.inner_steps",
    "retrain.batch",
    "retrain.iterations",
    "retrain.average_tasks",
    "prune.percent",
    "prune.scope",
    "test.lr",
    "test.steps",
    "test.tasks",
    "test.mode",
    "run.seeds",
    "run.out",
    "run.ablate",
    "run.baseline",
    "run.resume",
    "run.force",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for {key}"))),
    }
}

fn parse_auto<T>(value: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    if value == "auto" || value.is_empty() {
        Ok(None)
    } else {
        f(value).map(Some)
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    /// Parses a config file's text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let phase = match key.split_once('.') {
            Some(("pretrain", field)) => Some((&mut self.pretrain, field)),
            Some(("retrain", field)) => Some((&mut self.retrain, field)),
            _ => None,
        };
        if let Some((p, field)) = phase {
            match field {
                "alpha" => p.alpha = parse(key, value)?,
                "beta" => p.beta = parse(key, value)?,
                "inner_steps" => p.inner_steps = parse(key, value)?,
                "batch" => p.batch = parse(key, value)?,
                "iterations" => p.iterations = parse(key, value)?,
                "average_tasks" => p.average_tasks = parse_bool(key, value)?,
                _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
            }
            return Ok(());
        }
        match key {
            "model.arch" => self.arch = value.parse()?,
            "model.widths" => self.widths = parse_auto(value, parse_list)?,
            "tasks.kind" => self.task_kind = value.parse()?,
            "tasks.dim" => self.task_dim = parse(key, value)?,
            "tasks.noise" => self.task_noise = parse(key, value)?,
            "tasks.train_classes" => self.train_classes = parse(key, value)?,
            "tasks.test_classes" => self.test_classes = parse(key, value)?,
            "tasks.seed" => self.task_seed = parse(key, value)?,
            "tasks.path" => self.task_path = parse_auto(value, |v| Ok(PathBuf::from(v)))?,
            "tasks.min_images" => self.min_images = parse_auto(value, |v| parse(key, v))?,
            "tasks.rotations" => self.rotations = parse_bool(key, value)?,
            "tasks.shift" => self.glyph_shift = parse(key, value)?,
            "tasks.flip" => self.glyph_flip = parse(key, value)?,
            "episode.way" => self.way = parse(key, value)?,
            "episode.shot" => self.shot = parse(key, value)?,
            "episode.query" => self.query = parse(key, value)?,
            "prune.percent" => self.prune_percent = parse(key, value)?,
            "prune.scope" => self.prune_scope = value.parse()?,
            "test.lr" => self.test_lr = parse(key, value)?,
            "test.steps" => self.test_steps = parse(key, value)?,
            "test.tasks" => self.test_tasks = parse(key, value)?,
            "test.mode" => self.test_mode = value.parse()?,
            "run.seeds" => self.seeds = value.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?,
            "run.out" => self.out = PathBuf::from(value),
            "run.ablate" => self.ablate = parse_bool(key, value)?,
            "run.baseline" => self.baseline = parse_bool(key, value)?,
            "run.resume" => self.resume = parse_bool(key, value)?,
            "run.force" => self.force = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let phase = |p: &PhaseConfig, field: &str| -> Option<String> {
            Some(match field {
                "alpha" => p.alpha.to_string(),
                "beta" => p.beta.to_string(),
                "inner_steps" => p.inner_steps.to_string(),
                "batch" => p.batch.to_string(),
                "iterations" => p.iterations.to_string(),
                "average_tasks" => p.average_tasks.to_string(),
                _ => return None,
            })
        };
        let opt = |o: Option<String>| o.unwrap_or_else(|| "auto".into());
        Some(match key {
            "model.arch" => self.arch.to_string(),
            "model.widths" => opt(self.widths.as_deref().map(join)),
            "tasks.kind" => self.task_kind.to_string(),
            "tasks.dim" => self.task_dim.to_string(),
            "tasks.noise" => self.task_noise.to_string(),
            "tasks.train_classes" => self.train_classes.to_string(),
            "tasks.test_classes" => self.test_classes.to_string(),
            "tasks.seed" => self.task_seed.to_string(),
            "tasks.path" => opt(self.task_path.as_ref().map(|p| p.display().to_string())),
            "tasks.min_images" => opt(self.min_images.map(|m| m.to_string())),
            "tasks.rotations" => self.rotations.to_string(),
            "tasks.shift" => self.glyph_shift.to_string(),
            "tasks.flip" => self.glyph_flip.to_string(),
            "episode.way" => self.way.to_string(),
            "episode.shot" => self.shot.to_string(),
            "episode.query" => self.query.to_string(),
            "prune.percent" => self.prune_percent.to_string(),
            "prune.scope" => self.prune_scope.to_string(),
            "test.lr" => self.test_lr.to_string(),
            "test.steps" => self.test_steps.to_string(),
            "test.tasks" => self.test_tasks.to_string(),
            "test.mode" => self.test_mode.to_string(),
            "run.seeds" => join(&self.seeds),
            "run.out" => self.out.display().to_string(),
            "run.ablate" => self.ablate.to_string(),
            "run.baseline" => self.baseline.to_string(),
            "run.resume" => self.resume.to_string(),
            "run.force" => self.force.to_string(),
            _ => {
                let (head, field) = key.split_once('.')?;
                match head {
                    "pretrain" => phase(&self.pretrain, field)?,
                    "retrain" => phase(&self.retrain, field)?,
                    _ => return None,
                }
            }
        })
    }

    /// All keys as `key = value` lines; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).unwrap_or_default());
        }
        s
    }

    /// Digest of the keys a checkpoint of `stage` depends on, plus the run
    /// seed. Later-stage keys are left out so that, for example, a pretrained
    /// checkpoint can be pruned at a different percentage.
    pub fn hash(&self, seed: u64, stage: Stage) -> String {
        let depth = match stage {
            Stage::Initial => 0,
            Stage::Pretrained | Stage::Adapted => 1,
            Stage::Pruned => 2,
            Stage::Retrained | Stage::TestAdapted => 3,
        };
        let groups = ["model.", "tasks.", "episode.", "pretrain.", "prune.", "retrain."];
        let live = &groups[..3 + depth];
        let mut h = Sha256::new();
        for key in KEYS.iter().filter(|k| live.iter().any(|g| k.starts_with(g))) {
            h.update(format!("{key}={}\n", self.get(key).unwrap_or_default()));
        }
        h.update(format!("seed={seed}\n"));
        hex::encode(&h.finalize()[..16])
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("run.seeds is empty".into()));
        }
        if !(0.0..100.0).contains(&self.prune_percent) {
            return Err(Error::Config(format!(
                "prune.percent {} outside [0, 100)",
                self.prune_percent
            )));
        }
        if self.test_lr.is_nan() || self.test_lr < 0.0 {
            return Err(Error::Config(format!("test.lr {} must be non-negative", self.test_lr)));
        }
        self.train_config(&self.pretrain, 0).validate()?;
        self.train_config(&self.retrain, 0).validate()?;
        Ok(())
    }

    /// Non-fatal remarks about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.retrain.iterations > self.pretrain.iterations {
            w.push(format!(
                "retrain.iterations ({}) exceeds pretrain.iterations ({})",
                self.retrain.iterations, self.pretrain.iterations
            ));
        }
        if self.prune_percent == 0.0 && self.test_mode == AdaptMode::MetaLth {
            w.push("prune.percent = 0 leaves no pruned weights, so meta-lth adaptation is a no-op".into());
        }
        w
    }

    pub fn train_config(&self, phase: &PhaseConfig, seed: u64) -> MetaTrainConfig {
        MetaTrainConfig {
            inner_lr: phase.alpha,
            outer_lr: phase.beta,
            inner_steps: phase.inner_steps,
            task_batch: phase.batch,
            iterations: phase.iterations,
            way: self.way,
            shot: self.shot,
            query: self.query,
            mask: None,
            seed,
            average_tasks: phase.average_tasks,
        }
    }

    pub fn test_config(&self, mode: AdaptMode, seed: u64) -> TestConfig {
        TestConfig {
            lr: self.test_lr,
            steps: self.test_steps,
            tasks: self.test_tasks,
            mode,
            way: self.way,
            shot: self.shot,
            query: self.query,
            seed,
        }
    }

    pub fn task_source(&self) -> Result<TaskSource> {
        Ok(match self.task_kind {
            GeneratorKind::Blobs => TaskSource::blobs(
                self.task_dim,
                self.task_noise,
                self.train_classes,
                self.test_classes,
                self.task_seed,
            ),
            GeneratorKind::Glyphs => TaskSource::glyphs(
                self.glyph_shift,
                self.glyph_flip,
                self.train_classes,
                self.test_classes,
                self.task_seed,
            ),
            GeneratorKind::Sinusoid => TaskSource::sinusoid(),
            GeneratorKind::ImageDir => {
                let path = self
                    .task_path
                    .as_ref()
                    .ok_or_else(|| Error::Config("tasks.kind = image-dir needs tasks.path".into()))?;
                load_image_dir(path, self.min_images.unwrap_or(self.shot + self.query), self.rotations)?
            }
        })
    }

    pub fn network(&self, src: &TaskSource) -> Result<NetworkSpec> {
        let shape = src.input_shape();
        let outputs = src.outputs(self.way);
        let spec = match (self.arch, shape) {
            (Architecture::MlpTiny, [d]) => NetworkSpec::mlp_tiny(*d, outputs),
            (Architecture::Conv4Tiny, [c, h, w]) if h == w => NetworkSpec::conv4_tiny(*c, *h, outputs),
            (arch, _) => {
                return Err(Error::Config(format!(
                    "{arch} cannot take {} inputs of shape {shape:?}",
                    src.kind()
                )))
            }
        };
        let spec = match &self.widths {
            Some(w) => spec.with_widths(w.clone()),
            None => spec,
        };
        spec.validate()?;
        Ok(spec)
    }
}
