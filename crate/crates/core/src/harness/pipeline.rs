//! Stage orchestration: pretrain, prune, retrain, meta-test, ablate.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{Checkpoint, RngState};
use super::config::{PhaseConfig, PipelineConfig};
use super::report::{across, delta_rows, eval_rows, sig6, DELTA_HEADER, EVAL_HEADER};
use crate::error::{Error, Result};
use crate::fomaml::{meta_train_with, TrainLogRow};
use crate::metatest::{evaluate, run_ablations, AblationReport, AdaptMode, EvalReport};
use crate::model::{init_params, NetworkSpec, Stage};
use crate::pruning::{apply_mask_reinit, prune};
use crate::tasks::TaskSource;

pub const INIT_FILE: &str = "checkpoint_init.bin";
pub const PRETRAIN_FILE: &str = "checkpoint_pretrain.bin";
pub const PRUNE_FILE: &str = "checkpoint_prune.bin";
pub const RETRAIN_FILE: &str = "checkpoint_retrain.bin";

/// One seed's view of a configuration: the task source and network shared
/// by all of its stages.
#[derive(Debug, Clone)]
pub struct Session {
    pub cfg: PipelineConfig,
    pub seed: u64,
    pub src: TaskSource,
    pub spec: NetworkSpec,
}

impl Session {
    pub fn new(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let src = cfg.task_source()?;
        let spec = cfg.network(&src)?;
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            src,
            spec,
        })
    }

    /// Stage-`initial` checkpoint: fresh parameters and the seed's RNG stream.
    pub fn initial(&self) -> Result<Checkpoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let initial = init_params(&self.spec, rng.next_u64())?;
        Ok(Checkpoint {
            current: initial.clone(),
            initial,
            mask: None,
            config_hash: self.hash(Stage::Initial),
            rng: RngState::capture(&rng),
        })
    }

    pub fn hash(&self, stage: Stage) -> String {
        self.cfg.hash(self.seed, stage)
    }

    /// Validates an incoming checkpoint's stage, config hash, and network.
    pub fn accept(&self, ck: &Checkpoint, allowed: &[Stage]) -> Result<()> {
        ck.require_stage(allowed)?;
        ck.check_hash(&self.hash(ck.stage()), self.cfg.force)?;
        if ck.spec() != &self.spec {
            return Err(Error::Config(format!(
                "checkpoint network {} differs from configured {}",
                ck.spec(),
                self.spec
            )));
        }
        Ok(())
    }

    fn train(
        &self,
        ck: &Checkpoint,
        phase: &PhaseConfig,
        masked: bool,
        label: &str,
    ) -> Result<(Checkpoint, Vec<TrainLogRow>)> {
        let mut rng = ck.rng.restore();
        let mut cfg = self.cfg.train_config(phase, rng.next_u64());
        if masked {
            cfg.mask = ck.mask.clone();
        }
        let every = (cfg.iterations / 10).max(1);
        let seed = self.seed;
        let (trained, log) = meta_train_with(&ck.current, &self.src, &cfg, |row, _| {
            if (row.iteration + 1) % every == 0 {
                log::info!(
                    "seed {seed} {label} {}/{} query loss {:.4} acc {:.3}",
                    row.iteration + 1,
                    cfg.iterations,
                    row.mean_query_loss,
                    row.mean_query_accuracy
                );
            }
        })?;
        let next = Checkpoint {
            config_hash: self.hash(trained.stage),
            current: trained,
            rng: RngState::capture(&rng),
            ..ck.clone()
        };
        Ok((next, log))
    }

    pub fn pretrain(&self, ck: &Checkpoint) -> Result<(Checkpoint, Vec<TrainLogRow>)> {
        self.accept(ck, &[Stage::Initial])?;
        self.train(ck, &self.cfg.pretrain, false, "pretrain")
    }

    /// Magnitude-prunes the pretrained weights and rewinds survivors.
    pub fn prune(&self, ck: &Checkpoint) -> Result<Checkpoint> {
        self.accept(ck, &[Stage::Pretrained])?;
        let mask = prune(&ck.current, self.cfg.prune_percent, self.cfg.prune_scope)?;
        let current = apply_mask_reinit(&ck.initial, &mask)?;
        log::info!(
            "seed {} pruned {}/{} prunable weights",
            self.seed,
            mask.prunable_zeros(),
            mask.prunable_len()
        );
        Ok(Checkpoint {
            current,
            mask: Some(mask),
            config_hash: self.hash(Stage::Pruned),
            ..ck.clone()
        })
    }

    pub fn retrain(&self, ck: &Checkpoint) -> Result<(Checkpoint, Vec<TrainLogRow>)> {
        self.accept(ck, &[Stage::Pruned])?;
        if ck.mask.is_none() {
            return Err(Error::Format("pruned checkpoint carries no mask".into()));
        }
        self.train(ck, &self.cfg.retrain, true, "retrain")
    }

    /// Seed of the meta-test task stream, shared by every mode and the baseline.
    pub fn test_seed(&self, ck: &Checkpoint) -> u64 {
        ck.rng.restore().next_u64()
    }

    pub fn metatest(&self, ck: &Checkpoint, mode: AdaptMode) -> Result<EvalReport> {
        self.accept(ck, &[Stage::Retrained])?;
        let cfg = self.cfg.test_config(mode, self.test_seed(ck));
        evaluate(&ck.current, ck.mask.as_ref(), &self.src, &cfg)
    }

    pub fn ablate(&self, ck: &Checkpoint) -> Result<AblationReport> {
        self.accept(ck, &[Stage::Retrained])?;
        let mask = ck
            .mask
            .as_ref()
            .ok_or_else(|| Error::Format("retrained checkpoint carries no mask".into()))?;
        let cfg = self.cfg.test_config(AdaptMode::MetaLth, self.test_seed(ck));
        run_ablations(&ck.current, mask, &self.src, &cfg)
    }

    /// Dense reference: continues unpruned training from the pretrained
    /// checkpoint for the retraining budget on the same task stream, then
    /// evaluates with full adaptation on the same test tasks.
    pub fn baseline(&self, pretrained: &Checkpoint) -> Result<EvalReport> {
        self.accept(pretrained, &[Stage::Pretrained])?;
        let (dense, _) = self.train(pretrained, &self.cfg.retrain, false, "baseline")?;
        let cfg = self.cfg.test_config(AdaptMode::Full, self.test_seed(&dense));
        evaluate(&dense.current, None, &self.src, &cfg)
    }
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub eval: EvalReport,
    pub ablations: Option<AblationReport>,
    pub baseline: Option<EvalReport>,
    pub retrained: Checkpoint,
    pub pretrain_log: Vec<TrainLogRow>,
    pub retrain_log: Vec<TrainLogRow>,
    /// Wall time per stage in milliseconds.
    pub timings: Vec<(&'static str, f64)>,
}

#[derive(Debug)]
pub struct PipelineReport {
    pub runs: Vec<(u64, Result<SeedRun>)>,
    pub warnings: Vec<String>,
    pub summary: String,
}

impl PipelineReport {
    pub fn successes(&self) -> impl Iterator<Item = &SeedRun> {
        self.runs.iter().filter_map(|(_, r)| r.as_ref().ok())
    }

    pub fn first_error(&self) -> Option<&Error> {
        self.runs.iter().find_map(|(_, r)| r.as_ref().err())
    }

    /// Per-seed mean accuracies of the main evaluation.
    pub fn seed_means(&self) -> Vec<f64> {
        self.successes().map(|r| r.eval.mean).collect()
    }
}

/// Where a seed's checkpoints live: `out` itself for a single-seed run,
/// `out/seed_<s>` otherwise.
pub fn seed_dir(cfg: &PipelineConfig, seed: u64) -> PathBuf {
    if cfg.seeds.len() == 1 {
        cfg.out.clone()
    } else {
        cfg.out.join(format!("seed_{seed}"))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Loads `path` when resuming and it exists and matches; otherwise runs
/// `make` and saves its result there.
fn stage<T>(
    session: &Session,
    path: PathBuf,
    allowed: Stage,
    make: impl FnOnce() -> Result<(Checkpoint, T)>,
) -> Result<(Checkpoint, Option<T>)> {
    if session.cfg.resume && path.exists() {
        let ck = Checkpoint::load(&path)?;
        session.accept(&ck, &[allowed])?;
        log::info!("seed {} resumed {} from {}", session.seed, allowed, path.display());
        return Ok((ck, None));
    }
    let (ck, extra) = make()?;
    ck.save(&path)?;
    Ok((ck, Some(extra)))
}

pub fn run_seed(cfg: &PipelineConfig, seed: u64) -> Result<SeedRun> {
    let session = Session::new(cfg, seed)?;
    let dir = seed_dir(cfg, seed);
    create_dir(&dir)?;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &'static str, timings: &mut Vec<(&'static str, f64)>| {
        timings.push((name, clock.elapsed().as_secs_f64() * 1e3));
        clock = Instant::now();
    };

    let (init, _) = stage(&session, dir.join(INIT_FILE), Stage::Initial, || {
        Ok((session.initial()?, ()))
    })?;
    let (pretrained, log) = stage(&session, dir.join(PRETRAIN_FILE), Stage::Pretrained, || {
        session.pretrain(&init)
    })?;
    let pretrain_log = log.unwrap_or_default();
    lap("pretrain", &mut timings);
    let (pruned, _) = stage(&session, dir.join(PRUNE_FILE), Stage::Pruned, || {
        Ok((session.prune(&pretrained)?, ()))
    })?;
    lap("prune", &mut timings);
    let (retrained, log) = stage(&session, dir.join(RETRAIN_FILE), Stage::Retrained, || {
        session.retrain(&pruned)
    })?;
    let retrain_log = log.unwrap_or_default();
    lap("retrain", &mut timings);
    let eval = session.metatest(&retrained, cfg.test_mode)?;
    lap("metatest", &mut timings);
    log::info!("seed {seed} {} accuracy {:.4}", cfg.test_mode, eval.mean);
    let ablations = if cfg.ablate {
        let a = session.ablate(&retrained)?;
        lap("ablate", &mut timings);
        Some(a)
    } else {
        None
    };
    let baseline = if cfg.baseline {
        let b = session.baseline(&pretrained)?;
        lap("baseline", &mut timings);
        log::info!("seed {seed} dense baseline accuracy {:.4}", b.mean);
        Some(b)
    } else {
        None
    };
    Ok(SeedRun {
        seed,
        eval,
        ablations,
        baseline,
        retrained,
        pretrain_log,
        retrain_log,
        timings,
    })
}

/// Runs every seed (in parallel), then writes `eval.csv`, `summary.txt`,
/// `timing.txt` and, when enabled, `ablations.csv`, `layer_deltas.csv` and
/// `baseline.csv` into `cfg.out`. A failing seed is reported in the summary
/// without stopping the others.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let warnings = cfg.warnings();
    for w in &warnings {
        log::warn!("{w}");
    }
    create_dir(&cfg.out)?;
    let runs: Vec<(u64, Result<SeedRun>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let run = run_seed(cfg, seed);
            if let Err(e) = &run {
                log::error!("seed {seed} failed: {e}");
            }
            (seed, run)
        })
        .collect();
    let mut report = PipelineReport {
        runs,
        warnings,
        summary: String::new(),
    };
    report.summary = summary(cfg, &report);
    write_outputs(cfg, &report)?;
    Ok(report)
}

fn summary(cfg: &PipelineConfig, report: &PipelineReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mode = {}", cfg.test_mode);
    let _ = writeln!(s, "prune = {} {}", sig6(cfg.prune_percent), cfg.prune_scope);
    let _ = writeln!(
        s,
        "test = lr {} steps {} tasks {}",
        sig6(cfg.test_lr as f64),
        cfg.test_steps,
        cfg.test_tasks
    );
    let _ = writeln!(
        s,
        "seeds = {}",
        cfg.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    );
    for (seed, run) in &report.runs {
        match run {
            Ok(r) => {
                let _ = writeln!(
                    s,
                    "seed {seed}: mean={} std={} sparsity={}",
                    sig6(r.eval.mean),
                    sig6(r.eval.std),
                    sig6(r.retrained.current.prunable_sparsity())
                );
            }
            Err(e) => {
                let _ = writeln!(s, "seed {seed}: failed: {e}");
            }
        }
    }
    let ok: Vec<&SeedRun> = report.successes().collect();
    let _ = writeln!(s, "{} across seeds: {}", cfg.test_mode, across(&report.seed_means()));
    if cfg.ablate {
        for mode in AdaptMode::ABLATIONS {
            let means: Vec<f64> = ok
                .iter()
                .filter_map(|r| r.ablations.as_ref()?.get(mode).map(|e| e.mean))
                .collect();
            let _ = writeln!(s, "ablation {mode} across seeds: {}", across(&means));
        }
    }
    if cfg.baseline {
        let means: Vec<f64> = ok.iter().filter_map(|r| r.baseline.as_ref().map(|b| b.mean)).collect();
        let _ = writeln!(s, "dense baseline across seeds: {}", across(&means));
    }
    for w in &report.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

fn write_outputs(cfg: &PipelineConfig, report: &PipelineReport) -> Result<()> {
    let mut eval = EVAL_HEADER.to_string();
    let mut deltas = DELTA_HEADER.to_string();
    let mut ablations = EVAL_HEADER.to_string();
    let mut baseline = EVAL_HEADER.to_string();
    let mut timing = String::new();
    for r in report.successes() {
        eval_rows(&mut eval, r.seed, cfg.test_mode.as_str(), &r.eval);
        let layer = r.ablations.as_ref().map_or(&r.eval.layer_deltas, |a| &a.layer_deltas);
        delta_rows(&mut deltas, r.seed, layer);
        if let Some(a) = &r.ablations {
            for e in &a.reports {
                eval_rows(&mut ablations, r.seed, e.mode.as_str(), e);
            }
        }
        if let Some(b) = &r.baseline {
            eval_rows(&mut baseline, r.seed, "dense-full", b);
        }
        for (name, ms) in &r.timings {
            let _ = writeln!(timing, "seed {} {name}_ms {ms:.1}", r.seed);
        }
    }
    write(cfg.out.join("eval.csv"), &eval)?;
    write(cfg.out.join("summary.txt"), &report.summary)?;
    write(cfg.out.join("timing.txt"), &timing)?;
    write(cfg.out.join("layer_deltas.csv"), &deltas)?;
    if cfg.ablate {
        write(cfg.out.join("ablations.csv"), &ablations)?;
    }
    if cfg.baseline {
        write(cfg.out.join("baseline.csv"), &baseline)?;
    }
    Ok(())
}
