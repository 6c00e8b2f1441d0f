use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metalth::harness::report::{delta_rows, eval_rows, sig6, DELTA_HEADER, EVAL_HEADER};
use metalth::harness::{
    run_pipeline, verify_checkpoint, Checkpoint, PipelineConfig, Session, INIT_FILE, PRETRAIN_FILE, PRUNE_FILE,
    RETRAIN_FILE,
};
use metalth::{Error, Result};

/// Sparse meta-learning pipeline: FOMAML pretraining, magnitude pruning with
/// rewind, masked retraining, and complement-mask meta-testing.
#[derive(Parser, Debug)]
#[command(name = "metalth", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Args, Debug)]
struct Opts {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed(s), comma separated.
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Pruning percentage p in [0, 100).
    #[arg(long = "prune-pct", global = true)]
    prune_pct: Option<String>,
    /// `global` or `per-layer`.
    #[arg(long, global = true)]
    scope: Option<String>,
    /// Meta-test mode: meta-lth, zero-shot, unpruned-only, classifier-only, full.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Input checkpoint for single-stage commands.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Override any config key, e.g. `--set pretrain.iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Accept checkpoints written under a different configuration.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Meta-train from fresh parameters.
    Pretrain,
    /// Prune a pretrained checkpoint and rewind the survivors.
    Prune,
    /// Retrain a pruned checkpoint under its mask.
    Retrain,
    /// Evaluate a retrained checkpoint on test tasks.
    Metatest,
    /// Evaluate a retrained checkpoint under every ablation mode.
    Ablate,
    /// Run every stage for every seed.
    Pipeline,
    /// Check a checkpoint's invariants.
    Verify,
}

fn config(opts: &Opts) -> Result<PipelineConfig> {
    let mut cfg = match &opts.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    for kv in &opts.set {
        cfg.apply_override(kv)?;
    }
    let flags = [
        ("run.seeds", &opts.seed),
        ("prune.percent", &opts.prune_pct),
        ("prune.scope", &opts.scope),
        ("test.mode", &opts.mode),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    if let Some(out) = &opts.out {
        cfg.out = out.clone();
    }
    if opts.force {
        cfg.force = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn session(cfg: &PipelineConfig) -> Result<Session> {
    match cfg.seeds.as_slice() {
        [seed] => Session::new(cfg, *seed),
        _ => Err(Error::Config("single-stage commands take exactly one --seed".into())),
    }
}

fn input(opts: &Opts, cfg: &PipelineConfig, default: &str) -> Result<Checkpoint> {
    let path = opts.checkpoint.clone().unwrap_or_else(|| cfg.out.join(default));
    log::info!("loading {}", path.display());
    Checkpoint::load(path)
}

fn out_dir(cfg: &PipelineConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Io {
        path: cfg.out.clone(),
        source: e,
    })?;
    Ok(&cfg.out)
}

fn save(ck: &Checkpoint, cfg: &PipelineConfig, name: &str) -> Result<()> {
    let path = out_dir(cfg)?.join(name);
    ck.save(&path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn write(cfg: &PipelineConfig, name: &str, text: &str) -> Result<()> {
    let path = out_dir(cfg)?.join(name);
    std::fs::write(&path, text).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// Exit code of a run that got as far as producing results.
fn run(cli: Cli) -> Result<i32> {
    let opts = &cli.opts;
    let cfg = config(opts)?;
    match cli.command {
        Command::Pretrain => {
            let s = session(&cfg)?;
            let init = s.initial()?;
            save(&init, &cfg, INIT_FILE)?;
            let (ck, _) = s.pretrain(&init)?;
            save(&ck, &cfg, PRETRAIN_FILE)?;
        }
        Command::Prune => {
            let s = session(&cfg)?;
            let ck = s.prune(&input(opts, &cfg, PRETRAIN_FILE)?)?;
            save(&ck, &cfg, PRUNE_FILE)?;
        }
        Command::Retrain => {
            let s = session(&cfg)?;
            let (ck, _) = s.retrain(&input(opts, &cfg, PRUNE_FILE)?)?;
            save(&ck, &cfg, RETRAIN_FILE)?;
        }
        Command::Metatest => {
            let s = session(&cfg)?;
            let report = s.metatest(&input(opts, &cfg, RETRAIN_FILE)?, cfg.test_mode)?;
            let mut csv = EVAL_HEADER.to_string();
            eval_rows(&mut csv, s.seed, cfg.test_mode.as_str(), &report);
            write(&cfg, "eval.csv", &csv)?;
            let summary = format!(
                "mode = {}\nseed {}: mean={} std={}\n",
                cfg.test_mode,
                s.seed,
                sig6(report.mean),
                sig6(report.std)
            );
            write(&cfg, "summary.txt", &summary)?;
            print!("{summary}");
        }
        Command::Ablate => {
            let s = session(&cfg)?;
            let report = s.ablate(&input(opts, &cfg, RETRAIN_FILE)?)?;
            let mut csv = EVAL_HEADER.to_string();
            let mut text = String::new();
            for e in &report.reports {
                eval_rows(&mut csv, s.seed, e.mode.as_str(), e);
                let _ = writeln!(text, "{}: mean={} std={}", e.mode, sig6(e.mean), sig6(e.std));
            }
            let mut deltas = DELTA_HEADER.to_string();
            delta_rows(&mut deltas, s.seed, &report.layer_deltas);
            write(&cfg, "ablations.csv", &csv)?;
            write(&cfg, "layer_deltas.csv", &deltas)?;
            print!("{text}");
        }
        Command::Pipeline => {
            let report = run_pipeline(&cfg)?;
            print!("{}", report.summary);
            if let Some(e) = report.first_error() {
                let failed = report.runs.iter().filter(|r| r.1.is_err()).count();
                eprintln!("error: {failed} of {} seeds failed; first: {e}", report.runs.len());
                return Ok(e.exit_code());
            }
        }
        Command::Verify => {
            let path = opts
                .checkpoint
                .clone()
                .ok_or_else(|| Error::Config("verify needs --checkpoint".into()))?;
            let ck = Checkpoint::load(&path)?;
            let v = verify_checkpoint(&ck);
            println!("stage={}", v.stage);
            for c in &v.checks {
                println!("{} {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail);
            }
            println!("sparsity={:.3}", v.sparsity);
            v.into_result()?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
