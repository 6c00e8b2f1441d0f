//! Configuration, checkpoints, and the end-to-end pipeline.

mod checkpoint;
mod config;
mod pipeline;
pub mod report;
mod verify;

pub use checkpoint::{load_checkpoint, save_checkpoint, BlobEntry, Checkpoint, Header, RngState, FORMAT_VERSION};
pub use config::{PhaseConfig, PipelineConfig, KEYS};
pub use pipeline::{
    run_pipeline, run_seed, seed_dir, PipelineReport, SeedRun, Session, INIT_FILE, PRETRAIN_FILE, PRUNE_FILE,
    RETRAIN_FILE,
};
pub use verify::{verify_checkpoint, Check, Verification};
