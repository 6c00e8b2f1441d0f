//! Sparse first-order meta-learning.
//!
//! The pipeline meta-trains a dense network with first-order MAML, prunes
//! the smallest-magnitude weights, rewinds the survivors to their initial
//! values and retrains the sub-network under the pruning mask. At test time
//! only the pruned connections are re-opened and adapted to each new task.

pub mod autodiff;
pub mod error;
pub mod fomaml;
pub mod harness;
pub mod metatest;
pub mod model;
pub mod pruning;
pub mod tasks;

pub use autodiff::{Graph, NodeId, Tensor};
pub use error::{Error, Result};
pub use fomaml::{inner_adapt, meta_train, meta_train_with, outer_update, MetaTrainConfig, TrainLogRow};
pub use harness::{
    load_checkpoint, run_pipeline, save_checkpoint, verify_checkpoint, Checkpoint, PipelineConfig, PipelineReport,
    Session,
};
pub use metatest::{adapt_test, evaluate, run_ablations, AblationReport, AdaptMode, EvalReport, TestConfig};
pub use model::{init_params, predict, task_loss, Batch, NetworkSpec, ParamSet, Stage, Targets};
pub use pruning::{apply_mask_reinit, complement, compute_threshold, make_mask, prune, Mask, Scope, Threshold};
pub use tasks::{load_image_dir, GeneratorKind, Split, Task, TaskSource};
