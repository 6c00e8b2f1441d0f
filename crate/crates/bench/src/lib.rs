//! Fixtures shared by the kernel benchmarks.

use metalth::model::{init_params, NetworkSpec, ParamSet};
use metalth::{Batch, Split, TaskSource, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Default conv4-tiny on 20x20 glyphs with one 5-way 1-shot support set.
pub fn conv_fixture() -> (ParamSet, Batch) {
    let src = TaskSource::glyphs(2, 0.05, 64, 20, 0);
    let params = init_params(&NetworkSpec::conv4_tiny(1, 20, 5), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let task = src.sample_task(Split::Train, 5, 1, 15, &mut rng).unwrap();
    (params, task.support_batch())
}

pub fn mlp_fixture() -> (ParamSet, Batch) {
    let src = TaskSource::blobs(8, 0.1, 64, 20, 0);
    let params = init_params(&NetworkSpec::mlp_tiny(8, 5), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let task = src.sample_task(Split::Train, 5, 1, 15, &mut rng).unwrap();
    (params, task.support_batch())
}
