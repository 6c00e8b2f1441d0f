mod common;

use std::collections::HashSet;

use metalth::harness::{Checkpoint, PipelineConfig, RngState};
use metalth::metatest::gradient_mask;
use metalth::model::{accuracy, init_params, predict, NetworkSpec, ParamSet, Stage};
use metalth::pruning::{apply_mask_reinit, complement, prune, Scope};
use metalth::{
    adapt_test, evaluate, inner_adapt, meta_train, AdaptMode, Graph, MetaTrainConfig, Split, TaskSource, Tensor,
    TestConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blobs() -> TaskSource {
    TaskSource::blobs(8, 0.1, 64, 20, 0)
}

fn random_params(spec: &NetworkSpec, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = spec
        .layout()
        .iter()
        .map(|s| (0..s.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    ParamSet::from_values(spec, Stage::Initial, values).unwrap()
}

fn conv_graph(seed: u64) -> (Vec<u32>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    };
    let mut g = Graph::new();
    let x = g.leaf(rand(vec![2, 1, 5, 5]));
    let k = g.leaf(rand(vec![3, 1, 3, 3]));
    let b = g.leaf(rand(vec![3]));
    let y = g.conv2d(x, k, b).unwrap();
    let y = g.relu(y).unwrap();
    let y = g.maxpool2(y).unwrap();
    let y = g.reshape(y, vec![2, 27]).unwrap();
    let w = g.leaf(rand(vec![27, 4]));
    let z = g.matmul(y, w).unwrap();
    let loss = g.softmax_cross_entropy(z, &[1, 3]).unwrap();
    g.backward(loss).unwrap();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    (
        bits(g.value(z).values()),
        [g.grad(k), g.grad(w)].concat().iter().map(|x| x.to_bits()).collect(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn graphs_are_bit_deterministic(seed in 0u64..10_000) {
        prop_assert_eq!(conv_graph(seed), conv_graph(seed));
    }

    #[test]
    fn predict_is_pure(seed in 0u64..10_000) {
        let spec = NetworkSpec::conv4_tiny(1, 9, 3).with_widths(vec![2, 3, 2, 2]);
        let params = random_params(&spec, seed);
        let inputs = Tensor::new(vec![2, 1, 9, 9], (0..162).map(|i| ((i * 7 + seed as usize) % 11) as f32 / 11.0).collect()).unwrap();
        let a = predict(&params, &inputs).unwrap();
        let b = predict(&params, &inputs).unwrap();
        prop_assert_eq!(a.logits().values(), b.logits().values());
    }

    #[test]
    fn prunable_ordering_depends_only_on_the_spec(seed_a in 0u64..1000, seed_b in 0u64..1000, w in 2usize..6) {
        let spec = NetworkSpec::mlp_tiny(6, 4).with_widths(vec![w, w + 1]);
        let (a, b) = (init_params(&spec, seed_a).unwrap(), init_params(&spec, seed_b).unwrap());
        let names = |p: &ParamSet| p.entries().iter().filter(|e| e.is_prunable()).map(|e| e.name()).collect::<Vec<_>>();
        prop_assert_eq!(names(&a), names(&b));
        prop_assert!(names(&a).iter().all(|n| !n.starts_with("classifier")));
        prop_assert!(names(&a).iter().all(|n| n.ends_with("weight")));
        prop_assert_eq!(a.flatten_prunable().len(), spec.prunable_len());
    }

    #[test]
    fn labels_map_to_distinct_classes_of_one_split(seed in 0u64..10_000, way in 2usize..6, shot in 1usize..4) {
        let src = blobs();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for split in [Split::Train, Split::Test] {
            let task = src.sample_task(split, way, shot, 3, &mut rng).unwrap();
            prop_assert_eq!(task.classes.iter().collect::<HashSet<_>>().len(), way);
            for ex in task.support.iter().chain(&task.query) {
                let metalth::tasks::Target::Class(label) = ex.target else { panic!("regression target") };
                prop_assert_eq!(ex.origin.class, task.classes[label]);
                prop_assert_eq!(ex.origin.split, split);
                prop_assert!(src.pool(split).contains(&ex.origin.class));
            }
        }
    }

    #[test]
    fn task_streams_are_reproducible(seed in 0u64..10_000) {
        let src = TaskSource::glyphs(2, 0.05, 64, 20, 3);
        let stream = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..3).map(|_| src.sample_task(Split::Train, 5, 1, 2, &mut rng).unwrap().fingerprint()).collect::<Vec<_>>()
        };
        prop_assert_eq!(stream(), stream());
    }

    #[test]
    fn every_mode_freezes_what_its_mask_closes(seed in 0u64..1000, p in 10u32..95) {
        let spec = NetworkSpec::mlp_tiny(8, 5).with_widths(vec![6, 6]);
        let init = init_params(&spec, seed).unwrap();
        let mask = prune(&random_params(&spec, seed + 1), p as f64, Scope::Global).unwrap();
        let params = apply_mask_reinit(&init, &mask).unwrap().with_stage(Stage::Retrained);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let support = blobs().sample_task(Split::Test, 5, 1, 1, &mut rng).unwrap().support_batch();
        for mode in [AdaptMode::MetaLth, AdaptMode::UnprunedOnly, AdaptMode::ClassifierOnly, AdaptMode::Full, AdaptMode::ZeroShot] {
            let cfg = TestConfig { lr: 0.4, steps: 3, mode, ..Default::default() };
            let out = adapt_test(&params, Some(&mask), &support, &cfg).unwrap();
            let g = gradient_mask(mode, &params, Some(&mask)).unwrap();
            for (i, (a, b)) in out.entries().iter().zip(params.entries()).enumerate() {
                for (j, (x, y)) in a.tensor.values().iter().zip(b.tensor.values()).enumerate() {
                    let open = g.as_ref().is_some_and(|g| g.is_open(i, j));
                    if !open {
                        prop_assert_eq!(x.to_bits(), y.to_bits(), "{} moved {}[{}]", mode, a.name(), j);
                    }
                }
            }
        }
    }

    #[test]
    fn masked_training_keeps_pruned_weights_at_zero(seed in 0u64..1000, p in 10u32..95) {
        let spec = NetworkSpec::mlp_tiny(8, 5).with_widths(vec![6, 6]);
        let init = init_params(&spec, seed).unwrap();
        let mask = prune(&random_params(&spec, seed + 1), p as f64, Scope::PerLayer).unwrap();
        let pruned = apply_mask_reinit(&init, &mask).unwrap();
        let cfg = MetaTrainConfig { iterations: 5, task_batch: 2, query: 2, mask: Some(mask.clone()), seed, ..Default::default() };
        let (post, _) = meta_train(&pruned, &blobs(), &cfg).unwrap();
        let zeros = complement(&mask);
        for (i, e) in post.entries().iter().enumerate() {
            for (j, v) in e.tensor.values().iter().enumerate() {
                if zeros.is_open(i, j) {
                    prop_assert_eq!(v.to_bits(), 0);
                }
            }
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in 0u64..10_000, p in 0u32..100, masked in any::<bool>()) {
        let spec = NetworkSpec::conv4_tiny(1, 8, 4).with_widths(vec![2, 3, 2, 3]);
        let initial = random_params(&spec, seed);
        let current = random_params(&spec, seed ^ 0xabcdef).with_stage(Stage::Pruned);
        let mask = masked.then(|| prune(&current, p as f64, Scope::Global).unwrap());
        let ck = Checkpoint {
            initial,
            current,
            mask,
            config_hash: format!("{seed:016x}"),
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(seed)),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert!(back.initial.bits_eq(&ck.initial) && back.current.bits_eq(&ck.current));
        prop_assert_eq!(&back.mask, &ck.mask);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn config_text_round_trips(seed in 0u64..1000, p in 0u32..100, iters in 1usize..5000, lr in 1e-4f32..1.0) {
        let mut cfg = PipelineConfig::default();
        cfg.set("run.seeds", &seed.to_string()).unwrap();
        cfg.set("prune.percent", &p.to_string()).unwrap();
        cfg.set("pretrain.iterations", &iters.to_string()).unwrap();
        cfg.set("test.lr", &lr.to_string()).unwrap();
        let back = PipelineConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), cfg.to_text());
        prop_assert_eq!(back.hash(seed, Stage::Retrained), cfg.hash(seed, Stage::Retrained));
    }
}

#[test]
fn split_hygiene_over_ten_thousand_tasks() {
    let src = blobs();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let train = src.pool(Split::Train);
    for _ in 0..10_000 {
        let task = src.sample_task(Split::Test, 5, 1, 1, &mut rng).unwrap();
        for ex in task.support.iter().chain(&task.query) {
            assert_eq!(ex.origin.split, Split::Test);
            assert!(!train.contains(&ex.origin.class));
        }
    }
}

#[test]
fn evaluating_one_task_never_touches_the_next() {
    let spec = NetworkSpec::mlp_tiny(8, 5);
    let params = init_params(&spec, 4).unwrap().with_stage(Stage::Retrained);
    let mask = prune(&params, 80.0, Scope::Global).unwrap();
    let cfg = TestConfig {
        lr: 0.4,
        tasks: 6,
        ..Default::default()
    };
    let all = evaluate(&params, Some(&mask), &blobs(), &cfg).unwrap();
    // Each task alone, starting from the same parameters, scores the same.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tasks: Vec<_> = (0..6)
        .map(|_| blobs().sample_task(Split::Test, 5, 1, 15, &mut rng).unwrap())
        .collect();
    for (task, &acc) in tasks.iter().zip(&all.accuracies) {
        let adapted = adapt_test(&params, Some(&mask), &task.support_batch(), &cfg).unwrap();
        let query = task.query_batch();
        let logits = predict(&adapted, &query.inputs).unwrap();
        assert_eq!(accuracy(logits.logits(), &query.targets), acc);
    }
}

#[test]
fn inner_adaptation_helps_after_training() {
    let src = blobs();
    let init = init_params(&NetworkSpec::mlp_tiny(8, 5), 11).unwrap();
    let cfg = MetaTrainConfig {
        iterations: 300,
        task_batch: 4,
        ..Default::default()
    };
    let (trained, _) = meta_train(&init, &src, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut helped = 0;
    for _ in 0..200 {
        let task = src.sample_task(Split::Test, 5, 1, 15, &mut rng).unwrap();
        let query = task.query_batch();
        let before = accuracy(predict(&trained, &query.inputs).unwrap().logits(), &query.targets);
        let (phi, _) = inner_adapt(&trained, &task.support_batch(), cfg.inner_lr, 1, None).unwrap();
        let after = accuracy(predict(&phi, &query.inputs).unwrap().logits(), &query.targets);
        helped += (after >= before) as usize;
    }
    assert!(helped >= 160, "adaptation helped on {helped} of 200 tasks");
}
