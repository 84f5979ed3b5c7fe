use std::collections::BTreeMap;

use blockprune::dataset::synthetic_blobs;
use blockprune::latency::{
    build_table_with, table_regularity, LatencyGrid, LatencySetting, LatencyTable, LayerType, Probe,
};
use blockprune::mapper::{
    estimate_model_latency, layer_infos, map_rule, map_search, policy_update, reinforce, select_block_size, Difficulty,
    Evaluator, MappingDocument, Policy, RewardSpec, RuleConfig, SearchConfig, SearchSpace,
};
use blockprune::models::{build_reference_model, build_reference_model_for, ModelInput};
use blockprune::pruning::{BlockSize, Regularity};
use blockprune::train::{evaluate, train, TrainConfig};
use blockprune::LayerKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn table_with(grid: &LatencyGrid, mut latency: impl FnMut(&LatencySetting) -> f64) -> LatencyTable {
    build_table_with(grid, "fake", 1, false, |s, _| {
        let t = latency(s);
        Ok(Probe { run: Box::new(move || Ok(t)), achieved_rate: s.rate })
    })
    .unwrap()
}

/// Larger blocks are faster; the structured entry is fastest.
fn monotone_table() -> LatencyTable {
    table_with(&LatencyGrid::desk(), |s| {
        let area = match s.block {
            Some(BlockSize::Whole) => f64::INFINITY,
            Some(BlockSize::Fixed { rows, cols }) => (rows * cols) as f64,
            None => 1.0,
        };
        s.dense_macs() as f64 / s.rate * (1.0 + 1.0 / area.sqrt()) * 1e-3
    })
}

/// Exhaustive scan of the table entries at a grid point.
fn oracle_block(t: &LatencyTable, lt: LayerType, c: usize, f: usize, rate: f64, beta: f64) -> BlockSize {
    let normalized = |b: BlockSize| {
        t.records
            .iter()
            .find(|r| {
                let s = &r.setting;
                s.layer_type == lt && s.channels == c && s.feature == f && s.rate == rate && s.block == Some(b)
            })
            .map(|r| r.median_us / r.setting.dense_macs() as f64)
            .unwrap()
    };
    let structured = normalized(BlockSize::Whole);
    let mut fixed: Vec<BlockSize> = t.grid.blocks.iter().copied().filter(|b| *b != BlockSize::Whole).collect();
    fixed.sort_by_key(|b| {
        let BlockSize::Fixed { rows, cols } = *b else { unreachable!() };
        (rows * cols, rows)
    });
    fixed.into_iter().find(|&b| normalized(b) <= (1.0 + beta) * structured).unwrap_or(BlockSize::Whole)
}

#[test]
fn block_selection_matches_exhaustive_scan() {
    let grid = LatencyGrid::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let t = table_with(&grid, |_| rng.gen_range(1.0..100.0));
        for _ in 0..5 {
            let lt = [LayerType::Conv1x1, LayerType::Conv3x3, LayerType::Conv5x5, LayerType::Fc][rng.gen_range(0..4)];
            let c = grid.channels[rng.gen_range(0..grid.channels.len())];
            let f = grid.features[rng.gen_range(0..grid.features.len())];
            let rate = grid.rates[rng.gen_range(0..grid.rates.len())];
            let beta = rng.gen_range(0.0..1.0);
            let got = select_block_size(&t, lt, c as f64, f as f64, rate, beta).unwrap();
            assert_eq!(got.block, oracle_block(&t, lt, c, f, rate, beta));
            assert_eq!(got.qualified, got.block != BlockSize::Whole);
        }
    }
}

#[test]
fn beta_extremes_pick_smallest_or_whole() {
    let t = monotone_table();
    let any = select_block_size(&t, LayerType::Conv3x3, 32.0, 8.0, 4.0, f64::INFINITY).unwrap();
    assert_eq!(any.block, BlockSize::new(1, 1));
    let none = select_block_size(&t, LayerType::Conv3x3, 32.0, 8.0, 4.0, 0.0).unwrap();
    assert_eq!(none.block, BlockSize::Whole);
    assert!(!none.qualified);
    assert_eq!(none.margin(), 1.0);
}

#[test]
fn rule_mapper_follows_layer_kinds_and_difficulty() {
    let t = monotone_table();
    for name in ["mobilenet-mini", "convnet-mini"] {
        let g = build_reference_model(name, 0).unwrap();
        for difficulty in [Difficulty::Easy, Difficulty::Hard] {
            let doc = map_rule(&g, &t, &RuleConfig { difficulty, ..Default::default() }).unwrap();
            doc.validate(&g).unwrap();
            assert_eq!(doc.layers.len(), layer_infos(&g).len());
            for (d, info) in doc.layers.iter().zip(layer_infos(&g)) {
                let want = match (&info.kind, info.layer_type) {
                    (LayerKind::DepthwiseConv2d { .. }, _) => Regularity::None,
                    (_, Some(LayerType::Conv3x3)) if difficulty == Difficulty::Hard => Regularity::Pattern,
                    (_, Some(LayerType::Fc)) => Regularity::BlockRowColumn,
                    _ => Regularity::BlockPunched,
                };
                assert_eq!(d.regularity, want, "{name} {difficulty:?} {}", d.layer_id);
                assert!(!d.rationale.is_empty());
            }
            assert_eq!(MappingDocument::from_json(&doc.to_json().unwrap()).unwrap(), doc);
        }
    }
}

#[test]
fn rule_mapper_is_deterministic_and_rejects_negative_beta() {
    let t = monotone_table();
    let g = build_reference_model("convnet-mini", 0).unwrap();
    let a = map_rule(&g, &t, &RuleConfig::default()).unwrap();
    assert_eq!(a, map_rule(&g, &t, &RuleConfig::default()).unwrap());
    assert!(map_rule(&g, &t, &RuleConfig { beta: -0.1, ..Default::default() }).is_err());
}

#[test]
fn bandit_policy_concentrates_on_best_arm() {
    let space = SearchSpace::uniform(1, 3);
    let cfg = SearchConfig { iterations: 200, ..Default::default() };
    let out = reinforce(&space, &cfg, |a| [0.1, 0.9, 0.2][a[0]]).unwrap();
    let p = out.policy.probabilities(&space, &[]);
    assert!(p[1] > 0.9, "{p:?}");
    assert_eq!(out.best_actions, [1]);
}

#[test]
fn update_is_zero_when_rewards_equal_baseline() {
    let space = SearchSpace::uniform(3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = Policy::new(4, 8, &mut rng);
    let before = p.params();
    let samples: Vec<(Vec<usize>, f64)> = (0..4).map(|_| (p.sample(&space, &mut rng), 0.7)).collect();
    policy_update(&mut p, &space, &samples, 0.7, 1.0);
    assert_eq!(p.params(), before);
}

#[test]
fn log_prob_gradient_matches_finite_differences() {
    let space = SearchSpace::uniform(3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = Policy::new(4, 6, &mut rng);
    let init: Vec<f64> = p.params().iter().map(|_| rng.gen_range(-0.5..0.5)).collect();
    p.set_params(&init);
    let actions = p.sample(&space, &mut rng);
    let g = p.grad_log_prob(&space, &actions);
    let h = 1e-6;
    for i in 0..init.len() {
        let mut q = p.clone();
        let mut v = init.clone();
        v[i] += h;
        q.set_params(&v);
        let up = q.log_prob(&space, &actions);
        v[i] -= 2.0 * h;
        q.set_params(&v);
        let fd = (up - q.log_prob(&space, &actions)) / (2.0 * h);
        assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
    }
}

#[test]
fn toy_search_reaches_enumerated_optimum() {
    let space = SearchSpace::uniform(3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let table: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
    let reward = |a: &[usize]| table[a[0] * 16 + a[1] * 4 + a[2]];
    let optimum = space.enumerate().iter().map(|a| reward(a)).fold(f64::MIN, f64::max);
    for seed in 0..3 {
        let out = reinforce(&space, &SearchConfig { seed, ..Default::default() }, reward).unwrap();
        assert!(out.best_reward >= 0.95 * optimum, "seed {seed}: {} vs {optimum}", out.best_reward);
        assert_eq!(out.history.len(), 30);
        assert!(out.evaluations <= 30 * 4);
    }
}

#[test]
fn threaded_search_matches_serial_search() {
    let space = SearchSpace::uniform(2, 5);
    let reward = |a: &[usize]| (a[0] * 5 + a[1]) as f64 / 25.0;
    let serial = reinforce(&space, &SearchConfig { iterations: 10, ..Default::default() }, reward).unwrap();
    let threaded =
        reinforce(&space, &SearchConfig { iterations: 10, threads: 3, ..Default::default() }, reward).unwrap();
    assert_eq!(serial, threaded);
    assert!(reinforce(&space, &SearchConfig { samples: 1, ..Default::default() }, reward).is_err());
}

fn mlp2_setup() -> (blockprune::TensorGraph, blockprune::dataset::Dataset, blockprune::dataset::Dataset) {
    let data = synthetic_blobs(400, 20, 2, 0.5, 3).unwrap();
    let (tr, val) = data.split_off(0.25).unwrap();
    let mut g = build_reference_model_for("mlp2", &ModelInput { shape: vec![20], classes: 2 }, 0).unwrap();
    train(&mut g, &tr, &TrainConfig { epochs: 3, batch_size: 32, lr: 0.02, ..Default::default() }, None).unwrap();
    (g, tr, val)
}

#[test]
fn all_none_mapping_scores_dense_accuracy_minus_calibrated_latency() {
    let (g, tr, val) = mlp2_setup();
    let t = monotone_table();
    let dense = estimate_model_latency(&t, &layer_infos(&g), &BTreeMap::new()).unwrap();
    let retrain = TrainConfig { epochs: 1, ..Default::default() };
    let ev = Evaluator::new(&g, &tr, &val, &t, RewardSpec::calibrated(dense, retrain)).unwrap();
    assert_eq!(ev.dense_latency().unwrap(), dense);
    let space = SearchSpace::from_table(&g, &t, 4.0).unwrap();
    let e = ev.evaluate(&space.schemes(&vec![0; space.layers.len()])).unwrap();
    assert_eq!(e.accuracy, evaluate(&g, &val).unwrap());
    assert!((e.reward - (e.accuracy - 0.2)).abs() < 1e-12);
    assert!(!e.diverged);
}

#[test]
fn search_mapping_is_valid_and_never_worse_than_first_sample() {
    let (g, tr, val) = mlp2_setup();
    let t = monotone_table();
    let dense = estimate_model_latency(&t, &layer_infos(&g), &BTreeMap::new()).unwrap();
    let retrain = TrainConfig { epochs: 1, ..Default::default() };
    let ev = Evaluator::new(&g, &tr, &val, &t, RewardSpec::calibrated(dense, retrain)).unwrap();
    let space = SearchSpace::from_table(&g, &t, 4.0).unwrap();
    for l in &space.layers {
        let fixed =
            space.vocab.iter().zip(&l.valid).filter(|(a, &v)| v && **a != blockprune::mapper::Action::None).count();
        assert!(fixed > 0, "{}", l.id);
    }
    let cfg = SearchConfig { iterations: 3, samples: 3, ..Default::default() };
    let (doc, out) = map_search(&ev, &space, &cfg).unwrap();
    doc.validate(&g).unwrap();
    assert_eq!(doc.reward, Some(out.best_reward));
    assert!(out.history.windows(2).all(|w| w[1].best_reward >= w[0].best_reward));
    for d in &doc.layers {
        assert!(matches!(d.regularity, Regularity::None | Regularity::BlockRowColumn | Regularity::StructuredColumn));
        if d.regularity != Regularity::None {
            assert_eq!(d.regularity, table_regularity(LayerType::Fc, Some(d.block_size.unwrap_or(BlockSize::Whole))));
        }
    }
}
