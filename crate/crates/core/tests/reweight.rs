use std::collections::BTreeMap;

use blockprune::dataset::synthetic_blobs;
use blockprune::models::{build_reference_model_for, ModelInput};
use blockprune::pruning::{build_groups, verify_regularity, BlockSize, LayerGeometry, PruningScheme, Regularity};
use blockprune::reweight::{
    harden, hardened_masks, reg_value_and_grad, train_reweighted, update_penalties, PenaltyState, RegularizerSpec,
};
use blockprune::train::{finetune, train, TrainConfig};
use blockprune::{Error, TensorGraph};
use proptest::prelude::*;

fn mlp2(seed: u64) -> TensorGraph {
    build_reference_model_for("mlp2", &ModelInput { shape: vec![20], classes: 2 }, seed).unwrap()
}

fn blobs() -> blockprune::dataset::Dataset {
    synthetic_blobs(200, 20, 2, 0.5, 1).unwrap()
}

fn fc_schemes(reg: Regularity) -> BTreeMap<String, PruningScheme> {
    ["fc1", "fc2"].iter().map(|id| (id.to_string(), PruningScheme::block(reg, BlockSize::new(4, 4)))).collect()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 16, lr: 0.02, seed: 3, ..Default::default() }
}

fn single_group(n: usize) -> blockprune::pruning::GroupIndex {
    build_groups(&LayerGeometry::fc(1, n), &PruningScheme::new(Regularity::StructuredRow)).unwrap()
}

#[test]
fn single_group_value_and_gradient() {
    let (r, g) = reg_value_and_grad(&[3.0f64, 4.0], &single_group(2), &[1.0]).unwrap();
    assert_eq!(r, 25.0);
    assert_eq!(g, [6.0, 8.0]);
}

#[test]
fn penalty_update_examples() {
    let a = update_penalties(&[3.0f64, 4.0], &single_group(2), 1e-4).unwrap();
    assert!((a[0] - 1.0 / 25.0001).abs() < 1e-15);
    assert!((a[0] - 0.0399998).abs() < 1e-7);
    let a = update_penalties(&[0.0f64, 0.0], &single_group(2), 1e-4).unwrap();
    assert!((a[0] - 10000.0).abs() < 1e-9);
}

#[test]
fn zero_lambda_matches_plain_training_bit_for_bit() {
    let data = blobs();
    let mut plain = mlp2(0);
    train(&mut plain, &data, &cfg(4), None).unwrap();
    let mut rew = mlp2(0);
    let spec = RegularizerSpec::new(fc_schemes(Regularity::BlockRow), 0.0);
    train_reweighted(&mut rew, &data, &spec, &cfg(4), None).unwrap();
    assert_eq!(plain.params(), rew.params());
    let h = harden(&rew, &spec.schemes, spec.tau).unwrap();
    assert!(h.values().all(|l| l.mask.mask.kept() == l.mask.mask.len()));
}

#[test]
fn log_records_every_epoch_and_alpha_schedule() {
    let data = blobs();
    let mut g = mlp2(1);
    let spec = RegularizerSpec::new(fc_schemes(Regularity::BlockColumn), 1e-3);
    let mut sink = Vec::new();
    let out = train_reweighted(&mut g, &data, &spec, &cfg(6), Some(&mut sink)).unwrap();
    assert_eq!(out.log.len(), 6);
    let updates: Vec<usize> = out.log.iter().filter(|l| l.alpha_updated).map(|l| l.epoch).collect();
    assert_eq!(updates, [1, 3, 5]);
    assert_eq!(out.history.len(), 4);
    for l in &out.log {
        assert!((l.objective - (l.data_loss + spec.lambda * l.reg_value)).abs() < 1e-9);
    }
    let lines: Vec<serde_json::Value> =
        String::from_utf8(sink).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0]["layers"]["fc1"]["median"].is_number());
    for state in &out.history {
        assert!(state.layers.values().all(|l| l.alpha.iter().all(|&a| a > 0.0)));
    }
}

#[test]
fn penalty_state_matches_group_structure() {
    let g = mlp2(0);
    let spec = RegularizerSpec::new(fc_schemes(Regularity::BlockRow), 1e-3);
    let state = PenaltyState::init(&g, &spec).unwrap();
    let fc1 = LayerGeometry::fc(64, 20);
    assert_eq!(state.layers["fc1"].alpha.len(), build_groups(&fc1, &spec.schemes["fc1"]).unwrap().len());
}

#[test]
fn harden_examples() {
    let mut g = mlp2(2);
    let schemes = fc_schemes(Regularity::BlockRow);
    let geom = LayerGeometry::fc(64, 20);
    let groups = build_groups(&geom, &schemes["fc1"]).unwrap();
    let w = g.param_mut("fc1").unwrap().weight.data_mut();
    for (i, members) in groups.iter().enumerate() {
        for &m in members {
            w[m] = if i % 2 == 0 { 0.0 } else { 0.5 };
        }
    }
    let h = harden(&g, &schemes, 0.05).unwrap();
    assert_eq!(h["fc1"].rate(), 2.0);
    assert_eq!(h["fc1"].kept_groups * 2, h["fc1"].total_groups);
    verify_regularity(&h["fc1"].mask.mask, &geom, &schemes["fc1"]).unwrap();

    // Uniform norms: nothing pruned.
    let w = g.param_mut("fc1").unwrap().weight.data_mut();
    w.iter_mut().for_each(|v| *v = 0.25);
    let h = harden(&g, &schemes, 0.9).unwrap();
    assert_eq!(h["fc1"].rate(), 1.0);
}

#[test]
fn harden_is_idempotent_after_masking() {
    let data = blobs();
    let mut g = mlp2(4);
    let spec = RegularizerSpec::new(fc_schemes(Regularity::BlockRow), 1e-3);
    train_reweighted(&mut g, &data, &spec, &cfg(6), None).unwrap();
    let first = harden(&g, &spec.schemes, spec.tau).unwrap();
    g.apply_masks(&hardened_masks(&first)).unwrap();
    let second = harden(&g, &spec.schemes, spec.tau).unwrap();
    assert_eq!(hardened_masks(&first), hardened_masks(&second));
}

#[test]
fn all_zero_layer_keeps_its_largest_group() {
    let mut g = mlp2(5);
    let w = g.param_mut("fc2").unwrap().weight.data_mut();
    w.iter_mut().for_each(|v| *v = 0.0);
    w[7] = 1e-30;
    let h = harden(&g, &fc_schemes(Regularity::BlockRow), 0.05).unwrap();
    assert_eq!(h["fc2"].kept_groups, 1);
    assert!(h["fc2"].mask.mask.bits()[7]);
}

#[test]
fn finetune_keeps_pruned_positions_zero() {
    let data = blobs();
    let mut g = mlp2(6);
    let spec = RegularizerSpec::new(fc_schemes(Regularity::BlockColumn), 1e-2);
    train_reweighted(&mut g, &data, &spec, &cfg(4), None).unwrap();
    let masks = hardened_masks(&harden(&g, &spec.schemes, spec.tau).unwrap());
    finetune(&mut g, &masks, &data, &cfg(3)).unwrap();
    for (id, m) in &masks {
        let w = g.param(id).unwrap().weight.data();
        assert!(m.bits().iter().zip(w).all(|(&k, &v)| k || v == 0.0));
    }
}

#[test]
fn finetune_with_all_ones_equals_plain_training() {
    let data = blobs();
    let masks = hardened_masks(&harden(&mlp2(7), &fc_schemes(Regularity::None), 0.05).unwrap());
    let mut a = mlp2(7);
    finetune(&mut a, &masks, &data, &cfg(2)).unwrap();
    let mut b = mlp2(7);
    train(&mut b, &data, &cfg(2), None).unwrap();
    assert_eq!(a.params(), b.params());
}

#[test]
fn divergence_aborts_with_diagnostic() {
    let data = blobs();
    let mut g = mlp2(8);
    g.param_mut("fc1").unwrap().weight.data_mut()[0] = f32::INFINITY;
    let spec = RegularizerSpec::new(fc_schemes(Regularity::BlockRow), 1e-3);
    let err = train_reweighted(&mut g, &data, &spec, &cfg(1), None).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

#[test]
fn invalid_specs_are_rejected() {
    let g = mlp2(0);
    let mut spec = RegularizerSpec::new(fc_schemes(Regularity::BlockRow), -1.0);
    assert!(spec.validate().is_err());
    spec.lambda = 1e-3;
    spec.epsilon = 0.0;
    assert!(spec.validate().is_err());
    assert!(harden(&g, &spec.schemes, 1.5).is_err());
    let punched =
        BTreeMap::from([("fc1".to_string(), PruningScheme::block(Regularity::BlockPunched, BlockSize::new(2, 2)))]);
    assert!(PenaltyState::init(&g, &RegularizerSpec::new(punched, 1e-3)).is_err());
}

proptest! {
    #[test]
    fn smaller_groups_get_larger_penalties(a in proptest::collection::vec(-3.0f64..3.0, 4), b in proptest::collection::vec(-3.0f64..3.0, 4)) {
        let groups = build_groups(&LayerGeometry::fc(2, 4), &PruningScheme::new(Regularity::StructuredRow)).unwrap();
        let w: Vec<f64> = a.iter().chain(&b).copied().collect();
        let alpha = update_penalties(&w, &groups, 1e-4).unwrap();
        let (na, nb): (f64, f64) = (a.iter().map(|v| v * v).sum(), b.iter().map(|v| v * v).sum());
        prop_assert!(alpha.iter().all(|&x| x > 0.0));
        if na < nb {
            prop_assert!(alpha[0] > alpha[1]);
        } else if nb < na {
            prop_assert!(alpha[1] > alpha[0]);
        }
    }
}
