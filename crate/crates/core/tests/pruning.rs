use std::collections::BTreeMap;

use blockprune::models::build_reference_model;
use blockprune::pruning::{
    build_groups, compression_report, count_macs, make_partition, project_mask, top_positions, verify_regularity,
    BlockSize, LayerGeometry, PruningScheme, Regularity, Target,
};
use blockprune::{LayerKind, Mask, MaskSet, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(len: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![len], (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn masked(w: &Tensor, mask: &Mask) -> Tensor {
    let data = w.data().iter().zip(mask.bits()).map(|(&v, &k)| if k { v } else { 0.0 }).collect();
    Tensor::new(w.shape().to_vec(), data).unwrap()
}

#[test]
fn partition_examples() {
    let p = make_partition(&LayerGeometry::fc(8, 8), 4, 4).unwrap();
    assert_eq!(p.num_blocks(), 4);
    assert!(p.blocks().all(|(r, c)| r.len() == 4 && c.len() == 4));

    let p = make_partition(&LayerGeometry::fc(10, 10), 4, 4).unwrap();
    assert_eq!(p.num_blocks(), 9);
    let tails = p.blocks().filter(|(r, c)| r.len() == 2 || c.len() == 2).count();
    assert_eq!(tails, 5);

    let geom = LayerGeometry::conv(16, 16, 3, 3);
    let p = make_partition(&geom, 4, 16).unwrap();
    assert_eq!(p.num_blocks(), 4);
    assert!(p.blocks().all(|(r, c)| r.len() * c.len() == 64));
}

#[test]
fn whole_tensor_punched_mask_is_identical_across_kernels() {
    let geom = LayerGeometry::conv(6, 5, 3, 3);
    let w = random(geom.len(), 1);
    let scheme = PruningScheme::block(Regularity::BlockPunched, BlockSize::Whole);
    let gm = project_mask(&w, &geom, &scheme, Target::Rate(9.0 / 4.0)).unwrap();
    let bits = gm.mask.bits();
    let first = &bits[..9];
    assert_eq!(first.iter().filter(|&&b| b).count(), 4);
    assert!(bits.chunks(9).all(|k| k == first));
}

#[test]
fn unstructured_equals_block_punched_1x1() {
    for seed in 0..10 {
        let geom = LayerGeometry::conv(8, 6, 3, 3);
        let w = random(geom.len(), seed);
        let rate = 1.5 + seed as f64;
        let a = project_mask(&w, &geom, &PruningScheme::new(Regularity::Unstructured), Target::Rate(rate)).unwrap();
        let punched = PruningScheme::block(Regularity::BlockPunched, BlockSize::new(1, 1));
        let b = project_mask(&w, &geom, &punched, Target::Rate(rate)).unwrap();
        assert_eq!(a.mask, b.mask, "seed {seed}");
    }
}

#[test]
fn pattern_keeps_top_four_magnitudes() {
    let kernel: Vec<f32> = (1..=9).map(|v| v as f32).collect();
    assert_eq!(top_positions(&kernel, 4), 0b1_1110_0000);
    let geom = LayerGeometry::conv(1, 1, 3, 3);
    let w = Tensor::new(vec![1, 1, 3, 3], kernel).unwrap();
    let gm = project_mask(&w, &geom, &PruningScheme::new(Regularity::Pattern), Target::Rate(9.0 / 4.0)).unwrap();
    assert_eq!(gm.mask.bits(), [false, false, false, false, false, true, true, true, true]);
}

#[test]
fn invalid_targets_and_schemes_are_rejected() {
    let geom = LayerGeometry::conv(4, 4, 5, 5);
    let w = random(geom.len(), 0);
    assert!(project_mask(&w, &geom, &PruningScheme::new(Regularity::Pattern), Target::Rate(2.0)).is_err());
    let geom = LayerGeometry::fc(4, 4);
    let w = random(16, 0);
    assert!(project_mask(&w, &geom, &PruningScheme::new(Regularity::Unstructured), Target::Rate(0.5)).is_err());
}

fn conv(cin: usize, cout: usize, k: usize, padding: usize) -> LayerKind {
    LayerKind::Conv2d { in_channels: cin, out_channels: cout, kernel_h: k, kernel_w: k, stride: 1, padding }
}

#[test]
fn mac_examples() {
    assert_eq!(count_macs(&conv(64, 64, 3, 1), &[64, 56, 56], None), 115_605_504);
    let fc = LayerKind::Fc { in_features: 1024, out_features: 1024 };
    assert_eq!(count_macs(&fc, &[1024], None), 1_048_576);
    let geom = LayerGeometry::fc(1024, 1024);
    let scheme = PruningScheme::block(Regularity::BlockRow, BlockSize::new(64, 64));
    let gm = project_mask(&random(1024 * 1024, 3), &geom, &scheme, Target::Rate(2.0)).unwrap();
    assert_eq!(gm.group_kept.iter().filter(|&&k| k).count() * 2, gm.group_kept.len());
    assert_eq!(count_macs(&fc, &[1024], Some(&gm.mask)), 1_048_576 / 2);
}

fn full_masks(graph: &blockprune::TensorGraph, f: impl Fn(&str, usize) -> bool) -> MaskSet {
    graph
        .weight_layers()
        .map(|(_, l)| {
            let shape = l.kind.weight_shape().unwrap();
            let n: usize = shape.iter().product();
            (l.id.clone(), Mask::new(shape, (0..n).map(|i| f(&l.id, i)).collect()).unwrap())
        })
        .collect()
}

#[test]
fn compression_report_examples_and_recount() {
    let g = build_reference_model("lenet5", 0).unwrap();
    let ones = compression_report(&g, &full_masks(&g, |_, _| true)).unwrap();
    assert_eq!(ones.overall_rate, 1.0);
    assert_eq!(ones.conv_rate, 1.0);
    let half = compression_report(&g, &full_masks(&g, |_, i| i % 2 == 0)).unwrap();
    let total: usize = g.weight_layers().map(|(_, l)| l.kind.weight_shape().unwrap().iter().product::<usize>()).sum();
    let kept: usize =
        g.weight_layers().map(|(_, l)| l.kind.weight_shape().unwrap().iter().product::<usize>().div_ceil(2)).sum();
    assert!((half.overall_rate - total as f64 / kept as f64).abs() < 1e-12);
    assert!((half.overall_rate - 2.0).abs() < 1e-3);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let p: f64 = rng.gen_range(0.05..1.0);
        let bits: BTreeMap<String, Vec<bool>> = g
            .weight_layers()
            .map(|(_, l)| {
                let n: usize = l.kind.weight_shape().unwrap().iter().product();
                (l.id.clone(), (0..n).map(|_| rng.gen_bool(p)).collect())
            })
            .collect();
        let masks = full_masks(&g, |id, i| bits[id][i]);
        let r = compression_report(&g, &masks).unwrap();
        let mut all = (0usize, 0usize);
        let mut conv = (0usize, 0usize);
        for (_, l) in g.weight_layers() {
            let b = &bits[&l.id];
            let k = b.iter().filter(|&&x| x).count();
            all = (all.0 + b.len(), all.1 + k);
            if l.kind.is_conv() {
                conv = (conv.0 + b.len(), conv.1 + k);
            }
            let lr = r.layers.iter().find(|x| x.id == l.id).unwrap();
            assert_eq!((lr.weights, lr.kept), (b.len(), k));
        }
        assert_eq!((r.total_weights, r.kept_weights), all);
        assert!((r.overall_rate - all.0 as f64 / all.1.max(1) as f64).abs() < 1e-12);
        assert!((r.conv_rate - conv.0 as f64 / conv.1.max(1) as f64).abs() < 1e-12);
    }
}

fn scheme_strategy() -> impl Strategy<Value = (LayerGeometry, PruningScheme)> {
    let fc = (1usize..24, 1usize..24, 1usize..30, 1usize..30, 0usize..3).prop_map(|(p, q, bp, bq, r)| {
        let reg = [Regularity::BlockRow, Regularity::BlockColumn, Regularity::BlockRowColumn][r];
        (LayerGeometry::fc(p, q), PruningScheme::block(reg, BlockSize::new(bp, bq)))
    });
    let conv = (1usize..12, 1usize..12, 1usize..14, 1usize..14, 0usize..5).prop_map(|(p, q, bp, bq, r)| {
        let scheme = match r {
            0 => PruningScheme::block(Regularity::BlockPunched, BlockSize::new(bp, bq)),
            1 => PruningScheme::new(Regularity::Pattern),
            2 => PruningScheme::new(Regularity::StructuredRow),
            3 => PruningScheme::new(Regularity::StructuredColumn),
            _ => PruningScheme::new(Regularity::Unstructured),
        };
        (LayerGeometry::conv(p, q, 3, 3), scheme)
    });
    prop_oneof![fc, conv]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn projected_masks_satisfy_regularity((geom, scheme) in scheme_strategy(), rate in 1.0f64..12.0, seed in any::<u64>()) {
        let w = random(geom.len(), seed);
        let rate = if scheme.regularity == Regularity::Pattern { rate.max(9.0 / 4.0) } else { rate };
        let gm = project_mask(&w, &geom, &scheme, Target::Rate(rate)).unwrap();
        verify_regularity(&gm.mask, &geom, &scheme).unwrap();
        if scheme.regularity == Regularity::Pattern {
            prop_assert!(gm.patterns.len() <= scheme.pattern_set);
            for k in gm.mask.bits().chunks(9) {
                let n = k.iter().filter(|&&b| b).count();
                prop_assert!(n == 0 || n == 4);
            }
        }
    }

    #[test]
    fn projection_is_idempotent((geom, scheme) in scheme_strategy(), rate in 1.0f64..12.0, seed in any::<u64>()) {
        // The two-stage row+column projection re-ranks columns on masked weights.
        prop_assume!(scheme.regularity != Regularity::BlockRowColumn);
        let w = random(geom.len(), seed);
        let rate = if scheme.regularity == Regularity::Pattern { rate.max(9.0 / 4.0) } else { rate };
        let first = project_mask(&w, &geom, &scheme, Target::Rate(rate)).unwrap();
        let again = project_mask(&masked(&w, &first.mask), &geom, &scheme, Target::Rate(rate)).unwrap();
        prop_assert_eq!(first.mask, again.mask);
    }

    #[test]
    fn kept_fraction_within_one_group((geom, scheme) in scheme_strategy(), rate in 1.0f64..12.0, seed in any::<u64>()) {
        prop_assume!(!matches!(scheme.regularity, Regularity::Pattern | Regularity::BlockRowColumn));
        let w = random(geom.len(), seed);
        let gm = project_mask(&w, &geom, &scheme, Target::Rate(rate)).unwrap();
        let goal = geom.len() as f64 / rate;
        let largest = build_groups(&geom, &scheme).unwrap().iter().map(|g| g.len()).max().unwrap();
        let kept = gm.mask.kept() as f64;
        prop_assert!(kept + 1e-9 >= goal.min(geom.len() as f64).floor());
        prop_assert!(kept < goal + largest as f64, "kept {} goal {} group {}", kept, goal, largest);
    }

    #[test]
    fn partitions_tile_exactly(p in 1usize..40, q in 1usize..40, bp in 1usize..50, bq in 1usize..50) {
        let part = make_partition(&LayerGeometry::fc(p, q), bp, bq).unwrap();
        let mut cover = vec![0u8; p * q];
        for (rows, cols) in part.blocks() {
            for r in rows {
                for c in cols.clone() {
                    cover[r * q + c] += 1;
                }
            }
        }
        prop_assert!(cover.iter().all(|&c| c == 1));
        prop_assert_eq!(part.num_blocks(), p.div_ceil(bp.min(p)) * q.div_ceil(bq.min(q)));
    }
}
