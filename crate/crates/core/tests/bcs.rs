use blockprune::bcs::{encode_block_punched, storage_cost, BcsMatrix, CsrMatrix, StorageFormat};
use blockprune::executor::kernel::{spmm, KernelParams};
use blockprune::pruning::GroupMask;
use blockprune::pruning::{
    make_partition, project_mask as project, BlockSize, LayerGeometry, PruningScheme, Regularity, Target,
};
use blockprune::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn project_mask(
    w: &[f32],
    geom: &LayerGeometry,
    scheme: &PruningScheme,
    target: Target,
) -> blockprune::Result<GroupMask> {
    project(&Tensor::new(vec![w.len()], w.to_vec()).unwrap(), geom, scheme, target)
}

fn worked_example() -> Vec<f32> {
    #[rustfmt::skip]
    let m = vec![
        1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 3.0, 0.0,
        4.0, 0.0, 0.0, 5.0, 0.0, 0.0, 6.0, 0.0,
        0.0, 7.0, 0.0, 0.0, 0.0, 8.0, 0.0, 0.0,
        0.0, 9.0, 0.0, 0.0, 0.0, 10.0, 0.0, 0.0,
    ];
    m
}

/// Sparse matrix whose rows come in runs sharing one random column set, so
/// the encoder sees both shared and singleton groups.
fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, density: f64) -> Vec<f32> {
    let mut m = vec![0.0f32; rows * cols];
    let mut r = 0;
    while r < rows {
        let run = rng.gen_range(1..=3).min(rows - r);
        let cols_kept: Vec<bool> = (0..cols).map(|_| rng.gen_bool(density)).collect();
        for row in r..r + run {
            for (c, &k) in cols_kept.iter().enumerate() {
                if k {
                    m[row * cols + c] = rng.gen_range(0.1f32..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                }
            }
        }
        r += run;
    }
    m
}

/// Independent index count: (rows+1) row offsets, one column list per run of
/// equal consecutive column sets, and two boundary arrays of length groups+1.
fn bcs_index_oracle(dense: &[f32], rows: usize, cols: usize) -> usize {
    let sets: Vec<Vec<usize>> =
        (0..rows).map(|r| (0..cols).filter(|&c| dense[r * cols + c] != 0.0).collect()).collect();
    let mut groups = 0;
    let mut listed = 0;
    for r in 0..rows {
        if r == 0 || sets[r] != sets[r - 1] {
            groups += 1;
            listed += sets[r].len();
        }
    }
    if rows == 0 {
        groups = 1;
    }
    (rows + 1) + listed + 2 * (groups + 1)
}

#[test]
fn worked_example_arrays() {
    let b = BcsMatrix::encode(&worked_example(), 4, 8).unwrap();
    assert_eq!(b.weights, (1..=10).map(|v| v as f32).collect::<Vec<_>>());
    assert_eq!(b.row_offset, [0, 3, 6, 8, 10]);
    assert_eq!(b.compact_column, [0, 3, 6, 1, 5]);
    assert_eq!(b.column_stride, [0, 3, 5]);
    assert_eq!(b.occurrence, [0, 2, 4]);
    assert_eq!(b.decode().unwrap(), worked_example());
}

#[test]
fn worked_example_times_ones() {
    let b = BcsMatrix::encode(&worked_example(), 4, 8).unwrap();
    let y = spmm(&b, &[1.0; 8], 1, &KernelParams::default()).unwrap();
    assert_eq!(y, [6.0, 15.0, 15.0, 19.0]);
}

#[test]
fn dense_and_zero_matrices() {
    let dense: Vec<f32> = (1..=20).map(|v| v as f32).collect();
    let b = BcsMatrix::encode(&dense, 4, 5).unwrap();
    assert_eq!(b.occurrence, [0, 4]);
    assert_eq!(b.compact_column, [0, 1, 2, 3, 4]);

    let z = BcsMatrix::encode(&[0.0; 20], 4, 5).unwrap();
    assert!(z.weights.is_empty());
    assert_eq!(z.occurrence, [0, 4]);
    assert_eq!(z.decode().unwrap(), vec![0.0; 20]);
}

#[test]
fn worked_example_storage_costs() {
    let m = worked_example();
    let b = BcsMatrix::encode(&m, 4, 8).unwrap();
    let c = CsrMatrix::from_dense(&m, 4, 8).unwrap();
    assert_eq!(b.index_entries(), 5 + 5 + 3 + 3);
    assert_eq!(c.index_entries(), 10 + 5);
    assert_eq!(storage_cost(&m, 4, 8, StorageFormat::Bcs).unwrap(), 4 * (10 + 16));
    assert_eq!(storage_cost(&m, 4, 8, StorageFormat::Csr).unwrap(), 4 * (10 + 15));
    assert_eq!(storage_cost(&m, 4, 8, StorageFormat::Dense).unwrap(), 4 * 32);
}

#[test]
fn shared_column_sets_beat_csr_once_sharing_covers_overhead() {
    // 8 rows sharing one set of 6 columns: CSR lists 48 column indices, BCS
    // lists 6 plus 4 boundary entries.
    let mut m = vec![0.0f32; 8 * 16];
    for r in 0..8 {
        for c in [0, 2, 5, 7, 11, 13] {
            m[r * 16 + c] = (r + c + 1) as f32;
        }
    }
    let bcs = storage_cost(&m, 8, 16, StorageFormat::Bcs).unwrap();
    let csr = storage_cost(&m, 8, 16, StorageFormat::Csr).unwrap();
    assert!(bcs < csr, "bcs {bcs} csr {csr}");
}

#[test]
fn unique_column_sets_cost_at_least_csr() {
    let rows = 12;
    let cols = 12;
    let mut m = vec![0.0f32; rows * cols];
    for r in 0..rows {
        m[r * cols + r] = 1.0;
        m[r * cols + (r + 5) % cols] = 2.0;
    }
    let b = BcsMatrix::encode(&m, rows, cols).unwrap();
    assert_eq!(b.groups(), rows);
    let csr = storage_cost(&m, rows, cols, StorageFormat::Csr).unwrap();
    assert!(storage_cost(&m, rows, cols, StorageFormat::Bcs).unwrap() >= csr);
}

#[test]
fn dense_matrix_is_cheapest_as_dense() {
    let m: Vec<f32> = (1..=64).map(|v| v as f32).collect();
    let dense = storage_cost(&m, 8, 8, StorageFormat::Dense).unwrap();
    assert!(dense <= storage_cost(&m, 8, 8, StorageFormat::Csr).unwrap());
    assert!(dense <= storage_cost(&m, 8, 8, StorageFormat::Bcs).unwrap());
}

#[test]
fn block_punched_layer_encodes_one_group_per_block() {
    let geom = LayerGeometry::conv(16, 16, 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w: Vec<f32> = (0..geom.len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let scheme = PruningScheme::block(Regularity::BlockPunched, BlockSize::new(4, 16));
    let gm = project_mask(&w, &geom, &scheme, Target::Rate(3.0)).unwrap();
    let part = make_partition(&geom, 4, 16).unwrap();
    let blocks = encode_block_punched(&w, &gm.mask, &geom, &part).unwrap();
    assert_eq!(blocks.len(), 4);
    let masked: Vec<f32> = w.iter().zip(gm.mask.bits()).map(|(&v, &k)| if k { v } else { 0.0 }).collect();
    for (j, b) in blocks.iter().enumerate() {
        assert_eq!(b.occurrence.len(), 2, "block {j}");
        let decoded = b.decode().unwrap();
        for (lr, f) in (j * 4..j * 4 + 4).enumerate() {
            assert_eq!(&decoded[lr * 144..(lr + 1) * 144], &masked[f * 144..(f + 1) * 144]);
        }
    }
}

#[test]
fn unstructured_mask_barely_shares() {
    let geom = LayerGeometry::conv(32, 8, 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w: Vec<f32> = (0..geom.len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let gm = project_mask(&w, &geom, &PruningScheme::new(Regularity::Unstructured), Target::Rate(3.0)).unwrap();
    let part = make_partition(&geom, 32, 8).unwrap();
    let blocks = encode_block_punched(&w, &gm.mask, &geom, &part).unwrap();
    assert_eq!(blocks.len(), 1);
    assert!(blocks[0].groups() >= 30, "groups {}", blocks[0].groups());
}

#[test]
fn block_column_masks_have_at_most_one_group_per_block_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let (p, q) = (rng.gen_range(4..40), rng.gen_range(4..40));
        let (bp, bq) = (rng.gen_range(1..=p), rng.gen_range(1..=q));
        let geom = LayerGeometry::fc(p, q);
        let w: Vec<f32> = (0..p * q).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let scheme = PruningScheme::block(Regularity::BlockColumn, BlockSize::new(bp, bq));
        let gm = project_mask(&w, &geom, &scheme, Target::Rate(2.0)).unwrap();
        let b = BcsMatrix::encode_with_mask(&w, p, q, gm.mask.bits()).unwrap();
        assert!(b.groups() <= p.div_ceil(bp), "groups {} > block rows {}", b.groups(), p.div_ceil(bp));
    }
}

#[test]
fn index_cost_matches_oracle_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let (r, c) = (rng.gen_range(1..24), rng.gen_range(1..24));
        let density = rng.gen_range(0.0..1.0);
        let m = random_matrix(&mut rng, r, c, density);
        let b = BcsMatrix::encode(&m, r, c).unwrap();
        assert_eq!(b.index_entries(), bcs_index_oracle(&m, r, c));
        let csr = CsrMatrix::from_dense(&m, r, c).unwrap();
        // BCS wins exactly when column indices saved by sharing exceed the two
        // extra boundary arrays.
        let saved = csr.col_idx.len() - b.compact_column.len();
        let overhead = 2 * (b.groups() + 1);
        assert_eq!(b.index_entries() <= csr.index_entries(), saved >= overhead);
    }
}

#[test]
fn thousand_random_roundtrips() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..1000 {
        let (r, c) = (rng.gen_range(0..40), rng.gen_range(0..40));
        let density = i as f64 / 999.0;
        let m = random_matrix(&mut rng, r, c, density);
        let b = BcsMatrix::encode(&m, r, c).unwrap();
        b.validate().unwrap();
        assert_eq!(b.decode().unwrap(), m, "case {i}");
        assert_eq!(BcsMatrix::from_bytes(&b.to_bytes()).unwrap(), b);
        assert_eq!(CsrMatrix::from_dense(&m, r, c).unwrap().to_dense(), m);
    }
}

#[test]
fn corrupt_arrays_are_named() {
    let good = BcsMatrix::encode(&worked_example(), 4, 8).unwrap();
    let mut b = good.clone();
    b.compact_column[0] = 9;
    assert!(b.validate().unwrap_err().to_string().contains("compact_column"));
    let mut b = good.clone();
    b.occurrence = vec![0, 4];
    assert!(b.validate().is_err());
    let mut b = good;
    b.weights.pop();
    assert!(b.validate().unwrap_err().to_string().contains("weights"));
}

proptest! {
    #[test]
    fn roundtrip_arbitrary(r in 1usize..16, c in 1usize..16, seed in any::<u64>(), density in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m: Vec<f32> = (0..r * c).map(|_| if rng.gen_bool(density) { rng.gen_range(-3.0f32..3.0) } else { 0.0 }).collect();
        let b = BcsMatrix::encode(&m, r, c).unwrap();
        prop_assert_eq!(b.decode().unwrap(), m);
        prop_assert_eq!(b.occurrence[0], 0);
        prop_assert_eq!(*b.occurrence.last().unwrap() as usize, r);
    }
}
