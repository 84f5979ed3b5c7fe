use std::collections::BTreeMap;

use blockprune::optim::Sgd;
use blockprune::pruning::{build_groups, BlockSize, LayerGeometry, PruningScheme, Regularity};
use blockprune::reweight::reg_value_and_grad;
use blockprune::{GraphBuilder, Mask, MaskSet, Tensor, TensorGraph};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn batch(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, 1.0, &mut rng)
}

fn randomize_biases(g: &mut TensorGraph<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in g.params_mut().values_mut() {
        p.bias.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
    }
}

fn entry<'a>(g: &'a mut TensorGraph<f64>, id: &str, which: usize, i: usize) -> &'a mut f64 {
    let q = g.param_mut(id).unwrap();
    if which == 0 {
        &mut q.weight.data_mut()[i]
    } else {
        &mut q.bias.data_mut()[i]
    }
}

/// Largest relative deviation of analytic weight and bias gradients from
/// central differences of the loss, over every parameter entry.
fn worst_gradient_error(g: &TensorGraph<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let analytic = g.backward(x, labels).unwrap();
    let loss = |g: &TensorGraph<f64>| g.backward(x, labels).unwrap().loss;
    let mut worst: f64 = 0.0;
    for (id, p) in g.params() {
        for which in 0..2 {
            let len = if which == 0 { p.weight.len() } else { p.bias.len() };
            for i in 0..len {
                let mut probe = g.clone();
                let w0 = *entry(&mut probe, id, which, i);
                *entry(&mut probe, id, which, i) = w0 + H;
                let up = loss(&probe);
                *entry(&mut probe, id, which, i) = w0 - H;
                let down = loss(&probe);
                let numeric = (up - down) / (2.0 * H);
                let ga = &analytic.params[id];
                let a = if which == 0 { ga.weight.data()[i] } else { ga.bias.data()[i] };
                worst = worst.max(rel(a, numeric, 1e-6));
            }
        }
    }
    worst
}

fn check(b: GraphBuilder, input: &[usize], classes: usize, seed: u64) -> f64 {
    let mut g: TensorGraph<f64> = b.build(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    randomize_biases(&mut g, seed + 100);
    let mut shape = vec![3];
    shape.extend_from_slice(input);
    let x = batch(&shape, seed + 200);
    let labels: Vec<usize> = (0..3).map(|i| i % classes).collect();
    worst_gradient_error(&g, &x, &labels)
}

#[test]
fn fc_gradients() {
    let mut b = GraphBuilder::new(&[6]);
    let h = b.fc("fc1", 0, 6, 5);
    let r = b.relu("relu", h);
    let o = b.fc("fc2", r, 5, 3);
    b.loss(o);
    let err = check(b, &[6], 3, 1);
    assert!(err < 1e-4, "fc {err}");
}

#[test]
fn conv_gradients_with_stride_and_padding() {
    let mut b = GraphBuilder::new(&[2, 7, 7]);
    let c = b.conv("conv", 0, 2, 3, 3, 2, 1);
    let f = b.flatten("flat", c);
    let o = b.fc("fc", f, 3 * 4 * 4, 3);
    b.loss(o);
    let err = check(b, &[2, 7, 7], 3, 2);
    assert!(err < 1e-4, "conv {err}");
}

#[test]
fn depthwise_gradients() {
    let mut b = GraphBuilder::new(&[3, 6, 6]);
    let d = b.depthwise("dw", 0, 3, 3, 1, 1);
    let f = b.flatten("flat", d);
    let o = b.fc("fc", f, 3 * 36, 2);
    b.loss(o);
    let err = check(b, &[3, 6, 6], 2, 3);
    assert!(err < 1e-4, "depthwise {err}");
}

#[test]
fn pooling_gradients() {
    for max in [true, false] {
        let mut b = GraphBuilder::new(&[1, 8, 8]);
        let c = b.conv("conv", 0, 1, 2, 3, 1, 1);
        let p = if max { b.max_pool("pool", c, 2, 2) } else { b.avg_pool("pool", c, 3, 2) };
        let side = if max { 4 } else { 3 };
        let f = b.flatten("flat", p);
        let o = b.fc("fc", f, 2 * side * side, 3);
        b.loss(o);
        let err = check(b, &[1, 8, 8], 3, 4);
        assert!(err < 1e-4, "pool max={max} {err}");
    }
}

#[test]
fn residual_add_gradients() {
    let mut b = GraphBuilder::new(&[2, 5, 5]);
    let c1 = b.conv("conv1", 0, 2, 2, 3, 1, 1);
    let r = b.relu("relu", c1);
    let c2 = b.conv("conv2", r, 2, 2, 1, 1, 0);
    let a = b.add("add", c2, r);
    let f = b.flatten("flat", a);
    let o = b.fc("fc", f, 50, 4);
    b.loss(o);
    let err = check(b, &[2, 5, 5], 4, 5);
    assert!(err < 1e-4, "add {err}");
}

fn reg_error(geom: LayerGeometry, scheme: PruningScheme, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = build_groups(&geom, &scheme).unwrap();
    let w: Vec<f64> = (0..geom.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let alpha: Vec<f64> = (0..groups.len()).map(|_| rng.gen_range(0.1..3.0)).collect();
    let (_, grad) = reg_value_and_grad(&w, &groups, &alpha).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let mut p = w.clone();
        p[i] = w[i] + H;
        let up = reg_value_and_grad(&p, &groups, &alpha).unwrap().0;
        p[i] = w[i] - H;
        let down = reg_value_and_grad(&p, &groups, &alpha).unwrap().0;
        worst = worst.max(rel(grad[i], (up - down) / (2.0 * H), 1e-8));
    }
    worst
}

#[test]
fn regularizer_gradients_for_all_block_schemes() {
    let cases = [
        (LayerGeometry::fc(10, 12), PruningScheme::block(Regularity::BlockRow, BlockSize::new(4, 5))),
        (LayerGeometry::fc(10, 12), PruningScheme::block(Regularity::BlockColumn, BlockSize::new(3, 4))),
        (LayerGeometry::conv(6, 4, 3, 3), PruningScheme::block(Regularity::BlockPunched, BlockSize::new(4, 2))),
    ];
    for (i, (geom, scheme)) in cases.into_iter().enumerate() {
        let err = reg_error(geom, scheme.clone(), i as u64);
        assert!(err < 1e-5, "{:?}: {err}", scheme.regularity);
    }
}

#[test]
fn zero_weights_give_uniform_loss() {
    let mut b = GraphBuilder::new(&[5]);
    let o = b.fc("fc", 0, 5, 7);
    b.loss(o);
    let mut g: TensorGraph<f64> = b.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    g.param_mut("fc").unwrap().weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
    let x = batch(&[7, 5], 1);
    let labels: Vec<usize> = (0..7).collect();
    let loss = g.backward(&x, &labels).unwrap().loss;
    assert!((loss - 7f64.ln()).abs() < 1e-12, "{loss}");
}

#[test]
fn masked_positions_get_zero_gradient_and_stay_zero() {
    let mut b = GraphBuilder::new(&[6]);
    let o = b.fc("fc", 0, 6, 3);
    b.loss(o);
    let mut g: TensorGraph = b.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let bits: Vec<bool> = (0..18).map(|i| i % 3 != 0).collect();
    let masks: MaskSet = BTreeMap::from([("fc".to_string(), Mask::new(vec![3, 6], bits.clone()).unwrap())]);
    g.apply_masks(&masks).unwrap();
    let x: Tensor = Tensor::uniform(&[4, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let labels = [0, 1, 2, 0];
    let grads = g.backward_masked(&x, &labels, &masks).unwrap();
    let gw = grads.params["fc"].weight.data();
    assert!(bits.iter().zip(gw).all(|(&k, &v)| k || v == 0.0));
    assert!(gw.iter().any(|&v| v != 0.0));
    let mut sgd = Sgd::new(0.5, 0.9).unwrap();
    for _ in 0..5 {
        let grads = g.backward(&x, &labels).unwrap();
        sgd.step(&mut g, &grads, Some(&masks)).unwrap();
    }
    let w = g.param("fc").unwrap().weight.data();
    assert!(bits.iter().zip(w).all(|(&k, &v)| k || v == 0.0));
}

#[test]
fn sgd_direct_rule() {
    let mut b = GraphBuilder::new(&[1]);
    let o = b.fc("fc", 0, 1, 1);
    b.loss(o);
    let mut g: TensorGraph<f64> = b.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    g.param_mut("fc").unwrap().weight.data_mut()[0] = 1.0;
    let mut grads = g.backward(&Tensor::zeros(&[1, 1]), &[0]).unwrap();
    grads.params.get_mut("fc").unwrap().weight.data_mut()[0] = 0.5;
    grads.params.get_mut("fc").unwrap().bias.data_mut()[0] = 0.0;
    Sgd::new(0.1, 0.0).unwrap().step(&mut g, &grads, None).unwrap();
    assert!((g.param("fc").unwrap().weight.data()[0] - 0.95).abs() < 1e-15);
}

#[test]
fn forward_identity_and_averaging_examples() {
    let mut b = GraphBuilder::new(&[2]);
    b.fc("fc", 0, 2, 2);
    let mut g: TensorGraph = b.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    g.param_mut("fc").unwrap().weight.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    let y = g.forward(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
    assert_eq!(y.data(), [1.0, 2.0]);

    let mut b = GraphBuilder::new(&[1, 5, 5]);
    b.conv("conv", 0, 1, 1, 3, 1, 0);
    let mut g: TensorGraph = b.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    g.param_mut("conv").unwrap().weight.data_mut().iter_mut().for_each(|w| *w = 1.0 / 9.0);
    let y = g.forward(&Tensor::full(&[1, 1, 5, 5], 1.0)).unwrap();
    assert_eq!(y.shape(), [1, 1, 3, 3]);
    assert!(y.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
}

#[test]
fn mlp_matches_straight_line_oracle() {
    let mut b = GraphBuilder::new(&[7]);
    let h = b.fc("fc1", 0, 7, 5);
    let r = b.relu("relu", h);
    b.fc("fc2", r, 5, 3);
    let mut g: TensorGraph = b.build(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for p in g.params_mut().values_mut() {
        p.bias.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    let x: Tensor = Tensor::uniform(&[4, 7], 1.0, &mut rng);
    let y = g.forward(&x).unwrap();
    let (w1, b1) = (g.param("fc1").unwrap().weight.data(), g.param("fc1").unwrap().bias.data());
    let (w2, b2) = (g.param("fc2").unwrap().weight.data(), g.param("fc2").unwrap().bias.data());
    for n in 0..4 {
        let xs = &x.data()[n * 7..n * 7 + 7];
        let mut hidden = [0f64; 5];
        for (o, hv) in hidden.iter_mut().enumerate() {
            let s: f64 = (0..7).map(|i| w1[o * 7 + i] as f64 * xs[i] as f64).sum::<f64>() + b1[o] as f64;
            *hv = s.max(0.0);
        }
        for o in 0..3 {
            let s: f64 = (0..5).map(|i| w2[o * 5 + i] as f64 * hidden[i]).sum::<f64>() + b2[o] as f64;
            assert!(rel(y.data()[n * 3 + o] as f64, s, 1e-6) < 1e-6);
        }
    }
}

#[test]
fn identical_runs_are_bit_identical() {
    let run = || {
        let mut b = GraphBuilder::new(&[1, 6, 6]);
        let c = b.conv("conv", 0, 1, 2, 3, 1, 1);
        let f = b.flatten("flat", c);
        let o = b.fc("fc", f, 72, 3);
        b.loss(o);
        let mut g: TensorGraph = b.build(&mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let x: Tensor = Tensor::uniform(&[5, 1, 6, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let mut sgd = Sgd::new(0.1, 0.9).unwrap();
        for _ in 0..4 {
            let grads = g.backward(&x, &[0, 1, 2, 0, 1]).unwrap();
            sgd.step(&mut g, &grads, None).unwrap();
        }
        g.params().clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_input_is_reported() {
    let mut b = GraphBuilder::new(&[2]);
    b.fc("fc", 0, 2, 2);
    let g: TensorGraph = b.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let err = g.forward(&Tensor::new(vec![1, 2], vec![f32::NAN, 1.0]).unwrap());
    assert!(err.is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn fc_gradients_random_shapes(i in 1usize..6, h in 1usize..6, k in 2usize..5, seed in 0u64..1000) {
        let mut b = GraphBuilder::new(&[i]);
        let a = b.fc("fc1", 0, i, h);
        let o = b.fc("fc2", a, h, k);
        b.loss(o);
        prop_assert!(check(b, &[i], k, seed) < 1e-4);
    }
}
