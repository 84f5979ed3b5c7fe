use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Gradients, TensorGraph};
use crate::mask::MaskSet;
use crate::tensor::Scalar;

/// SGD with heavy-ball momentum: `v = mu * v + g; w -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T = f32> {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be > 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Self { lr, momentum, velocity: BTreeMap::new() })
    }

    /// Applies one update. Masked weight positions are forced to exactly zero
    /// and their momentum is cleared, so pruned weights never come back.
    pub fn step(&mut self, graph: &mut TensorGraph<T>, grads: &Gradients<T>, masks: Option<&MaskSet>) -> Result<()> {
        let lr = T::from_f64(self.lr);
        let mu = T::from_f64(self.momentum);
        for (id, g) in &grads.params {
            let p = graph.param_mut(id).ok_or_else(|| Error::Graph(format!("gradient for unknown layer `{id}`")))?;
            if p.weight.shape() != g.weight.shape() || p.bias.shape() != g.bias.shape() {
                return Err(Error::Shape(format!("gradient shape mismatch for `{id}`")));
            }
            let mask = match masks.and_then(|m| m.get(id)) {
                Some(m) => {
                    m.check_shape(p.weight.shape())?;
                    Some(m.bits())
                }
                None => None,
            };
            let (vw, vb) = self
                .velocity
                .entry(id.clone())
                .or_insert_with(|| (vec![T::zero(); g.weight.len()], vec![T::zero(); g.bias.len()]));
            for (i, (w, gw)) in p.weight.data_mut().iter_mut().zip(g.weight.data()).enumerate() {
                if mask.is_some_and(|m| !m[i]) {
                    *w = T::zero();
                    vw[i] = T::zero();
                    continue;
                }
                vw[i] = mu * vw[i] + *gw;
                *w = *w - lr * vw[i];
            }
            for ((b, gb), v) in p.bias.data_mut().iter_mut().zip(g.bias.data()).zip(vb.iter_mut()) {
                *v = mu * *v + *gb;
                *b = *b - lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, Params};
    use crate::mask::Mask;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn one_weight_graph(w: f32) -> TensorGraph {
        let mut b = GraphBuilder::new(&[1]);
        let x = b.input();
        let f = b.fc("fc", x, 1, 1);
        b.loss(f);
        let mut g: TensorGraph = b.build(&mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
        g.param_mut("fc").unwrap().weight.data_mut()[0] = w;
        g
    }

    fn grads(gw: f32) -> Gradients {
        let mut params = BTreeMap::new();
        params.insert(
            "fc".to_string(),
            Params { weight: Tensor::new(vec![1, 1], vec![gw]).unwrap(), bias: Tensor::zeros(&[1]) },
        );
        Gradients { loss: 0.0, params }
    }

    #[test]
    fn direct_rule() {
        let mut g = one_weight_graph(1.0);
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step(&mut g, &grads(0.5), None).unwrap();
        assert_eq!(g.param("fc").unwrap().weight.data()[0], 0.95);
    }

    #[test]
    fn masked_position_stays_zero() {
        let mut g = one_weight_graph(0.0);
        let mut masks = MaskSet::new();
        masks.insert("fc".into(), Mask::zeros(&[1, 1]));
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        for _ in 0..3 {
            opt.step(&mut g, &grads(-2.0), Some(&masks)).unwrap();
        }
        assert_eq!(g.param("fc").unwrap().weight.data()[0], 0.0);
    }

    #[test]
    fn mask_shape_mismatch_is_an_error() {
        let mut g = one_weight_graph(0.0);
        let mut masks = MaskSet::new();
        masks.insert("fc".into(), Mask::zeros(&[2]));
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        assert!(opt.step(&mut g, &grads(1.0), Some(&masks)).is_err());
        assert!(Sgd::<f32>::new(0.0, 0.0).is_err());
    }
}
