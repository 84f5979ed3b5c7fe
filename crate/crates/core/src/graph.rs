//! Static layer graphs with a fixed operator set and analytic reverse-mode
//! gradients.
//!
//! Layers are stored in topological order: every layer may only consume
//! layers that appear before it, which makes cycles unrepresentable. Layer 0
//! is always the single `Input` node. Convolutions are lowered to GEMM through
//! [`im2col`], the same lowering the sparse executor uses.

use std::cell::Cell;
use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::mask::{Mask, MaskSet};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Input { shape: Vec<usize> },
    Fc { in_features: usize, out_features: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel_h: usize, kernel_w: usize, stride: usize, padding: usize },
    DepthwiseConv2d { channels: usize, kernel_h: usize, kernel_w: usize, stride: usize, padding: usize },
    Relu,
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
    Flatten,
    Add,
    SoftmaxCrossEntropy,
}

impl LayerKind {
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerKind::Fc { .. } | LayerKind::Conv2d { .. } | LayerKind::DepthwiseConv2d { .. })
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::DepthwiseConv2d { .. })
    }

    /// `(out, in, kh, kw)` for weight layers. FC layers report a 1×1 kernel.
    pub fn weight_dims(&self) -> Option<(usize, usize, usize, usize)> {
        match *self {
            LayerKind::Fc { in_features, out_features } => Some((out_features, in_features, 1, 1)),
            LayerKind::Conv2d { in_channels, out_channels, kernel_h, kernel_w, .. } => {
                Some((out_channels, in_channels, kernel_h, kernel_w))
            }
            LayerKind::DepthwiseConv2d { channels, kernel_h, kernel_w, .. } => Some((channels, 1, kernel_h, kernel_w)),
            _ => None,
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self {
            LayerKind::Fc { .. } => self.weight_dims().map(|(p, q, _, _)| vec![p, q]),
            _ => self.weight_dims().map(|(p, q, h, w)| vec![p, q, h, w]),
        }
    }

    fn arity(&self) -> usize {
        match self {
            LayerKind::Input { .. } => 0,
            LayerKind::Add => 2,
            _ => 1,
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Graph(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerKind::Fc { in_features, out_features } => {
                positive("in_features", in_features)?;
                positive("out_features", out_features)
            }
            LayerKind::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, .. } => {
                positive("in_channels", in_channels)?;
                positive("out_channels", out_channels)?;
                positive("kernel_h", kernel_h)?;
                positive("kernel_w", kernel_w)?;
                positive("stride", stride)
            }
            LayerKind::DepthwiseConv2d { channels, kernel_h, kernel_w, stride, .. } => {
                positive("channels", channels)?;
                positive("kernel_h", kernel_h)?;
                positive("kernel_w", kernel_w)?;
                positive("stride", stride)
            }
            LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
                positive("kernel", kernel)?;
                positive("stride", stride)
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Indices of producer layers, all strictly smaller than this layer's index.
    pub inputs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Params<T> {
    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params { weight: self.weight.cast(), bias: self.bias.cast() }
    }
}

/// Output spatial extent of a strided window.
pub fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

fn infer_shape(kind: &LayerKind, inputs: &[&[usize]]) -> Result<Vec<usize>> {
    let chw = |s: &[usize]| -> Result<(usize, usize, usize)> {
        match *s {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err!("expected a C×H×W input, got {:?}", s)),
        }
    };
    match kind {
        LayerKind::Input { shape } => {
            if shape.is_empty() || shape.contains(&0) {
                return Err(shape_err!("invalid input shape {:?}", shape));
            }
            Ok(shape.clone())
        }
        LayerKind::Fc { in_features, out_features } => {
            let s = inputs[0];
            if s.len() != 1 || s[0] != *in_features {
                return Err(shape_err!("fc expects [{}], producer gives {:?}", in_features, s));
            }
            Ok(vec![*out_features])
        }
        LayerKind::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, padding } => {
            let (c, h, w) = chw(inputs[0])?;
            if c != *in_channels {
                return Err(shape_err!("conv expects {} channels, producer gives {}", in_channels, c));
            }
            let ho = conv_out(h, *kernel_h, *stride, *padding)
                .ok_or_else(|| shape_err!("kernel larger than padded input"))?;
            let wo = conv_out(w, *kernel_w, *stride, *padding)
                .ok_or_else(|| shape_err!("kernel larger than padded input"))?;
            Ok(vec![*out_channels, ho, wo])
        }
        LayerKind::DepthwiseConv2d { channels, kernel_h, kernel_w, stride, padding } => {
            let (c, h, w) = chw(inputs[0])?;
            if c != *channels {
                return Err(shape_err!("depthwise conv expects {} channels, producer gives {}", channels, c));
            }
            let ho = conv_out(h, *kernel_h, *stride, *padding)
                .ok_or_else(|| shape_err!("kernel larger than padded input"))?;
            let wo = conv_out(w, *kernel_w, *stride, *padding)
                .ok_or_else(|| shape_err!("kernel larger than padded input"))?;
            Ok(vec![*channels, ho, wo])
        }
        LayerKind::Relu => Ok(inputs[0].to_vec()),
        LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
            let (c, h, w) = chw(inputs[0])?;
            let ho = conv_out(h, *kernel, *stride, 0).ok_or_else(|| shape_err!("pool window larger than input"))?;
            let wo = conv_out(w, *kernel, *stride, 0).ok_or_else(|| shape_err!("pool window larger than input"))?;
            Ok(vec![c, ho, wo])
        }
        LayerKind::Flatten => Ok(vec![inputs[0].iter().product()]),
        LayerKind::Add => {
            if inputs[0] != inputs[1] {
                return Err(shape_err!("add operands differ: {:?} vs {:?}", inputs[0], inputs[1]));
            }
            Ok(inputs[0].to_vec())
        }
        LayerKind::SoftmaxCrossEntropy => {
            if inputs[0].len() != 1 {
                return Err(shape_err!("softmax cross-entropy expects flat logits, got {:?}", inputs[0]));
            }
            Ok(vec![1])
        }
    }
}

thread_local! {
    static TRAINING_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of backward passes executed on the current thread.
pub fn training_calls() -> u64 {
    TRAINING_CALLS.with(|c| c.get())
}

/// Per-layer gradients plus the mean loss of the batch.
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    pub loss: f64,
    pub params: BTreeMap<String, Params<T>>,
}

#[derive(Clone, Debug)]
pub struct TensorGraph<T = f32> {
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Params<T>>,
}

enum Aux<T> {
    None,
    Cols(Vec<T>),
    Argmax(Vec<usize>),
}

struct Trace<T> {
    acts: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
}

impl<T: Scalar> TensorGraph<T> {
    /// Validates topology and parameter shapes.
    pub fn from_parts(layers: Vec<Layer>, params: BTreeMap<String, Params<T>>) -> Result<Self> {
        let shapes = Self::validate_layers(&layers)?;
        for layer in &layers {
            match (layer.kind.weight_shape(), params.get(&layer.id)) {
                (Some(ws), Some(p)) => {
                    if p.weight.shape() != ws.as_slice() {
                        return Err(shape_err!(
                            "layer `{}` weight shape {:?}, expected {:?}",
                            layer.id,
                            p.weight.shape(),
                            ws
                        ));
                    }
                    if p.bias.shape() != [ws[0]] {
                        return Err(shape_err!(
                            "layer `{}` bias shape {:?}, expected [{}]",
                            layer.id,
                            p.bias.shape(),
                            ws[0]
                        ));
                    }
                }
                (Some(_), None) => return Err(Error::Graph(format!("layer `{}` has no parameters", layer.id))),
                (None, Some(_)) => return Err(Error::Graph(format!("layer `{}` takes no parameters", layer.id))),
                (None, None) => {}
            }
        }
        if params.len() != layers.iter().filter(|l| l.kind.has_weights()).count() {
            return Err(Error::Graph("parameters for unknown layers".into()));
        }
        Ok(Self { layers, shapes, params })
    }

    fn validate_layers(layers: &[Layer]) -> Result<Vec<Vec<usize>>> {
        let mut ids = HashSet::new();
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
        let mut consumers = vec![0usize; layers.len()];
        for (idx, layer) in layers.iter().enumerate() {
            if !ids.insert(layer.id.as_str()) {
                return Err(Error::Graph(format!("duplicate layer id `{}`", layer.id)));
            }
            let is_input = matches!(layer.kind, LayerKind::Input { .. });
            if is_input != (idx == 0) {
                return Err(Error::Graph("exactly one input node is required and it must come first".into()));
            }
            layer.kind.validate()?;
            if layer.inputs.len() != layer.kind.arity() {
                return Err(Error::Graph(format!(
                    "layer `{}` takes {} inputs, got {}",
                    layer.id,
                    layer.kind.arity(),
                    layer.inputs.len()
                )));
            }
            for &i in &layer.inputs {
                if i >= idx {
                    return Err(Error::Graph(format!(
                        "layer `{}` consumes layer {} which does not precede it",
                        layer.id, i
                    )));
                }
                consumers[i] += 1;
            }
            let ins: Vec<&[usize]> = layer.inputs.iter().map(|&i| shapes[i].as_slice()).collect();
            let shape =
                infer_shape(&layer.kind, &ins).map_err(|e| Error::Graph(format!("layer `{}`: {e}", layer.id)))?;
            shapes.push(shape);
        }
        if layers.is_empty() {
            return Err(Error::Graph("empty graph".into()));
        }
        let losses: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == LayerKind::SoftmaxCrossEntropy)
            .map(|(i, _)| i)
            .collect();
        match losses.as_slice() {
            [] => {}
            [i] if *i == layers.len() - 1 => {}
            _ => return Err(Error::Graph("at most one loss node, and only as the final layer".into())),
        }
        Ok(shapes)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, id: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    /// Per-sample output shape of layer `idx`.
    pub fn output_shape(&self, idx: usize) -> &[usize] {
        &self.shapes[idx]
    }

    /// Per-sample shape of the input consumed by layer `idx` (its first producer).
    pub fn input_shape_of(&self, idx: usize) -> &[usize] {
        match self.layers[idx].inputs.first() {
            Some(&p) => &self.shapes[p],
            None => &self.shapes[idx],
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn params(&self) -> &BTreeMap<String, Params<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Params<T>> {
        &mut self.params
    }

    pub fn param(&self, id: &str) -> Option<&Params<T>> {
        self.params.get(id)
    }

    pub fn param_mut(&mut self, id: &str) -> Option<&mut Params<T>> {
        self.params.get_mut(id)
    }

    pub fn weight_layers(&self) -> impl Iterator<Item = (usize, &Layer)> {
        self.layers.iter().enumerate().filter(|(_, l)| l.kind.has_weights())
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    pub fn has_loss(&self) -> bool {
        self.layers.last().is_some_and(|l| l.kind == LayerKind::SoftmaxCrossEntropy)
    }

    /// Index of the node whose activation `forward` returns.
    pub fn output_index(&self) -> usize {
        let last = self.layers.len() - 1;
        if self.has_loss() {
            self.layers[last].inputs[0]
        } else {
            last
        }
    }

    pub fn num_classes(&self) -> usize {
        self.shapes[self.output_index()].iter().product()
    }

    pub fn cast<U: Scalar>(&self) -> TensorGraph<U> {
        TensorGraph {
            layers: self.layers.clone(),
            shapes: self.shapes.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Zeroes every weight whose mask bit is clear.
    pub fn apply_masks(&mut self, masks: &MaskSet) -> Result<()> {
        for (id, mask) in masks {
            let p = self.params.get_mut(id).ok_or_else(|| Error::Graph(format!("mask for unknown layer `{id}`")))?;
            mask.check_shape(p.weight.shape())?;
            for (w, keep) in p.weight.data_mut().iter_mut().zip(mask.bits()) {
                if !keep {
                    *w = T::zero();
                }
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let s = batch.shape();
        if s.len() != self.shapes[0].len() + 1 || s[1..] != self.shapes[0][..] {
            return Err(shape_err!("batch shape {:?} does not match input node {:?}", s, self.shapes[0]));
        }
        Ok(s[0])
    }

    /// Activations at the output node (the loss node's input when present).
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.output_index();
        let trace = self.run(batch, out, false)?;
        Ok(trace.acts.into_iter().nth(out).expect("trace covers output"))
    }

    fn run(&self, batch: &Tensor<T>, until: usize, keep_aux: bool) -> Result<Trace<T>> {
        let n = self.check_batch(batch)?;
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(until + 1);
        let mut aux = Vec::with_capacity(until + 1);
        for (idx, layer) in self.layers.iter().enumerate().take(until + 1) {
            let mut out_shape = vec![n];
            out_shape.extend_from_slice(&self.shapes[idx]);
            let (out, a) = match &layer.kind {
                LayerKind::Input { .. } => (batch.clone(), Aux::None),
                LayerKind::SoftmaxCrossEntropy => return Err(Error::Graph("loss node evaluated by forward".into())),
                kind => {
                    let x = &acts[layer.inputs[0]];
                    let p = self.params.get(&layer.id);
                    match kind {
                        LayerKind::Fc { .. } => {
                            let p = p.expect("validated");
                            (ops::fc_forward(x, &p.weight, &p.bias), Aux::None)
                        }
                        LayerKind::Conv2d { .. } => {
                            let p = p.expect("validated");
                            let (y, cols) = ops::conv_forward(x, &p.weight, &p.bias, &layer.kind, &out_shape);
                            (y, if keep_aux { Aux::Cols(cols) } else { Aux::None })
                        }
                        LayerKind::DepthwiseConv2d { .. } => {
                            let p = p.expect("validated");
                            (ops::depthwise_forward(x, &p.weight, &p.bias, &layer.kind, &out_shape), Aux::None)
                        }
                        LayerKind::Relu => (ops::relu(x), Aux::None),
                        LayerKind::MaxPool { kernel, stride } => {
                            let (y, arg) = ops::max_pool(x, *kernel, *stride, &out_shape);
                            (y, Aux::Argmax(arg))
                        }
                        LayerKind::AvgPool { kernel, stride } => {
                            (ops::avg_pool(x, *kernel, *stride, &out_shape), Aux::None)
                        }
                        LayerKind::Flatten => {
                            (x.clone().reshape(&out_shape).expect("flatten preserves size"), Aux::None)
                        }
                        LayerKind::Add => {
                            let y = &acts[layer.inputs[1]];
                            let mut out = x.clone();
                            for (o, v) in out.data_mut().iter_mut().zip(y.data()) {
                                *o = *o + *v;
                            }
                            (out, Aux::None)
                        }
                        LayerKind::Input { .. } | LayerKind::SoftmaxCrossEntropy => unreachable!(),
                    }
                }
            };
            out.ensure_finite(&layer.id)?;
            acts.push(out);
            aux.push(a);
        }
        Ok(Trace { acts, aux })
    }

    /// Mean softmax cross-entropy loss and parameter gradients.
    pub fn backward(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<Gradients<T>> {
        if !self.has_loss() {
            return Err(Error::Graph("graph has no loss node".into()));
        }
        let n = self.check_batch(batch)?;
        if labels.len() != n {
            return Err(shape_err!("{} labels for a batch of {}", labels.len(), n));
        }
        let classes = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {classes})")));
        }
        TRAINING_CALLS.with(|c| c.set(c.get() + 1));

        let out_idx = self.output_index();
        let trace = self.run(batch, out_idx, true)?;
        let (loss, dlogits) = ops::softmax_xent(&trace.acts[out_idx], labels);
        if !loss.is_finite() {
            return Err(Error::NonFinite("softmax cross-entropy".into()));
        }

        let mut dacts: Vec<Option<Tensor<T>>> = (0..=out_idx).map(|_| None).collect();
        dacts[out_idx] = Some(dlogits);
        let mut grads = BTreeMap::new();
        for idx in (1..=out_idx).rev() {
            let Some(dy) = dacts[idx].take() else {
                continue;
            };
            let layer = &self.layers[idx];
            let x = &trace.acts[layer.inputs[0]];
            let mut accumulate = |slot: usize, g: Tensor<T>| match &mut dacts[slot] {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *v;
                    }
                }
                empty => *empty = Some(g),
            };
            match &layer.kind {
                LayerKind::Fc { .. } => {
                    let p = &self.params[&layer.id];
                    let (dx, gp) = ops::fc_backward(x, &p.weight, &dy);
                    grads.insert(layer.id.clone(), gp);
                    accumulate(layer.inputs[0], dx);
                }
                LayerKind::Conv2d { .. } => {
                    let p = &self.params[&layer.id];
                    let Aux::Cols(cols) = &trace.aux[idx] else { unreachable!("conv keeps its lowered input") };
                    let (dx, gp) = ops::conv_backward(x.shape(), cols, &p.weight, &dy, &layer.kind);
                    grads.insert(layer.id.clone(), gp);
                    accumulate(layer.inputs[0], dx);
                }
                LayerKind::DepthwiseConv2d { .. } => {
                    let p = &self.params[&layer.id];
                    let (dx, gp) = ops::depthwise_backward(x, &p.weight, &dy, &layer.kind);
                    grads.insert(layer.id.clone(), gp);
                    accumulate(layer.inputs[0], dx);
                }
                LayerKind::Relu => {
                    let mut dx = dy;
                    for (d, v) in dx.data_mut().iter_mut().zip(x.data()) {
                        if *v <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    accumulate(layer.inputs[0], dx);
                }
                LayerKind::MaxPool { .. } => {
                    let Aux::Argmax(arg) = &trace.aux[idx] else { unreachable!() };
                    let mut dx = Tensor::zeros(x.shape());
                    let d = dx.data_mut();
                    for (g, &src) in dy.data().iter().zip(arg) {
                        d[src] = d[src] + *g;
                    }
                    accumulate(layer.inputs[0], dx);
                }
                LayerKind::AvgPool { kernel, stride } => {
                    let dx = ops::avg_pool_backward(x.shape(), &dy, *kernel, *stride);
                    accumulate(layer.inputs[0], dx);
                }
                LayerKind::Flatten => {
                    let dx = dy.reshape(x.shape()).expect("same size");
                    accumulate(layer.inputs[0], dx);
                }
                LayerKind::Add => {
                    accumulate(layer.inputs[1], dy.clone());
                    accumulate(layer.inputs[0], dy);
                }
                LayerKind::Input { .. } | LayerKind::SoftmaxCrossEntropy => unreachable!(),
            }
        }
        for (id, g) in &grads {
            let g: &Params<T> = g;
            g.weight.ensure_finite(id)?;
        }
        Ok(Gradients { loss, params: grads })
    }

    /// Like [`backward`](Self::backward), with weight gradients zeroed wherever
    /// the mask clears a position.
    pub fn backward_masked(&self, batch: &Tensor<T>, labels: &[usize], masks: &MaskSet) -> Result<Gradients<T>> {
        let mut g = self.backward(batch, labels)?;
        mask_gradients(&mut g, masks)?;
        Ok(g)
    }

    /// Data-parallel backward: the batch is split into `threads` contiguous
    /// shards and shard gradients are summed in shard order.
    pub fn backward_parallel(&self, batch: &Tensor<T>, labels: &[usize], threads: usize) -> Result<Gradients<T>> {
        let n = self.check_batch(batch)?;
        let threads = threads.clamp(1, n.max(1));
        if threads == 1 {
            return self.backward(batch, labels);
        }
        let bounds: Vec<(usize, usize)> =
            (0..threads).map(|t| (t * n / threads, (t + 1) * n / threads)).filter(|(a, b)| b > a).collect();
        let shards: Vec<Result<Gradients<T>>> = std::thread::scope(|s| {
            let handles: Vec<_> = bounds
                .iter()
                .map(|&(a, b)| {
                    s.spawn(move || {
                        let sub = slice_batch(batch, a, b);
                        self.backward(&sub, &labels[a..b])
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("backward worker panicked")).collect()
        });
        let mut total: Option<Gradients<T>> = None;
        for ((a, b), shard) in bounds.iter().zip(shards) {
            let shard = shard?;
            let w = T::from_f64((b - a) as f64 / n as f64);
            match &mut total {
                None => {
                    let mut g = shard;
                    g.loss *= w.as_f64();
                    for p in g.params.values_mut() {
                        p.weight.data_mut().iter_mut().for_each(|v| *v = *v * w);
                        p.bias.data_mut().iter_mut().for_each(|v| *v = *v * w);
                    }
                    total = Some(g);
                }
                Some(acc) => {
                    acc.loss += shard.loss * w.as_f64();
                    for (id, p) in shard.params {
                        let dst = acc.params.get_mut(&id).expect("same layers");
                        for (d, v) in dst.weight.data_mut().iter_mut().zip(p.weight.data()) {
                            *d = *d + *v * w;
                        }
                        for (d, v) in dst.bias.data_mut().iter_mut().zip(p.bias.data()) {
                            *d = *d + *v * w;
                        }
                    }
                }
            }
        }
        Ok(total.expect("at least one shard"))
    }
}

/// Zeroes masked weight-gradient entries.
pub fn mask_gradients<T: Scalar>(grads: &mut Gradients<T>, masks: &MaskSet) -> Result<()> {
    for (id, mask) in masks {
        if let Some(g) = grads.params.get_mut(id) {
            mask.check_shape(g.weight.shape())?;
            for (v, keep) in g.weight.data_mut().iter_mut().zip(mask.bits()) {
                if !keep {
                    *v = T::zero();
                }
            }
        }
    }
    Ok(())
}

/// Rows `[start, end)` along the batch dimension.
pub fn slice_batch<T: Scalar>(batch: &Tensor<T>, start: usize, end: usize) -> Tensor<T> {
    let per: usize = batch.shape()[1..].iter().product();
    let mut shape = batch.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, batch.data()[start * per..end * per].to_vec()).expect("valid slice")
}

/// Fluent construction of graphs with seeded He-uniform initialization.
pub struct GraphBuilder {
    layers: Vec<Layer>,
}

impl GraphBuilder {
    pub fn new(input_shape: &[usize]) -> Self {
        Self {
            layers: vec![Layer {
                id: "input".into(),
                kind: LayerKind::Input { shape: input_shape.to_vec() },
                inputs: vec![],
            }],
        }
    }

    pub fn input(&self) -> usize {
        0
    }

    pub fn last(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn push(&mut self, id: &str, kind: LayerKind, inputs: Vec<usize>) -> usize {
        self.layers.push(Layer { id: id.into(), kind, inputs });
        self.layers.len() - 1
    }

    pub fn fc(&mut self, id: &str, from: usize, in_features: usize, out_features: usize) -> usize {
        self.push(id, LayerKind::Fc { in_features, out_features }, vec![from])
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        id: &str,
        from: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> usize {
        self.push(
            id,
            LayerKind::Conv2d { in_channels, out_channels, kernel_h: kernel, kernel_w: kernel, stride, padding },
            vec![from],
        )
    }

    pub fn depthwise(
        &mut self,
        id: &str,
        from: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> usize {
        self.push(
            id,
            LayerKind::DepthwiseConv2d { channels, kernel_h: kernel, kernel_w: kernel, stride, padding },
            vec![from],
        )
    }

    pub fn relu(&mut self, id: &str, from: usize) -> usize {
        self.push(id, LayerKind::Relu, vec![from])
    }

    pub fn max_pool(&mut self, id: &str, from: usize, kernel: usize, stride: usize) -> usize {
        self.push(id, LayerKind::MaxPool { kernel, stride }, vec![from])
    }

    pub fn avg_pool(&mut self, id: &str, from: usize, kernel: usize, stride: usize) -> usize {
        self.push(id, LayerKind::AvgPool { kernel, stride }, vec![from])
    }

    pub fn flatten(&mut self, id: &str, from: usize) -> usize {
        self.push(id, LayerKind::Flatten, vec![from])
    }

    pub fn add(&mut self, id: &str, a: usize, b: usize) -> usize {
        self.push(id, LayerKind::Add, vec![a, b])
    }

    pub fn loss(&mut self, from: usize) -> usize {
        self.push("loss", LayerKind::SoftmaxCrossEntropy, vec![from])
    }

    /// Weights uniform in `±sqrt(6 / fan_in)`, biases zero.
    pub fn build<T: Scalar, R: Rng>(self, rng: &mut R) -> Result<TensorGraph<T>> {
        let mut params = BTreeMap::new();
        for layer in &self.layers {
            if let Some(shape) = layer.kind.weight_shape() {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                params.insert(
                    layer.id.clone(),
                    Params { weight: Tensor::uniform(&shape, bound, rng), bias: Tensor::zeros(&[shape[0]]) },
                );
            }
        }
        TensorGraph::from_parts(self.layers, params)
    }
}

/// Lowers a batch `[N, C, H, W]` to a `[C*kh*kw, N*Ho*Wo]` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let l = ho * wo;
    let cols_n = n * l;
    let mut cols = vec![T::zero(); c * kh * kw * cols_n];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let src = &x[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut dst_row[b * l + oy * wo..b * l + (oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let l = ho * wo;
    let cols_n = n * l;
    let mut x = vec![T::zero(); n * c * h * w];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let dst = &mut x[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                let d = &mut dst[iy as usize * w + ix as usize];
                                *d = *d + src_row[b * l + oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) mod ops {
    use super::*;

    pub fn fc_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        let n = x.shape()[0];
        let (out, inp) = (w.shape()[0], w.shape()[1]);
        let mut y = vec![T::zero(); n * out];
        for row in y.chunks_exact_mut(out) {
            row.copy_from_slice(b.data());
        }
        // y[n, out] += x[n, in] * W^T
        T::gemm(n, inp, out, x.data(), inp as isize, 1, w.data(), 1, inp as isize, T::one(), &mut y, out as isize, 1);
        Tensor::new(vec![n, out], y).expect("fc output")
    }

    pub fn fc_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Params<T>) {
        let n = x.shape()[0];
        let (out, inp) = (w.shape()[0], w.shape()[1]);
        let mut dw = vec![T::zero(); out * inp];
        T::gemm(
            out,
            n,
            inp,
            dy.data(),
            1,
            out as isize,
            x.data(),
            inp as isize,
            1,
            T::zero(),
            &mut dw,
            inp as isize,
            1,
        );
        let mut db = vec![T::zero(); out];
        for row in dy.data().chunks_exact(out) {
            for (d, v) in db.iter_mut().zip(row) {
                *d = *d + *v;
            }
        }
        let mut dx = vec![T::zero(); n * inp];
        T::gemm(
            n,
            out,
            inp,
            dy.data(),
            out as isize,
            1,
            w.data(),
            inp as isize,
            1,
            T::zero(),
            &mut dx,
            inp as isize,
            1,
        );
        (
            Tensor::new(x.shape().to_vec(), dx).expect("dx"),
            Params {
                weight: Tensor::new(w.shape().to_vec(), dw).expect("dw"),
                bias: Tensor::new(vec![out], db).expect("db"),
            },
        )
    }

    fn conv_geometry(kind: &LayerKind) -> (usize, usize, usize, usize) {
        match *kind {
            LayerKind::Conv2d { kernel_h, kernel_w, stride, padding, .. }
            | LayerKind::DepthwiseConv2d { kernel_h, kernel_w, stride, padding, .. } => {
                (kernel_h, kernel_w, stride, padding)
            }
            _ => unreachable!("not a convolution"),
        }
    }

    pub fn conv_forward<T: Scalar>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: &Tensor<T>,
        kind: &LayerKind,
        out_shape: &[usize],
    ) -> (Tensor<T>, Vec<T>) {
        let (kh, kw, stride, padding) = conv_geometry(kind);
        let [n, c, h, wd] = *x.shape() else { unreachable!() };
        let (p, ho, wo) = (out_shape[1], out_shape[2], out_shape[3]);
        let cols = im2col(x.data(), n, c, h, wd, kh, kw, stride, padding, ho, wo);
        let k = c * kh * kw;
        let l = ho * wo;
        let mut yg = vec![T::zero(); p * n * l];
        T::gemm(
            p,
            k,
            n * l,
            w.data(),
            k as isize,
            1,
            &cols,
            (n * l) as isize,
            1,
            T::zero(),
            &mut yg,
            (n * l) as isize,
            1,
        );
        let y = scatter_gemm_output(&yg, b.data(), n, p, l);
        (Tensor::new(out_shape.to_vec(), y).expect("conv output"), cols)
    }

    /// `[P, N*L]` GEMM result plus bias to NCHW.
    pub fn scatter_gemm_output<T: Scalar>(yg: &[T], bias: &[T], n: usize, p: usize, l: usize) -> Vec<T> {
        let mut y = vec![T::zero(); n * p * l];
        for pi in 0..p {
            let src = &yg[pi * n * l..(pi + 1) * n * l];
            for b in 0..n {
                let dst = &mut y[(b * p + pi) * l..(b * p + pi + 1) * l];
                for (d, s) in dst.iter_mut().zip(&src[b * l..(b + 1) * l]) {
                    *d = *s + bias[pi];
                }
            }
        }
        y
    }

    pub fn conv_backward<T: Scalar>(
        x_shape: &[usize],
        cols: &[T],
        w: &Tensor<T>,
        dy: &Tensor<T>,
        kind: &LayerKind,
    ) -> (Tensor<T>, Params<T>) {
        let (kh, kw, stride, padding) = conv_geometry(kind);
        let [n, c, h, wd] = *x_shape else { unreachable!() };
        let [_, p, ho, wo] = *dy.shape() else { unreachable!() };
        let l = ho * wo;
        let k = c * kh * kw;
        let nl = n * l;
        let mut dyg = vec![T::zero(); p * nl];
        let mut db = vec![T::zero(); p];
        for b in 0..n {
            for pi in 0..p {
                let src = &dy.data()[(b * p + pi) * l..(b * p + pi + 1) * l];
                dyg[pi * nl + b * l..pi * nl + (b + 1) * l].copy_from_slice(src);
                db[pi] = src.iter().fold(db[pi], |a, v| a + *v);
            }
        }
        let mut dw = vec![T::zero(); p * k];
        T::gemm(p, nl, k, &dyg, nl as isize, 1, cols, 1, nl as isize, T::zero(), &mut dw, k as isize, 1);
        let mut dcols = vec![T::zero(); k * nl];
        T::gemm(k, p, nl, w.data(), 1, k as isize, &dyg, nl as isize, 1, T::zero(), &mut dcols, nl as isize, 1);
        let dx = col2im(&dcols, n, c, h, wd, kh, kw, stride, padding, ho, wo);
        (
            Tensor::new(x_shape.to_vec(), dx).expect("dx"),
            Params {
                weight: Tensor::new(w.shape().to_vec(), dw).expect("dw"),
                bias: Tensor::new(vec![p], db).expect("db"),
            },
        )
    }

    pub fn depthwise_forward<T: Scalar>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: &Tensor<T>,
        kind: &LayerKind,
        out_shape: &[usize],
    ) -> Tensor<T> {
        let (kh, kw, stride, padding) = conv_geometry(kind);
        let [n, c, h, wd] = *x.shape() else { unreachable!() };
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let mut y = vec![T::zero(); n * c * ho * wo];
        for bi in 0..n {
            for ci in 0..c {
                let src = &x.data()[(bi * c + ci) * h * wd..(bi * c + ci + 1) * h * wd];
                let ker = &w.data()[ci * kh * kw..(ci + 1) * kh * kw];
                let dst = &mut y[(bi * c + ci) * ho * wo..(bi * c + ci + 1) * ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[ci];
                        for ki in 0..kh {
                            let iy = (oy * stride + ki) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let ix = (ox * stride + kj) as isize - padding as isize;
                                if ix >= 0 && ix < wd as isize {
                                    acc = acc + ker[ki * kw + kj] * src[iy as usize * wd + ix as usize];
                                }
                            }
                        }
                        dst[oy * wo + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(out_shape.to_vec(), y).expect("depthwise output")
    }

    pub fn depthwise_backward<T: Scalar>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        dy: &Tensor<T>,
        kind: &LayerKind,
    ) -> (Tensor<T>, Params<T>) {
        let (kh, kw, stride, padding) = conv_geometry(kind);
        let [n, c, h, wd] = *x.shape() else { unreachable!() };
        let [_, _, ho, wo] = *dy.shape() else { unreachable!() };
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); w.len()];
        let mut db = vec![T::zero(); c];
        for bi in 0..n {
            for ci in 0..c {
                let off = (bi * c + ci) * h * wd;
                let g = &dy.data()[(bi * c + ci) * ho * wo..(bi * c + ci + 1) * ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = g[oy * wo + ox];
                        db[ci] = db[ci] + gv;
                        for ki in 0..kh {
                            let iy = (oy * stride + ki) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let ix = (ox * stride + kj) as isize - padding as isize;
                                if ix >= 0 && ix < wd as isize {
                                    let xi = off + iy as usize * wd + ix as usize;
                                    let wi = ci * kh * kw + ki * kw + kj;
                                    dw[wi] = dw[wi] + gv * x.data()[xi];
                                    dx[xi] = dx[xi] + gv * w.data()[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        (
            Tensor::new(x.shape().to_vec(), dx).expect("dx"),
            Params {
                weight: Tensor::new(w.shape().to_vec(), dw).expect("dw"),
                bias: Tensor::new(vec![c], db).expect("db"),
            },
        )
    }

    pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        for v in y.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        y
    }

    pub fn max_pool<T: Scalar>(x: &Tensor<T>, k: usize, s: usize, out_shape: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let [n, c, h, w] = *x.shape() else { unreachable!() };
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let mut y = Vec::with_capacity(n * c * ho * wo);
        let mut arg = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let off = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = off + oy * s * w + ox * s;
                    for ki in 0..k {
                        for kj in 0..k {
                            let i = off + (oy * s + ki) * w + ox * s + kj;
                            if x.data()[i] > x.data()[best] {
                                best = i;
                            }
                        }
                    }
                    y.push(x.data()[best]);
                    arg.push(best);
                }
            }
        }
        (Tensor::new(out_shape.to_vec(), y).expect("pool"), arg)
    }

    pub fn avg_pool<T: Scalar>(x: &Tensor<T>, k: usize, s: usize, out_shape: &[usize]) -> Tensor<T> {
        let [n, c, h, w] = *x.shape() else { unreachable!() };
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let scale = T::from_f64(1.0 / (k * k) as f64);
        let mut y = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let off = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for ki in 0..k {
                        for kj in 0..k {
                            acc = acc + x.data()[off + (oy * s + ki) * w + ox * s + kj];
                        }
                    }
                    y.push(acc * scale);
                }
            }
        }
        Tensor::new(out_shape.to_vec(), y).expect("pool")
    }

    pub fn avg_pool_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>, k: usize, s: usize) -> Tensor<T> {
        let [n, c, h, w] = *x_shape else { unreachable!() };
        let [_, _, ho, wo] = *dy.shape() else { unreachable!() };
        let scale = T::from_f64(1.0 / (k * k) as f64);
        let mut dx = vec![T::zero(); n * c * h * w];
        for plane in 0..n * c {
            let off = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = dy.data()[(plane * ho + oy) * wo + ox] * scale;
                    for ki in 0..k {
                        for kj in 0..k {
                            let i = off + (oy * s + ki) * w + ox * s + kj;
                            dx[i] = dx[i] + g;
                        }
                    }
                }
            }
        }
        Tensor::new(x_shape.to_vec(), dx).expect("dx")
    }

    /// Mean loss over the batch and its gradient w.r.t. the logits.
    pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (f64, Tensor<T>) {
        let n = logits.shape()[0];
        let k = logits.len() / n;
        let mut grad = logits.clone();
        let mut loss = 0.0;
        let inv_n = T::from_f64(1.0 / n as f64);
        for (i, &label) in labels.iter().enumerate() {
            let z = &logits.data()[i * k..(i + 1) * k];
            let row = &mut grad.data_mut()[i * k..(i + 1) * k];
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            loss += sum.ln().as_f64() - (z[label] - max).as_f64();
            for v in row.iter_mut() {
                *v = *v / sum;
            }
            row[label] = row[label] - T::one();
            for v in row.iter_mut() {
                *v = *v * inv_n;
            }
        }
        (loss / n as f64, grad)
    }
}

impl Mask {
    pub(crate) fn check_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape() != shape {
            return Err(shape_err!("mask shape {:?} does not match parameter shape {:?}", self.shape(), shape));
        }
        Ok(())
    }
}
