//! Execution of pruned models from BCS storage.
//!
//! A [`ExecutionPlan`] lowers a [`TensorGraph`] into a flat list of
//! operations. Pruned CONV/FC layers run through the threaded BCS kernel
//! (convolutions via im2col), dense ones through the same GEMM as the
//! training engine. Elementwise ReLU/Add nodes can be fused into the
//! epilogue of their producer.

pub mod kernel;
pub mod tune;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bcs::{gemm_dims, BcsMatrix};
use crate::error::{Error, Result};
use crate::graph::{im2col, ops, LayerKind, TensorGraph};
use crate::mask::MaskSet;
use crate::pruning::LayerGeometry;
use crate::tensor::Tensor;

pub use kernel::{imbalance, reorder_rows, spmm, spmm_permuted, KernelParams};
pub use tune::{autotune, GaConfig, TuneBounds, TuneResult};

/// Row-permuted BCS weights of a pruned layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseWeights {
    pub bcs: BcsMatrix,
    /// `perm[new] = old`; `None` when stored in original order.
    pub perm: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Exec {
    /// GEMM with (masked) dense weights.
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
    Sparse {
        weights: SparseWeights,
        bias: Tensor,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Add,
}

/// Elementwise work folded into an op's output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Epilogue {
    Relu,
    /// Add the output of another op (by plan slot).
    Add(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanOp {
    /// Layer id, with fused layers appended as `a+b`.
    pub id: String,
    pub kind: LayerKind,
    /// Input slots (slot 0 is the batch).
    pub inputs: Vec<usize>,
    /// Per-sample output shape.
    pub out_shape: Vec<usize>,
    pub exec: Exec,
    pub epilogue: Vec<Epilogue>,
    pub params: KernelParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub reorder: bool,
    pub fuse: bool,
    pub params: KernelParams,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self { reorder: true, fuse: true, params: KernelParams::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionPlan {
    pub input_shape: Vec<usize>,
    /// Op `i` writes slot `i + 1`.
    pub ops: Vec<PlanOp>,
    /// Slot holding the model output.
    pub output: usize,
}

impl ExecutionPlan {
    /// Lowers `graph`; layers listed in `sparse` run from BCS. Every layer
    /// whose mask prunes something must have a BCS matrix.
    pub fn build(
        graph: &TensorGraph,
        masks: &MaskSet,
        sparse: &BTreeMap<String, BcsMatrix>,
        opts: &PlanOptions,
    ) -> Result<Self> {
        opts.params.validate()?;
        let mut ops_out: Vec<PlanOp> = Vec::new();
        // graph node -> slot
        let mut slot = vec![0usize; graph.layers().len()];
        let out_idx = graph.output_index();
        for (idx, layer) in graph.layers().iter().enumerate().take(out_idx + 1) {
            if matches!(layer.kind, LayerKind::Input { .. }) {
                slot[idx] = 0;
                continue;
            }
            let exec = match &layer.kind {
                LayerKind::Fc { .. } | LayerKind::Conv2d { .. } | LayerKind::DepthwiseConv2d { .. } => {
                    weight_exec(graph, &layer.id, &layer.kind, masks, sparse, opts.reorder)?
                }
                LayerKind::Relu => Exec::Relu,
                LayerKind::MaxPool { kernel, stride } => Exec::MaxPool { kernel: *kernel, stride: *stride },
                LayerKind::AvgPool { kernel, stride } => Exec::AvgPool { kernel: *kernel, stride: *stride },
                LayerKind::Flatten => Exec::Flatten,
                LayerKind::Add => Exec::Add,
                LayerKind::Input { .. } | LayerKind::SoftmaxCrossEntropy => unreachable!(),
            };
            ops_out.push(PlanOp {
                id: layer.id.clone(),
                kind: layer.kind.clone(),
                inputs: layer.inputs.iter().map(|&i| slot[i]).collect(),
                out_shape: graph.output_shape(idx).to_vec(),
                exec,
                epilogue: vec![],
                params: opts.params,
            });
            slot[idx] = ops_out.len();
        }
        for (id, _) in masks.iter() {
            if graph.layer(id).is_none() {
                return Err(Error::Graph(format!("mask for unknown layer `{id}`")));
            }
        }
        let mut plan = Self { input_shape: graph.input_shape().to_vec(), ops: ops_out, output: slot[out_idx] };
        if opts.fuse {
            plan = fuse_elementwise(&plan);
        }
        Ok(plan)
    }

    /// Encodes every masked layer to BCS itself, then builds.
    pub fn compile(graph: &TensorGraph, masks: &MaskSet, opts: &PlanOptions) -> Result<Self> {
        let sparse = encode_layers(graph, masks)?;
        Self::build(graph, masks, &sparse, opts)
    }

    /// Number of buffers materialized per inference (batch excluded).
    pub fn buffer_count(&self) -> usize {
        self.ops.len()
    }

    pub fn set_params(&mut self, params: KernelParams) {
        for op in &mut self.ops {
            op.params = params;
        }
    }

    pub fn set_threads(&mut self, threads: usize) {
        for op in &mut self.ops {
            op.params.threads = threads.max(1);
        }
    }

    pub fn run(&self, batch: &Tensor) -> Result<Tensor> {
        self.run_timed(batch, None)
    }

    fn run_timed(&self, batch: &Tensor, mut times: Option<&mut Vec<f64>>) -> Result<Tensor> {
        let s = batch.shape();
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!("batch shape {:?} does not match plan input {:?}", s, self.input_shape)));
        }
        let n = s[0];
        let mut slots: Vec<Option<Tensor>> = vec![None; self.ops.len() + 1];
        slots[0] = Some(batch.clone());
        let consumers = self.last_use();
        for (i, op) in self.ops.iter().enumerate() {
            let t0 = Instant::now();
            let mut out_shape = vec![n];
            out_shape.extend_from_slice(&op.out_shape);
            let x = slots[op.inputs[0]].as_ref().expect("input computed");
            let mut y = exec_op(op, x, &out_shape, &slots)?;
            for e in &op.epilogue {
                match e {
                    Epilogue::Relu => y.data_mut().iter_mut().for_each(|v| {
                        if *v < 0.0 {
                            *v = 0.0
                        }
                    }),
                    Epilogue::Add(src) => {
                        let other = slots[*src].as_ref().expect("operand computed");
                        for (o, v) in y.data_mut().iter_mut().zip(other.data()) {
                            *o += *v;
                        }
                    }
                }
            }
            y.ensure_finite(&op.id)?;
            slots[i + 1] = Some(y);
            // Free buffers no longer needed.
            for (s, &last) in consumers.iter().enumerate() {
                if last == i && s != self.output && s > 0 {
                    slots[s] = None;
                }
            }
            if let Some(t) = times.as_deref_mut() {
                t.push(t0.elapsed().as_secs_f64() * 1e6);
            }
        }
        Ok(slots[self.output].take().expect("output computed"))
    }

    /// Index of the last op reading each slot.
    fn last_use(&self) -> Vec<usize> {
        let mut last = vec![usize::MAX; self.ops.len() + 1];
        for (i, op) in self.ops.iter().enumerate() {
            for &s in &op.inputs {
                last[s] = i;
            }
            for e in &op.epilogue {
                if let Epilogue::Add(s) = e {
                    last[*s] = i;
                }
            }
        }
        last
    }
}

fn weight_exec(
    graph: &TensorGraph,
    id: &str,
    kind: &LayerKind,
    masks: &MaskSet,
    sparse: &BTreeMap<String, BcsMatrix>,
    reorder: bool,
) -> Result<Exec> {
    let p = graph.param(id).expect("weight layer");
    let mut weight = p.weight.clone();
    let mask = masks.get(id);
    if let Some(m) = mask {
        if m.shape() != weight.shape() {
            return Err(Error::Shape(format!(
                "mask shape {:?} disagrees with weights {:?} of `{id}`",
                m.shape(),
                weight.shape()
            )));
        }
        for (w, &k) in weight.data_mut().iter_mut().zip(m.bits()) {
            if !k {
                *w = 0.0;
            }
        }
    }
    let pruned = mask.is_some_and(|m| m.kept() < m.len());
    let geom = LayerGeometry::from_kind(kind).expect("weight layer");
    let (rows, cols) = gemm_dims(&geom);
    let Some(bcs) = sparse.get(id) else {
        if pruned {
            return Err(Error::MissingBlob(format!("{id}.bcs")));
        }
        return Ok(Exec::Dense { weight, bias: p.bias.clone() });
    };
    if (bcs.rows, bcs.cols) != (rows, cols) {
        return Err(Error::Shape(format!("BCS of `{id}` is {}x{}, layer needs {rows}x{cols}", bcs.rows, bcs.cols)));
    }
    let decoded = bcs.decode()?;
    if decoded != weight.data() {
        return Err(Error::Archive(format!("BCS of `{id}` disagrees with its masked weights")));
    }
    if matches!(kind, LayerKind::DepthwiseConv2d { .. }) {
        // Per-channel kernels: run the (masked) dense path.
        return Ok(Exec::Dense { weight, bias: p.bias.clone() });
    }
    let weights = if reorder {
        let (perm, permuted) = reorder_rows(bcs)?;
        let identity = perm.iter().enumerate().all(|(i, &p)| i == p);
        SparseWeights { bcs: permuted, perm: (!identity).then_some(perm) }
    } else {
        SparseWeights { bcs: bcs.clone(), perm: None }
    };
    Ok(Exec::Sparse { weights, bias: p.bias.clone() })
}

/// BCS encoding (GEMM view, mask positions stored) of every layer whose mask
/// prunes at least one weight.
pub fn encode_layers(graph: &TensorGraph, masks: &MaskSet) -> Result<BTreeMap<String, BcsMatrix>> {
    let mut out = BTreeMap::new();
    for (id, m) in masks {
        let layer = graph.layer(id).ok_or_else(|| Error::Graph(format!("mask for unknown layer `{id}`")))?;
        let geom = LayerGeometry::from_kind(&layer.kind)
            .ok_or_else(|| Error::Graph(format!("mask on weightless layer `{id}`")))?;
        if m.kept() == m.len() {
            continue;
        }
        let p = graph.param(id).expect("weight layer");
        if m.shape() != p.weight.shape() {
            return Err(Error::Shape(format!("mask shape {:?} disagrees with weights of `{id}`", m.shape())));
        }
        let (rows, cols) = gemm_dims(&geom);
        let masked: Vec<f32> = p.weight.data().iter().zip(m.bits()).map(|(&w, &k)| if k { w } else { 0.0 }).collect();
        out.insert(id.clone(), BcsMatrix::encode_with_mask(&masked, rows, cols, m.bits())?);
    }
    Ok(out)
}

fn exec_op(op: &PlanOp, x: &Tensor, out_shape: &[usize], slots: &[Option<Tensor>]) -> Result<Tensor> {
    Ok(match &op.exec {
        Exec::Dense { weight, bias } => match op.kind {
            LayerKind::Fc { .. } => ops::fc_forward(x, weight, bias),
            LayerKind::Conv2d { .. } => ops::conv_forward(x, weight, bias, &op.kind, out_shape).0,
            LayerKind::DepthwiseConv2d { .. } => ops::depthwise_forward(x, weight, bias, &op.kind, out_shape),
            _ => unreachable!("dense exec on weightless layer"),
        },
        Exec::Sparse { weights, bias } => sparse_layer(op, weights, bias, x, out_shape)?,
        Exec::Relu => ops::relu(x),
        Exec::MaxPool { kernel, stride } => ops::max_pool(x, *kernel, *stride, out_shape).0,
        Exec::AvgPool { kernel, stride } => ops::avg_pool(x, *kernel, *stride, out_shape),
        Exec::Flatten => x.clone().reshape(out_shape)?,
        Exec::Add => {
            let y = slots[op.inputs[1]].as_ref().expect("operand computed");
            let mut out = x.clone();
            for (o, v) in out.data_mut().iter_mut().zip(y.data()) {
                *o += *v;
            }
            out
        }
    })
}

fn sparse_layer(op: &PlanOp, w: &SparseWeights, bias: &Tensor, x: &Tensor, out_shape: &[usize]) -> Result<Tensor> {
    let perm = w.perm.as_deref();
    match op.kind {
        LayerKind::Fc { in_features, out_features } => {
            let n = x.shape()[0];
            // X^T: [in, N]
            let mut xt = vec![0.0f32; in_features * n];
            for (b, row) in x.data().chunks_exact(in_features).enumerate() {
                for (i, &v) in row.iter().enumerate() {
                    xt[i * n + b] = v;
                }
            }
            let y = spmm_permuted(&w.bcs, perm, &xt, n, &op.params)?;
            let mut out = vec![0.0f32; n * out_features];
            for o in 0..out_features {
                for b in 0..n {
                    out[b * out_features + o] = y[o * n + b] + bias.data()[o];
                }
            }
            Tensor::new(vec![n, out_features], out)
        }
        LayerKind::Conv2d { kernel_h, kernel_w, stride, padding, out_channels, .. } => {
            let [n, c, h, wd] = *x.shape() else {
                return Err(Error::Shape("conv input must be NCHW".into()));
            };
            let (ho, wo) = (out_shape[2], out_shape[3]);
            let cols = im2col(x.data(), n, c, h, wd, kernel_h, kernel_w, stride, padding, ho, wo);
            let l = ho * wo;
            let y = spmm_permuted(&w.bcs, perm, &cols, n * l, &op.params)?;
            Tensor::new(out_shape.to_vec(), ops::scatter_gemm_output(&y, bias.data(), n, out_channels, l))
        }
        _ => unreachable!("sparse exec on non-GEMM layer"),
    }
}

/// Merges ReLU/Add nodes into their producer when the producer has no other
/// consumer. Outputs are unchanged.
pub fn fuse_elementwise(plan: &ExecutionPlan) -> ExecutionPlan {
    let mut ops = plan.ops.clone();
    let mut output = plan.output;
    loop {
        let mut uses = vec![0usize; ops.len() + 1];
        for op in &ops {
            for &s in &op.inputs {
                uses[s] += 1;
            }
            for e in &op.epilogue {
                if let Epilogue::Add(s) = e {
                    uses[*s] += 1;
                }
            }
        }
        uses[output] += 1;
        let candidate = ops.iter().enumerate().find_map(|(i, op)| {
            let fusable_producer = |s: usize| s > 0 && uses[s] == 1 && s - 1 < i;
            match op.exec {
                Exec::Relu if fusable_producer(op.inputs[0]) => Some((i, op.inputs[0], Epilogue::Relu)),
                Exec::Add => {
                    let (a, b) = (op.inputs[0], op.inputs[1]);
                    // The other operand must already exist when the producer runs.
                    if fusable_producer(a) && b < a && a != b {
                        Some((i, a, Epilogue::Add(b)))
                    } else if fusable_producer(b) && a < b && a != b {
                        Some((i, b, Epilogue::Add(a)))
                    } else {
                        None
                    }
                }
                _ => None,
            }
        });
        let Some((i, producer_slot, epi)) = candidate else {
            break;
        };
        let fused = ops.remove(i);
        let p = producer_slot - 1;
        ops[p].epilogue.push(epi);
        ops[p].id = format!("{}+{}", ops[p].id, fused.id);
        // Slot i+1 disappears: readers of it now read the producer; later slots shift down.
        let removed = i + 1;
        let remap = |s: usize| -> usize {
            if s == removed {
                producer_slot
            } else if s > removed {
                s - 1
            } else {
                s
            }
        };
        for op in &mut ops {
            for s in &mut op.inputs {
                *s = remap(*s);
            }
            for e in &mut op.epilogue {
                if let Epilogue::Add(s) = e {
                    *s = remap(*s);
                }
            }
        }
        output = remap(output);
    }
    ExecutionPlan { input_shape: plan.input_shape.clone(), ops, output }
}

/// One benchmark line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub layer_id: String,
    pub config: KernelParams,
    pub runs: usize,
    pub median_us: f64,
    pub p90_us: f64,
}

pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile(&v, 0.5)
}

/// Times every op over `runs` inferences; one record per op plus `total`.
pub fn bench(plan: &ExecutionPlan, batch: &Tensor, runs: usize) -> Result<Vec<BenchRecord>> {
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be >= 1".into()));
    }
    plan.run(batch)?;
    let mut per_op: Vec<Vec<f64>> = vec![Vec::with_capacity(runs); plan.ops.len()];
    let mut totals = Vec::with_capacity(runs);
    for _ in 0..runs {
        let mut t = Vec::with_capacity(plan.ops.len());
        let t0 = Instant::now();
        plan.run_timed(batch, Some(&mut t))?;
        totals.push(t0.elapsed().as_secs_f64() * 1e6);
        for (acc, v) in per_op.iter_mut().zip(t) {
            acc.push(v);
        }
    }
    let record = |id: &str, config: KernelParams, mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        BenchRecord {
            layer_id: id.to_string(),
            config,
            runs,
            median_us: percentile(&v, 0.5),
            p90_us: percentile(&v, 0.9),
        }
    };
    let mut out: Vec<BenchRecord> = plan.ops.iter().zip(per_op).map(|(op, v)| record(&op.id, op.params, v)).collect();
    let cfg = plan.ops.first().map(|o| o.params).unwrap_or_default();
    out.push(record("total", cfg, totals));
    Ok(out)
}

/// Median latency (µs) of one `spmm` call over `runs` runs.
pub fn time_spmm(m: &BcsMatrix, x: &[f32], n: usize, params: &KernelParams, runs: usize) -> Result<f64> {
    spmm(m, x, n, params)?;
    let mut t = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let t0 = Instant::now();
        std::hint::black_box(spmm(m, x, n, params)?);
        t.push(t0.elapsed().as_secs_f64() * 1e6);
    }
    Ok(median(&t))
}

/// GA tuning of one BCS × dense product of width `n`.
pub fn tune_spmm(m: &BcsMatrix, n: usize, bounds: &TuneBounds, ga: &GaConfig, runs: usize) -> Result<TuneResult> {
    let x: Vec<f32> = (0..m.cols * n).map(|i| ((i * 7919) % 113) as f32 / 113.0 - 0.5).collect();
    let mut failure = None;
    let r = autotune(bounds, KernelParams::default(), ga, |p| match time_spmm(m, &x, n, p, runs) {
        Ok(t) => t,
        Err(e) => {
            failure.get_or_insert(e);
            f64::INFINITY
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(r),
    }
}

/// Tunes the kernel parameters of each sparse op in turn, the fitness being
/// that op's median time over `runs` inferences of `batch`. The tuned
/// parameters are stored in the plan.
pub fn tune_plan(
    plan: &mut ExecutionPlan,
    batch: &Tensor,
    bounds: &TuneBounds,
    ga: &GaConfig,
    runs: usize,
) -> Result<Vec<(String, TuneResult)>> {
    let mut out = Vec::new();
    for i in 0..plan.ops.len() {
        if !matches!(plan.ops[i].exec, Exec::Sparse { .. }) {
            continue;
        }
        let default = plan.ops[i].params;
        let mut failure = None;
        let mut fitness = |p: &KernelParams| -> f64 {
            plan.ops[i].params = *p;
            let mut t = Vec::with_capacity(runs);
            for _ in 0..runs.max(1) {
                let mut times = Vec::new();
                if let Err(e) = plan.run_timed(batch, Some(&mut times)) {
                    failure.get_or_insert(e);
                    return f64::INFINITY;
                }
                t.push(times[i]);
            }
            median(&t)
        };
        let r = autotune(bounds, default, ga, &mut fitness)?;
        if let Some(e) = failure {
            return Err(e);
        }
        plan.ops[i].params = r.best;
        out.push((plan.ops[i].id.clone(), r));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_reference_model;

    #[test]
    fn unpruned_matches_dense_forward_exactly() {
        let g = build_reference_model("convnet-mini", 3).unwrap();
        let x = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i * 37 % 101) as f32) / 101.0);
        let plan = ExecutionPlan::compile(&g, &MaskSet::new(), &PlanOptions::default()).unwrap();
        assert_eq!(plan.run(&x).unwrap(), g.forward(&x).unwrap());
    }

    #[test]
    fn fusion_reduces_ops() {
        let g = build_reference_model("convnet-mini", 3).unwrap();
        let unfused =
            ExecutionPlan::compile(&g, &MaskSet::new(), &PlanOptions { fuse: false, ..Default::default() }).unwrap();
        let fused = fuse_elementwise(&unfused);
        assert!(fused.buffer_count() < unfused.buffer_count());
        let x = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i * 13 % 29) as f32) / 29.0 - 0.3);
        assert_eq!(fused.run(&x).unwrap(), unfused.run(&x).unwrap());
    }
}
