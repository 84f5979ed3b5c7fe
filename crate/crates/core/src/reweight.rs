//! Reweighted group-lasso training and hardening.
//!
//! The regularizer of a layer is `R = Σ_g α_g² ‖W_g‖²` over the penalty
//! groups of its pruning scheme, with `α_g` held fixed between updates
//! `α_g = 1 / (‖W_g‖² + ε)`. Training applies `λ R` as an exact proximal
//! step after each SGD update: `R` is a per-weight quadratic, so
//! `w ← w / (1 + 2 η λ c_w)` with `c_w = Σ_{g ∋ w} α_g²`.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::TensorGraph;
use crate::mask::{Mask, MaskSet};
use crate::pruning::{
    build_groups, row_group_count, scheme_partition, GroupIndex, GroupMask, LayerGeometry, PruningScheme, Regularity,
};
use crate::tensor::Scalar;
use crate::train::{TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    /// Scheme per weight layer; layers not listed are left unregularized.
    pub schemes: BTreeMap<String, PruningScheme>,
    pub lambda: f64,
    pub epsilon: f64,
    /// Epochs between α updates.
    pub interval: usize,
    /// Epochs before the first α update (α = 1 until then).
    pub warmup: usize,
    pub tau: f64,
}

impl RegularizerSpec {
    pub fn new(schemes: BTreeMap<String, PruningScheme>, lambda: f64) -> Self {
        Self { schemes, lambda, epsilon: 1e-4, interval: 2, warmup: 2, tau: 0.05 }
    }

    /// Same scheme on every layer the scheme is valid for.
    pub fn uniform<T: Scalar>(graph: &TensorGraph<T>, scheme: &PruningScheme, lambda: f64) -> Self {
        let schemes = graph
            .weight_layers()
            .filter(|(_, l)| scheme.validate_for(&l.kind).is_ok())
            .map(|(_, l)| (l.id.clone(), scheme.clone()))
            .collect();
        Self::new(schemes, lambda)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon {} must be > 0", self.epsilon)));
        }
        if self.interval == 0 {
            return Err(Error::InvalidArgument("reweight interval must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidArgument(format!("tau {} must be in (0, 1)", self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPenalty {
    pub geometry: LayerGeometry,
    pub scheme: PruningScheme,
    pub groups: GroupIndex,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyState {
    pub layers: BTreeMap<String, LayerPenalty>,
    /// Number of α updates performed.
    pub step: usize,
}

impl PenaltyState {
    /// α = 1 for every group of every regularized layer.
    pub fn init<T: Scalar>(graph: &TensorGraph<T>, spec: &RegularizerSpec) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for (id, scheme) in &spec.schemes {
            let layer = graph.layer(id).ok_or_else(|| Error::Graph(format!("scheme for unknown layer `{id}`")))?;
            scheme.validate_for(&layer.kind)?;
            if scheme.is_none() {
                continue;
            }
            let geometry = LayerGeometry::from_kind(&layer.kind).expect("weight layer");
            let groups = build_groups(&geometry, scheme)?;
            let alpha = vec![1.0; groups.len()];
            layers.insert(id.clone(), LayerPenalty { geometry, scheme: scheme.clone(), groups, alpha });
        }
        Ok(Self { layers, step: 0 })
    }

    pub fn update<T: Scalar>(&mut self, graph: &TensorGraph<T>, epsilon: f64) -> Result<()> {
        for (id, lp) in &mut self.layers {
            let w = graph.param(id).expect("validated layer").weight.data();
            lp.alpha = update_penalties(w, &lp.groups, epsilon)?;
        }
        self.step += 1;
        Ok(())
    }

    /// `Σ_layers R` at the current weights.
    pub fn total_reg<T: Scalar>(&self, graph: &TensorGraph<T>) -> Result<f64> {
        let mut total = 0.0;
        for (id, lp) in &self.layers {
            let w = graph.param(id).expect("validated layer").weight.data();
            total += reg_value_and_grad(w, &lp.groups, &lp.alpha)?.0;
        }
        Ok(total)
    }
}

/// `R = Σ_g α_g² ‖W_g‖²` and its gradient `2 α_g² W_g` (summed over the
/// groups containing each weight).
pub fn reg_value_and_grad<T: Scalar>(weights: &[T], groups: &GroupIndex, alpha: &[f64]) -> Result<(f64, Vec<T>)> {
    check_index(weights, groups, alpha)?;
    let mut grad = vec![0.0f64; weights.len()];
    let mut value = 0.0;
    for (g, &a) in groups.iter().zip(alpha) {
        let a2 = a * a;
        for &i in g {
            let w = weights[i].as_f64();
            value += a2 * w * w;
            grad[i] += 2.0 * a2 * w;
        }
    }
    Ok((value, grad.into_iter().map(T::from_f64).collect()))
}

fn check_index<T>(weights: &[T], groups: &GroupIndex, alpha: &[f64]) -> Result<()> {
    if alpha.len() != groups.len() {
        return Err(Error::InvalidArgument(format!("{} penalties for {} groups", alpha.len(), groups.len())));
    }
    if groups.iter().flatten().any(|&i| i >= weights.len()) {
        return Err(Error::InvalidArgument("group member outside the weight tensor".into()));
    }
    Ok(())
}

/// `α_g = 1 / (‖W_g‖² + ε)`.
pub fn update_penalties<T: Scalar>(weights: &[T], groups: &GroupIndex, epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be > 0")));
    }
    Ok(groups.norms(weights).into_iter().map(|n| 1.0 / (n * n + epsilon)).collect())
}

/// Proximal step of `step_size · R`: `w ← w / (1 + 2 · step_size · Σ_{g∋w} α_g²)`.
pub fn prox_shrink<T: Scalar>(weights: &mut [T], groups: &GroupIndex, alpha: &[f64], step_size: f64) -> Result<()> {
    check_index(weights, groups, alpha)?;
    let mut coef = vec![0.0f64; weights.len()];
    for (g, &a) in groups.iter().zip(alpha) {
        for &i in g {
            coef[i] += a * a;
        }
    }
    for (w, c) in weights.iter_mut().zip(coef) {
        *w = T::from_f64(w.as_f64() / (1.0 + 2.0 * step_size * c));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSummary {
    pub groups: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    /// Groups at or below `τ · mean`.
    pub near_zero: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub data_loss: f64,
    pub reg_value: f64,
    pub objective: f64,
    pub alpha_updated: bool,
    pub layers: BTreeMap<String, NormSummary>,
}

#[derive(Clone, Debug)]
pub struct ReweightOutcome {
    pub log: Vec<EpochLog>,
    /// Penalty state after every α update, initial state first.
    pub history: Vec<PenaltyState>,
}

fn summarize(norms: &[f64], tau: f64) -> NormSummary {
    let mut sorted = norms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len().max(1) as f64;
    NormSummary {
        groups: sorted.len(),
        min: sorted.first().copied().unwrap_or(0.0),
        median: sorted.get(sorted.len() / 2).copied().unwrap_or(0.0),
        max: sorted.last().copied().unwrap_or(0.0),
        near_zero: sorted.iter().filter(|&&n| n <= tau * mean).count(),
    }
}

/// Trains with the reweighted penalty, updating α every `interval` epochs
/// after `warmup`. Each epoch's record is appended to `log_sink` as a JSON line.
pub fn train_reweighted(
    graph: &mut TensorGraph,
    data: &Dataset,
    spec: &RegularizerSpec,
    cfg: &TrainConfig,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<ReweightOutcome> {
    spec.validate()?;
    let mut state = PenaltyState::init(graph, spec)?;
    let mut history = vec![state.clone()];
    let mut trainer = Trainer::new(cfg)?;
    let mut log = Vec::new();
    let step_size = cfg.lr * spec.lambda;
    for epoch in 0..cfg.epochs {
        let data_loss = {
            let state = &state;
            trainer.epoch(epoch, graph, data, None, |g| {
                for (id, lp) in &state.layers {
                    let w = g.param_mut(id).expect("validated layer").weight.data_mut();
                    prox_shrink(w, &lp.groups, &lp.alpha, step_size)?;
                }
                Ok(())
            })?
        };
        let done = epoch + 1;
        let alpha_updated = done >= spec.warmup && (done - spec.warmup) % spec.interval == 0 && done > 0;
        if alpha_updated {
            state.update(graph, spec.epsilon)?;
            history.push(state.clone());
        }
        let reg_value = state.total_reg(graph)?;
        let objective = data_loss + spec.lambda * reg_value;
        if !objective.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("objective {objective} (data {data_loss}, reg {reg_value})"),
            });
        }
        let layers = state
            .layers
            .iter()
            .map(|(id, lp)| {
                let w = graph.param(id).expect("validated layer").weight.data();
                (id.clone(), summarize(&lp.groups.norms(w), spec.tau))
            })
            .collect();
        let rec = EpochLog { epoch, data_loss, reg_value, objective, alpha_updated, layers };
        if let Some(sink) = log_sink.as_mut() {
            serde_json::to_writer(&mut **sink, &rec)?;
            sink.write_all(b"\n")?;
        }
        log::info!("epoch {epoch}: data {data_loss:.5} reg {reg_value:.4}");
        log.push(rec);
    }
    Ok(ReweightOutcome { log, history })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HardenedLayer {
    pub mask: GroupMask,
    pub kept_groups: usize,
    pub total_groups: usize,
    /// Kept weights per block (empty for non-block schemes).
    pub per_block_kept: Vec<usize>,
}

impl HardenedLayer {
    pub fn rate(&self) -> f64 {
        self.mask.rate()
    }
}

/// Indices of groups to keep: norm above `τ · mean`, or the largest one if
/// none survives.
fn keep_above(norms: &[f64], tau: f64, layer: &str) -> Vec<bool> {
    if norms.is_empty() {
        return vec![];
    }
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    let mut kept: Vec<bool> = norms.iter().map(|&n| n > tau * mean).collect();
    if !kept.iter().any(|&k| k) {
        let mut best = 0;
        for (i, &n) in norms.iter().enumerate() {
            if n > norms[best] {
                best = i;
            }
        }
        log::warn!("every group of `{layer}` is below threshold; keeping group {best}");
        kept[best] = true;
    }
    kept
}

/// Hard-prunes every group with `‖W_g‖ ≤ τ · mean(‖W_g'‖)` in its layer.
pub fn harden<T: Scalar>(
    graph: &TensorGraph<T>,
    schemes: &BTreeMap<String, PruningScheme>,
    tau: f64,
) -> Result<BTreeMap<String, HardenedLayer>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau {tau} must be in (0, 1)")));
    }
    let mut out = BTreeMap::new();
    for (id, scheme) in schemes {
        let layer = graph.layer(id).ok_or_else(|| Error::Graph(format!("scheme for unknown layer `{id}`")))?;
        scheme.validate_for(&layer.kind)?;
        let geom = LayerGeometry::from_kind(&layer.kind).expect("weight layer");
        let p = graph.param(id).expect("weight layer");
        let w = p.weight.data();
        let groups = build_groups(&geom, scheme)?;
        let partition = scheme_partition(&geom, scheme)?;
        let norms = groups.norms(w);
        let (bits, group_kept) = match scheme.regularity {
            Regularity::None => (vec![true; w.len()], vec![true; groups.len()]),
            Regularity::BlockRowColumn => {
                let n_rows = row_group_count(&geom, partition.as_ref().expect("block family"));
                let mut kept = keep_above(&norms[..n_rows], tau, id);
                kept.extend(keep_above(&norms[n_rows..], tau, id));
                let mut row_ok = vec![false; w.len()];
                let mut col_ok = vec![false; w.len()];
                for (g, members) in groups.iter().enumerate() {
                    let dst = if g < n_rows { &mut row_ok } else { &mut col_ok };
                    for &i in members {
                        dst[i] = kept[g];
                    }
                }
                let bits = row_ok.iter().zip(&col_ok).map(|(&a, &b)| a && b).collect();
                (bits, kept)
            }
            _ => {
                let kept = keep_above(&norms, tau, id);
                let mut bits = vec![false; w.len()];
                for (g, members) in groups.iter().enumerate() {
                    for &i in members {
                        bits[i] = kept[g];
                    }
                }
                (bits, kept)
            }
        };
        let mask = Mask::new(p.weight.shape().to_vec(), bits)?;
        let per_block_kept = match &partition {
            Some(part) => part
                .blocks()
                .map(|(rows, cols)| {
                    let mut n = 0;
                    for f in rows {
                        for c in cols.clone() {
                            let base = geom.index(f, c, 0, 0);
                            n += mask.bits()[base..base + geom.kernel_area()].iter().filter(|&&b| b).count();
                        }
                    }
                    n
                })
                .collect(),
            None => vec![],
        };
        out.insert(
            id.clone(),
            HardenedLayer {
                kept_groups: group_kept.iter().filter(|&&k| k).count(),
                total_groups: group_kept.len(),
                per_block_kept,
                mask: GroupMask { mask, scheme: scheme.clone(), partition, groups, group_kept, patterns: vec![] },
            },
        );
    }
    Ok(out)
}

/// Mask set of a hardening result.
pub fn hardened_masks(h: &BTreeMap<String, HardenedLayer>) -> MaskSet {
    h.iter().map(|(id, l)| (id.clone(), l.mask.mask.clone())).collect()
}
