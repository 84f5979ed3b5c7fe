//! Per-layer pruning-scheme mapping: the training-free rule-based decision
//! procedure and a REINFORCE search over (regularity, block size) actions.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::{LayerKind, TensorGraph};
use crate::latency::{table_regularity, LatencyTable, LayerType, LookupQuery};
use crate::mask::MaskSet;
use crate::pruning::{count_macs, project_mask, BlockSize, LayerGeometry, PruningScheme, Regularity, Target};
use crate::train::{evaluate, finetune, TrainConfig};

/// Default latency threshold relative to structured pruning.
pub const DEFAULT_BETA: f64 = 0.2;
/// Default per-layer compression rate used by the mappers.
pub const DEFAULT_RATE: f64 = 4.0;
/// Reward assigned to mappings whose retraining diverged.
pub const DIVERGED_REWARD: f64 = -1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    /// Hard iff at least 100 classes or at least 10⁵ training images.
    pub fn infer(classes: usize, train_images: usize) -> Self {
        if classes >= 100 || train_images >= 100_000 {
            Difficulty::Hard
        } else {
            Difficulty::Easy
        }
    }
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            _ => Err(Error::InvalidArgument(format!("difficulty must be easy or hard, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDecision {
    pub layer_id: String,
    pub regularity: Regularity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<BlockSize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    pub rationale: String,
    /// Normalized latency of the chosen block size ÷ that of structured pruning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_margin: Option<f64>,
}

impl LayerDecision {
    pub fn scheme(&self) -> PruningScheme {
        PruningScheme { regularity: self.regularity, block: self.block_size, rate: self.rate, ..PruningScheme::none() }
    }
}

/// Mapping document: one decision per weight layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingDocument {
    pub method: String,
    pub tool_version: String,
    pub seed: u64,
    /// SHA-256 of the mapper configuration.
    #[serde(default)]
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<Difficulty>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    pub layers: Vec<LayerDecision>,
}

impl MappingDocument {
    pub fn schemes(&self) -> BTreeMap<String, PruningScheme> {
        self.layers.iter().map(|d| (d.layer_id.clone(), d.scheme())).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Every decision names a weight layer and is valid for it.
    pub fn validate(&self, graph: &TensorGraph) -> Result<()> {
        for d in &self.layers {
            let layer = graph
                .layer(&d.layer_id)
                .ok_or_else(|| Error::Scheme(format!("mapping names unknown layer `{}`", d.layer_id)))?;
            d.scheme().validate_for(&layer.kind).map_err(|e| Error::Scheme(format!("layer `{}`: {e}", d.layer_id)))?;
        }
        Ok(())
    }
}

/// Latency-model view of a weight layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerInfo {
    pub id: String,
    pub kind: LayerKind,
    pub input_shape: Vec<usize>,
    /// `None` for kinds without a latency model.
    pub layer_type: Option<LayerType>,
    pub channels: f64,
    pub feature: f64,
}

pub fn layer_infos(graph: &TensorGraph) -> Vec<LayerInfo> {
    graph
        .weight_layers()
        .map(|(idx, l)| {
            let input_shape = graph.input_shape_of(idx).to_vec();
            let cls = LayerType::classify(&l.kind, &input_shape);
            LayerInfo {
                id: l.id.clone(),
                kind: l.kind.clone(),
                layer_type: cls.map(|c| c.0),
                channels: cls.map_or(0.0, |c| c.1),
                feature: cls.map_or(0.0, |c| c.2),
                input_shape,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockChoice {
    pub block: BlockSize,
    pub normalized: f64,
    pub structured: f64,
    /// `false` when no size met the threshold and the whole matrix was returned.
    pub qualified: bool,
}

impl BlockChoice {
    pub fn margin(&self) -> f64 {
        self.normalized / self.structured
    }
}

/// Smallest block size (by area, then fewer rows) whose normalized latency is
/// within `(1 + beta)` of structured pruning at the same rate. Falls back to
/// the whole matrix with a warning when none qualifies.
pub fn select_block_size(
    table: &LatencyTable,
    layer_type: LayerType,
    channels: f64,
    feature: f64,
    rate: f64,
    beta: f64,
) -> Result<BlockChoice> {
    let query = |block: BlockSize| LookupQuery {
        layer_type,
        channels,
        feature,
        scheme: table_regularity(layer_type, Some(block)),
        block: Some(block),
        rate,
    };
    let (structured, _) = table.normalized_lookup(&query(BlockSize::Whole))?;
    let mut blocks: Vec<BlockSize> = table.grid.blocks.iter().copied().filter(|b| *b != BlockSize::Whole).collect();
    blocks.sort_by_key(|b| b.area_key());
    blocks.dedup();
    for b in blocks {
        let normalized = match table.normalized_lookup(&query(b)) {
            Ok((n, _)) => n,
            Err(e) => {
                log::debug!("block {b} skipped: {e}");
                continue;
            }
        };
        if normalized <= (1.0 + beta) * structured {
            return Ok(BlockChoice { block: b, normalized, structured, qualified: true });
        }
    }
    log::warn!("no block size within beta={beta} of structured pruning for {layer_type:?}; using the whole matrix");
    Ok(BlockChoice { block: BlockSize::Whole, normalized: structured, structured, qualified: false })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleConfig {
    pub beta: f64,
    pub rate: f64,
    pub difficulty: Difficulty,
    pub seed: u64,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self { beta: DEFAULT_BETA, rate: DEFAULT_RATE, difficulty: Difficulty::Easy, seed: 0 }
    }
}

/// Rule-based mapping. Depthwise layers are not pruned; 3×3 convolutions get
/// pattern pruning on hard tasks and block-punched pruning otherwise; other
/// convolutions get block-punched and FC layers block row+column pruning,
/// with block sizes chosen from the latency table. Performs no training.
pub fn map_rule(graph: &TensorGraph, table: &LatencyTable, cfg: &RuleConfig) -> Result<MappingDocument> {
    if !(cfg.beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be >= 0, got {}", cfg.beta)));
    }
    let mut layers = Vec::new();
    for info in layer_infos(graph) {
        let none = |rationale: String| LayerDecision {
            layer_id: info.id.clone(),
            regularity: Regularity::None,
            block_size: None,
            rate: None,
            rationale,
            latency_margin: None,
        };
        let decision = match (&info.kind, info.layer_type) {
            (LayerKind::DepthwiseConv2d { .. }, _) => none("depthwise conv: not pruned".into()),
            (_, None) => {
                log::warn!("layer `{}` has no latency model; left unpruned", info.id);
                none("no latency model for this layer kind: not pruned".into())
            }
            (_, Some(LayerType::Conv3x3)) if cfg.difficulty == Difficulty::Hard => LayerDecision {
                layer_id: info.id.clone(),
                regularity: Regularity::Pattern,
                block_size: None,
                rate: Some(cfg.rate),
                rationale: "3x3 conv on a hard task: pattern".into(),
                latency_margin: None,
            },
            (_, Some(t)) => {
                let choice = select_block_size(table, t, info.channels, info.feature, cfg.rate, cfg.beta)?;
                let (regularity, what) = if t == LayerType::Fc {
                    (Regularity::BlockRowColumn, "fc: block row+column")
                } else if t == LayerType::Conv3x3 {
                    (Regularity::BlockPunched, "3x3 conv on an easy task: block-punched")
                } else {
                    (Regularity::BlockPunched, "conv: block-punched")
                };
                let how = if choice.qualified {
                    format!("smallest block within beta={}", cfg.beta)
                } else {
                    "no block within beta; whole matrix".to_string()
                };
                LayerDecision {
                    layer_id: info.id.clone(),
                    regularity,
                    block_size: Some(choice.block),
                    rate: Some(cfg.rate),
                    rationale: format!("{what}, {how}"),
                    latency_margin: Some(choice.margin()),
                }
            }
        };
        layers.push(decision);
    }
    let doc = MappingDocument {
        method: "rule".into(),
        tool_version: crate::TOOL_VERSION.into(),
        seed: cfg.seed,
        config_hash: crate::io::config_hash(cfg)?,
        beta: Some(cfg.beta),
        difficulty: Some(cfg.difficulty),
        reward: None,
        layers,
    };
    doc.validate(graph)?;
    Ok(doc)
}

/// Table-estimated latency (µs) of one layer under a scheme: the normalized
/// latency of the nearest grid entry times this layer's dense MACs.
pub fn estimate_layer_latency(table: &LatencyTable, info: &LayerInfo, scheme: &PruningScheme) -> Result<f64> {
    let rate = scheme.rate.unwrap_or(DEFAULT_RATE);
    let q = LookupQuery::for_layer(&info.kind, &info.input_shape, scheme, rate)
        .ok_or_else(|| Error::Latency(format!("no latency model for layer `{}`", info.id)))?;
    let (normalized, _) = table.normalized_lookup(&q)?;
    Ok(normalized * count_macs(&info.kind, &info.input_shape, None) as f64)
}

/// Sum of per-layer estimates; layers absent from `schemes` count as dense.
pub fn estimate_model_latency(
    table: &LatencyTable,
    infos: &[LayerInfo],
    schemes: &BTreeMap<String, PruningScheme>,
) -> Result<f64> {
    let dense = PruningScheme::none();
    infos.iter().map(|i| estimate_layer_latency(table, i, schemes.get(&i.id).unwrap_or(&dense))).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub w_accuracy: f64,
    pub w_latency: f64,
    /// Retraining after one-shot pruning.
    pub retrain: TrainConfig,
}

impl RewardSpec {
    /// `w_l` such that the dense model's latency contributes 0.2 to the reward.
    pub fn calibrated(dense_latency_us: f64, retrain: TrainConfig) -> Self {
        Self { w_accuracy: 1.0, w_latency: 0.2 / dense_latency_us.max(f64::MIN_POSITIVE), retrain }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_accuracy < 0.0 || self.w_latency < 0.0 || self.w_accuracy + self.w_latency == 0.0 {
            return Err(Error::InvalidArgument("reward weights must be >= 0 and not both zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub latency_us: f64,
    pub reward: f64,
    pub diverged: bool,
}

/// One-shot magnitude pruning of every layer in `schemes` (rates default to
/// [`DEFAULT_RATE`]).
pub fn one_shot_masks(graph: &TensorGraph, schemes: &BTreeMap<String, PruningScheme>) -> Result<MaskSet> {
    let mut masks = MaskSet::new();
    for (id, scheme) in schemes.iter().filter(|(_, s)| !s.is_none()) {
        let layer = graph.layer(id).ok_or_else(|| Error::Scheme(format!("unknown layer `{id}`")))?;
        scheme.validate_for(&layer.kind)?;
        let geom = LayerGeometry::from_kind(&layer.kind).expect("validated weight layer");
        let w = &graph.param(id).expect("weight layer").weight;
        let rate = scheme.rate.unwrap_or(DEFAULT_RATE);
        masks.insert(id.clone(), project_mask(w, &geom, scheme, Target::Rate(rate))?.mask);
    }
    Ok(masks)
}

/// Reward of a mapping on a pretrained graph.
pub struct Evaluator<'a> {
    pub graph: &'a TensorGraph,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub table: &'a LatencyTable,
    pub spec: RewardSpec,
    infos: Vec<LayerInfo>,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        graph: &'a TensorGraph,
        train: &'a Dataset,
        val: &'a Dataset,
        table: &'a LatencyTable,
        spec: RewardSpec,
    ) -> Result<Self> {
        spec.validate()?;
        Ok(Self { infos: layer_infos(graph), graph, train, val, table, spec })
    }

    pub fn infos(&self) -> &[LayerInfo] {
        &self.infos
    }

    pub fn dense_latency(&self) -> Result<f64> {
        estimate_model_latency(self.table, &self.infos, &BTreeMap::new())
    }

    /// `w_a · accuracy − w_l · latency`, where accuracy is measured on the
    /// held-out split after one-shot pruning and a short masked retrain
    /// (skipped when nothing is pruned). Divergence yields [`DIVERGED_REWARD`].
    pub fn evaluate(&self, schemes: &BTreeMap<String, PruningScheme>) -> Result<Evaluation> {
        let latency_us = estimate_model_latency(self.table, &self.infos, schemes)?;
        let masks = one_shot_masks(self.graph, schemes)?;
        let mut g = self.graph.clone();
        g.apply_masks(&masks)?;
        if !masks.is_empty() {
            match finetune(&mut g, &masks, self.train, &self.spec.retrain) {
                Ok(_) => {}
                Err(e @ Error::Diverged { .. }) => {
                    log::warn!("retraining diverged: {e}");
                    return Ok(Evaluation { accuracy: 0.0, latency_us, reward: DIVERGED_REWARD, diverged: true });
                }
                Err(e) => return Err(e),
            }
        }
        let accuracy = evaluate(&g, self.val)?;
        Ok(Evaluation {
            accuracy,
            latency_us,
            reward: self.spec.w_accuracy * accuracy - self.spec.w_latency * latency_us,
            diverged: false,
        })
    }
}

/// Search action for one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    None,
    Pattern,
    Block(BlockSize),
}

impl Action {
    /// The scheme this action means for a layer type.
    pub fn scheme(self, layer_type: LayerType, rate: f64) -> PruningScheme {
        match self {
            Action::None => PruningScheme::none(),
            Action::Pattern => PruningScheme::new(Regularity::Pattern).with_rate(rate),
            Action::Block(b) => PruningScheme {
                block: (b != BlockSize::Whole).then_some(b),
                ..PruningScheme::new(table_regularity(layer_type, Some(b)))
            }
            .with_rate(rate),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchLayer {
    pub id: String,
    /// (layer type, kernel size, input channels, output channels), scaled.
    pub state: [f64; 4],
    /// Valid actions (indices into the vocabulary).
    pub valid: Vec<bool>,
    pub layer_type: Option<LayerType>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    pub vocab: Vec<Action>,
    pub layers: Vec<SearchLayer>,
    pub rate: f64,
}

impl SearchSpace {
    /// Actions available in `table` at `rate` for each weight layer of `graph`.
    pub fn from_table(graph: &TensorGraph, table: &LatencyTable, rate: f64) -> Result<Self> {
        let mut vocab = vec![Action::None];
        if table.grid.pattern {
            vocab.push(Action::Pattern);
        }
        vocab.extend(table.grid.blocks.iter().map(|&b| Action::Block(b)));
        let mut layers = Vec::new();
        for info in layer_infos(graph) {
            let (k, cin, cout) = match info.kind {
                LayerKind::Fc { in_features, out_features } => (1, in_features, out_features),
                LayerKind::Conv2d { in_channels, out_channels, kernel_h, .. } => (kernel_h, in_channels, out_channels),
                LayerKind::DepthwiseConv2d { channels, kernel_h, .. } => (kernel_h, channels, channels),
                _ => continue,
            };
            let type_code = info.layer_type.map_or(0.0, |t| t as usize as f64 + 1.0);
            let state = [type_code / 5.0, k as f64 / 5.0, (cin as f64).log2() / 10.0, (cout as f64).log2() / 10.0];
            let valid = vocab
                .iter()
                .map(|a| match (a, info.layer_type) {
                    (Action::None, _) => true,
                    (_, None) | (_, Some(LayerType::Depthwise3x3)) => false,
                    (a, Some(t)) => {
                        let scheme = a.scheme(t, rate);
                        scheme.validate_for(&info.kind).is_ok()
                            && LookupQuery::for_layer(&info.kind, &info.input_shape, &scheme, rate)
                                .is_some_and(|q| table.lookup(&q).is_ok())
                    }
                })
                .collect();
            layers.push(SearchLayer { id: info.id, state, valid, layer_type: info.layer_type });
        }
        if layers.is_empty() {
            return Err(Error::InvalidArgument("graph has no weight layers to map".into()));
        }
        Ok(Self { vocab, layers, rate })
    }

    /// Synthetic space: `layers` layers all offering `actions` actions.
    pub fn uniform(layers: usize, actions: usize) -> Self {
        Self {
            vocab: (0..actions).map(|_| Action::None).collect(),
            layers: (0..layers)
                .map(|i| SearchLayer {
                    id: format!("layer{i}"),
                    state: [i as f64 / layers as f64, 0.0, 0.0, 0.0],
                    valid: vec![true; actions],
                    layer_type: None,
                })
                .collect(),
            rate: DEFAULT_RATE,
        }
    }

    /// Schemes of a sampled action sequence.
    pub fn schemes(&self, actions: &[usize]) -> BTreeMap<String, PruningScheme> {
        self.layers
            .iter()
            .zip(actions)
            .map(|(l, &a)| {
                let scheme = match l.layer_type {
                    Some(t) => self.vocab[a].scheme(t, self.rate),
                    None => PruningScheme::none(),
                };
                (l.id.clone(), scheme)
            })
            .collect()
    }

    /// Number of distinct valid mappings.
    pub fn size(&self) -> usize {
        self.layers.iter().map(|l| l.valid.iter().filter(|&&v| v).count()).product()
    }

    /// Every valid action sequence, in lexicographic order.
    pub fn enumerate(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for l in &self.layers {
            let opts: Vec<usize> = (0..l.valid.len()).filter(|&a| l.valid[a]).collect();
            out = out
                .into_iter()
                .flat_map(|p| {
                    opts.iter().map(move |&a| {
                        let mut q = p.clone();
                        q.push(a);
                        q
                    })
                })
                .collect();
        }
        out
    }
}

/// Shared two-layer tanh perceptron applied layer by layer to
/// (layer state, one-hot previous action).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub hidden: usize,
    pub actions: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

struct Step {
    x: Vec<f64>,
    h: Vec<f64>,
    p: Vec<f64>,
}

impl Policy {
    /// Random first layer, zero output layer: the initial policy is uniform
    /// over valid actions.
    pub fn new(actions: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let inputs = 4 + actions;
        let scale = 1.0 / (inputs as f64).sqrt();
        Self {
            hidden,
            actions,
            w1: (0..hidden * inputs).map(|_| rng.gen_range(-scale..scale)).collect(),
            b1: vec![0.0; hidden],
            w2: vec![0.0; actions * hidden],
            b2: vec![0.0; actions],
        }
    }

    fn inputs(&self) -> usize {
        4 + self.actions
    }

    fn step(&self, layer: &SearchLayer, prev: Option<usize>) -> Step {
        let mut x = layer.state.to_vec();
        x.resize(self.inputs(), 0.0);
        if let Some(a) = prev {
            x[4 + a] = 1.0;
        }
        let d = self.inputs();
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let z: f64 = self.w1[j * d..(j + 1) * d].iter().zip(&x).map(|(w, v)| w * v).sum();
                (z + self.b1[j]).tanh()
            })
            .collect();
        let logits: Vec<f64> = (0..self.actions)
            .map(|a| {
                self.w2[a * self.hidden..(a + 1) * self.hidden].iter().zip(&h).map(|(w, v)| w * v).sum::<f64>()
                    + self.b2[a]
            })
            .collect();
        let max =
            logits.iter().zip(&layer.valid).filter(|(_, &v)| v).map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> =
            logits.iter().zip(&layer.valid).map(|(l, &v)| if v { (l - max).exp() } else { 0.0 }).collect();
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= z);
        Step { x, h, p }
    }

    /// Action probabilities for `layer` given the previous actions.
    pub fn probabilities(&self, space: &SearchSpace, prefix: &[usize]) -> Vec<f64> {
        let i = prefix.len();
        self.step(&space.layers[i], prefix.last().copied()).p
    }

    /// Log-probability of a full action sequence.
    pub fn log_prob(&self, space: &SearchSpace, actions: &[usize]) -> f64 {
        let mut lp = 0.0;
        for (i, &a) in actions.iter().enumerate() {
            let s = self.step(&space.layers[i], i.checked_sub(1).map(|j| actions[j]));
            lp += s.p[a].ln();
        }
        lp
    }

    pub fn sample(&self, space: &SearchSpace, rng: &mut impl Rng) -> Vec<usize> {
        let mut actions = Vec::with_capacity(space.layers.len());
        for layer in &space.layers {
            let p = self.step(layer, actions.last().copied()).p;
            let a = WeightedIndex::new(&p).expect("a valid action").sample(rng);
            actions.push(a);
        }
        actions
    }

    /// ∇θ log π(actions), in the layout of [`Policy::params`].
    pub fn grad_log_prob(&self, space: &SearchSpace, actions: &[usize]) -> Vec<f64> {
        let d = self.inputs();
        let (n1, n2) = (self.w1.len(), self.b1.len());
        let n3 = self.w2.len();
        let mut g = vec![0.0; self.num_params()];
        for (i, &a) in actions.iter().enumerate() {
            let s = self.step(&space.layers[i], i.checked_sub(1).map(|j| actions[j]));
            let dlogit: Vec<f64> = (0..self.actions).map(|k| f64::from(u8::from(k == a)) - s.p[k]).collect();
            let mut dh = vec![0.0; self.hidden];
            for k in 0..self.actions {
                for j in 0..self.hidden {
                    g[n1 + n2 + k * self.hidden + j] += dlogit[k] * s.h[j];
                    dh[j] += dlogit[k] * self.w2[k * self.hidden + j];
                }
                g[n1 + n2 + n3 + k] += dlogit[k];
            }
            for j in 0..self.hidden {
                let dz = dh[j] * (1.0 - s.h[j] * s.h[j]);
                for (t, xv) in s.x.iter().enumerate() {
                    g[j * d + t] += dz * xv;
                }
                g[n1 + j] += dz;
            }
        }
        g
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn params(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let (a, rest) = p.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, d) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2.copy_from_slice(d);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Samples per policy update.
    pub samples: usize,
    pub iterations: usize,
    pub lr: f64,
    pub hidden: usize,
    pub baseline_decay: f64,
    pub seed: u64,
    /// Workers evaluating the samples of one iteration.
    pub threads: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { samples: 4, iterations: 30, lr: 1.0, hidden: 32, baseline_decay: 0.9, seed: 0, threads: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub mean_reward: f64,
    pub baseline: f64,
    pub best_reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best_actions: Vec<usize>,
    pub best_reward: f64,
    /// Iteration and sample index where the best mapping was first drawn.
    pub best_at: (usize, usize),
    pub history: Vec<IterationLog>,
    pub policy: Policy,
    /// Distinct mappings evaluated.
    pub evaluations: usize,
}

/// One REINFORCE update: θ += lr · (1/K) Σ (R_k − B) ∇log π(M_k).
pub fn policy_update(policy: &mut Policy, space: &SearchSpace, samples: &[(Vec<usize>, f64)], baseline: f64, lr: f64) {
    let mut grad = vec![0.0; policy.num_params()];
    let k = samples.len() as f64;
    for (actions, r) in samples {
        let adv = r - baseline;
        for (g, d) in grad.iter_mut().zip(policy.grad_log_prob(space, actions)) {
            *g += adv * d / k;
        }
    }
    let mut p = policy.params();
    for (v, g) in p.iter_mut().zip(&grad) {
        *v += lr * g;
    }
    policy.set_params(&p);
}

/// REINFORCE with a moving-average baseline (initialized to the first batch
/// mean). Rewards of identical mappings are computed once. Returns the best
/// mapping ever sampled.
pub fn reinforce(
    space: &SearchSpace,
    cfg: &SearchConfig,
    reward: impl Fn(&[usize]) -> f64 + Sync,
) -> Result<SearchOutcome> {
    if cfg.samples < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples per iteration, got {}", cfg.samples)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = Policy::new(space.vocab.len(), cfg.hidden, &mut rng);
    let mut cache: HashMap<Vec<usize>, f64> = HashMap::new();
    let mut baseline: Option<f64> = None;
    let mut best: Option<(Vec<usize>, f64, (usize, usize))> = None;
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch: Vec<Vec<usize>> = (0..cfg.samples).map(|_| policy.sample(space, &mut rng)).collect();
        let mut todo: Vec<Vec<usize>> = batch.iter().filter(|a| !cache.contains_key(*a)).cloned().collect();
        todo.sort();
        todo.dedup();
        for (a, r) in evaluate_all(&todo, cfg.threads, &reward) {
            cache.insert(a, r);
        }
        let scored: Vec<(Vec<usize>, f64)> = batch
            .into_iter()
            .map(|a| {
                let r = cache[&a];
                (a, r)
            })
            .collect();
        for (k, (a, r)) in scored.iter().enumerate() {
            if best.as_ref().is_none_or(|b| *r > b.1) {
                best = Some((a.clone(), *r, (it, k)));
            }
        }
        let mean = scored.iter().map(|s| s.1).sum::<f64>() / scored.len() as f64;
        let b = *baseline.get_or_insert(mean);
        policy_update(&mut policy, space, &scored, b, cfg.lr);
        baseline = Some(cfg.baseline_decay * b + (1.0 - cfg.baseline_decay) * mean);
        let best_reward = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.1);
        log::info!("iteration {it}: mean reward {mean:.4}, baseline {b:.4}, best {best_reward:.4}");
        history.push(IterationLog { iteration: it, mean_reward: mean, baseline: b, best_reward });
    }
    let (best_actions, best_reward, best_at) =
        best.ok_or_else(|| Error::InvalidArgument("no iterations run".into()))?;
    Ok(SearchOutcome { best_actions, best_reward, best_at, history, policy, evaluations: cache.len() })
}

fn evaluate_all(
    todo: &[Vec<usize>],
    threads: usize,
    reward: &(impl Fn(&[usize]) -> f64 + Sync),
) -> Vec<(Vec<usize>, f64)> {
    if threads <= 1 || todo.len() <= 1 {
        return todo.iter().map(|a| (a.clone(), reward(a))).collect();
    }
    let out = Mutex::new(Vec::with_capacity(todo.len()));
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads.min(todo.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(a) = todo.get(i) else { break };
                let r = reward(a);
                out.lock().expect("results").push((i, r));
            });
        }
    });
    let mut res = out.into_inner().expect("results");
    res.sort_by_key(|x| x.0);
    res.into_iter().map(|(i, r)| (todo[i].clone(), r)).collect()
}

/// Search-based mapping of a pretrained graph. Evaluation errors other than
/// divergence abort the search.
pub fn map_search(
    evaluator: &Evaluator<'_>,
    space: &SearchSpace,
    cfg: &SearchConfig,
) -> Result<(MappingDocument, SearchOutcome)> {
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let outcome = reinforce(space, cfg, |actions| match evaluator.evaluate(&space.schemes(actions)) {
        Ok(e) => e.reward,
        Err(e) => {
            failure.lock().expect("error slot").get_or_insert(e);
            DIVERGED_REWARD
        }
    })?;
    if let Some(e) = failure.into_inner().expect("error slot") {
        return Err(e);
    }
    let layers = space
        .layers
        .iter()
        .zip(&outcome.best_actions)
        .map(|(l, &a)| {
            let scheme = match l.layer_type {
                Some(t) => space.vocab[a].scheme(t, space.rate),
                None => PruningScheme::none(),
            };
            LayerDecision {
                layer_id: l.id.clone(),
                regularity: scheme.regularity,
                block_size: scheme.block,
                rate: scheme.rate,
                rationale: format!(
                    "search: best sample (iteration {}, sample {})",
                    outcome.best_at.0, outcome.best_at.1
                ),
                latency_margin: None,
            }
        })
        .collect();
    let doc = MappingDocument {
        method: "search".into(),
        tool_version: crate::TOOL_VERSION.into(),
        seed: cfg.seed,
        config_hash: crate::io::config_hash(&(cfg, &evaluator.spec))?,
        beta: None,
        difficulty: None,
        reward: Some(outcome.best_reward),
        layers,
    };
    Ok((doc, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn difficulty_heuristic() {
        assert_eq!(Difficulty::infer(10, 50_000), Difficulty::Easy);
        assert_eq!(Difficulty::infer(100, 10), Difficulty::Hard);
        assert_eq!(Difficulty::infer(10, 100_000), Difficulty::Hard);
    }

    #[test]
    fn uniform_initial_policy() {
        let space = SearchSpace::uniform(2, 3);
        let p = Policy::new(3, 8, &mut ChaCha8Rng::seed_from_u64(0));
        for v in p.probabilities(&space, &[]) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_actions_have_zero_probability() {
        let mut space = SearchSpace::uniform(1, 3);
        space.layers[0].valid[1] = false;
        let p = Policy::new(3, 8, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p.probabilities(&space, &[])[1], 0.0);
    }

    #[test]
    fn enumeration_counts() {
        let space = SearchSpace::uniform(3, 4);
        assert_eq!(space.enumerate().len(), 64);
        assert_eq!(space.size(), 64);
    }
}
