use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use blockprune::config::RunConfig;
use blockprune::dataset::{load_mnist_dir, synthetic_blobs, synthetic_images, Dataset};
use blockprune::executor::{
    bench, encode_layers, tune_plan, BenchRecord, ExecutionPlan, GaConfig, KernelParams, PlanOptions, TuneBounds,
    TuneResult,
};
use blockprune::io::{config_hash, ModelArchive, Provenance};
use blockprune::latency::{build_table, LatencyGrid, LatencyTable};
use blockprune::mapper::{
    estimate_model_latency, layer_infos, map_rule, map_search, Difficulty, Evaluator, MappingDocument, RewardSpec,
    RuleConfig, SearchConfig, SearchSpace,
};
use blockprune::models::{build_reference_model_for, default_input, ModelInput};
use blockprune::pruning::{compression_report, PruningScheme};
use blockprune::report::model_report;
use blockprune::reweight::{harden, hardened_masks, train_reweighted, RegularizerSpec};
use blockprune::tensor::max_rel_err;
use blockprune::train::{argmax, evaluate, finetune, train, TrainConfig};
use blockprune::{Error, MaskSet, Result, Tensor, TensorGraph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::{Cli, Command, DifficultyArg, LatmodelCmd, MapCmd, ModelCmd, PruneArgs, PruneMethod, RunArgs, TrainFlags};

const SYNTHETIC: &str = "synthetic:";
/// Held-out fraction of the training split used by search evaluation.
const VAL_FRACTION: f64 = 0.2;
/// Inferences per fitness evaluation during tuning.
const TUNE_RUNS: usize = 5;

pub fn error_document(e: &Error) -> String {
    let kind = match e {
        Error::Shape(_) => "shape",
        Error::NonFinite(_) => "non_finite",
        Error::Graph(_) => "graph",
        Error::Scheme(_) => "scheme",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Bcs { .. } => "bcs",
        Error::Archive(_) => "archive",
        Error::MissingBlob(_) => "missing_blob",
        Error::Dataset(_) => "dataset",
        Error::Latency(_) => "latency",
        Error::Diverged { .. } => "diverged",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    };
    json!({ "error": { "kind": kind, "message": e.to_string() } }).to_string()
}

fn train_flags(t: &TrainFlags) -> Value {
    json!({ "epochs": t.epochs, "lr": t.lr, "momentum": t.momentum, "batch_size": t.batch_size })
}

fn path_value(p: &Option<PathBuf>) -> Value {
    p.as_ref().map_or(Value::Null, |p| json!(p))
}

fn resolve(cli: &Cli, paths: Value, flags: Value) -> Result<RunConfig> {
    let mut over = json!({ "seed": cli.seed, "threads": cli.threads, "paths": paths });
    blockprune::config::merge(&mut over, flags);
    RunConfig::resolve(cli.config.as_deref(), over)
}

/// Provenance of an artifact; the hash ignores file locations.
fn provenance(cfg: &RunConfig) -> Result<Provenance> {
    let mut c = cfg.clone();
    c.paths = Default::default();
    Provenance::new(cfg.seed, &c)
}

fn write_doc(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn pretty(v: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn data_spec(cfg: &RunConfig) -> Result<String> {
    let p = cfg.paths.data.as_ref().ok_or_else(|| Error::InvalidArgument("missing required path `data`".into()))?;
    let s = p.to_string_lossy().into_owned();
    if !s.starts_with(SYNTHETIC) {
        cfg.input("data", &cfg.paths.data)?;
    }
    Ok(s)
}

/// Train and test splits shaped for `graph`'s input.
fn load_data(spec: &str, graph: &TensorGraph, seed: u64) -> Result<(Dataset, Dataset)> {
    let shape = graph.input_shape().to_vec();
    let classes = graph.num_classes();
    if let Some(n) = spec.strip_prefix(SYNTHETIC) {
        let n: usize =
            n.parse().map_err(|_| Error::InvalidArgument(format!("bad synthetic sample count in `{spec}`")))?;
        let all = match shape.as_slice() {
            [d] => synthetic_blobs(n, *d, classes, 0.5, seed)?,
            [c, h, w] => synthetic_images(n, [*c, *h, *w], classes, seed)?,
            s => return Err(Error::InvalidArgument(format!("no synthetic data for input shape {s:?}"))),
        };
        return all.split_off(VAL_FRACTION);
    }
    let (train, test) = load_mnist_dir(Path::new(spec))?;
    if train.num_classes > classes {
        return Err(Error::Dataset(format!("dataset has {} classes, model outputs {classes}", train.num_classes)));
    }
    Ok((train.reshape_samples(&shape)?, test.reshape_samples(&shape)?))
}

fn train_config(cfg: &RunConfig, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        momentum: cfg.momentum,
        seed: cfg.seed,
        threads: cfg.threads,
    }
}

fn load_archive(cfg: &RunConfig) -> Result<ModelArchive> {
    ModelArchive::load(&cfg.input("model", &cfg.paths.model)?)
}

fn load_table(cfg: &RunConfig) -> Result<LatencyTable> {
    LatencyTable::load(&cfg.input("table", &cfg.paths.table)?)
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Latmodel(LatmodelCmd::Build(a)) => {
            let cfg = resolve(cli, json!({ "output": path_value(&a.out) }), json!({ "runs": a.runs }))?;
            let out = cfg.output()?;
            let mut grid = match a.grid.as_str() {
                "desk" => LatencyGrid::desk(),
                "full" => LatencyGrid::full(),
                file => serde_json::from_str(
                    &std::fs::read_to_string(file)
                        .map_err(|e| Error::InvalidArgument(format!("cannot read grid {file}: {e}")))?,
                )?,
            };
            if cli.seed.is_some() || cli.config.is_some() {
                grid.seed = cfg.seed;
            }
            let t0 = std::time::Instant::now();
            let table = build_table(&grid, &a.device_tag, cfg.runs, a.allow_partial)?;
            table.save(&out)?;
            log::info!(
                "{} records ({} missing) in {:.1}s -> {}",
                table.records.len(),
                table.missing.len(),
                t0.elapsed().as_secs_f64(),
                out.display()
            );
            Ok(())
        }
        Command::Model(ModelCmd::Init(a)) => {
            let cfg = resolve(cli, json!({ "output": path_value(&a.out) }), json!({}))?;
            let out = cfg.output()?;
            let default = default_input(&a.arch)?;
            let input = ModelInput {
                shape: a.input_shape.clone().unwrap_or(default.shape),
                classes: a.classes.unwrap_or(default.classes),
            };
            let graph = build_reference_model_for(&a.arch, &input, cfg.seed)?;
            let prov =
                Provenance::new(cfg.seed, &json!({ "arch": a.arch, "input": input.shape, "classes": input.classes }))?;
            ModelArchive::new(graph, prov).save(&out)?;
            log::info!("{} -> {}", a.arch, out.display());
            Ok(())
        }
        Command::Train(a) => {
            let cfg = resolve(
                cli,
                json!({ "model": path_value(&a.model), "data": a.data, "output": path_value(&a.out) }),
                train_flags(&a.train),
            )?;
            let out = cfg.output()?;
            let mut archive = load_archive(&cfg)?;
            let (tr, test) = load_data(&data_spec(&cfg)?, &archive.graph, cfg.seed)?;
            let masks = (!archive.masks.is_empty()).then_some(&archive.masks);
            let stats = train(&mut archive.graph, &tr, &train_config(&cfg, cfg.epochs), masks)?;
            let accuracy = evaluate(&archive.graph, &test)?;
            archive.provenance = provenance(&cfg)?;
            archive.bcs.clear();
            archive.save(&out)?;
            println!(
                "{}",
                json!({
                    "accuracy": accuracy,
                    "final_loss": stats.last().map(|s| s.data_loss),
                    "provenance": archive.provenance,
                })
            );
            Ok(())
        }
        Command::Map(MapCmd::Rule(a)) => {
            let difficulty = a.difficulty.map(|d| match d {
                DifficultyArg::Easy => "easy",
                DifficultyArg::Hard => "hard",
            });
            let cfg = resolve(
                cli,
                json!({
                    "model": path_value(&a.model), "table": path_value(&a.table),
                    "data": a.data, "output": path_value(&a.out),
                }),
                json!({ "beta": a.beta, "rate": a.rate, "difficulty": difficulty }),
            )?;
            let out = cfg.output()?;
            let archive = load_archive(&cfg)?;
            let table = load_table(&cfg)?;
            let difficulty = match cfg.difficulty {
                Some(d) => d,
                None if cfg.paths.data.is_some() => {
                    let (tr, _) = load_data(&data_spec(&cfg)?, &archive.graph, cfg.seed)?;
                    Difficulty::infer(tr.num_classes, tr.len())
                }
                None => {
                    log::warn!("no difficulty or dataset given; inferring from the class count only");
                    Difficulty::infer(archive.graph.num_classes(), 0)
                }
            };
            let rule = RuleConfig { beta: cfg.beta, rate: cfg.rate, difficulty, seed: cfg.seed };
            let doc = map_rule(&archive.graph, &table, &rule)?;
            write_doc(&out, &doc.to_json()?)?;
            log::info!("rule mapping of {} layers -> {}", doc.layers.len(), out.display());
            Ok(())
        }
        Command::Map(MapCmd::Search(a)) => {
            let mut flags = train_flags(&a.train);
            blockprune::config::merge(
                &mut flags,
                json!({
                    "rate": a.rate, "samples": a.samples, "iterations": a.iterations,
                    "search_lr": a.search_lr, "retrain_epochs": a.retrain_epochs,
                }),
            );
            let cfg = resolve(
                cli,
                json!({
                    "model": path_value(&a.model), "table": path_value(&a.table),
                    "data": a.data, "output": path_value(&a.out),
                }),
                flags,
            )?;
            let out = cfg.output()?;
            let archive = load_archive(&cfg)?;
            let table = load_table(&cfg)?;
            let (tr, _) = load_data(&data_spec(&cfg)?, &archive.graph, cfg.seed)?;
            let (fit, val) = tr.split_off(VAL_FRACTION)?;
            let graph = &archive.graph;
            let dense = estimate_model_latency(&table, &layer_infos(graph), &BTreeMap::new())?;
            let spec = RewardSpec::calibrated(dense, train_config(&cfg, cfg.retrain_epochs));
            let evaluator = Evaluator::new(graph, &fit, &val, &table, spec)?;
            let space = SearchSpace::from_table(graph, &table, cfg.rate)?;
            let search = SearchConfig {
                samples: cfg.samples,
                iterations: cfg.iterations,
                lr: cfg.search_lr,
                seed: cfg.seed,
                threads: cfg.threads,
                ..SearchConfig::default()
            };
            let (doc, outcome) = map_search(&evaluator, &space, &search)?;
            write_doc(&out, &doc.to_json()?)?;
            log::info!(
                "search: best reward {:.4} after {} distinct evaluations -> {}",
                outcome.best_reward,
                outcome.evaluations,
                out.display()
            );
            Ok(())
        }
        Command::Prune(a) => prune(cli, a),
        Command::Pack(a) => {
            let cfg = resolve(cli, json!({ "model": path_value(&a.model), "output": path_value(&a.out) }), json!({}))?;
            let out = cfg.output()?;
            let mut archive = load_archive(&cfg)?;
            archive.bcs = encode_layers(&archive.graph, &archive.masks)?;
            archive.save(&out)?;
            let layers: BTreeMap<&str, Value> = archive
                .bcs
                .iter()
                .map(|(id, m)| {
                    (id.as_str(), json!({ "nnz": m.nnz(), "bytes": m.to_bytes().len(), "groups": m.groups() }))
                })
                .collect();
            println!("{}", json!({ "packed": layers, "provenance": archive.provenance }));
            Ok(())
        }
        Command::Run(a) => run(cli, a),
        Command::Report(a) => {
            let cfg = resolve(
                cli,
                json!({ "model": path_value(&a.model), "table": path_value(&a.table), "output": path_value(&a.out) }),
                json!({}),
            )?;
            let archive = load_archive(&cfg)?;
            let table = match &cfg.paths.table {
                Some(_) => Some(load_table(&cfg)?),
                None => None,
            };
            let bench =
                match &a.bench {
                    Some(p) => {
                        let doc: RunDocument = serde_json::from_str(&std::fs::read_to_string(p)?)?;
                        Some(doc.bench.ok_or_else(|| {
                            Error::InvalidArgument(format!("{} holds no benchmark records", p.display()))
                        })?)
                    }
                    None => None,
                };
            let report = model_report(&archive, table.as_ref(), bench.as_deref())?;
            print!("{}", report.render());
            if let Some(out) = &cfg.paths.output {
                write_doc(out, &pretty(&report)?)?;
            }
            Ok(())
        }
    }
}

fn prune(cli: &Cli, a: &PruneArgs) -> Result<()> {
    let mut flags = train_flags(&a.train);
    blockprune::config::merge(
        &mut flags,
        json!({
            "lambda": a.lambda, "epsilon": a.epsilon, "tau": a.tau, "finetune_epochs": a.finetune_epochs,
        }),
    );
    let cfg = resolve(
        cli,
        json!({
            "model": path_value(&a.model), "mapping": path_value(&a.mapping),
            "data": a.data, "output": path_value(&a.out),
        }),
        flags,
    )?;
    let out = cfg.output()?;
    let mut archive = load_archive(&cfg)?;
    let mapping = MappingDocument::from_json(&std::fs::read_to_string(cfg.input("mapping", &cfg.paths.mapping)?)?)?;
    mapping.validate(&archive.graph)?;
    let schemes: BTreeMap<String, PruningScheme> =
        mapping.schemes().into_iter().filter(|(_, s)| !s.is_none()).collect();
    let (tr, test) = load_data(&data_spec(&cfg)?, &archive.graph, cfg.seed)?;
    let dense_accuracy = evaluate(&archive.graph, &test)?;
    let graph = &mut archive.graph;
    let masks: MaskSet = match a.method {
        PruneMethod::Reweight => {
            let mut spec = RegularizerSpec::new(schemes.clone(), cfg.lambda);
            spec.epsilon = cfg.epsilon;
            spec.tau = cfg.tau;
            train_reweighted(graph, &tr, &spec, &train_config(&cfg, cfg.epochs), None)?;
            hardened_masks(&harden(graph, &schemes, cfg.tau)?)
        }
        PruneMethod::OneShot => blockprune::mapper::one_shot_masks(graph, &schemes)?,
    };
    graph.apply_masks(&masks)?;
    if !masks.is_empty() {
        finetune(graph, &masks, &tr, &train_config(&cfg, cfg.finetune_epochs))?;
    }
    let accuracy = evaluate(graph, &test)?;
    let comp = compression_report(graph, &masks)?;
    archive.masks = masks;
    archive.schemes = schemes;
    archive.bcs.clear();
    archive.provenance = provenance(&cfg)?;
    archive.save(&out)?;
    println!(
        "{}",
        json!({
            "dense_accuracy": dense_accuracy,
            "accuracy": accuracy,
            "compression": comp.overall_rate,
            "conv_compression": comp.conv_rate,
            "provenance": archive.provenance,
        })
    );
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TuneEntry {
    pub op: String,
    pub result: TuneResult,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunDocument {
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub model: Provenance,
    pub threads: usize,
    pub batch: usize,
    pub output_shape: Vec<usize>,
    /// Predicted class of each sample of the batch.
    pub predictions: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Largest relative deviation from the archive's reference outputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_max_rel_err: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning: Option<Vec<TuneEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<Vec<BenchRecord>>,
}

fn run_chunked(plan: &ExecutionPlan, data: &Dataset) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(256) {
        let (x, y) = data.gather(chunk);
        let out = plan.run(&x)?;
        let k = out.shape()[1];
        correct += out.data().chunks_exact(k).zip(&y).filter(|(r, &l)| argmax(r) == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn run(cli: &Cli, a: &RunArgs) -> Result<()> {
    let cfg = resolve(
        cli,
        json!({ "model": path_value(&a.model), "data": a.data, "output": path_value(&a.out) }),
        json!({ "runs": a.runs, "batch_size": a.batch_size }),
    )?;
    let archive = load_archive(&cfg)?;
    let opts = PlanOptions {
        reorder: !a.no_reorder,
        fuse: !a.no_fuse,
        params: KernelParams { threads: cfg.threads, ..KernelParams::default() },
    };
    let mut plan = if archive.bcs.is_empty() {
        ExecutionPlan::compile(&archive.graph, &archive.masks, &opts)?
    } else {
        ExecutionPlan::build(&archive.graph, &archive.masks, &archive.bcs, &opts)?
    };
    let test = match &cfg.paths.data {
        Some(_) => Some(load_data(&data_spec(&cfg)?, &archive.graph, cfg.seed)?.1),
        None => None,
    };
    let batch = match (&test, &archive.reference) {
        (Some(t), _) => t.take(cfg.batch_size, "batch").images,
        (None, Some(r)) => r.input.clone(),
        (None, None) => {
            let mut shape = vec![cfg.batch_size];
            shape.extend_from_slice(archive.graph.input_shape());
            Tensor::uniform(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
        }
    };
    let tuning = if a.tune {
        let bounds = TuneBounds::standard(&[cfg.threads]);
        let ga = GaConfig { seed: cfg.seed, ..GaConfig::default() };
        let r = tune_plan(&mut plan, &batch, &bounds, &ga, TUNE_RUNS)?;
        Some(r.into_iter().map(|(op, result)| TuneEntry { op, result }).collect())
    } else {
        None
    };
    let out = plan.run(&batch)?;
    let k = out.shape()[1..].iter().product::<usize>().max(1);
    let predictions = out.data().chunks_exact(k).map(argmax).collect();
    let reference_max_rel_err = match &archive.reference {
        Some(r) => {
            let y = plan.run(&r.input)?;
            if y.shape() != r.output.shape() {
                return Err(Error::Shape(format!(
                    "reference output {:?} vs computed {:?}",
                    r.output.shape(),
                    y.shape()
                )));
            }
            Some(max_rel_err(y.data(), r.output.data(), 1e-6))
        }
        None => None,
    };
    let accuracy = test.as_ref().map(|t| run_chunked(&plan, t)).transpose()?;
    let bench = if a.bench { Some(bench(&plan, &batch, cfg.runs)?) } else { None };
    let doc = RunDocument {
        tool_version: blockprune::TOOL_VERSION.into(),
        seed: cfg.seed,
        config_hash: config_hash(&{
            let mut c = cfg.clone();
            c.paths = Default::default();
            c
        })?,
        model: archive.provenance.clone(),
        threads: cfg.threads,
        batch: batch.shape()[0],
        output_shape: out.shape().to_vec(),
        predictions,
        accuracy,
        reference_max_rel_err,
        tuning,
        bench,
    };
    let text = pretty(&doc)?;
    print!("{text}");
    if let Some(p) = &cfg.paths.output {
        write_doc(p, &text)?;
    }
    Ok(())
}
