//! Per-document training loop with SGD or Adam, dev-set early stopping and a
//! JSON Lines history.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Event};
use crate::error::{Error, Result};
use crate::eval::{EvalOptions, EvalReport};
use crate::graph::{build_graph, build_graph_structure, DocumentGraph, NodeFeatureConfig, OrderEncoding};
use crate::model::{LabeledPair, Model, ModelConfig, ModelParams};
use crate::probs::ProbTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// L2 coefficient added to every gradient.
    pub weight_decay: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Epochs without dev micro-F1 improvement tolerated before stopping.
    pub early_stop_patience: Option<usize>,
    /// Documents whose mean gradient forms one optimizer step.
    pub accumulate_docs: usize,
    /// Worker threads for per-document passes; 0 lets rayon decide.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            shuffle: true,
            early_stop_patience: None,
            accumulate_docs: 1,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "adam_eps must be positive and weight_decay nonnegative".into(),
            ));
        }
        if self.accumulate_docs == 0 {
            return Err(Error::Config("accumulate_docs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Node-feature layout plus GAT dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub d_h: usize,
    pub order_encoding: OrderEncoding,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            d_h: 64,
            order_encoding: OrderEncoding::Sinusoidal,
            model: ModelConfig::default(),
        }
    }
}

/// Adam moments, flattened per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// One update: `θ ← θ − lr·g` for SGD, bias-corrected Adam otherwise.
pub fn optimizer_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimizerState, cfg: &TrainConfig) {
    state.step += 1;
    let lr = cfg.learning_rate;
    let slots = params.tensors_mut();
    if state.m.is_empty() {
        state.m = slots.iter().map(|t| vec![0.0; t.len()]).collect();
        state.v = state.m.clone();
    }
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, (theta, g)) in slots.into_iter().zip(grads.tensors()).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (e, (x, &gv)) in theta.values_mut().iter_mut().zip(g.values()).enumerate() {
            let g = gv + cfg.weight_decay * *x;
            match cfg.optimizer {
                Optimizer::Sgd => *x -= lr * g,
                Optimizer::Adam => {
                    m[e] = cfg.beta1 * m[e] + (1.0 - cfg.beta1) * g;
                    v[e] = cfg.beta2 * v[e] + (1.0 - cfg.beta2) * g * g;
                    let mh = m[e] / bc1;
                    let vh = v[e] / bc2;
                    *x -= lr * mh / (vh.sqrt() + cfg.adam_eps);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean pair loss seen during the epoch.
    pub train_loss: f64,
    pub dev_micro_f1: Option<f64>,
    pub dev_macro_f1: Option<f64>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the highest dev micro-F1.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// A header echoing `config`, then one line per epoch. Wall time is kept
    /// out so identical runs produce identical files.
    pub fn to_jsonl(&self, config: &serde_json::Value) -> String {
        let mut out = serde_json::json!({ "config": config }).to_string();
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r).expect("epoch record serializes"));
            out.push('\n');
        }
        out
    }

    /// Per-epoch wall time, one line per epoch.
    pub fn timing_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::json!({ "epoch": r.epoch, "wall_time_s": r.wall_time_s }).to_string() + "\n")
            .collect()
    }
}

/// A document's graph with its labelled pairs mapped to node indices.
#[derive(Clone, Debug)]
pub struct DocInput {
    pub graph: DocumentGraph,
    pub pairs: Vec<LabeledPair>,
    /// Position of each pair in `Dataset::pairs`.
    pub pair_index: Vec<usize>,
}

/// Builds one input per document that has labelled pairs. With `table` the
/// graphs carry edge features; without, they are structure only.
pub fn prepare_docs(dataset: &Dataset, table: Option<&ProbTable>, features: &NodeFeatureConfig) -> Result<Vec<DocInput>> {
    let mut by_doc: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (k, p) in dataset.pairs.iter().enumerate() {
        by_doc.entry(p.doc_id.as_str()).or_default().push(k);
    }
    let c = dataset.num_classes();
    by_doc
        .into_iter()
        .map(|(doc, idx)| {
            let events: &[Event] = dataset
                .documents
                .get(doc)
                .ok_or_else(|| Error::Validation(format!("pairs reference unknown document '{doc}'")))?;
            let graph = match table {
                Some(t) => build_graph(doc, events, t, features)?,
                None => build_graph_structure(doc, events, c, features)?,
            };
            let node_of: BTreeMap<usize, usize> =
                events.iter().enumerate().map(|(k, e)| (e.order_index, k)).collect();
            let pairs = idx
                .iter()
                .map(|&k| {
                    let p = &dataset.pairs[k];
                    LabeledPair {
                        i: node_of[&p.i],
                        j: node_of[&p.j],
                        gold: p.gold,
                    }
                })
                .collect();
            Ok(DocInput {
                graph,
                pairs,
                pair_index: idx,
            })
        })
        .collect()
}

/// Predicted class per pair of the dataset the inputs were built from.
pub fn predict_docs(model: &Model, docs: &[DocInput], num_pairs: usize) -> Result<Vec<usize>> {
    let per_doc: Vec<Vec<(usize, usize)>> = docs
        .par_iter()
        .map(|d| {
            let q: Vec<(usize, usize)> = d.pairs.iter().map(|p| (p.i, p.j)).collect();
            let preds = model.predict(&d.graph, &q)?;
            Ok(d.pair_index.iter().copied().zip(preds.into_iter().map(|p| p.label)).collect())
        })
        .collect::<Result<_>>()?;
    let mut out = vec![usize::MAX; num_pairs];
    for (k, label) in per_doc.into_iter().flatten() {
        out[k] = label;
    }
    if out.contains(&usize::MAX) {
        return Err(Error::Validation("some pairs received no prediction".into()));
    }
    Ok(out)
}

pub fn predict_dataset(model: &Model, dataset: &Dataset, table: Option<&ProbTable>) -> Result<Vec<usize>> {
    let table = table.filter(|_| model.params.uses_edge_features());
    let docs = prepare_docs(dataset, table, &model.features)?;
    predict_docs(model, &docs, dataset.pairs.len())
}

pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    table: Option<&ProbTable>,
    variant: &str,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let predicted = predict_dataset(model, dataset, table)?;
    EvalReport::compute(variant, &predicted, dataset, opts)
}

/// Worker count after applying the `GDGAT_THREADS` cap.
pub fn effective_threads(requested: usize) -> usize {
    let cap = std::env::var("GDGAT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    match (requested, cap) {
        (0, Some(c)) => c,
        (r, Some(c)) => r.min(c),
        (r, None) => r,
    }
}

/// Node-feature layout for a training split: vocabulary from its event types.
pub fn features_for(train: &Dataset, arch: &Architecture) -> Result<NodeFeatureConfig> {
    Ok(NodeFeatureConfig::new(arch.d_h, arch.order_encoding)?
        .with_vocab_from([train])
        .with_extra_width(train.extra_width()))
}

/// Fits a model on `train_ds`, scoring `dev_ds` after every epoch.
///
/// `table` supplies edge features and is required unless the architecture
/// disables them. With early stopping configured and triggered, the returned
/// parameters are those of the best dev epoch.
pub fn train(
    train_ds: &Dataset,
    dev_ds: Option<&Dataset>,
    table: Option<&ProbTable>,
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if train_ds.pairs.is_empty() {
        return Err(Error::Validation("training split has no labelled pairs".into()));
    }
    if cfg.early_stop_patience.is_some() && dev_ds.is_none() {
        return Err(Error::Config("early stopping needs a dev split".into()));
    }
    let table = if arch.model.use_edge_features {
        let t = table.ok_or_else(|| Error::Config("edge features enabled but no probability table given".into()))?;
        t.check_covers(train_ds)?;
        if let Some(d) = dev_ds {
            t.check_covers(d)?;
        }
        Some(t)
    } else {
        None
    };
    let features = features_for(train_ds, arch)?;
    let mut model = Model::new(arch.model.clone(), features, train_ds.num_classes(), cfg.seed)?;
    let docs = prepare_docs(train_ds, table, &model.features)?;
    let dev_docs = dev_ds
        .map(|d| prepare_docs(d, table, &model.features))
        .transpose()?;
    let opts = EvalOptions::default();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(effective_threads(cfg.threads))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut state = OptimizerState::default();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..docs.len()).collect();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let (mut loss_sum, mut pair_count) = (0.0, 0usize);
        for group in order.chunks(cfg.accumulate_docs) {
            let params = &model.params;
            let features = &model.features;
            let results: Vec<Result<(f64, ModelParams)>> = pool.install(|| {
                group
                    .par_iter()
                    .map(|&d| {
                        let doc = &docs[d];
                        Model::loss_and_grad_with(params, features, &doc.graph, &doc.pairs, true)
                            .map(|(l, g)| (l, g.expect("requested")))
                    })
                    .collect()
            });
            let mut acc = model.params.zeros_like();
            for (&d, r) in group.iter().zip(results) {
                let (loss, g) = r.map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged {
                        epoch,
                        doc: docs[d].graph.doc_id.clone(),
                        loss: f64::NAN,
                    },
                    other => other,
                })?;
                loss_sum += loss * docs[d].pairs.len() as f64;
                pair_count += docs[d].pairs.len();
                acc.add_scaled(&g, 1.0 / group.len() as f64);
            }
            optimizer_step(&mut model.params, &acc, &mut state, cfg);
            if !model.params.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    doc: docs[*group.last().expect("nonempty group")].graph.doc_id.clone(),
                    loss: f64::NAN,
                });
            }
        }
        let train_loss = loss_sum / pair_count as f64;

        let (dev_micro, dev_macro) = match (dev_ds, &dev_docs) {
            (Some(d), Some(dd)) => {
                let predicted = pool.install(|| predict_docs(&model, dd, d.pairs.len()))?;
                let r = EvalReport::compute("dev", &predicted, d, &opts)?;
                (Some(r.micro_f1), Some(r.macro_f1))
            }
            _ => (None, None),
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev_micro_f1: dev_micro,
            dev_macro_f1: dev_macro,
            wall_time_s: start.elapsed().as_secs_f64(),
        });

        if let Some(m) = dev_micro {
            if best.as_ref().is_none_or(|(b, _)| m > *b) {
                best = Some((m, model.params.clone()));
                history.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
            }
            if cfg.early_stop_patience.is_some_and(|p| since_best > p) {
                history.stopped_early = true;
                break;
            }
        }
    }
    if history.stopped_early {
        model.params = best.expect("early stop implies a best epoch").1;
    }
    Ok((model, history))
}
