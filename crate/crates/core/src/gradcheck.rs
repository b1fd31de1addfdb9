//! Central finite-difference certification of analytic gradients.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{graph_from_parts, NodeFeatureConfig, NodeInput, OrderEncoding};
use crate::model::{LabeledPair, Model, ModelConfig};
use crate::tensor::Tensor;

/// Outcome of a gradient check: the worst entry and where it sits.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (parameter index, flat entry index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Compares the analytic gradient returned by `loss_fn` with central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε` for every entry of every parameter.
///
/// `loss_fn` returns the scalar loss and one gradient tensor per parameter.
/// It is evaluated twice at the unperturbed point first; differing results
/// reject the check as non-deterministic.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "grad_check eps must lie in [1e-7, 1e-3], got {eps}"
        )));
    }
    let (first, grads) = loss_fn(params)?;
    let (second, _) = loss_fn(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    if grads.len() != params.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    for (k, (g, p)) in grads.iter().zip(params).enumerate() {
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "grad_check",
                format!("gradient {k} has shape {:?}, parameter {:?}", g.shape(), p.shape()),
            ));
        }
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    for k in 0..params.len() {
        for e in 0..params[k].len() {
            let orig = params[k].values()[e];
            work[k].values_mut()[e] = orig + eps;
            let (plus, _) = loss_fn(&work)?;
            work[k].values_mut()[e] = orig - eps;
            let (minus, _) = loss_fn(&work)?;
            work[k].values_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads[k].values()[e];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            if !rel.is_finite() {
                return Err(Error::NonFinite("grad_check"));
            }
            report.entries_checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = (k, e);
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Result of [`certify_gat`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Certification {
    pub seed: u64,
    pub eps: f64,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub entries_checked: usize,
    pub runtime_s: f64,
}

/// Gradient check of the mean pair loss on a random 4-node, 4-class graph
/// with `K = 2`, `d_h = 8`, `d_h1 = 4`, `d_h2 = 8`, every ordered pair labelled.
pub fn certify_gat(seed: u64, eps: f64) -> Result<Certification> {
    let (n, c, types) = (4usize, 4usize, 3usize);
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = NodeFeatureConfig::new(8, OrderEncoding::Sinusoidal)?;
    features.type_vocab = (1..=types).map(|t| (format!("T{t}"), t)).collect();
    let cfg = ModelConfig {
        d_h1: 4,
        d_h2: 8,
        heads: 2,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, features, c, rng.random())?;
    let nodes = (0..n)
        .map(|k| NodeInput {
            order_index: k,
            type_id: rng.random_range(0..=types),
            extra: Vec::new(),
        })
        .collect();
    let mut edges = vec![0.0; n * n * c];
    for block in edges.chunks_mut(c) {
        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        block.iter_mut().zip(raw).for_each(|(o, v)| *o = v / total);
    }
    let graph = graph_from_parts("certify", nodes, c, Some(edges))?;
    let pairs: Vec<LabeledPair> = graph
        .edge_keys()
        .map(|(i, j)| LabeledPair {
            i,
            j,
            gold: rng.random_range(0..c),
        })
        .collect();
    let report = grad_check(model.loss_fn(&graph, &pairs), &model.params.to_tensors(), eps)?;
    Ok(Certification {
        seed,
        eps,
        max_rel_err: report.max_relative_error,
        worst_param: model.params.param_names()[report.worst.0].clone(),
        entries_checked: report.entries_checked,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}
