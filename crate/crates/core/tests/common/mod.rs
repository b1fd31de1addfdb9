#![allow(dead_code)]

pub mod metrics;
pub mod oracle;

use gdgat_core::graph::{graph_from_parts, DocumentGraph, NodeFeatureConfig, NodeInput, OrderEncoding};
use gdgat_core::model::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random complete graph with `n` nodes, `types` event types and random
/// simplex edge features.
pub fn random_graph(n: usize, c: usize, types: usize, seed: u64) -> DocumentGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = (0..n)
        .map(|k| NodeInput {
            order_index: k,
            type_id: rng.random_range(0..=types),
            extra: Vec::new(),
        })
        .collect();
    let mut edges = vec![0.0; n * n * c];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for (q, v) in raw.iter().enumerate() {
                edges[(i * n + j) * c + q] = v / s;
            }
        }
    }
    graph_from_parts("rand", nodes, c, Some(edges)).unwrap()
}

pub fn features(d_h: usize, types: usize) -> NodeFeatureConfig {
    let mut f = NodeFeatureConfig::new(d_h, OrderEncoding::Sinusoidal).unwrap();
    f.type_vocab = (0..types).map(|t| (format!("T{t}"), t + 1)).collect();
    f
}

/// The small model used for gradient certification.
pub fn small_model(heads: usize, c: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        d_h1: 4,
        d_h2: 8,
        heads,
        ..ModelConfig::default()
    };
    Model::new(cfg, features(8, 3), c, seed).unwrap()
}
