mod common;

use common::{features, oracle, random_graph, small_model};
use gdgat_core::graph::{graph_from_parts, DocumentGraph, OrderEncoding};
use gdgat_core::model::{LabeledPair, Model, ModelConfig};
use gdgat_core::{grad_check, Error, NodeFeatureConfig};

fn edges_of(g: &DocumentGraph) -> Vec<f64> {
    let (n, c) = (g.num_nodes(), g.num_classes());
    let mut e = vec![0.0; n * n * c];
    for (i, j) in g.edge_keys() {
        e[(i * n + j) * c..(i * n + j + 1) * c].copy_from_slice(g.edge(i, j).unwrap());
    }
    e
}

fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect()
}

fn labeled(n: usize, c: usize) -> Vec<LabeledPair> {
    all_pairs(n)
        .into_iter()
        .enumerate()
        .map(|(k, (i, j))| LabeledPair { i, j, gold: k % c })
        .collect()
}

fn check_against_oracle(model: &Model, graph: &DocumentGraph) {
    let h2 = model.node_states(graph).unwrap();
    let reference = oracle::node_states(&model.params, &model.features, graph);
    for (i, row) in reference.iter().enumerate() {
        for (d, v) in row.iter().enumerate() {
            assert!((h2.get(i, d) - v).abs() < 1e-10, "h2[{i}][{d}]");
        }
    }
    for (i, j) in all_pairs(graph.num_nodes()) {
        let y = model.classify_pair(graph, &h2, i, j).unwrap();
        let r = oracle::classify(&model.params, graph, &reference, i, j);
        for (a, b) in y.values().iter().zip(&r) {
            assert!((a - b).abs() < 1e-10, "pair ({i}, {j})");
        }
    }
}

#[test]
fn forward_matches_scalar_oracle() {
    for seed in 1..=20u64 {
        let n = 2 + (seed as usize % 4);
        let heads = 1 + (seed as usize % 2);
        let model = small_model(heads, 4, seed);
        let graph = random_graph(n, 4, 3, 100 + seed);
        check_against_oracle(&model, &graph);
    }
}

#[test]
fn oracle_covers_variants() {
    let mut learned = NodeFeatureConfig::new(6, OrderEncoding::Learned { max_order: 3 }).unwrap();
    learned.type_vocab = features(6, 3).type_vocab;
    let cfgs = [
        (ModelConfig { d_h1: 3, d_h2: 5, heads: 2, edge_projection: true, ..Default::default() }, features(8, 3)),
        (ModelConfig { d_h1: 3, d_h2: 5, heads: 2, use_edge_features: false, ..Default::default() }, features(8, 3)),
        (ModelConfig { d_h1: 4, d_h2: 4, heads: 1, attn_slope: 0.05, node_slope: 0.3, ..Default::default() }, learned),
    ];
    for (k, (cfg, feats)) in cfgs.into_iter().enumerate() {
        let mut model = Model::new(cfg, feats, 3, 40 + k as u64).unwrap();
        if let Some(e) = model.params.edge_proj.as_mut() {
            for (q, v) in e.values_mut().iter_mut().enumerate() {
                *v += 0.1 * q as f64 - 0.3;
            }
        }
        let graph = random_graph(5, 3, 3, 7 + k as u64);
        check_against_oracle(&model, &graph);
    }
}

#[test]
fn attention_rows_are_distributions() {
    for seed in 0..10u64 {
        let model = small_model(2, 4, seed);
        let graph = random_graph(5, 4, 3, seed + 50);
        let h0 = graph.node_features(&model.features, &model.params.embeddings);
        let h1 = model.params.layer1.forward(&graph, &h0).unwrap();
        for (layer, h) in [(&model.params.layer1, &h0), (&model.params.layer2, &h1)] {
            for k in 0..layer.heads.len() {
                for i in 0..graph.num_nodes() {
                    let a = layer.attention_coefficients(k, i, &graph, h).unwrap();
                    assert_eq!(a.len(), graph.num_nodes() - 1);
                    assert!(a.iter().all(|&w| w >= 0.0));
                    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-8);
                    let r = oracle::attention(layer, k, &graph, &oracle_rows(h));
                    let r: Vec<f64> = graph.neighbors(i).map(|j| r[i][j]).collect();
                    for (x, y) in a.iter().zip(&r) {
                        assert!((x - y).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

fn oracle_rows(t: &gdgat_core::Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

#[test]
fn uniform_attention_on_identical_nodes() {
    // Identical nodes and identical edges leave nothing to prefer.
    let model = small_model(2, 4, 3);
    let mut g = random_graph(4, 4, 0, 1);
    let e = vec![0.25; 4 * 4 * 4];
    for node in g.nodes.iter_mut() {
        node.order_index = 0;
    }
    g = graph_from_parts("same", g.nodes, 4, Some(e)).unwrap();
    let h0 = g.node_features(&model.features, &model.params.embeddings);
    let a = model.params.layer1.attention_coefficients(0, 2, &g, &h0).unwrap();
    for w in a {
        assert!((w - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn permutation_equivariance() {
    let model = small_model(2, 4, 11);
    let graph = random_graph(5, 4, 3, 12);
    let perm = [3usize, 0, 4, 1, 2]; // new position of old node k
    let n = 5;
    let c = 4;
    let mut nodes = graph.nodes.clone();
    for (k, &p) in perm.iter().enumerate() {
        nodes[p] = graph.nodes[k].clone();
    }
    let old = edges_of(&graph);
    let mut edges = vec![0.0; old.len()];
    for (i, j) in all_pairs(n) {
        let (pi, pj) = (perm[i], perm[j]);
        edges[(pi * n + pj) * c..(pi * n + pj + 1) * c].copy_from_slice(&old[(i * n + j) * c..(i * n + j + 1) * c]);
    }
    let permuted = graph_from_parts("perm", nodes, c, Some(edges)).unwrap();
    let a = model.predict(&graph, &all_pairs(n)).unwrap();
    let queries: Vec<(usize, usize)> = all_pairs(n).into_iter().map(|(i, j)| (perm[i], perm[j])).collect();
    let b = model.predict(&permuted, &queries).unwrap();
    for (x, y) in a.iter().zip(&b) {
        for (p, q) in x.probs.iter().zip(&y.probs) {
            assert!((p - q).abs() < 1e-9);
        }
    }
}

#[test]
fn gradients_pass_finite_differences() {
    let model = small_model(2, 4, 7);
    let graph = random_graph(4, 4, 3, 8);
    let pairs = labeled(4, 4);
    let report = grad_check(model.loss_fn(&graph, &pairs), &model.params.to_tensors(), 1e-5).unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
    assert_eq!(report.entries_checked, model.params.num_scalars());
}

#[test]
fn gradients_pass_for_variants() {
    let mut learned = NodeFeatureConfig::new(6, OrderEncoding::Learned { max_order: 3 }).unwrap();
    learned.type_vocab = features(6, 2).type_vocab;
    let cases = [
        (ModelConfig { d_h1: 3, d_h2: 4, heads: 2, edge_projection: true, ..Default::default() }, features(6, 3)),
        (ModelConfig { d_h1: 3, d_h2: 4, heads: 2, use_edge_features: false, ..Default::default() }, features(6, 3)),
        (ModelConfig { d_h1: 3, d_h2: 4, heads: 1, ..Default::default() }, learned),
    ];
    for (k, (cfg, feats)) in cases.into_iter().enumerate() {
        let model = Model::new(cfg, feats, 3, 90 + k as u64).unwrap();
        let graph = random_graph(4, 3, 2, 91 + k as u64);
        let pairs = labeled(4, 3);
        let r = grad_check(model.loss_fn(&graph, &pairs), &model.params.to_tensors(), 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-4, "case {k}: {r:?}");
    }
}

#[test]
fn edge_perturbation_shifts_scores_linearly() {
    let model = small_model(2, 4, 21);
    let graph = random_graph(4, 4, 3, 22);
    let h0 = graph.node_features(&model.features, &model.params.embeddings);
    let delta = [0.03, -0.01, 0.02, -0.04];
    let (i, j) = (1usize, 3usize);
    let mut e = edges_of(&graph);
    for (q, d) in delta.iter().enumerate() {
        e[(i * 4 + j) * 4 + q] += d;
    }
    let nudged = graph_from_parts("nudged", graph.nodes.clone(), 4, Some(e)).unwrap();
    let layer = &model.params.layer1;
    for k in 0..layer.heads.len() {
        let before = layer.attention_scores(k, i, &graph, &h0).unwrap();
        let after = layer.attention_scores(k, i, &nudged, &h0).unwrap();
        let a = layer.heads[k].a.values();
        let a_edge = &a[2 * layer.d_out()..];
        let expected: f64 = a_edge.iter().zip(&delta).map(|(x, y)| x * y).sum();
        let slot = graph.neighbors(i).position(|m| m == j).unwrap();
        for (m, (b, c)) in before.iter().zip(&after).enumerate() {
            let want = if m == slot { expected } else { 0.0 };
            assert!(((c - b) - want).abs() < 1e-14);
        }
    }
}

#[test]
fn loss_is_mean_cross_entropy() {
    let model = small_model(1, 4, 5);
    let graph = random_graph(3, 4, 3, 6);
    let pairs = labeled(3, 4);
    let h2 = model.node_states(&graph).unwrap();
    let reference: f64 = pairs
        .iter()
        .map(|p| -model.classify_pair(&graph, &h2, p.i, p.j).unwrap().values()[p.gold].ln())
        .sum::<f64>()
        / pairs.len() as f64;
    assert!((model.loss(&graph, &pairs).unwrap() - reference).abs() < 1e-12);
}

#[test]
fn edge_free_graph_rejected_by_edge_model() {
    let model = small_model(1, 4, 5);
    let g = random_graph(3, 4, 3, 6);
    let bare = graph_from_parts("bare", g.nodes.clone(), 4, None).unwrap();
    let err = model.node_states(&bare).unwrap_err();
    assert_eq!(err.kind(), "dimension_mismatch");
    let h2 = model.node_states(&g).unwrap();
    assert!(matches!(model.classify_pair(&g, &h2, 1, 1), Err(Error::InvalidArgument(_))));
}

#[test]
fn checkpoint_round_trip() {
    let model = small_model(2, 4, 9);
    let echo = serde_json::json!({"seed": 9});
    let text = model.to_checkpoint(&echo).unwrap();
    let (back, cfg) = Model::from_checkpoint(&text).unwrap();
    assert_eq!(back, model);
    assert_eq!(cfg, echo);
    assert_eq!(back.to_checkpoint(&echo).unwrap(), text);
    let bad = text.replacen("\"format_version\": 1", "\"format_version\": 99", 1);
    assert!(Model::from_checkpoint(&bad).is_err());
}
