//! Scalar-loop reference implementation of the GAT forward pass and pair
//! classifier, written directly from the equations and sharing no code with
//! the vectorised model.

use gdgat_core::graph::{DocumentGraph, NodeFeatureConfig, OrderEncoding};
use gdgat_core::model::{Aggregation, GatLayerParams, ModelParams};

fn lrelu(x: f64, s: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        s * x
    }
}

pub fn node_input(params: &ModelParams, cfg: &NodeFeatureConfig, graph: &DocumentGraph) -> Vec<Vec<f64>> {
    let half = cfg.d_h / 2;
    graph
        .nodes
        .iter()
        .map(|node| {
            let mut h = Vec::new();
            match cfg.order_encoding {
                OrderEncoding::Sinusoidal => {
                    for d in 0..half {
                        let k = (d / 2) as f64;
                        let angle = node.order_index as f64 / 10000f64.powf(2.0 * k / half as f64);
                        h.push(if d % 2 == 0 { angle.sin() } else { angle.cos() });
                    }
                }
                OrderEncoding::Learned { max_order } => {
                    let r = node.order_index.min(max_order - 1);
                    let t = params.embeddings.order_table.as_ref().unwrap();
                    for d in 0..half {
                        h.push(t.get(r, d));
                    }
                }
            }
            for d in 0..half {
                h.push(params.embeddings.type_table.get(node.type_id, d));
            }
            h.extend(node.extra.iter().copied());
            h
        })
        .collect()
}

/// `α_{ij,k}` for every `i`, as a dense `n × n` matrix with zero diagonal.
pub fn attention(layer: &GatLayerParams, k: usize, graph: &DocumentGraph, h: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = h.len();
    let head = &layer.heads[k];
    let (d_in, d_out) = (head.w.rows(), head.w.cols());
    let wh: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..d_out)
                .map(|c| (0..d_in).map(|r| h[i][r] * head.w.get(r, c)).sum())
                .collect()
        })
        .collect();
    let a = head.a.values();
    let mut alpha = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut e = vec![0.0; n];
        for j in 0..n {
            if j == i {
                continue;
            }
            let mut cat: Vec<f64> = wh[i].clone();
            cat.extend(&wh[j]);
            if a.len() > 2 * d_out {
                cat.extend(graph.edge(i, j).unwrap());
            }
            let z: f64 = cat.iter().zip(a).map(|(x, y)| x * y).sum();
            e[j] = lrelu(z, layer.leaky_slope).exp();
        }
        let denom: f64 = (0..n).filter(|&m| m != i).map(|m| e[m]).sum();
        for j in 0..n {
            if j != i {
                alpha[i][j] = e[j] / denom;
            }
        }
    }
    alpha
}

pub fn head_outputs(layer: &GatLayerParams, k: usize, graph: &DocumentGraph, h: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = h.len();
    let head = &layer.heads[k];
    let (d_in, d_out) = (head.w.rows(), head.w.cols());
    let alpha = attention(layer, k, graph, h);
    (0..n)
        .map(|i| {
            (0..d_out)
                .map(|c| {
                    let mut s = 0.0;
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let whj: f64 = (0..d_in).map(|r| head.w.get(r, c) * h[j][r]).sum();
                        s += alpha[i][j] * whj;
                    }
                    lrelu(s, layer.node_slope)
                })
                .collect()
        })
        .collect()
}

pub fn layer(layer: &GatLayerParams, graph: &DocumentGraph, h: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = layer.heads.len();
    let outs: Vec<Vec<Vec<f64>>> = (0..k).map(|q| head_outputs(layer, q, graph, h)).collect();
    (0..h.len())
        .map(|i| match layer.aggregation {
            Aggregation::Concat => outs.iter().flat_map(|o| o[i].clone()).collect(),
            Aggregation::Average => {
                let d = outs[0][i].len();
                (0..d).map(|c| outs.iter().map(|o| o[i][c]).sum::<f64>() / k as f64).collect()
            }
        })
        .collect()
}

pub fn node_states(params: &ModelParams, cfg: &NodeFeatureConfig, graph: &DocumentGraph) -> Vec<Vec<f64>> {
    let h0 = node_input(params, cfg, graph);
    let h1 = layer(&params.layer1, graph, &h0);
    layer(&params.layer2, graph, &h1)
}

/// `softmax([h_i ‖ p_ij ‖ h_j] W + b)` (edge segment omitted for edge-free models).
pub fn classify(params: &ModelParams, graph: &DocumentGraph, h2: &[Vec<f64>], i: usize, j: usize) -> Vec<f64> {
    let mut ho = h2[i].clone();
    if params.cls_w.rows() > 2 * h2[i].len() {
        let p = graph.edge(i, j).unwrap();
        match &params.edge_proj {
            Some(e) => {
                for r in 0..p.len() {
                    ho.push((0..p.len()).map(|q| e.get(r, q) * p[q]).sum());
                }
            }
            None => ho.extend(p),
        }
    }
    ho.extend(&h2[j]);
    let c = params.cls_b.len();
    let s: Vec<f64> = (0..c)
        .map(|k| params.cls_b.values()[k] + (0..ho.len()).map(|r| ho[r] * params.cls_w.get(r, k)).sum::<f64>())
        .collect();
    let ex: Vec<f64> = s.iter().map(|v| v.exp()).collect();
    let z: f64 = ex.iter().sum();
    ex.into_iter().map(|v| v / z).collect()
}
