//! Two-layer edge-featured multi-head graph attention with a pair classifier.
//!
//! Layer `ℓ`, head `k`, node `i`:
//!
//! ```text
//! P        = H Wₖ
//! z_ij     = aₖ[..d]·P_i + aₖ[d..2d]·P_j + aₖ[2d..]·p_ij
//! α_i·     = softmax_{j ∈ N(i)} LeakyReLU(z_ij)
//! out_i,k  = LeakyReLU(Σ_j α_ij P_j)
//! ```
//!
//! Layer 1 concatenates the heads, layer 2 averages them. A pair `(i, j)` is
//! scored by `s = [h²_i ‖ p_ij ‖ h²_j] W_cls + b_cls` and trained with
//! cross-entropy on `s` through a fused log-softmax.
//!
//! Gradients are derived by hand; `gradcheck` certifies them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DocumentGraph, NodeEmbeddings, NodeFeatureConfig, OrderEncoding};
use crate::probs::ProbDistribution;
use crate::tensor::{
    argmax, dot, leaky, leaky_grad, log_sum_exp, matmul_a_bt_acc, matmul_at_b_acc, matmul_into,
    softmax_in_place, xavier_with, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Concat,
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_h1: usize,
    pub d_h2: usize,
    pub heads: usize,
    /// Slope of the LeakyReLU on attention scores.
    pub attn_slope: f64,
    /// Slope of the LeakyReLU on aggregated node features.
    pub node_slope: f64,
    /// Feed `p_ij` into attention scores and the classifier input.
    pub use_edge_features: bool,
    /// Pass `p_ij` through a learned `C×C` map before the classifier.
    pub edge_projection: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_h1: 32,
            d_h2: 64,
            heads: 8,
            attn_slope: 0.2,
            node_slope: 0.2,
            use_edge_features: true,
            edge_projection: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h1 == 0 || self.d_h2 == 0 || self.heads == 0 {
            return Err(Error::Config(format!(
                "d_h1, d_h2 and heads must be positive (got {}, {}, {})",
                self.d_h1, self.d_h2, self.heads
            )));
        }
        for (name, s) in [("attn_slope", self.attn_slope), ("node_slope", self.node_slope)] {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {s}")));
            }
        }
        if self.edge_projection && !self.use_edge_features {
            return Err(Error::Config("edge_projection requires use_edge_features".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatHead {
    /// `d_in × d_out`
    pub w: Tensor,
    /// `2·d_out (+ C)`: source, neighbour, edge segments.
    pub a: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatLayerParams {
    pub heads: Vec<GatHead>,
    pub leaky_slope: f64,
    pub node_slope: f64,
    pub aggregation: Aggregation,
}

impl GatLayerParams {
    pub fn d_in(&self) -> usize {
        self.heads[0].w.rows()
    }

    pub fn d_out(&self) -> usize {
        self.heads[0].w.cols()
    }

    pub fn edge_width(&self) -> usize {
        self.heads[0].a.len() - 2 * self.d_out()
    }

    pub fn out_width(&self) -> usize {
        match self.aggregation {
            Aggregation::Concat => self.heads.len() * self.d_out(),
            Aggregation::Average => self.d_out(),
        }
    }

    fn check_input(&self, graph: &DocumentGraph, h_in: &Tensor) -> Result<()> {
        if h_in.shape() != [graph.num_nodes(), self.d_in()] {
            return Err(Error::shape(
                "gat layer",
                format!(
                    "input {:?}, expected [{}, {}]",
                    h_in.shape(),
                    graph.num_nodes(),
                    self.d_in()
                ),
            ));
        }
        let ew = self.edge_width();
        if ew > 0 && !(graph.has_edge_features() && graph.num_classes() == ew) {
            return Err(Error::shape(
                "gat layer",
                format!("attention expects {ew}-wide edge features"),
            ));
        }
        Ok(())
    }

    /// Attention weights of node `i` over `N(i)`, in increasing neighbour order.
    pub fn attention_coefficients(
        &self,
        head: usize,
        i: usize,
        graph: &DocumentGraph,
        h_in: &Tensor,
    ) -> Result<Vec<f64>> {
        self.check_input(graph, h_in)?;
        let cache = head_forward(self, &self.heads[head], graph, h_in.values());
        let n = graph.num_nodes();
        Ok(graph.neighbors(i).map(|j| cache.alpha[i * n + j]).collect())
    }

    /// Pre-activation scores `z_ij` of node `i`, in increasing neighbour order.
    pub fn attention_scores(&self, head: usize, i: usize, graph: &DocumentGraph, h_in: &Tensor) -> Result<Vec<f64>> {
        self.check_input(graph, h_in)?;
        let cache = head_forward(self, &self.heads[head], graph, h_in.values());
        let n = graph.num_nodes();
        Ok(graph.neighbors(i).map(|j| cache.z[i * n + j]).collect())
    }

    /// `LeakyReLU(Σ_j α_ij W h_j)` for one head and node.
    pub fn head_output(
        &self,
        head: usize,
        i: usize,
        graph: &DocumentGraph,
        h_in: &Tensor,
    ) -> Result<Vec<f64>> {
        self.check_input(graph, h_in)?;
        let cache = head_forward(self, &self.heads[head], graph, h_in.values());
        let d = self.d_out();
        Ok(cache.act[i * d..(i + 1) * d].to_vec())
    }

    pub fn forward(&self, graph: &DocumentGraph, h_in: &Tensor) -> Result<Tensor> {
        self.check_input(graph, h_in)?;
        let cache = layer_forward(self, graph, h_in.values());
        Tensor::matrix(graph.num_nodes(), self.out_width(), cache.out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub embeddings: NodeEmbeddings,
    pub layer1: GatLayerParams,
    pub layer2: GatLayerParams,
    /// `(2·d_h2 + C) × C`, or `2·d_h2 × C` without edge features.
    pub cls_w: Tensor,
    pub cls_b: Tensor,
    /// `C × C`; present only with `edge_projection`.
    pub edge_proj: Option<Tensor>,
}

impl ModelParams {
    pub fn init(
        cfg: &ModelConfig,
        features: &NodeFeatureConfig,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = features.half();
        let type_table = xavier_with(&mut rng, features.vocab_size(), half);
        let order_table = match features.order_encoding {
            OrderEncoding::Sinusoidal => None,
            OrderEncoding::Learned { max_order } => Some(xavier_with(&mut rng, max_order, half)),
        };
        let ew = if cfg.use_edge_features { num_classes } else { 0 };
        let mut layer = |d_in: usize, d_out: usize, aggregation| GatLayerParams {
            heads: (0..cfg.heads)
                .map(|_| GatHead {
                    w: xavier_with(&mut rng, d_in, d_out),
                    a: vector(xavier_with(&mut rng, 1, 2 * d_out + ew)),
                })
                .collect(),
            leaky_slope: cfg.attn_slope,
            node_slope: cfg.node_slope,
            aggregation,
        };
        let layer1 = layer(features.input_width(), cfg.d_h1, Aggregation::Concat);
        let layer2 = layer(cfg.heads * cfg.d_h1, cfg.d_h2, Aggregation::Average);
        let cls_w = xavier_with(&mut rng, 2 * cfg.d_h2 + ew, num_classes);
        Ok(Self {
            embeddings: NodeEmbeddings {
                type_table,
                order_table,
            },
            layer1,
            layer2,
            cls_w,
            cls_b: Tensor::zeros(&[num_classes]),
            edge_proj: cfg.edge_projection.then(|| Tensor::identity(num_classes)),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.cls_b.len()
    }

    pub fn uses_edge_features(&self) -> bool {
        self.layer1.edge_width() > 0
    }

    /// Stable parameter ids, one per tensor, in `tensors()` order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["embeddings.type_table".to_string()];
        if self.embeddings.order_table.is_some() {
            names.push("embeddings.order_table".into());
        }
        for (tag, layer) in [("layer1", &self.layer1), ("layer2", &self.layer2)] {
            for k in 0..layer.heads.len() {
                names.push(format!("{tag}.head{k}.w"));
                names.push(format!("{tag}.head{k}.a"));
            }
        }
        names.push("cls.w".into());
        names.push("cls.b".into());
        if self.edge_proj.is_some() {
            names.push("edge_proj".into());
        }
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embeddings.type_table];
        out.extend(self.embeddings.order_table.as_ref());
        for layer in [&self.layer1, &self.layer2] {
            for h in &layer.heads {
                out.push(&h.w);
                out.push(&h.a);
            }
        }
        out.push(&self.cls_w);
        out.push(&self.cls_b);
        out.extend(self.edge_proj.as_ref());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embeddings.type_table];
        out.extend(self.embeddings.order_table.as_mut());
        for layer in [&mut self.layer1, &mut self.layer2] {
            for h in &mut layer.heads {
                out.push(&mut h.w);
                out.push(&mut h.a);
            }
        }
        out.push(&mut self.cls_w);
        out.push(&mut self.cls_b);
        out.extend(self.edge_proj.as_mut());
        out
    }

    /// Same structure, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(Tensor::fill_zero);
        z
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.tensors().into_iter().cloned().collect()
    }

    /// Inverse of `to_tensors` against this structure.
    pub fn with_tensors(&self, tensors: &[Tensor]) -> Result<Self> {
        let mut out = self.clone();
        let slots = out.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::shape(
                "ModelParams::with_tensors",
                format!("{} tensors for {} slots", tensors.len(), slots.len()),
            ));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::shape(
                    "ModelParams::with_tensors",
                    format!("{:?} into {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t.clone();
        }
        Ok(out)
    }

    /// `self += scale · other`, assuming identical structure.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.values_mut().iter_mut().zip(b.values()) {
                *x += scale * y;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

fn vector(t: Tensor) -> Tensor {
    let n = t.len();
    Tensor::new(vec![n], t.into_values()).expect("finite")
}

/// A labelled query for training: nodes `i`, `j` and the gold class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabeledPair {
    pub i: usize,
    pub j: usize,
    pub gold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub i: usize,
    pub j: usize,
    pub label: usize,
    pub probs: Vec<f64>,
}

/// Model configuration, node-feature setup and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub features: NodeFeatureConfig,
    pub params: ModelParams,
}

pub(crate) struct HeadCache {
    proj: Vec<f64>,
    z: Vec<f64>,
    alpha: Vec<f64>,
    m: Vec<f64>,
    act: Vec<f64>,
}

pub(crate) struct LayerCache {
    heads: Vec<HeadCache>,
    out: Vec<f64>,
}

pub(crate) struct ForwardCache {
    h0: Vec<f64>,
    l1: LayerCache,
    l2: LayerCache,
}

fn head_forward(layer: &GatLayerParams, head: &GatHead, graph: &DocumentGraph, h: &[f64]) -> HeadCache {
    let n = graph.num_nodes();
    let (d_in, d) = (layer.d_in(), layer.d_out());
    let mut proj = vec![0.0; n * d];
    matmul_into(h, head.w.values(), &mut proj, n, d_in, d);

    let a = head.a.values();
    let (a_src, a_dst, a_edge) = (&a[..d], &a[d..2 * d], &a[2 * d..]);
    let src: Vec<f64> = proj.chunks(d).map(|p| dot(a_src, p)).collect();
    let dst: Vec<f64> = proj.chunks(d).map(|p| dot(a_dst, p)).collect();

    let mut z = vec![0.0; n * n];
    let mut alpha = vec![0.0; n * n];
    let mut scores = Vec::with_capacity(n - 1);
    for i in 0..n {
        scores.clear();
        for j in graph.neighbors(i) {
            let mut zij = src[i] + dst[j];
            if !a_edge.is_empty() {
                zij += dot(a_edge, graph.edge(i, j).expect("edge features checked"));
            }
            z[i * n + j] = zij;
            scores.push(leaky(zij, layer.leaky_slope));
        }
        softmax_in_place(&mut scores);
        for (j, w) in graph.neighbors(i).zip(&scores) {
            alpha[i * n + j] = *w;
        }
    }

    let mut m = vec![0.0; n * d];
    for i in 0..n {
        let mi = &mut m[i * d..(i + 1) * d];
        for j in graph.neighbors(i) {
            let w = alpha[i * n + j];
            for (o, p) in mi.iter_mut().zip(&proj[j * d..(j + 1) * d]) {
                *o += w * p;
            }
        }
    }
    let act = m.iter().map(|&v| leaky(v, layer.node_slope)).collect();
    HeadCache {
        proj,
        z,
        alpha,
        m,
        act,
    }
}

fn layer_forward(layer: &GatLayerParams, graph: &DocumentGraph, h: &[f64]) -> LayerCache {
    let n = graph.num_nodes();
    let d = layer.d_out();
    let k = layer.heads.len();
    let heads: Vec<HeadCache> = layer
        .heads
        .iter()
        .map(|hd| head_forward(layer, hd, graph, h))
        .collect();
    let width = layer.out_width();
    let mut out = vec![0.0; n * width];
    for i in 0..n {
        let row = &mut out[i * width..(i + 1) * width];
        for (q, hc) in heads.iter().enumerate() {
            let src = &hc.act[i * d..(i + 1) * d];
            match layer.aggregation {
                Aggregation::Concat => row[q * d..(q + 1) * d].copy_from_slice(src),
                Aggregation::Average => {
                    for (o, v) in row.iter_mut().zip(src) {
                        *o += v / k as f64;
                    }
                }
            }
        }
    }
    LayerCache { heads, out }
}

/// Backpropagates `d_out` (`n × out_width`) through one layer. Accumulates
/// parameter gradients into `grad` and returns the gradient w.r.t. the input.
fn layer_backward(
    layer: &GatLayerParams,
    grad: &mut GatLayerParams,
    graph: &DocumentGraph,
    h: &[f64],
    cache: &LayerCache,
    d_out: &[f64],
) -> Vec<f64> {
    let n = graph.num_nodes();
    let (d_in, d) = (layer.d_in(), layer.d_out());
    let k = layer.heads.len();
    let width = layer.out_width();
    let mut d_h = vec![0.0; n * d_in];

    for (q, (head, hc)) in layer.heads.iter().zip(&cache.heads).enumerate() {
        let mut dm = vec![0.0; n * d];
        for i in 0..n {
            for c in 0..d {
                let g = match layer.aggregation {
                    Aggregation::Concat => d_out[i * width + q * d + c],
                    Aggregation::Average => d_out[i * width + c] / k as f64,
                };
                dm[i * d + c] = g * leaky_grad(hc.m[i * d + c], layer.node_slope);
            }
        }

        let a = head.a.values();
        let (a_src, a_dst) = (&a[..d], &a[d..2 * d]);
        let ga = grad.heads[q].a.values_mut();
        let mut dp = vec![0.0; n * d];
        let mut d_alpha = vec![0.0; n];
        for i in 0..n {
            let dmi = &dm[i * d..(i + 1) * d];
            let mut weighted = 0.0;
            for j in graph.neighbors(i) {
                let w = hc.alpha[i * n + j];
                let pj = &hc.proj[j * d..(j + 1) * d];
                d_alpha[j] = dot(dmi, pj);
                weighted += w * d_alpha[j];
                for (o, g) in dp[j * d..(j + 1) * d].iter_mut().zip(dmi) {
                    *o += w * g;
                }
            }
            for j in graph.neighbors(i) {
                let w = hc.alpha[i * n + j];
                let de = w * (d_alpha[j] - weighted);
                let dz = de * leaky_grad(hc.z[i * n + j], layer.leaky_slope);
                if dz == 0.0 {
                    continue;
                }
                for c in 0..d {
                    ga[c] += dz * hc.proj[i * d + c];
                    ga[d + c] += dz * hc.proj[j * d + c];
                    dp[i * d + c] += dz * a_src[c];
                    dp[j * d + c] += dz * a_dst[c];
                }
                if let Some(p) = graph.edge(i, j).filter(|_| a.len() > 2 * d) {
                    for (o, v) in ga[2 * d..].iter_mut().zip(p) {
                        *o += dz * v;
                    }
                }
            }
        }
        matmul_at_b_acc(h, &dp, grad.heads[q].w.values_mut(), n, d_in, d);
        matmul_a_bt_acc(&dp, head.w.values(), &mut d_h, n, d_in, d);
    }
    d_h
}

impl Model {
    pub fn new(config: ModelConfig, features: NodeFeatureConfig, num_classes: usize, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, &features, num_classes, seed)?;
        Ok(Self {
            config,
            features,
            params,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.params.num_classes()
    }

    fn check_graph(&self, graph: &DocumentGraph) -> Result<()> {
        if graph.num_classes() != self.num_classes() {
            return Err(Error::shape(
                "model",
                format!(
                    "graph has {} classes, model {}",
                    graph.num_classes(),
                    self.num_classes()
                ),
            ));
        }
        if self.params.uses_edge_features() && !graph.has_edge_features() {
            return Err(Error::shape("model", "model needs edge features, graph has none"));
        }
        if let Some(node) = graph.nodes.iter().find(|n| n.extra.len() != self.features.extra_width) {
            return Err(Error::shape(
                "model",
                format!(
                    "node extra width {} differs from configured {}",
                    node.extra.len(),
                    self.features.extra_width
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn forward_cached(params: &ModelParams, features: &NodeFeatureConfig, graph: &DocumentGraph) -> ForwardCache {
        let h0 = graph.node_features(features, &params.embeddings).into_values();
        let l1 = layer_forward(&params.layer1, graph, &h0);
        let l2 = layer_forward(&params.layer2, graph, &l1.out);
        ForwardCache { h0, l1, l2 }
    }

    /// `h^(2)`, one row per node.
    pub fn node_states(&self, graph: &DocumentGraph) -> Result<Tensor> {
        self.check_graph(graph)?;
        let cache = Self::forward_cached(&self.params, &self.features, graph);
        Tensor::matrix(graph.num_nodes(), self.params.layer2.out_width(), cache.l2.out)
    }

    /// The classifier input `[h²_i ‖ q_ij ‖ h²_j]`.
    fn classifier_input(params: &ModelParams, graph: &DocumentGraph, h2: &[f64], i: usize, j: usize) -> Vec<f64> {
        let d2 = params.layer2.out_width();
        let mut ho = Vec::with_capacity(params.cls_w.rows());
        ho.extend_from_slice(&h2[i * d2..(i + 1) * d2]);
        if params.uses_edge_features() {
            let p = graph.edge(i, j).expect("edge features checked");
            match &params.edge_proj {
                Some(e) => {
                    let c = p.len();
                    ho.extend((0..c).map(|r| dot(e.row(r), p)));
                }
                None => ho.extend_from_slice(p),
            }
        }
        ho.extend_from_slice(&h2[j * d2..(j + 1) * d2]);
        ho
    }

    fn logits(params: &ModelParams, ho: &[f64]) -> Vec<f64> {
        let c = params.num_classes();
        let mut s = params.cls_b.values().to_vec();
        for (r, &x) in ho.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, w) in s.iter_mut().zip(&params.cls_w.values()[r * c..(r + 1) * c]) {
                *o += x * w;
            }
        }
        s
    }

    /// Class distribution `ŷ` for the ordered pair `(i, j)` given node states `h2`.
    pub fn classify_pair(&self, graph: &DocumentGraph, h2: &Tensor, i: usize, j: usize) -> Result<ProbDistribution> {
        if i == j || i >= graph.num_nodes() || j >= graph.num_nodes() {
            return Err(Error::InvalidArgument(format!("invalid pair ({i}, {j})")));
        }
        self.check_graph(graph)?;
        let ho = Self::classifier_input(&self.params, graph, h2.values(), i, j);
        let mut s = Self::logits(&self.params, &ho);
        softmax_in_place(&mut s);
        ProbDistribution::new(s)
    }

    /// Logits `s` for `(i, j)` given node states.
    pub fn pair_logits(&self, graph: &DocumentGraph, h2: &Tensor, i: usize, j: usize) -> Vec<f64> {
        let ho = Self::classifier_input(&self.params, graph, h2.values(), i, j);
        Self::logits(&self.params, &ho)
    }

    pub fn predict(&self, graph: &DocumentGraph, pairs: &[(usize, usize)]) -> Result<Vec<Prediction>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let h2 = self.node_states(graph)?;
        pairs
            .iter()
            .map(|&(i, j)| {
                let y = self.classify_pair(graph, &h2, i, j)?;
                Ok(Prediction {
                    i,
                    j,
                    label: argmax(y.values()),
                    probs: y.values().to_vec(),
                })
            })
            .collect()
    }

    /// Mean cross-entropy over `pairs`.
    pub fn loss(&self, graph: &DocumentGraph, pairs: &[LabeledPair]) -> Result<f64> {
        Ok(Self::loss_and_grad_with(&self.params, &self.features, graph, pairs, false)?.0)
    }

    /// Mean cross-entropy over `pairs` and its gradient w.r.t. every parameter.
    pub fn loss_and_grad(&self, graph: &DocumentGraph, pairs: &[LabeledPair]) -> Result<(f64, ModelParams)> {
        self.check_graph(graph)?;
        let (loss, grad) = Self::loss_and_grad_with(&self.params, &self.features, graph, pairs, true)?;
        Ok((loss, grad.expect("requested")))
    }

    pub(crate) fn loss_and_grad_with(
        params: &ModelParams,
        features: &NodeFeatureConfig,
        graph: &DocumentGraph,
        pairs: &[LabeledPair],
        want_grad: bool,
    ) -> Result<(f64, Option<ModelParams>)> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("loss over an empty pair list".into()));
        }
        let c = params.num_classes();
        let n = graph.num_nodes();
        for p in pairs {
            if p.i == p.j || p.i >= n || p.j >= n || p.gold >= c {
                return Err(Error::InvalidArgument(format!(
                    "invalid labelled pair ({}, {}, gold {})",
                    p.i, p.j, p.gold
                )));
            }
        }
        let cache = Self::forward_cached(params, features, graph);
        let h2 = &cache.l2.out;
        let d2 = params.layer2.out_width();
        let scale = 1.0 / pairs.len() as f64;

        let mut loss = 0.0;
        let mut grad = want_grad.then(|| params.zeros_like());
        let mut d_h2 = vec![0.0; n * d2];
        for p in pairs {
            let ho = Self::classifier_input(params, graph, h2, p.i, p.j);
            let s = Self::logits(params, &ho);
            let lse = log_sum_exp(&s);
            loss += lse - s[p.gold];

            let Some(g) = grad.as_mut() else { continue };
            let ds: Vec<f64> = s
                .iter()
                .enumerate()
                .map(|(k, &v)| scale * ((v - lse).exp() - if k == p.gold { 1.0 } else { 0.0 }))
                .collect();
            for (o, v) in g.cls_b.values_mut().iter_mut().zip(&ds) {
                *o += v;
            }
            let gw = g.cls_w.values_mut();
            let w = params.cls_w.values();
            let mut d_ho = vec![0.0; ho.len()];
            for (r, &x) in ho.iter().enumerate() {
                let wr = &w[r * c..(r + 1) * c];
                d_ho[r] = dot(wr, &ds);
                for (o, v) in gw[r * c..(r + 1) * c].iter_mut().zip(&ds) {
                    *o += x * v;
                }
            }
            for (o, v) in d_h2[p.i * d2..(p.i + 1) * d2].iter_mut().zip(&d_ho[..d2]) {
                *o += v;
            }
            let tail = &d_ho[d_ho.len() - d2..];
            for (o, v) in d_h2[p.j * d2..(p.j + 1) * d2].iter_mut().zip(tail) {
                *o += v;
            }
            if let (Some(ge), true) = (g.edge_proj.as_mut(), params.uses_edge_features()) {
                let pe = graph.edge(p.i, p.j).expect("edge features checked");
                let dq = &d_ho[d2..d2 + c];
                let ge = ge.values_mut();
                for r in 0..c {
                    for (q, pv) in pe.iter().enumerate() {
                        ge[r * c + q] += dq[r] * pv;
                    }
                }
            }
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite("pair loss"));
        }
        let Some(mut g) = grad else {
            return Ok((loss, None));
        };

        let d_h1 = layer_backward(&params.layer2, &mut g.layer2, graph, &cache.l1.out, &cache.l2, &d_h2);
        let d_h0 = layer_backward(&params.layer1, &mut g.layer1, graph, &cache.h0, &cache.l1, &d_h1);

        let w0 = features.input_width();
        let half = features.half();
        for (node, row) in graph.nodes.iter().zip(d_h0.chunks(w0)) {
            let tt = g.embeddings.type_table.values_mut();
            for (o, v) in tt[node.type_id * half..(node.type_id + 1) * half]
                .iter_mut()
                .zip(&row[half..features.d_h])
            {
                *o += v;
            }
            if let (Some(r), Some(ot)) = (
                features.order_row(node.order_index),
                g.embeddings.order_table.as_mut(),
            ) {
                for (o, v) in ot.values_mut()[r * half..(r + 1) * half].iter_mut().zip(&row[..half]) {
                    *o += v;
                }
            }
        }
        Ok((loss, Some(g)))
    }

    /// Loss/gradient closure over flattened parameters, for `grad_check`.
    pub fn loss_fn<'a>(
        &'a self,
        graph: &'a DocumentGraph,
        pairs: &'a [LabeledPair],
    ) -> impl Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)> + 'a {
        move |flat: &[Tensor]| {
            let params = self.params.with_tensors(flat)?;
            let (loss, g) = Self::loss_and_grad_with(&params, &self.features, graph, pairs, true)?;
            Ok((loss, g.expect("requested").to_tensors()))
        }
    }
}

/// Cross-entropy of logits `s` against class `gold`, via log-softmax.
pub fn pair_loss(logits: &[f64], gold: usize) -> f64 {
    log_sum_exp(logits) - logits[gold]
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: serde_json::Value,
    model: ModelConfig,
    features: NodeFeatureConfig,
    num_classes: usize,
    tensors: Vec<NamedTensor>,
}

impl Model {
    /// Self-describing JSON checkpoint embedding `config` verbatim.
    pub fn to_checkpoint(&self, config: &serde_json::Value) -> Result<String> {
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: config.clone(),
            model: self.config.clone(),
            features: self.features.clone(),
            num_classes: self.num_classes(),
            tensors: self
                .params
                .param_names()
                .into_iter()
                .zip(self.params.tensors())
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Returns the model and the embedded run config.
    pub fn from_checkpoint(text: &str) -> Result<(Self, serde_json::Value)> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint format version {}",
                file.format_version
            )));
        }
        let mut model = Model::new(file.model, file.features, file.num_classes, 0)?;
        let names = model.params.param_names();
        if names.len() != file.tensors.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} tensors, model expects {}",
                file.tensors.len(),
                names.len()
            )));
        }
        let mut tensors = Vec::with_capacity(names.len());
        for (name, t) in names.iter().zip(file.tensors) {
            if *name != t.name {
                return Err(Error::Validation(format!(
                    "checkpoint tensor '{}' where '{name}' was expected",
                    t.name
                )));
            }
            tensors.push(Tensor::new(t.shape, t.values)?);
        }
        model.params = model.params.with_tensors(&tensors)?;
        Ok((model, file.config))
    }
}
