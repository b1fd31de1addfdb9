//! Per-document fully connected event graphs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Event};
use crate::error::{Error, Result};
use crate::probs::ProbTable;
use crate::tensor::Tensor;

/// Reserved vocabulary slot for event types never seen while building the vocab.
pub const UNK_TYPE: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OrderEncoding {
    Sinusoidal,
    /// One learned row per position; positions past the table reuse the last row.
    Learned { max_order: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatureConfig {
    /// Width of order + type halves.
    pub d_h: usize,
    /// Event type → embedding row; row 0 is UNK.
    pub type_vocab: BTreeMap<String, usize>,
    pub order_encoding: OrderEncoding,
    /// Width of per-event external features appended after the two halves.
    #[serde(default)]
    pub extra_width: usize,
}

impl NodeFeatureConfig {
    pub fn new(d_h: usize, order_encoding: OrderEncoding) -> Result<Self> {
        if d_h < 2 || !d_h.is_multiple_of(2) {
            return Err(Error::Config(format!("d_h must be even and at least 2, got {d_h}")));
        }
        if let OrderEncoding::Learned { max_order } = order_encoding {
            if max_order == 0 {
                return Err(Error::Config("learned order table needs max_order >= 1".into()));
            }
        }
        Ok(Self {
            d_h,
            type_vocab: BTreeMap::new(),
            order_encoding,
            extra_width: 0,
        })
    }

    /// Adds every event type found in `datasets`, in sorted order.
    pub fn with_vocab_from<'a>(mut self, datasets: impl IntoIterator<Item = &'a Dataset>) -> Self {
        let mut types: Vec<&str> = datasets
            .into_iter()
            .flat_map(|d| d.documents.values().flatten().map(|e| e.event_type.as_str()))
            .collect();
        types.sort_unstable();
        types.dedup();
        self.type_vocab = types
            .into_iter()
            .enumerate()
            .map(|(k, t)| (t.to_string(), k + 1))
            .collect();
        self
    }

    pub fn with_extra_width(mut self, w: usize) -> Self {
        self.extra_width = w;
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.type_vocab.len() + 1
    }

    pub fn half(&self) -> usize {
        self.d_h / 2
    }

    /// Width of `h^(0)` rows.
    pub fn input_width(&self) -> usize {
        self.d_h + self.extra_width
    }

    pub fn type_id(&self, event_type: &str) -> usize {
        self.type_vocab.get(event_type).copied().unwrap_or(UNK_TYPE)
    }

    pub fn order_row(&self, order_index: usize) -> Option<usize> {
        match self.order_encoding {
            OrderEncoding::Sinusoidal => None,
            OrderEncoding::Learned { max_order } => Some(order_index.min(max_order - 1)),
        }
    }
}

/// Learned tables feeding `h^(0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeEmbeddings {
    /// `vocab_size × d_h/2`
    pub type_table: Tensor,
    /// `max_order × d_h/2`, only with learned order encoding.
    pub order_table: Option<Tensor>,
}

/// The standard transformer position pattern over `width` dims.
pub fn sinusoidal_encoding(pos: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|d| {
            let freq = 10000f64.powf(-((d - d % 2) as f64) / width as f64);
            let angle = pos as f64 * freq;
            if d % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// `h^(0)` for one event: order half, type half, then any extra features.
pub fn init_node_features(event: &Event, cfg: &NodeFeatureConfig, emb: &NodeEmbeddings) -> Tensor {
    let node = NodeInput::from_event(event, cfg);
    let mut row = vec![0.0; cfg.input_width()];
    node.write_features(cfg, emb, &mut row);
    Tensor::vector(row).expect("embedding tables are finite")
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeInput {
    pub order_index: usize,
    pub type_id: usize,
    pub extra: Vec<f64>,
}

impl NodeInput {
    fn from_event(event: &Event, cfg: &NodeFeatureConfig) -> Self {
        let mut extra = event.extra.clone().unwrap_or_default();
        extra.resize(cfg.extra_width, 0.0);
        Self {
            order_index: event.order_index,
            type_id: cfg.type_id(&event.event_type),
            extra,
        }
    }

    pub(crate) fn write_features(&self, cfg: &NodeFeatureConfig, emb: &NodeEmbeddings, out: &mut [f64]) {
        let half = cfg.half();
        match (cfg.order_row(self.order_index), &emb.order_table) {
            (Some(r), Some(table)) => out[..half].copy_from_slice(table.row(r)),
            _ => out[..half].copy_from_slice(&sinusoidal_encoding(self.order_index, half)),
        }
        out[half..cfg.d_h].copy_from_slice(emb.type_table.row(self.type_id));
        out[cfg.d_h..].copy_from_slice(&self.extra);
    }
}

/// Complete directed graph over one document's events, without self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct DocumentGraph {
    pub doc_id: String,
    pub nodes: Vec<NodeInput>,
    num_classes: usize,
    /// `n × n × C`; diagonal blocks are unused. `None` for edge-free graphs.
    edges: Option<Vec<f64>>,
}

impl DocumentGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn has_edge_features(&self) -> bool {
        self.edges.is_some()
    }

    /// Edge feature `p_ij`; `None` for `i == j` or edge-free graphs.
    pub fn edge(&self, i: usize, j: usize) -> Option<&[f64]> {
        if i == j || i >= self.nodes.len() || j >= self.nodes.len() {
            return None;
        }
        let c = self.num_classes;
        let n = self.nodes.len();
        self.edges
            .as_ref()
            .map(|e| &e[(i * n + j) * c..(i * n + j + 1) * c])
    }

    pub fn edge_count(&self) -> usize {
        let n = self.nodes.len();
        n * (n - 1)
    }

    /// `N(i)`: every node except `i`.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> {
        (0..self.nodes.len()).filter(move |&j| j != i)
    }

    /// Ordered pairs `(i, j)`, `i != j`, that carry an edge.
    pub fn edge_keys(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.nodes.len();
        (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
    }

    /// `h^(0)` as an `n × width` matrix.
    pub fn node_features(&self, cfg: &NodeFeatureConfig, emb: &NodeEmbeddings) -> Tensor {
        let w = cfg.input_width();
        let mut values = vec![0.0; self.nodes.len() * w];
        for (node, row) in self.nodes.iter().zip(values.chunks_mut(w)) {
            node.write_features(cfg, emb, row);
        }
        Tensor::matrix(self.nodes.len(), w, values).expect("embedding tables are finite")
    }
}

fn check_events(doc_id: &str, events: &[Event]) -> Result<()> {
    if events.len() < 2 {
        return Err(Error::Validation(format!(
            "document '{doc_id}' has {} event(s); a graph needs at least 2",
            events.len()
        )));
    }
    Ok(())
}

/// Builds the graph for `doc_id`, pulling `p_ij` for every ordered pair from `table`.
///
/// Node `k` is `events[k]`; table lookups use the events' order indices, so a
/// permuted event slice yields the correspondingly permuted graph.
pub fn build_graph(
    doc_id: &str,
    events: &[Event],
    table: &ProbTable,
    cfg: &NodeFeatureConfig,
) -> Result<DocumentGraph> {
    check_events(doc_id, events)?;
    let n = events.len();
    let c = table.label_set.len();
    let mut edges = vec![0.0; n * n * c];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (oi, oj) = (events[i].order_index, events[j].order_index);
            let p = table.get(doc_id, oi, oj).ok_or_else(|| Error::MissingPair {
                doc: doc_id.to_string(),
                i: oi,
                j: oj,
            })?;
            edges[(i * n + j) * c..(i * n + j + 1) * c].copy_from_slice(p.values());
        }
    }
    Ok(DocumentGraph {
        doc_id: doc_id.to_string(),
        nodes: events.iter().map(|e| NodeInput::from_event(e, cfg)).collect(),
        num_classes: c,
        edges: Some(edges),
    })
}

/// Graph with nodes only, for models that ignore edge features.
pub fn build_graph_structure(
    doc_id: &str,
    events: &[Event],
    num_classes: usize,
    cfg: &NodeFeatureConfig,
) -> Result<DocumentGraph> {
    check_events(doc_id, events)?;
    Ok(DocumentGraph {
        doc_id: doc_id.to_string(),
        nodes: events.iter().map(|e| NodeInput::from_event(e, cfg)).collect(),
        num_classes,
        edges: None,
    })
}

/// Test and oracle helper: a graph from explicit nodes and a dense edge array.
pub fn graph_from_parts(
    doc_id: &str,
    nodes: Vec<NodeInput>,
    num_classes: usize,
    edges: Option<Vec<f64>>,
) -> Result<DocumentGraph> {
    let n = nodes.len();
    if n < 2 {
        return Err(Error::Validation("a graph needs at least 2 nodes".into()));
    }
    if let Some(e) = &edges {
        if e.len() != n * n * num_classes {
            return Err(Error::shape(
                "graph_from_parts",
                format!("{} edge values for {n} nodes and {num_classes} classes", e.len()),
            ));
        }
    }
    Ok(DocumentGraph {
        doc_id: doc_id.to_string(),
        nodes,
        num_classes,
        edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelSet;
    use crate::probs::synth_prob_table;
    use crate::tensor::xavier_init;

    fn events(doc: &str, types: &[&str]) -> Vec<Event> {
        types
            .iter()
            .enumerate()
            .map(|(k, t)| Event {
                doc_id: doc.into(),
                order_index: k,
                event_type: t.to_string(),
                surface: format!("e{k}"),
                extra: None,
            })
            .collect()
    }

    fn dataset(n: usize) -> Dataset {
        let mut ds = Dataset::empty(LabelSet::matres());
        let types = ["OCCURRENCE", "STATE", "REPORTING"];
        let t: Vec<&str> = (0..n).map(|k| types[k % 3]).collect();
        ds.documents.insert("d".into(), events("d", &t));
        ds
    }

    fn cfg_for(ds: &Dataset) -> NodeFeatureConfig {
        NodeFeatureConfig::new(8, OrderEncoding::Sinusoidal)
            .unwrap()
            .with_vocab_from([ds])
    }

    fn emb(cfg: &NodeFeatureConfig, seed: u64) -> NodeEmbeddings {
        NodeEmbeddings {
            type_table: xavier_init(cfg.vocab_size(), cfg.half(), seed),
            order_table: None,
        }
    }

    #[test]
    fn edge_counts() {
        for (n, expected) in [(2usize, 2usize), (3, 6), (8, 56)] {
            let ds = dataset(n);
            let table = synth_prob_table(&ds, 3.0, 0.1, 1).unwrap();
            let g = build_graph("d", &ds.documents["d"], &table, &cfg_for(&ds)).unwrap();
            assert_eq!(g.edge_count(), expected);
            assert_eq!(g.edge_keys().count(), expected);
            assert!(g.edge_keys().all(|(i, j)| i != j));
            assert!((0..n).all(|i| g.edge(i, i).is_none()));
            assert!((0..n).all(|i| g.neighbors(i).count() == n - 1));
        }
    }

    #[test]
    fn edge_values_are_table_values_bitwise() {
        let ds = dataset(8);
        let table = synth_prob_table(&ds, 2.0, 0.3, 4).unwrap();
        let g = build_graph("d", &ds.documents["d"], &table, &cfg_for(&ds)).unwrap();
        let want = table.get("d", 2, 5).unwrap().values();
        let got = g.edge(2, 5).unwrap();
        assert!(want.iter().zip(got).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn missing_pair_and_single_event_rejected() {
        let ds = dataset(3);
        let mut table = synth_prob_table(&ds, 2.0, 0.0, 4).unwrap();
        table.entries.remove(&("d".to_string(), 2, 0));
        let err = build_graph("d", &ds.documents["d"], &table, &cfg_for(&ds)).unwrap_err();
        assert!(matches!(err, Error::MissingPair { i: 2, j: 0, .. }), "{err}");
        let one = events("s", &["X"]);
        assert!(build_graph("s", &one, &table, &cfg_for(&ds)).is_err());
    }

    #[test]
    fn sinusoidal_position_zero() {
        let pe = sinusoidal_encoding(0, 6);
        assert_eq!(pe, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let p1 = sinusoidal_encoding(1, 4);
        assert!((p1[0] - 1f64.sin()).abs() < 1e-15);
        assert!((p1[3] - (0.01f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn node_feature_halves() {
        let ds = dataset(4);
        let cfg = cfg_for(&ds);
        let e = emb(&cfg, 3);
        let evs = &ds.documents["d"];
        let h0 = init_node_features(&evs[0], &cfg, &e);
        assert_eq!(&h0.values()[..4], &[0.0, 1.0, 0.0, 1.0]);
        // events 0 and 3 are both OCCURRENCE
        let h3 = init_node_features(&evs[3], &cfg, &e);
        assert_eq!(&h0.values()[4..], &h3.values()[4..]);
        let mut unseen = evs[1].clone();
        unseen.event_type = "NEVER_SEEN".into();
        let hu = init_node_features(&unseen, &cfg, &e);
        assert_eq!(&hu.values()[4..], e.type_table.row(UNK_TYPE));
        assert_eq!(hu, init_node_features(&unseen, &cfg, &emb(&cfg, 3)));
    }

    #[test]
    fn learned_order_rows() {
        let ds = dataset(5);
        let cfg = NodeFeatureConfig::new(4, OrderEncoding::Learned { max_order: 3 })
            .unwrap()
            .with_vocab_from([&ds]);
        let e = NodeEmbeddings {
            type_table: xavier_init(cfg.vocab_size(), 2, 1),
            order_table: Some(xavier_init(3, 2, 2)),
        };
        let evs = &ds.documents["d"];
        let h4 = init_node_features(&evs[4], &cfg, &e);
        assert_eq!(&h4.values()[..2], e.order_table.as_ref().unwrap().row(2));
    }

    #[test]
    fn d_h_must_be_even() {
        assert!(NodeFeatureConfig::new(7, OrderEncoding::Sinusoidal).is_err());
        assert!(NodeFeatureConfig::new(0, OrderEncoding::Sinusoidal).is_err());
    }

    #[test]
    fn relabeling_permutes_features() {
        let ds = dataset(5);
        let cfg = cfg_for(&ds);
        let e = emb(&cfg, 9);
        let table = synth_prob_table(&ds, 2.0, 0.2, 8).unwrap();
        let g = build_graph("d", &ds.documents["d"], &table, &cfg).unwrap();
        let perm = [3usize, 0, 4, 1, 2]; // old node k becomes node perm[k]
        let mut shuffled = ds.documents["d"].clone();
        for (k, ev) in ds.documents["d"].iter().enumerate() {
            shuffled[perm[k]] = ev.clone();
        }
        let gp = build_graph("d", &shuffled, &table, &cfg).unwrap();
        assert_eq!(gp.edge_count(), g.edge_count());
        for (i, j) in g.edge_keys() {
            assert_eq!(g.edge(i, j), gp.edge(perm[i], perm[j]));
        }
        let (h, hp) = (g.node_features(&cfg, &e), gp.node_features(&cfg, &e));
        for (k, &pk) in perm.iter().enumerate() {
            assert_eq!(h.row(k), hp.row(pk));
        }
    }
}
