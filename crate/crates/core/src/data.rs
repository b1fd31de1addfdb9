//! Corpus representation: label sets, events, directed event pairs.
//!
//! The on-disk corpus is JSON Lines. A document line
//! `{"doc": id, "events": [{"idx": 0, "type": "OCCURRENCE", "surface": "said"}, ...]}`
//! must precede every pair line `{"pair": {"doc": id, "i": 0, "j": 1, "gold": "BEFORE"}}`
//! that refers to it. Events may carry an optional `"extra": [f64, ...]` vector of
//! externally computed features, and pairs an optional `"distance"` which is
//! checked against the order indices.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub name: String,
    labels: Vec<String>,
    excluded_for_micro: Option<String>,
}

impl LabelSet {
    pub fn new(
        name: impl Into<String>,
        labels: Vec<String>,
        excluded_for_micro: Option<String>,
    ) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Validation(format!(
                "a label set needs at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if l.is_empty() {
                return Err(Error::Validation("empty label name".into()));
            }
            if !seen.insert(l.as_str()) {
                return Err(Error::Validation(format!("duplicate label '{l}'")));
            }
        }
        if let Some(ex) = &excluded_for_micro {
            if !seen.contains(ex.as_str()) {
                return Err(Error::Validation(format!(
                    "excluded label '{ex}' is not in the label set"
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            labels,
            excluded_for_micro,
        })
    }

    pub fn tb_dense() -> Self {
        let labels = ["BEFORE", "AFTER", "INCLUDES", "IS_INCLUDED", "SIMULTANEOUS", "VAGUE"];
        Self::new(
            "tb-dense",
            labels.iter().map(|s| s.to_string()).collect(),
            Some("VAGUE".into()),
        )
        .expect("builtin label set")
    }

    pub fn matres() -> Self {
        let labels = ["BEFORE", "AFTER", "EQUAL", "VAGUE"];
        Self::new(
            "matres",
            labels.iter().map(|s| s.to_string()).collect(),
            Some("VAGUE".into()),
        )
        .expect("builtin label set")
    }

    /// Looks up a builtin set by name (`tb-dense`/`tbdense`, `matres`).
    pub fn builtin(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace('_', "-").as_str() {
            "tb-dense" | "tbdense" => Ok(Self::tb_dense()),
            "matres" => Ok(Self::matres()),
            other => Err(Error::Config(format!(
                "unknown label set '{other}' (builtin: tb-dense, matres)"
            ))),
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn excluded_for_micro(&self) -> Option<&str> {
        self.excluded_for_micro.as_deref()
    }

    pub fn excluded_index(&self) -> Option<usize> {
        self.excluded_for_micro.as_deref().and_then(|l| self.index_of(l))
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, idx: usize) -> &str {
        &self.labels[idx]
    }

    /// Resolves a label, with a nearest-match hint on failure.
    pub fn resolve(&self, label: &str) -> std::result::Result<usize, String> {
        self.index_of(label).ok_or_else(|| {
            let nearest = self
                .labels
                .iter()
                .min_by_key(|l| strsim::levenshtein(l, label))
                .expect("label set is nonempty");
            format!("unknown label '{label}' (nearest valid label: '{nearest}')")
        })
    }

    /// Label of the reversed pair `(j, i)` for the usual temporal relations.
    /// Labels without a known converse map to themselves.
    pub fn converse(&self, idx: usize) -> usize {
        let partner = match self.labels[idx].as_str() {
            "BEFORE" => "AFTER",
            "AFTER" => "BEFORE",
            "INCLUDES" => "IS_INCLUDED",
            "IS_INCLUDED" => "INCLUDES",
            _ => return idx,
        };
        self.index_of(partner).unwrap_or(idx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub doc_id: String,
    pub order_index: usize,
    pub event_type: String,
    pub surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventPairInstance {
    pub doc_id: String,
    pub i: usize,
    pub j: usize,
    /// Index into the dataset's label set.
    pub gold: usize,
    pub distance: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub label_set: LabelSet,
    /// Events per document, sorted by `order_index`.
    pub documents: BTreeMap<String, Vec<Event>>,
    pub pairs: Vec<EventPairInstance>,
    pub split: Option<Split>,
}

/// Number of events strictly between `i` and `j`.
pub fn pair_distance(doc: &[Event], i: usize, j: usize) -> Result<usize> {
    if i == j {
        return Err(Error::InvalidArgument(format!(
            "pair distance needs two distinct events, got ({i}, {i})"
        )));
    }
    if i >= doc.len() || j >= doc.len() {
        return Err(Error::InvalidArgument(format!(
            "event index out of range: ({i}, {j}) in a document of {} events",
            doc.len()
        )));
    }
    Ok(i.abs_diff(j) - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassShare {
    pub label: String,
    pub count: usize,
    pub fraction: f64,
}

impl Dataset {
    pub fn empty(label_set: LabelSet) -> Self {
        Self {
            label_set,
            documents: BTreeMap::new(),
            pairs: Vec::new(),
            split: None,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }

    pub fn num_classes(&self) -> usize {
        self.label_set.len()
    }

    /// Pairs grouped by document, keeping each group's original order.
    pub fn pairs_by_doc(&self) -> BTreeMap<&str, Vec<&EventPairInstance>> {
        let mut out: BTreeMap<&str, Vec<&EventPairInstance>> = BTreeMap::new();
        for p in &self.pairs {
            out.entry(p.doc_id.as_str()).or_default().push(p);
        }
        out
    }

    /// Width of the optional per-event feature vector (0 when absent).
    pub fn extra_width(&self) -> usize {
        self.documents
            .values()
            .flatten()
            .find_map(|e| e.extra.as_ref().map(Vec::len))
            .unwrap_or(0)
    }

    /// Label counts and shares in label-set order.
    pub fn class_histogram(&self) -> Result<Vec<ClassShare>> {
        if self.pairs.is_empty() {
            return Err(Error::InvalidArgument(
                "class histogram of a dataset without pairs".into(),
            ));
        }
        let mut counts = vec![0usize; self.num_classes()];
        for p in &self.pairs {
            counts[p.gold] += 1;
        }
        let total = self.pairs.len() as f64;
        Ok(counts
            .into_iter()
            .enumerate()
            .map(|(k, count)| ClassShare {
                label: self.label_set.label(k).to_string(),
                count,
                fraction: count as f64 / total,
            })
            .collect())
    }

    /// Serialises to the corpus JSON Lines format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (doc, events) in &self.documents {
            let evs: Vec<Value> = events
                .iter()
                .map(|e| {
                    let mut v = serde_json::json!({
                        "idx": e.order_index,
                        "type": e.event_type,
                        "surface": e.surface,
                    });
                    if let Some(x) = &e.extra {
                        v["extra"] = serde_json::json!(x);
                    }
                    v
                })
                .collect();
            out.push_str(&serde_json::json!({ "doc": doc, "events": evs }).to_string());
            out.push('\n');
        }
        for p in &self.pairs {
            let line = serde_json::json!({
                "pair": {
                    "doc": p.doc_id,
                    "i": p.i,
                    "j": p.j,
                    "gold": self.label_set.label(p.gold),
                }
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EventRecord {
    idx: usize,
    #[serde(rename = "type")]
    event_type: String,
    surface: String,
    #[serde(default)]
    extra: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocRecord {
    doc: String,
    events: Vec<EventRecord>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    doc: String,
    i: usize,
    j: usize,
    gold: String,
    #[serde(default)]
    distance: Option<usize>,
}

pub fn parse_corpus(path: impl AsRef<Path>, label_set: &LabelSet) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus_str(&text, label_set, path)
}

/// Parses corpus text; `source` is only used in error messages.
pub fn parse_corpus_str(text: &str, label_set: &LabelSet, source: &Path) -> Result<Dataset> {
    let fail = |line: usize, message: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut ds = Dataset::empty(label_set.clone());
    let mut seen_pairs: HashSet<(String, usize, usize)> = HashSet::new();
    let mut extra_width: Option<usize> = None;
    let mut doc_lines: HashMap<String, usize> = HashMap::new();

    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(raw).map_err(|e| fail(line_no, format!("malformed JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| fail(line_no, "expected a JSON object".into()))?;

        if obj.contains_key("pair") {
            let rec: PairRecord = serde_json::from_value(obj["pair"].clone())
                .map_err(|e| fail(line_no, format!("bad pair record: {e}")))?;
            let events = ds.documents.get(&rec.doc).ok_or_else(|| {
                fail(
                    line_no,
                    format!("pair refers to document '{}' with no preceding event line", rec.doc),
                )
            })?;
            if rec.i == rec.j {
                return Err(fail(line_no, format!("self pair ({}, {})", rec.i, rec.j)));
            }
            if rec.i >= events.len() || rec.j >= events.len() {
                return Err(fail(
                    line_no,
                    format!(
                        "dangling event reference ({}, {}) in document '{}' with {} events",
                        rec.i,
                        rec.j,
                        rec.doc,
                        events.len()
                    ),
                ));
            }
            let gold = label_set.resolve(&rec.gold).map_err(|m| fail(line_no, m))?;
            let distance = pair_distance(events, rec.i, rec.j).expect("checked above");
            if let Some(stored) = rec.distance {
                if stored != distance {
                    return Err(fail(
                        line_no,
                        format!("stored distance {stored} disagrees with order indices ({distance})"),
                    ));
                }
            }
            if !seen_pairs.insert((rec.doc.clone(), rec.i, rec.j)) {
                return Err(fail(
                    line_no,
                    format!("duplicate pair ({}, {}, {})", rec.doc, rec.i, rec.j),
                ));
            }
            ds.pairs.push(EventPairInstance {
                doc_id: rec.doc,
                i: rec.i,
                j: rec.j,
                gold,
                distance,
            });
        } else if obj.contains_key("doc") {
            let rec: DocRecord = serde_json::from_value(value.clone())
                .map_err(|e| fail(line_no, format!("bad document record: {e}")))?;
            if let Some(prev) = doc_lines.insert(rec.doc.clone(), line_no) {
                return Err(fail(
                    line_no,
                    format!("document '{}' already defined on line {prev}", rec.doc),
                ));
            }
            let mut events: Vec<Option<Event>> = vec![None; rec.events.len()];
            for ev in rec.events {
                if ev.idx >= events.len() {
                    return Err(fail(
                        line_no,
                        format!(
                            "order index {} is not contiguous from 0 ({} events)",
                            ev.idx,
                            events.len()
                        ),
                    ));
                }
                if events[ev.idx].is_some() {
                    return Err(fail(line_no, format!("duplicate order index {}", ev.idx)));
                }
                if let Some(x) = &ev.extra {
                    match extra_width {
                        None => extra_width = Some(x.len()),
                        Some(w) if w != x.len() => {
                            return Err(fail(
                                line_no,
                                format!("extra feature width {} differs from {w}", x.len()),
                            ))
                        }
                        _ => {}
                    }
                    if x.iter().any(|v| !v.is_finite()) {
                        return Err(fail(line_no, "non-finite extra feature".into()));
                    }
                }
                events[ev.idx] = Some(Event {
                    doc_id: rec.doc.clone(),
                    order_index: ev.idx,
                    event_type: ev.event_type,
                    surface: ev.surface,
                    extra: ev.extra,
                });
            }
            // Every slot is filled: indices are distinct and all < len.
            let events: Vec<Event> = events.into_iter().map(|e| e.expect("filled")).collect();
            ds.documents.insert(rec.doc, events);
        } else {
            return Err(fail(
                line_no,
                "line is neither a document nor a pair record".into(),
            ));
        }
    }

    if let Some(w) = extra_width {
        let missing = ds
            .documents
            .values()
            .flatten()
            .find(|e| e.extra.as_ref().map(Vec::len) != Some(w));
        if let Some(e) = missing {
            return Err(Error::Validation(format!(
                "event {} of document '{}' lacks the {w}-wide extra features other events carry",
                e.order_index, e.doc_id
            )));
        }
    }
    Ok(ds)
}
