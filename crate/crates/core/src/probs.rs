//! Per-pair class-probability distributions used as edge features.
//!
//! Interchange format (JSON Lines): a header
//! `{"label_set": ["BEFORE", ...], "provenance": "..."}` followed by one row per
//! ordered pair, either `{"doc": id, "i": 0, "j": 1, "probs": [...]}` or
//! `{"doc": id, "i": 0, "j": 1, "logits": [...]}`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelSet};
use crate::error::{Error, Result};
use crate::tensor::{argmax, softmax_slice, Tensor};

/// Runtime simplex tolerance.
pub const SIMPLEX_TOL: f64 = 1e-6;
/// Tolerance accepted from files before renormalisation.
pub const LOAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbDistribution(Vec<f64>);

impl ProbDistribution {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_simplex(&values, SIMPLEX_TOL)?;
        Ok(Self(values))
    }

    /// Accepts values within `tol` of the simplex and renormalises them.
    pub fn renormalized(mut values: Vec<f64>, tol: f64) -> Result<Self> {
        check_simplex(&values, tol)?;
        let s: f64 = values.iter().sum();
        // Already exact up to rounding: keep the stored bits.
        if (s - 1.0).abs() > 1e-12 || values.iter().any(|v| *v < 0.0 || *v > 1.0) {
            values.iter_mut().for_each(|v| *v = (*v / s).clamp(0.0, 1.0));
        }
        Ok(Self(values))
    }

    pub fn one_hot(c: usize, idx: usize) -> Self {
        let mut v = vec![0.0; c];
        v[idx] = 1.0;
        Self(v)
    }

    pub fn uniform(c: usize) -> Self {
        Self(vec![1.0 / c as f64; c])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// One-hot at the argmax (ties to the lowest index).
    pub fn harden(&self) -> Self {
        Self::one_hot(self.0.len(), self.argmax())
    }
}

fn check_simplex(values: &[f64], tol: f64) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Validation("empty probability vector".into()));
    }
    if let Some(v) = values
        .iter()
        .find(|v| !v.is_finite() || **v < -tol || **v > 1.0 + tol)
    {
        return Err(Error::Validation(format!("probability {v} outside [0, 1]")));
    }
    let s: f64 = values.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(Error::Validation(format!("probabilities sum to {s}, not 1")));
    }
    Ok(())
}

/// Softmax over classifier logits.
pub fn softmax_from_logits(logits: &Tensor, label_set: &LabelSet) -> Result<ProbDistribution> {
    if logits.shape() != [label_set.len()] {
        return Err(Error::shape(
            "softmax_from_logits",
            format!("logits {:?} for {} labels", logits.shape(), label_set.len()),
        ));
    }
    Ok(ProbDistribution(softmax_slice(logits.values())?))
}

pub type PairKey = (String, usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ProbTable {
    pub label_set: LabelSet,
    pub entries: BTreeMap<PairKey, ProbDistribution>,
    pub provenance: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    label_set: Vec<String>,
    provenance: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Row {
    doc: String,
    i: usize,
    j: usize,
    #[serde(default)]
    probs: Option<Vec<f64>>,
    #[serde(default)]
    logits: Option<Vec<f64>>,
}

impl ProbTable {
    pub fn new(label_set: LabelSet, provenance: impl Into<String>) -> Self {
        Self {
            label_set,
            entries: BTreeMap::new(),
            provenance: provenance.into(),
        }
    }

    pub fn get(&self, doc: &str, i: usize, j: usize) -> Option<&ProbDistribution> {
        self.entries.get(&(doc.to_string(), i, j))
    }

    pub fn insert(&mut self, doc: &str, i: usize, j: usize, p: ProbDistribution) -> Result<()> {
        if i == j {
            return Err(Error::Validation(format!("self pair ({doc}, {i}, {i})")));
        }
        if p.len() != self.label_set.len() {
            return Err(Error::shape(
                "ProbTable::insert",
                format!("distribution of width {} for {} labels", p.len(), self.label_set.len()),
            ));
        }
        self.entries.insert((doc.to_string(), i, j), p);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The w/o-PI view: every distribution replaced by its one-hot argmax.
    pub fn hardened(&self) -> Self {
        Self {
            label_set: self.label_set.clone(),
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.harden()))
                .collect(),
            provenance: format!("{}+hardened", self.provenance),
        }
    }

    /// First ordered pair of `dataset`'s documents without an entry.
    pub fn first_missing(&self, dataset: &Dataset) -> Option<PairKey> {
        for (doc, events) in &dataset.documents {
            let n = events.len();
            for i in 0..n {
                for j in 0..n {
                    if i != j && self.get(doc, i, j).is_none() {
                        return Some((doc.clone(), i, j));
                    }
                }
            }
        }
        None
    }

    pub fn check_covers(&self, dataset: &Dataset) -> Result<()> {
        match self.first_missing(dataset) {
            Some((doc, i, j)) => Err(Error::MissingPair { doc, i, j }),
            None => Ok(()),
        }
    }

    pub fn merge(&mut self, other: ProbTable) -> Result<()> {
        if other.label_set.labels() != self.label_set.labels() {
            return Err(Error::Validation("cannot merge tables with different label sets".into()));
        }
        self.entries.extend(other.entries);
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::json!({
            "label_set": self.label_set.labels(),
            "provenance": self.provenance,
        })
        .to_string();
        out.push('\n');
        for ((doc, i, j), p) in &self.entries {
            let row = serde_json::json!({ "doc": doc, "i": i, "j": j, "probs": p.values() });
            out.push_str(&row.to_string());
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_prob_table(path: impl AsRef<Path>, label_set: &LabelSet) -> Result<ProbTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_prob_table_str(&text, label_set, path)
}

pub fn parse_prob_table_str(text: &str, label_set: &LabelSet, source: &Path) -> Result<ProbTable> {
    let fail = |line: usize, message: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (hline, htext) = lines
        .next()
        .ok_or_else(|| fail(1, "empty probability file: header line required".into()))?;
    let header: Header = serde_json::from_str(htext)
        .map_err(|e| fail(hline, format!("bad header (expected label_set and provenance): {e}")))?;
    // Column c of the file holds label `perm[c]` of `label_set`.
    if header.label_set.len() != label_set.len() {
        return Err(fail(
            hline,
            format!(
                "header lists {} labels, label set '{}' has {}",
                header.label_set.len(),
                label_set.name,
                label_set.len()
            ),
        ));
    }
    let mut perm = Vec::with_capacity(label_set.len());
    for l in &header.label_set {
        let idx = label_set.resolve(l).map_err(|m| fail(hline, m))?;
        if perm.contains(&idx) {
            return Err(fail(hline, format!("header repeats label '{l}'")));
        }
        perm.push(idx);
    }

    let mut table = ProbTable::new(label_set.clone(), header.provenance);
    for (line_no, raw) in lines {
        let row: Row =
            serde_json::from_str(raw).map_err(|e| fail(line_no, format!("bad row: {e}")))?;
        let key = format!("({}, {}, {})", row.doc, row.i, row.j);
        if row.i == row.j {
            return Err(fail(line_no, format!("self pair {key} is not allowed")));
        }
        let raw_values = match (row.probs, row.logits) {
            (Some(p), None) => p,
            (None, Some(z)) => {
                if z.len() != label_set.len() {
                    return Err(fail(
                        line_no,
                        format!("{key}: {} logits for {} labels", z.len(), label_set.len()),
                    ));
                }
                softmax_slice(&z).map_err(|e| fail(line_no, format!("{key}: {e}")))?
            }
            _ => {
                return Err(fail(
                    line_no,
                    format!("{key}: exactly one of 'probs' or 'logits' is required"),
                ))
            }
        };
        if raw_values.len() != label_set.len() {
            return Err(fail(
                line_no,
                format!("{key}: {} values for {} labels", raw_values.len(), label_set.len()),
            ));
        }
        let mut ordered = vec![0.0; label_set.len()];
        for (c, v) in raw_values.into_iter().enumerate() {
            ordered[perm[c]] = v;
        }
        let dist = ProbDistribution::renormalized(ordered, LOAD_TOL)
            .map_err(|e| fail(line_no, format!("{key}: {e}")))?;
        let k = (row.doc, row.i, row.j);
        if table.entries.contains_key(&k) {
            return Err(fail(line_no, format!("duplicate row for {key}")));
        }
        table.entries.insert(k, dist);
    }
    Ok(table)
}

/// Parameters of the synthetic provider.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthProbSpec {
    pub sharpness: f64,
    pub flip_rate: f64,
    /// Standard deviation of the logit noise, relative to `sharpness`.
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.1
}

impl SynthProbSpec {
    pub fn new(sharpness: f64, flip_rate: f64, seed: u64) -> Self {
        Self {
            sharpness,
            flip_rate,
            noise: default_noise(),
            seed,
        }
    }
}

/// Generates a distribution for every ordered pair of every document.
///
/// For each pair the target is the gold label (or the converse of the reverse
/// pair's gold, or a random label when neither direction is annotated),
/// replaced by a uniformly chosen wrong label with probability `flip_rate`.
/// The distribution is `softmax(sharpness · (onehot(target) + noise · ε))`
/// with standard normal `ε`.
pub fn synth_prob_table(dataset: &Dataset, sharpness: f64, flip_rate: f64, seed: u64) -> Result<ProbTable> {
    synth_prob_table_with(dataset, &SynthProbSpec::new(sharpness, flip_rate, seed))
}

pub fn synth_prob_table_with(dataset: &Dataset, spec: &SynthProbSpec) -> Result<ProbTable> {
    if !(spec.sharpness > 0.0 && spec.sharpness.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sharpness must be positive, got {}",
            spec.sharpness
        )));
    }
    if !(0.0..=1.0).contains(&spec.flip_rate) {
        return Err(Error::InvalidArgument(format!(
            "flip_rate must lie in [0, 1], got {}",
            spec.flip_rate
        )));
    }
    let c = dataset.num_classes();
    let mut gold: BTreeMap<(&str, usize, usize), usize> = BTreeMap::new();
    for p in &dataset.pairs {
        gold.insert((p.doc_id.as_str(), p.i, p.j), p.gold);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut table = ProbTable::new(
        dataset.label_set.clone(),
        format!(
            "synthetic:sharpness={},flip_rate={},noise={},seed={}",
            spec.sharpness, spec.flip_rate, spec.noise, spec.seed
        ),
    );
    for (doc, events) in &dataset.documents {
        let n = events.len();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let base = match (gold.get(&(doc.as_str(), i, j)), gold.get(&(doc.as_str(), j, i))) {
                    (Some(&g), _) => g,
                    (None, Some(&g)) => dataset.label_set.converse(g),
                    (None, None) => rng.random_range(0..c),
                };
                let target = if rng.random::<f64>() < spec.flip_rate {
                    let k = rng.random_range(0..c - 1);
                    if k >= base {
                        k + 1
                    } else {
                        k
                    }
                } else {
                    base
                };
                let logits: Vec<f64> = (0..c)
                    .map(|k| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        let hot = if k == target { 1.0 } else { 0.0 };
                        spec.sharpness * (hot + spec.noise * e)
                    })
                    .collect();
                table.insert(doc, i, j, ProbDistribution(softmax_slice(&logits)?))?;
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Event, EventPairInstance};
    use proptest::prelude::*;
    use rand::Rng;

    fn parse(text: &str) -> Result<ProbTable> {
        parse_prob_table_str(text, &LabelSet::matres(), Path::new("p.jsonl"))
    }

    const HEADER: &str = r#"{"label_set": ["BEFORE", "AFTER", "EQUAL", "VAGUE"], "provenance": "test"}"#;

    #[test]
    fn logits_to_probs() {
        let ls = LabelSet::matres();
        let u = softmax_from_logits(&Tensor::vector(vec![3.0; 4]).unwrap(), &ls).unwrap();
        assert_eq!(u.values(), &[0.25; 4]);
        let sharp =
            softmax_from_logits(&Tensor::vector(vec![10.0, -10.0, -10.0, -10.0]).unwrap(), &ls)
                .unwrap();
        // e^20 / (e^20 + 3)
        let oracle = 1.0 / (1.0 + 3.0 * (-20.0f64).exp());
        assert!((sharp.values()[0] - oracle).abs() < 1e-15 && sharp.values()[0] > 0.999);
        let a = softmax_from_logits(&Tensor::vector(vec![1.0, 2.0, 0.5, -1.0]).unwrap(), &ls).unwrap();
        let b = softmax_from_logits(&Tensor::vector(vec![101.0, 102.0, 100.5, 99.0]).unwrap(), &ls).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(softmax_from_logits(&Tensor::vector(vec![0.0; 3]).unwrap(), &ls).is_err());
    }

    #[test]
    fn load_probs_and_logits() {
        let text = format!(
            "{HEADER}\n{{\"doc\": \"d\", \"i\": 0, \"j\": 1, \"probs\": [0.7, 0.2, 0.05, 0.05]}}\n{{\"doc\": \"d\", \"i\": 1, \"j\": 0, \"logits\": [2, 1, 0, 0]}}\n"
        );
        let t = parse(&text).unwrap();
        assert_eq!(t.get("d", 0, 1).unwrap().values(), &[0.7, 0.2, 0.05, 0.05]);
        let e = [2f64.exp(), 1f64.exp(), 1.0, 1.0];
        let s: f64 = e.iter().sum();
        for (g, x) in t.get("d", 1, 0).unwrap().values().iter().zip(e) {
            assert!((g - x / s).abs() < 1e-15);
        }
        assert_eq!(t.provenance, "test");
    }

    #[test]
    fn bad_rows_rejected_with_key() {
        let over = format!("{HEADER}\n{{\"doc\": \"d\", \"i\": 0, \"j\": 1, \"probs\": [0.7, 0.3, 0.1, 0.1]}}");
        let err = parse(&over).unwrap_err();
        assert_eq!(err.line(), Some(2));
        assert!(err.to_string().contains("(d, 0, 1)"), "{err}");
        let selfp = format!("{HEADER}\n{{\"doc\": \"d\", \"i\": 2, \"j\": 2, \"probs\": [1, 0, 0, 0]}}");
        assert!(parse(&selfp).is_err());
        let both = format!("{HEADER}\n{{\"doc\": \"d\", \"i\": 0, \"j\": 1, \"probs\": [1, 0, 0, 0], \"logits\": [1, 0, 0, 0]}}");
        assert!(parse(&both).is_err());
        let narrow = format!("{HEADER}\n{{\"doc\": \"d\", \"i\": 0, \"j\": 1, \"probs\": [1, 0, 0]}}");
        assert!(parse(&narrow).is_err());
        assert!(parse(r#"{"doc": "d", "i": 0, "j": 1, "probs": [1, 0, 0, 0]}"#).is_err());
        assert!(parse("").is_err());
    }

    #[test]
    fn small_drift_is_renormalised() {
        let text = format!("{HEADER}\n{{\"doc\": \"d\", \"i\": 0, \"j\": 1, \"probs\": [0.70003, 0.2, 0.05, 0.05]}}");
        let t = parse(&text).unwrap();
        let s: f64 = t.get("d", 0, 1).unwrap().values().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn header_order_is_honoured() {
        let text = "{\"label_set\": [\"VAGUE\", \"EQUAL\", \"AFTER\", \"BEFORE\"], \"provenance\": \"x\"}\n{\"doc\": \"d\", \"i\": 0, \"j\": 1, \"probs\": [0.1, 0.2, 0.3, 0.4]}";
        let t = parse(text).unwrap();
        assert_eq!(t.get("d", 0, 1).unwrap().values(), &[0.4, 0.3, 0.2, 0.1]);
    }

    #[test]
    fn harden_cases() {
        let p = ProbDistribution::new(vec![0.7, 0.2, 0.1]).unwrap();
        assert_eq!(p.harden().values(), &[1.0, 0.0, 0.0]);
        let tie = ProbDistribution::new(vec![0.5, 0.5, 0.0]).unwrap();
        assert_eq!(tie.harden().values(), &[1.0, 0.0, 0.0]);
        assert_eq!(p.harden().harden(), p.harden());
    }

    fn grid_dataset(docs: usize, n: usize, seed: u64) -> Dataset {
        let mut ds = Dataset::empty(LabelSet::matres());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for d in 0..docs {
            let id = format!("d{d}");
            ds.documents.insert(
                id.clone(),
                (0..n)
                    .map(|k| Event {
                        doc_id: id.clone(),
                        order_index: k,
                        event_type: "T".into(),
                        surface: String::new(),
                        extra: None,
                    })
                    .collect(),
            );
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        ds.pairs.push(EventPairInstance {
                            doc_id: id.clone(),
                            i,
                            j,
                            gold: rng.random_range(0..4),
                            distance: i.abs_diff(j) - 1,
                        });
                    }
                }
            }
        }
        ds
    }

    #[test]
    fn synth_clean_and_sharp_matches_gold() {
        let ds = grid_dataset(10, 6, 1);
        let t = synth_prob_table(&ds, 20.0, 0.0, 3).unwrap();
        for p in &ds.pairs {
            assert_eq!(t.get(&p.doc_id, p.i, p.j).unwrap().argmax(), p.gold);
        }
        t.check_covers(&ds).unwrap();
    }

    #[test]
    fn synth_flat_limit_is_uniform() {
        let ds = grid_dataset(2, 4, 1);
        let t = synth_prob_table(&ds, 1e-9, 0.0, 3).unwrap();
        for p in t.entries.values() {
            assert!(p.values().iter().all(|v| (v - 0.25).abs() < 1e-8));
        }
    }

    #[test]
    fn synth_flip_rate_monte_carlo() {
        // 10 docs of 32 events: 9,920 labelled ordered pairs.
        let ds = grid_dataset(10, 32, 5);
        let t = synth_prob_table(&ds, 20.0, 0.2, 9).unwrap();
        let agree = ds
            .pairs
            .iter()
            .filter(|p| t.get(&p.doc_id, p.i, p.j).unwrap().argmax() == p.gold)
            .count() as f64
            / ds.pairs.len() as f64;
        assert!((agree - 0.8).abs() < 0.02, "agreement {agree}");
    }

    #[test]
    fn synth_is_reproducible() {
        let ds = grid_dataset(3, 5, 2);
        let a = synth_prob_table(&ds, 4.0, 0.3, 11).unwrap();
        let b = synth_prob_table(&ds, 4.0, 0.3, 11).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        let c = synth_prob_table(&ds, 4.0, 0.3, 12).unwrap();
        assert_ne!(a.to_jsonl(), c.to_jsonl());
    }

    #[test]
    fn table_round_trip() {
        let ds = grid_dataset(2, 4, 3);
        let t = synth_prob_table(&ds, 3.0, 0.1, 1).unwrap();
        let back = parse(&t.to_jsonl()).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn harden_preserves_argmax(raw in prop::collection::vec(0.0f64..1.0, 2..8)) {
            let s: f64 = raw.iter().sum();
            prop_assume!(s > 1e-6);
            let p = ProbDistribution::new(raw.iter().map(|v| v / s).collect()).unwrap();
            let h = p.harden();
            prop_assert_eq!(h.argmax(), p.argmax());
            prop_assert_eq!(h.values().iter().sum::<f64>(), 1.0);
            prop_assert_eq!(h.harden(), h.clone());
        }

        #[test]
        fn synth_rows_are_simplex(sharp in 0.01f64..30.0, flip in 0.0f64..1.0, seed in 0u64..100) {
            let ds = grid_dataset(1, 4, seed);
            let t = synth_prob_table(&ds, sharp, flip, seed).unwrap();
            for p in t.entries.values() {
                prop_assert!(ProbDistribution::new(p.values().to_vec()).is_ok());
            }
        }
    }
}
