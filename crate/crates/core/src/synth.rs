//! Synthetic corpora with known structure, paired with probability tables.
//!
//! * [`profile`]: i.i.d. gold labels drawn from class weights, with the
//!   generic sharpness/flip provider for edges.
//! * [`soft_vs_hard`]: a share of pairs whose gold label is the second-ranked
//!   class of its edge distribution.
//! * [`distance_trend`]: gold follows latent event times, while edge
//!   sharpness decays with the pair's distance.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{pair_distance, Dataset, Event, EventPairInstance, LabelSet, Split};
use crate::error::{Error, Result};
use crate::probs::{synth_prob_table_with, ProbDistribution, ProbTable, SynthProbSpec};
use crate::tensor::softmax_slice;

const EVENT_TYPES: [&str; 5] = ["occurrence", "state", "reporting", "action", "aspectual"];

/// Train/dev/test splits sharing one probability table.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub table: ProbTable,
}

impl Scenario {
    /// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl` and `probs.jsonl`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.write_jsonl(dir.join("train.jsonl"))?;
        self.dev.write_jsonl(dir.join("dev.jsonl"))?;
        self.test.write_jsonl(dir.join("test.jsonl"))?;
        self.table.write_jsonl(dir.join("probs.jsonl"))
    }

    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Document counts per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitSizes {
    fn total(&self) -> usize {
        self.train + self.dev + self.test
    }

    fn of(&self, k: usize) -> Split {
        if k < self.train {
            Split::Train
        } else if k < self.train + self.dev {
            Split::Dev
        } else {
            Split::Test
        }
    }
}

fn make_events(doc: &str, n: usize, rng: &mut ChaCha8Rng) -> Vec<Event> {
    (0..n)
        .map(|k| Event {
            doc_id: doc.to_string(),
            order_index: k,
            event_type: EVENT_TYPES[rng.random_range(0..EVENT_TYPES.len())].to_string(),
            surface: format!("ev{k}"),
            extra: None,
        })
        .collect()
}

/// Distributes generated documents and pairs into three datasets.
struct SplitBuilder {
    sets: [Dataset; 3],
    sizes: SplitSizes,
}

impl SplitBuilder {
    fn new(label_set: &LabelSet, sizes: SplitSizes) -> Self {
        let mk = |s| Dataset::empty(label_set.clone()).with_split(s);
        Self {
            sets: [mk(Split::Train), mk(Split::Dev), mk(Split::Test)],
            sizes,
        }
    }

    fn slot(&mut self, k: usize) -> &mut Dataset {
        match self.sizes.of(k) {
            Split::Train => &mut self.sets[0],
            Split::Dev => &mut self.sets[1],
            Split::Test => &mut self.sets[2],
        }
    }

    fn add_doc(&mut self, k: usize, events: Vec<Event>, pairs: Vec<EventPairInstance>) {
        let ds = self.slot(k);
        ds.documents.insert(events[0].doc_id.clone(), events);
        ds.pairs.extend(pairs);
    }

    fn finish(self, name: &str, table: ProbTable) -> Scenario {
        let [train, dev, test] = self.sets;
        Scenario {
            name: name.to_string(),
            train,
            dev,
            test,
            table,
        }
    }
}

fn pair(doc: &str, events: &[Event], i: usize, j: usize, gold: usize) -> EventPairInstance {
    EventPairInstance {
        doc_id: doc.to_string(),
        i,
        j,
        gold,
        distance: pair_distance(events, i, j).expect("indices in range"),
    }
}

/// Unordered pairs `{a, b}`, `a < b`, with `b - a - 1 <= max_distance`.
fn unordered_pairs(n: usize, max_distance: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .filter(|&(a, b)| b - a - 1 <= max_distance)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSpec {
    pub label_set: String,
    /// Relative class frequencies in label-set order.
    pub class_weights: Vec<f64>,
    pub docs: SplitSizes,
    pub events_per_doc: usize,
    /// Only pairs up to this distance are annotated.
    pub max_distance: usize,
    pub probs: SynthProbSpec,
    pub seed: u64,
}

impl ProfileSpec {
    /// A TB-Dense-like class profile with the given edge sharpness and flip rate.
    pub fn tb_dense_like(sharpness: f64, flip_rate: f64, seed: u64) -> Self {
        Self {
            label_set: "tb_dense".into(),
            // BEFORE, AFTER, INCLUDES, IS_INCLUDED, SIMULTANEOUS, VAGUE
            class_weights: vec![0.22, 0.18, 0.055, 0.07, 0.015, 0.46],
            docs: SplitSizes {
                train: 60,
                dev: 20,
                test: 20,
            },
            events_per_doc: 6,
            max_distance: usize::MAX,
            probs: SynthProbSpec::new(sharpness, flip_rate, seed.wrapping_add(1)),
            seed,
        }
    }
}

/// Gold labels drawn i.i.d. from class weights; edges from [`synth_prob_table_with`].
pub fn profile(spec: &ProfileSpec) -> Result<Scenario> {
    let ls = LabelSet::builtin(&spec.label_set)?;
    if spec.class_weights.len() != ls.len() {
        return Err(Error::Config(format!(
            "{} class weights for {} labels",
            spec.class_weights.len(),
            ls.len()
        )));
    }
    if spec.events_per_doc < 2 {
        return Err(Error::Config("events_per_doc must be at least 2".into()));
    }
    let weights = WeightedIndex::new(&spec.class_weights)
        .map_err(|e| Error::Config(format!("class weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = SplitBuilder::new(&ls, spec.docs);
    for k in 0..spec.docs.total() {
        let doc = format!("d{k:04}");
        let events = make_events(&doc, spec.events_per_doc, &mut rng);
        let pairs = unordered_pairs(spec.events_per_doc, spec.max_distance)
            .into_iter()
            .map(|(a, b)| {
                let (i, j) = if rng.random::<bool>() { (a, b) } else { (b, a) };
                pair(&doc, &events, i, j, weights.sample(&mut rng))
            })
            .collect();
        out.add_doc(k, events, pairs);
    }
    let mut all = Dataset::empty(ls);
    for ds in &out.sets {
        all.documents.extend(ds.documents.clone());
        all.pairs.extend(ds.pairs.iter().cloned());
    }
    let table = synth_prob_table_with(&all, &spec.probs)?;
    Ok(out.finish("profile", table))
}

/// The training-sanity corpus: no flips and sharp edges.
pub fn separable(seed: u64) -> Result<Scenario> {
    let mut s = profile(&ProfileSpec::tb_dense_like(20.0, 0.0, seed))?;
    s.name = "separable".into();
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftHardSpec {
    pub docs: SplitSizes,
    pub events_per_doc: usize,
    /// MATRES order: BEFORE, AFTER, EQUAL, VAGUE.
    pub class_weights: Vec<f64>,
    /// Share of pairs whose gold is the second-ranked class.
    pub flip_rate: f64,
    /// Top class shown for a flipped pair, per gold class.
    pub decoy: Vec<usize>,
    pub seed: u64,
}

impl SoftHardSpec {
    pub fn standard(seed: u64) -> Self {
        Self {
            // 15 pairs per document: 80 + 27 + 27 documents ≈ 2000 pairs.
            docs: SplitSizes {
                train: 80,
                dev: 27,
                test: 27,
            },
            events_per_doc: 6,
            class_weights: vec![0.48, 0.35, 0.02, 0.15],
            flip_rate: 0.3,
            // BEFORE→VAGUE, AFTER→BEFORE, EQUAL→BEFORE, VAGUE→AFTER
            decoy: vec![3, 0, 0, 1],
            seed,
        }
    }
}

/// Random positive masses summing to `total`.
fn spread(rng: &mut ChaCha8Rng, k: usize, total: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| total * v / s).collect()
}

/// Distribution with `top`/`second` masses on the given classes and the
/// remainder spread over the others.
fn ranked(rng: &mut ChaCha8Rng, c: usize, top: (usize, f64), second: Option<(usize, f64)>) -> Vec<f64> {
    let used = top.1 + second.map_or(0.0, |s| s.1);
    let others: Vec<usize> = (0..c)
        .filter(|&k| k != top.0 && second.is_none_or(|s| s.0 != k))
        .collect();
    let rest = spread(rng, others.len(), 1.0 - used);
    let mut p = vec![0.0; c];
    p[top.0] = top.1;
    if let Some((k, v)) = second {
        p[k] = v;
    }
    for (k, v) in others.into_iter().zip(rest) {
        p[k] = v;
    }
    p
}

/// Pairs are annotated in one direction; the reverse direction carries the
/// mirrored distribution (converse labels swapped) so both edges agree.
pub fn soft_vs_hard(spec: &SoftHardSpec) -> Result<Scenario> {
    let ls = LabelSet::matres();
    let c = ls.len();
    if spec.class_weights.len() != c || spec.decoy.len() != c {
        return Err(Error::Config("soft_vs_hard needs one weight and one decoy per class".into()));
    }
    if spec.decoy.iter().enumerate().any(|(g, &d)| d == g || d >= c) {
        return Err(Error::Config("each decoy must be a different, valid class".into()));
    }
    let weights = WeightedIndex::new(&spec.class_weights)
        .map_err(|e| Error::Config(format!("class weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut table = ProbTable::new(ls.clone(), format!("synthetic:soft_vs_hard,seed={}", spec.seed));
    let mut out = SplitBuilder::new(&ls, spec.docs);
    for k in 0..spec.docs.total() {
        let doc = format!("d{k:04}");
        let events = make_events(&doc, spec.events_per_doc, &mut rng);
        let mut pairs = Vec::new();
        for (a, b) in unordered_pairs(spec.events_per_doc, usize::MAX) {
            let (i, j) = if rng.random::<bool>() { (a, b) } else { (b, a) };
            let gold = weights.sample(&mut rng);
            let p = if rng.random::<f64>() < spec.flip_rate {
                let top: f64 = rng.random_range(0.5..0.58);
                let second = rng.random_range(0.35..(top - 0.05).min(0.98 - top));
                ranked(&mut rng, c, (spec.decoy[gold], top), Some((gold, second)))
            } else {
                let top = rng.random_range(0.8..0.97);
                ranked(&mut rng, c, (gold, top), None)
            };
            let mirrored: Vec<f64> = (0..c).map(|q| p[ls.converse(q)]).collect();
            table.insert(&doc, i, j, ProbDistribution::new(p)?)?;
            table.insert(&doc, j, i, ProbDistribution::new(mirrored)?)?;
            pairs.push(pair(&doc, &events, i, j, gold));
        }
        out.add_doc(k, events, pairs);
    }
    Ok(out.finish("soft_vs_hard", table))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceSpec {
    pub docs: SplitSizes,
    pub events_per_doc: usize,
    /// Only pairs up to this distance are annotated.
    pub max_distance: usize,
    /// Standard deviation of event times around their order index.
    pub time_jitter: f64,
    /// Time differences below this are EQUAL.
    pub equal_window: f64,
    pub vague_rate: f64,
    /// Logit margin of the true class, by distance; the last entry repeats.
    pub sharpness_by_distance: Vec<f64>,
    /// Absolute logit noise.
    pub logit_noise: f64,
    pub seed: u64,
}

impl DistanceSpec {
    pub fn standard(seed: u64) -> Self {
        Self {
            docs: SplitSizes {
                train: 150,
                dev: 40,
                test: 60,
            },
            events_per_doc: 10,
            max_distance: 5,
            time_jitter: 0.25,
            equal_window: 0.3,
            vague_rate: 0.1,
            sharpness_by_distance: vec![5.0, 3.0, 1.6, 0.9, 0.5, 0.25, 0.1],
            logit_noise: 0.6,
            seed,
        }
    }

    fn sharpness(&self, distance: usize) -> f64 {
        let s = &self.sharpness_by_distance;
        s[distance.min(s.len() - 1)]
    }
}

/// Gold from latent times `t_k = k + jitter`: BEFORE/AFTER by sign of the
/// difference, EQUAL inside a small window, VAGUE at random. Every ordered
/// pair's edge is `softmax(s(n)·onehot(relation) + noise·ε)` where `s` shrinks
/// with the distance `n`, so long pairs see almost flat edges.
pub fn distance_trend(spec: &DistanceSpec) -> Result<Scenario> {
    let ls = LabelSet::matres();
    let c = ls.len();
    let (before, after, equal, vague) = (0, 1, 2, 3);
    if spec.sharpness_by_distance.is_empty() || spec.events_per_doc < 2 {
        return Err(Error::Config("distance_trend needs sharpness values and >= 2 events".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut table = ProbTable::new(ls.clone(), format!("synthetic:distance_trend,seed={}", spec.seed));
    let mut out = SplitBuilder::new(&ls, spec.docs);
    let n = spec.events_per_doc;
    for k in 0..spec.docs.total() {
        let doc = format!("d{k:04}");
        let events = make_events(&doc, n, &mut rng);
        let times: Vec<f64> = (0..n)
            .map(|q| {
                let e: f64 = StandardNormal.sample(&mut rng);
                q as f64 + spec.time_jitter * e
            })
            .collect();
        let mut relation = BTreeMap::new();
        for (a, b) in unordered_pairs(n, usize::MAX) {
            let dt = times[b] - times[a];
            let r = if rng.random::<f64>() < spec.vague_rate {
                vague
            } else if dt.abs() < spec.equal_window {
                equal
            } else if dt > 0.0 {
                before
            } else {
                after
            };
            relation.insert((a, b), r);
            relation.insert((b, a), ls.converse(r));
        }
        for (&(i, j), &r) in &relation {
            let s = spec.sharpness(i.abs_diff(j) - 1);
            let logits: Vec<f64> = (0..c)
                .map(|q| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    (if q == r { s } else { 0.0 }) + spec.logit_noise * e
                })
                .collect();
            table.insert(&doc, i, j, ProbDistribution::new(softmax_slice(&logits)?)?)?;
        }
        let mut pairs: Vec<EventPairInstance> = unordered_pairs(n, spec.max_distance)
            .into_iter()
            .map(|(a, b)| {
                let (i, j) = if rng.random::<bool>() { (a, b) } else { (b, a) };
                pair(&doc, &events, i, j, relation[&(i, j)])
            })
            .collect();
        pairs.shuffle(&mut rng);
        out.add_doc(k, events, pairs);
    }
    Ok(out.finish("distance_trend", table))
}
