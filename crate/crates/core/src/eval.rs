//! Exclusion-aware micro/macro F1, per-class scores and distance buckets.
//!
//! With an excluded label (VAGUE), pairs whose gold is that label are dropped.
//! A prediction of the excluded label on a retained pair is a false negative
//! of the gold class and a false positive of nothing.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Counts indexed `[gold][predicted]` in label-set order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let c = labels.len();
        Self {
            labels,
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn from_counts(labels: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = labels.len();
        if counts.len() != c || counts.iter().any(|r| r.len() != c) {
            return Err(Error::shape(
                "ConfusionMatrix::from_counts",
                format!("{c} labels but counts are not {c}x{c}"),
            ));
        }
        Ok(Self { labels, counts })
    }

    /// Builds the matrix from aligned gold and predicted class indices.
    pub fn from_predictions(labels: Vec<String>, gold: &[usize], predicted: &[usize]) -> Result<Self> {
        if gold.len() != predicted.len() {
            return Err(Error::shape(
                "ConfusionMatrix::from_predictions",
                format!("{} gold labels, {} predictions", gold.len(), predicted.len()),
            ));
        }
        let mut m = Self::new(labels);
        for (&g, &p) in gold.iter().zip(predicted) {
            m.add(g, p)?;
        }
        Ok(m)
    }

    pub fn add(&mut self, gold: usize, predicted: usize) -> Result<()> {
        let c = self.labels.len();
        if gold >= c || predicted >= c {
            return Err(Error::InvalidArgument(format!(
                "class index out of range: gold {gold}, predicted {predicted}, {c} classes"
            )));
        }
        self.counts[gold][predicted] += 1;
        Ok(())
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, gold: usize, predicted: usize) -> u64 {
        self.counts[gold][predicted]
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Pairs left after dropping gold rows of `excluded`.
    pub fn retained(&self, excluded: Option<usize>) -> u64 {
        (0..self.num_classes())
            .filter(|&g| Some(g) != excluded)
            .map(|g| self.counts[g].iter().sum::<u64>())
            .sum()
    }

    /// `(tp, fp, fn)` of `class` under the exclusion rule.
    pub fn class_counts(&self, class: usize, excluded: Option<usize>) -> (u64, u64, u64) {
        let c = self.num_classes();
        let tp = self.counts[class][class];
        let fp = (0..c)
            .filter(|&g| g != class && Some(g) != excluded)
            .map(|g| self.counts[g][class])
            .sum();
        let fn_ = (0..c).filter(|&p| p != class).map(|p| self.counts[class][p]).sum();
        (tp, fp, fn_)
    }

    fn check_excluded(&self, excluded: Option<usize>) -> Result<()> {
        if let Some(x) = excluded {
            if x >= self.num_classes() {
                return Err(Error::InvalidArgument(format!(
                    "excluded class {x} out of range for {} classes",
                    self.num_classes()
                )));
            }
        }
        if self.retained(excluded) == 0 {
            return Err(Error::InvalidArgument(
                "no pairs left to score after label exclusion".into(),
            ));
        }
        Ok(())
    }
}

/// Precision, recall and F1 from raw counts; 0 where a denominator is 0.
pub fn prf(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Pooled `(P, R, F1)` over non-excluded classes.
pub fn micro_prf(conf: &ConfusionMatrix, excluded: Option<usize>) -> Result<(f64, f64, f64)> {
    conf.check_excluded(excluded)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for c in (0..conf.num_classes()).filter(|&c| Some(c) != excluded) {
        let (a, b, d) = conf.class_counts(c, excluded);
        tp += a;
        fp += b;
        fn_ += d;
    }
    Ok(prf(tp, fp, fn_))
}

pub fn micro_f1(conf: &ConfusionMatrix, excluded: Option<usize>) -> Result<f64> {
    Ok(micro_prf(conf, excluded)?.2)
}

/// Unweighted mean of per-class F1 over non-excluded classes. Classes absent
/// from both gold and predictions score 0 and still count.
pub fn macro_f1(conf: &ConfusionMatrix, excluded: Option<usize>) -> Result<f64> {
    conf.check_excluded(excluded)?;
    let classes: Vec<usize> = (0..conf.num_classes()).filter(|&c| Some(c) != excluded).collect();
    let sum: f64 = classes
        .iter()
        .map(|&c| {
            let (tp, fp, fn_) = conf.class_counts(c, excluded);
            prf(tp, fp, fn_).2
        })
        .sum();
    Ok(sum / classes.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold pairs of this class.
    pub support: u64,
}

pub fn per_class(conf: &ConfusionMatrix, excluded: Option<usize>) -> Vec<ClassScore> {
    (0..conf.num_classes())
        .filter(|&c| Some(c) != excluded)
        .map(|c| {
            let (tp, fp, fn_) = conf.class_counts(c, excluded);
            let (precision, recall, f1) = prf(tp, fp, fn_);
            ClassScore {
                label: conf.labels[c].clone(),
                precision,
                recall,
                f1,
                support: tp + fn_,
            }
        })
        .collect()
}

/// Distance bucket: exact up to the configured max, then one open bucket.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceBucket {
    Exact(usize),
    AtLeast(usize),
}

impl DistanceBucket {
    pub fn of(distance: usize, max_exact: usize) -> Self {
        if distance <= max_exact {
            Self::Exact(distance)
        } else {
            Self::AtLeast(max_exact + 1)
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Exact(n) => n.to_string(),
            Self::AtLeast(n) => format!("{n}+"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketScore {
    pub bucket: DistanceBucket,
    /// All pairs in the bucket, excluded gold included.
    pub pairs: usize,
    pub micro_f1: f64,
}

/// Micro-F1 per distance bucket over `dataset.pairs`, with `predicted`
/// aligned to them. Buckets without scorable pairs are omitted.
pub fn distance_bucket_f1(predicted: &[usize], dataset: &Dataset, max_exact: usize) -> Result<Vec<BucketScore>> {
    if predicted.len() != dataset.pairs.len() {
        return Err(Error::shape(
            "distance_bucket_f1",
            format!("{} predictions for {} pairs", predicted.len(), dataset.pairs.len()),
        ));
    }
    let labels = dataset.label_set.labels().to_vec();
    let excluded = dataset.label_set.excluded_index();
    let mut groups: std::collections::BTreeMap<DistanceBucket, ConfusionMatrix> = Default::default();
    for (pair, &p) in dataset.pairs.iter().zip(predicted) {
        groups
            .entry(DistanceBucket::of(pair.distance, max_exact))
            .or_insert_with(|| ConfusionMatrix::new(labels.clone()))
            .add(pair.gold, p)?;
    }
    Ok(groups
        .into_iter()
        .filter(|(_, m)| m.retained(excluded) > 0)
        .map(|(bucket, m)| BucketScore {
            bucket,
            pairs: m.total() as usize,
            micro_f1: micro_f1(&m, excluded).expect("retained pairs checked"),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Largest exact distance bucket; larger distances share one open bucket.
    pub max_distance: usize,
    /// Apply the micro exclusion to macro-F1 as well.
    pub macro_exclude: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_distance: 5,
            macro_exclude: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub label_set: String,
    pub excluded_label: Option<String>,
    pub num_pairs: usize,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    /// `micro_f1 - macro_f1`
    pub gap: f64,
    pub macro_excludes_label: bool,
    pub per_class: Vec<ClassScore>,
    pub distance_buckets: Vec<BucketScore>,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    /// Scores `predicted` (aligned with `dataset.pairs`) against gold.
    pub fn compute(variant: &str, predicted: &[usize], dataset: &Dataset, opts: &EvalOptions) -> Result<Self> {
        let gold: Vec<usize> = dataset.pairs.iter().map(|p| p.gold).collect();
        let ls = &dataset.label_set;
        let confusion = ConfusionMatrix::from_predictions(ls.labels().to_vec(), &gold, predicted)?;
        let excluded = ls.excluded_index();
        let (micro_precision, micro_recall, micro) = micro_prf(&confusion, excluded)?;
        let macro_ex = if opts.macro_exclude { excluded } else { None };
        let macro_ = macro_f1(&confusion, macro_ex)?;
        Ok(Self {
            variant: variant.to_string(),
            label_set: ls.name.clone(),
            excluded_label: ls.excluded_for_micro().map(str::to_string),
            num_pairs: predicted.len(),
            micro_precision,
            micro_recall,
            micro_f1: micro,
            macro_f1: macro_,
            gap: micro - macro_,
            macro_excludes_label: opts.macro_exclude,
            per_class: per_class(&confusion, excluded),
            distance_buckets: distance_bucket_f1(predicted, dataset, opts.max_distance)?,
            confusion,
        })
    }

    pub fn bucket(&self, bucket: DistanceBucket) -> Option<&BucketScore> {
        self.distance_buckets.iter().find(|b| b.bucket == bucket)
    }

    /// Recomputes the headline scores from the stored confusion matrix.
    pub fn verify(&self) -> Result<()> {
        let excluded = self
            .excluded_label
            .as_ref()
            .and_then(|l| self.confusion.labels().iter().position(|x| x == l));
        let micro = micro_f1(&self.confusion, excluded)?;
        let macro_ = macro_f1(
            &self.confusion,
            if self.macro_excludes_label { excluded } else { None },
        )?;
        let scores = [self.micro_f1, self.macro_f1, self.micro_precision, self.micro_recall];
        let consistent = (micro - self.micro_f1).abs() <= 1e-12
            && (macro_ - self.macro_f1).abs() <= 1e-12
            && (self.gap - (self.micro_f1 - self.macro_f1)).abs() <= 1e-12
            && scores.iter().all(|s| (0.0..=1.0).contains(s));
        if !consistent {
            return Err(Error::Validation(format!(
                "report '{}' is inconsistent with its confusion matrix",
                self.variant
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Side-by-side P / R / F1 table, one row per variant, plus macro and Gap.
pub fn render_comparison(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>7} {:>7} {:>9} {:>9} {:>7}",
        "variant", "P", "R", "micro-F1", "macro-F1", "Gap"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>7} {:>9} {:>9} {:>7}",
            r.variant,
            pct(r.micro_precision),
            pct(r.micro_recall),
            pct(r.micro_f1),
            pct(r.macro_f1),
            pct(r.gap)
        );
    }
    out
}

/// Micro-F1 by distance bucket, one row per variant; `-` marks absent buckets.
pub fn render_distance_table(reports: &[EvalReport]) -> String {
    let mut buckets: Vec<DistanceBucket> = reports
        .iter()
        .flat_map(|r| r.distance_buckets.iter().map(|b| b.bucket))
        .collect();
    buckets.sort();
    buckets.dedup();
    let mut out = String::new();
    let _ = write!(out, "{:<10}", "variant");
    for b in &buckets {
        let _ = write!(out, " {:>7}", format!("n={}", b.label()));
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{:<10}", r.variant);
        for b in &buckets {
            let cell = r.bucket(*b).map_or_else(|| "-".to_string(), |s| pct(s.micro_f1));
            let _ = write!(out, " {:>7}", cell);
        }
        out.push('\n');
    }
    out
}
