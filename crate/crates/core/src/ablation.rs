//! The four pipeline variants: the full model, hardened edges, the provider
//! alone, and the GAT without edge features.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{EvalOptions, EvalReport};
use crate::model::Model;
use crate::probs::ProbTable;
use crate::train::{evaluate, train, Architecture, TrainConfig, TrainHistory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WoPi,
    WoGd,
    WoLp,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::WoPi, Variant::WoGd, Variant::WoLp];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::WoPi => "wo_pi",
            Self::WoGd => "wo_gd",
            Self::WoLp => "wo_lp",
        }
    }

    /// Whether the variant trains a GAT.
    pub fn trains(&self) -> bool {
        !matches!(self, Self::WoGd)
    }

    /// Architecture actually used by this variant.
    pub fn architecture(&self, arch: &Architecture) -> Architecture {
        let mut a = arch.clone();
        if matches!(self, Self::WoLp) {
            a.model.use_edge_features = false;
            a.model.edge_projection = false;
        }
        a
    }

    /// Edge features seen by this variant, if any.
    pub fn edge_table(&self, table: &ProbTable) -> Option<ProbTable> {
        match self {
            Self::Full | Self::WoGd => Some(table.clone()),
            Self::WoPi => Some(table.hardened()),
            Self::WoLp => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}' (expected full, wo_pi, wo_gd or wo_lp)")))
    }
}

/// Argmax of the table's distribution for every pair of `dataset`.
pub fn provider_predictions(dataset: &Dataset, table: &ProbTable) -> Result<Vec<usize>> {
    table.check_covers(dataset)?;
    Ok(dataset
        .pairs
        .iter()
        .map(|p| table.get(&p.doc_id, p.i, p.j).expect("coverage checked").argmax())
        .collect())
}

/// The three splits a run consumes. Without `dev`, early stopping is off.
#[derive(Clone, Copy, Debug)]
pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub dev: Option<&'a Dataset>,
    pub test: &'a Dataset,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub arch: Architecture,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

#[derive(Clone, Debug)]
pub struct VariantOutcome {
    pub report: EvalReport,
    /// Trained model and history; `None` for the provider-only variant.
    pub trained: Option<(Model, TrainHistory)>,
}

/// Runs one variant: trains on the train split and scores the test split.
pub fn run_ablation(variant: Variant, splits: Splits<'_>, table: &ProbTable, cfg: &AblationConfig) -> Result<VariantOutcome> {
    if !variant.trains() {
        let predicted = provider_predictions(splits.test, table)?;
        return Ok(VariantOutcome {
            report: EvalReport::compute(variant.name(), &predicted, splits.test, &cfg.eval)?,
            trained: None,
        });
    }
    let arch = variant.architecture(&cfg.arch);
    let edges = variant.edge_table(table);
    let (model, history) = train(splits.train, splits.dev, edges.as_ref(), &arch, &cfg.train)?;
    let report = evaluate(&model, splits.test, edges.as_ref(), variant.name(), &cfg.eval)?;
    Ok(VariantOutcome {
        report,
        trained: Some((model, history)),
    })
}

/// Every variant in `variants`, in order.
pub fn run_all(variants: &[Variant], splits: Splits<'_>, table: &ProbTable, cfg: &AblationConfig) -> Result<Vec<VariantOutcome>> {
    variants.iter().map(|&v| run_ablation(v, splits, table, cfg)).collect()
}
