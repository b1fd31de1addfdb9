//! Distance-aware graph attention over class-probability edge features for
//! event temporal relation extraction.
//!
//! An external classifier scores every ordered event pair of a document; those
//! distributions become the edge features of a complete event graph. A
//! two-layer edge-featured multi-head GAT then re-classifies each pair from its
//! endpoint states and its edge distribution.

pub mod ablation;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod probs;
pub mod synth;
pub mod tensor;
pub mod train;

pub use data::{pair_distance, parse_corpus, Dataset, Event, EventPairInstance, LabelSet, Split};
pub use error::{Error, Result};
pub use eval::{ConfusionMatrix, EvalReport};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{build_graph, DocumentGraph, NodeFeatureConfig, OrderEncoding};
pub use model::{Model, ModelConfig, ModelParams};
pub use probs::{load_prob_table, synth_prob_table, ProbDistribution, ProbTable};
pub use tensor::Tensor;
pub use train::{train, TrainConfig, TrainHistory};
