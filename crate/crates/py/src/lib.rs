//! Python bindings: corpora, probability tables, training, evaluation and the CLI.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use gdgat_core::ablation::{provider_predictions, Variant};
use gdgat_core::eval::{self, EvalOptions};
use gdgat_core::gradcheck::certify_gat;
use gdgat_core::probs::ProbDistribution;
use gdgat_core::train::{self as trainer, Architecture};
use gdgat_core::{data, probs, synth, ConfusionMatrix, ModelConfig};

create_exception!(gdgat, GdgatError, PyException, "Raised for any failure in the core library.");

fn err(e: gdgat_core::Error) -> PyErr {
    GdgatError::new_err(format!("{}: {e}", e.kind()))
}

fn label_set(name: &str) -> PyResult<data::LabelSet> {
    data::LabelSet::builtin(name).map_err(err)
}

#[pyclass(module = "gdgat", frozen)]
struct Dataset(data::Dataset);

#[pymethods]
impl Dataset {
    #[staticmethod]
    #[pyo3(signature = (path, label_set = "matres"))]
    fn load(path: &str, label_set: &str) -> PyResult<Self> {
        Ok(Self(data::parse_corpus(path, &self::label_set(label_set)?).map_err(err)?))
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.0.label_set.labels().to_vec()
    }

    #[getter]
    fn num_documents(&self) -> usize {
        self.0.documents.len()
    }

    fn __len__(&self) -> usize {
        self.0.pairs.len()
    }

    /// `(doc, i, j, gold, distance)` for every labelled pair.
    fn pairs(&self) -> Vec<(String, usize, usize, usize, usize)> {
        self.0
            .pairs
            .iter()
            .map(|p| (p.doc_id.clone(), p.i, p.j, p.gold, p.distance))
            .collect()
    }

    fn gold(&self) -> Vec<usize> {
        self.0.pairs.iter().map(|p| p.gold).collect()
    }

    fn to_jsonl(&self) -> String {
        self.0.to_jsonl()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(label_set={:?}, documents={}, pairs={})",
            self.0.label_set.name,
            self.0.documents.len(),
            self.0.pairs.len()
        )
    }
}

#[pyclass(module = "gdgat", frozen)]
struct ProbTable(probs::ProbTable);

#[pymethods]
impl ProbTable {
    #[staticmethod]
    #[pyo3(signature = (path, label_set = "matres"))]
    fn load(path: &str, label_set: &str) -> PyResult<Self> {
        Ok(Self(probs::load_prob_table(path, &self::label_set(label_set)?).map_err(err)?))
    }

    /// Distributions drawn around the gold labels of `dataset`.
    #[staticmethod]
    #[pyo3(signature = (dataset, sharpness = 5.0, flip_rate = 0.0, seed = 0))]
    fn synthetic(dataset: &Dataset, sharpness: f64, flip_rate: f64, seed: u64) -> PyResult<Self> {
        Ok(Self(probs::synth_prob_table(&dataset.0, sharpness, flip_rate, seed).map_err(err)?))
    }

    fn get(&self, doc: &str, i: usize, j: usize) -> Option<Vec<f64>> {
        self.0.get(doc, i, j).map(|p| p.values().to_vec())
    }

    fn insert(&self, doc: &str, i: usize, j: usize, values: Vec<f64>) -> PyResult<ProbTable> {
        let mut t = self.0.clone();
        t.insert(doc, i, j, ProbDistribution::new(values).map_err(err)?).map_err(err)?;
        Ok(Self(t))
    }

    fn hardened(&self) -> Self {
        Self(self.0.hardened())
    }

    fn check_covers(&self, dataset: &Dataset) -> PyResult<()> {
        self.0.check_covers(&dataset.0).map_err(err)
    }

    #[getter]
    fn provenance(&self) -> String {
        self.0.provenance.clone()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn to_jsonl(&self) -> String {
        self.0.to_jsonl()
    }
}

#[pyclass(module = "gdgat", frozen)]
struct Model(gdgat_core::Model);

#[pymethods]
impl Model {
    #[staticmethod]
    fn from_checkpoint(text: &str) -> PyResult<Self> {
        Ok(Self(gdgat_core::Model::from_checkpoint(text).map_err(err)?.0))
    }

    #[pyo3(signature = (config_json = "null"))]
    fn to_checkpoint(&self, config_json: &str) -> PyResult<String> {
        let config = serde_json::from_str(config_json).map_err(|e| err(e.into()))?;
        self.0.to_checkpoint(&config).map_err(err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.0.params.num_scalars()
    }

    #[getter]
    fn uses_edge_features(&self) -> bool {
        self.0.params.uses_edge_features()
    }

    /// Predicted class index for every pair of `dataset`.
    #[pyo3(signature = (dataset, table = None))]
    fn predict(&self, py: Python<'_>, dataset: &Dataset, table: Option<&ProbTable>) -> PyResult<Vec<usize>> {
        let t = table.map(|t| &t.0);
        py.detach(|| trainer::predict_dataset(&self.0, &dataset.0, t)).map_err(err)
    }

    #[pyo3(signature = (dataset, table = None, variant = "full"))]
    fn evaluate(&self, py: Python<'_>, dataset: &Dataset, table: Option<&ProbTable>, variant: &str) -> PyResult<Report> {
        let t = table.map(|t| &t.0);
        py.detach(|| trainer::evaluate(&self.0, &dataset.0, t, variant, &EvalOptions::default()))
            .map(Report)
            .map_err(err)
    }
}

#[pyclass(module = "gdgat", frozen)]
struct Report(gdgat_core::EvalReport);

#[pymethods]
impl Report {
    #[getter]
    fn variant(&self) -> String {
        self.0.variant.clone()
    }

    #[getter]
    fn micro_f1(&self) -> f64 {
        self.0.micro_f1
    }

    #[getter]
    fn macro_f1(&self) -> f64 {
        self.0.macro_f1
    }

    #[getter]
    fn gap(&self) -> f64 {
        self.0.gap
    }

    /// `(bucket label, pairs, micro-F1)` per distance bucket.
    fn distance_buckets(&self) -> Vec<(String, usize, f64)> {
        self.0
            .distance_buckets
            .iter()
            .map(|b| (b.bucket.label(), b.pairs, b.micro_f1))
            .collect()
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Report(variant={:?}, micro_f1={:.4}, macro_f1={:.4})",
            self.0.variant, self.0.micro_f1, self.0.macro_f1
        )
    }
}

/// `(epoch, train_loss, dev_micro_f1)`
type HistoryRow = (usize, f64, Option<f64>);

/// Trains one variant and returns the model with its per-epoch history.
#[pyfunction]
#[pyo3(signature = (
    train, dev = None, table = None, variant = "full", epochs = 20, learning_rate = 1e-3,
    seed = 0, patience = None, d_h = 64, heads = 8, d_h1 = 32, d_h2 = 64
))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    train: &Dataset,
    dev: Option<&Dataset>,
    table: Option<&ProbTable>,
    variant: &str,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
    patience: Option<usize>,
    d_h: usize,
    heads: usize,
    d_h1: usize,
    d_h2: usize,
) -> PyResult<(Model, Vec<HistoryRow>)> {
    let variant: Variant = variant.parse().map_err(err)?;
    if !variant.trains() {
        return Err(GdgatError::new_err(format!("invalid_config: variant {variant} is not trainable")));
    }
    let arch = variant.architecture(&Architecture {
        d_h,
        model: ModelConfig {
            heads,
            d_h1,
            d_h2,
            ..ModelConfig::default()
        },
        ..Architecture::default()
    });
    let cfg = gdgat_core::TrainConfig {
        epochs,
        learning_rate,
        seed,
        early_stop_patience: patience,
        ..Default::default()
    };
    let edges = table.and_then(|t| variant.edge_table(&t.0));
    let (model, history) = py
        .detach(|| gdgat_core::train(&train.0, dev.map(|d| &d.0), edges.as_ref(), &arch, &cfg))
        .map_err(err)?;
    let rows = history
        .epochs
        .iter()
        .map(|r| (r.epoch, r.train_loss, r.dev_micro_f1))
        .collect();
    Ok((Model(model), rows))
}

/// Argmax of the table: the provider-only baseline.
#[pyfunction]
fn provider_predict(dataset: &Dataset, table: &ProbTable) -> PyResult<Vec<usize>> {
    provider_predictions(&dataset.0, &table.0).map_err(err)
}

fn confusion(gold: &[usize], predicted: &[usize], num_classes: usize) -> PyResult<ConfusionMatrix> {
    let labels = (0..num_classes).map(|k| k.to_string()).collect();
    ConfusionMatrix::from_predictions(labels, gold, predicted).map_err(err)
}

/// Micro-F1 with gold rows of `excluded` dropped.
#[pyfunction]
#[pyo3(signature = (gold, predicted, num_classes, excluded = None))]
fn micro_f1(gold: Vec<usize>, predicted: Vec<usize>, num_classes: usize, excluded: Option<usize>) -> PyResult<f64> {
    eval::micro_f1(&confusion(&gold, &predicted, num_classes)?, excluded).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (gold, predicted, num_classes, excluded = None))]
fn macro_f1(gold: Vec<usize>, predicted: Vec<usize>, num_classes: usize, excluded: Option<usize>) -> PyResult<f64> {
    eval::macro_f1(&confusion(&gold, &predicted, num_classes)?, excluded).map_err(err)
}

/// Maximum relative finite-difference error of the model gradients.
#[pyfunction]
#[pyo3(signature = (seed = 7, eps = 1e-5))]
fn gradcheck(seed: u64, eps: f64) -> PyResult<f64> {
    Ok(certify_gat(seed, eps).map_err(err)?.max_rel_err)
}

/// Generates a named scenario and returns `(train, dev, test, table)`.
#[pyfunction]
#[pyo3(signature = (scenario, seed = 1))]
fn scenario(scenario: &str, seed: u64) -> PyResult<(Dataset, Dataset, Dataset, ProbTable)> {
    let s = match scenario {
        "separable" => synth::separable(seed),
        "soft_vs_hard" => synth::soft_vs_hard(&synth::SoftHardSpec::standard(seed)),
        "distance_trend" => synth::distance_trend(&synth::DistanceSpec::standard(seed)),
        "profile" => synth::profile(&synth::ProfileSpec::tb_dense_like(5.0, 0.1, seed)),
        other => return Err(GdgatError::new_err(format!("invalid_config: unknown scenario '{other}'"))),
    }
    .map_err(err)?;
    Ok((Dataset(s.train), Dataset(s.dev), Dataset(s.test), ProbTable(s.table)))
}

/// Runs the command line with `args` (without the program name).
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("gdgat".to_string()).chain(args).collect();
    py.detach(|| gdgat_core::cli::run_cli(argv))
}

#[pymodule]
fn gdgat(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GdgatError", m.py().get_type::<GdgatError>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<ProbTable>()?;
    m.add_class::<Model>()?;
    m.add_class::<Report>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(provider_predict, m)?)?;
    m.add_function(wrap_pyfunction!(micro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(macro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(scenario, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
