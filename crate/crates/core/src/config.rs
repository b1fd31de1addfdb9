//! Run configuration: a TOML file whose fields can be overridden from the
//! command line.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/exp1"
//! variant = "full"
//!
//! [data]
//! label_set = "matres"
//! train = "data/train.jsonl"
//! dev = "data/dev.jsonl"
//! test = "data/test.jsonl"
//!
//! [probs]
//! file = "data/probs.jsonl"
//!
//! [model]
//! d_h = 64
//! heads = 8
//!
//! [train]
//! epochs = 20
//! learning_rate = 0.001
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablation::{AblationConfig, Variant};
use crate::data::{parse_corpus, Dataset, LabelSet};
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::probs::{load_prob_table, synth_prob_table_with, ProbTable, SynthProbSpec};
use crate::train::{Architecture, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub label_set: String,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

/// Edge distributions synthesised from gold labels instead of read from a file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticProbs {
    pub sharpness: f64,
    pub flip_rate: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
}

fn default_noise() -> f64 {
    0.1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbsConfig {
    pub file: Option<PathBuf>,
    pub synthetic: Option<SyntheticProbs>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub variant: Variant,
    /// Worker threads; 0 lets the runtime decide. `GDGAT_THREADS` caps it.
    pub threads: usize,
    pub data: DataConfig,
    pub probs: ProbsConfig,
    pub model: Architecture,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            variant: Variant::Full,
            threads: 0,
            data: DataConfig {
                label_set: "matres".into(),
                ..Default::default()
            },
            probs: ProbsConfig::default(),
            model: Architecture::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

/// Command-line values that replace config-file fields when present.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub threads: Option<usize>,
    pub label_set: Option<String>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub probs: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub patience: Option<usize>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, source: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{}: {}", source.display(), e.message())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    /// Relative data paths in a config file are resolved against its directory.
    pub fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p.as_mut().filter(|x| x.is_relative()) {
                *x = base.join(&*x);
            }
        };
        fix(&mut self.data.train);
        fix(&mut self.data.dev);
        fix(&mut self.data.test);
        fix(&mut self.probs.file);
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = o.variant {
            self.variant = v;
        }
        if let Some(v) = o.threads {
            self.threads = v;
        }
        if let Some(v) = &o.label_set {
            self.data.label_set = v.clone();
        }
        for (slot, v) in [
            (&mut self.data.train, &o.train),
            (&mut self.data.dev, &o.dev),
            (&mut self.data.test, &o.test),
        ] {
            if v.is_some() {
                *slot = v.clone();
            }
        }
        if let Some(v) = &o.probs {
            self.probs.file = Some(v.clone());
            self.probs.synthetic = None;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.learning_rate {
            self.train.learning_rate = v;
        }
        if let Some(v) = o.patience {
            self.train.early_stop_patience = Some(v);
        }
    }

    /// Checks field ranges and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        LabelSet::builtin(&self.data.label_set)?;
        self.train.validate()?;
        self.model.model.validate()?;
        match (&self.probs.file, &self.probs.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("[probs] takes either file or synthetic, not both".into()));
            }
            (None, None) if self.variant != Variant::WoLp => {
                return Err(Error::Config(format!(
                    "variant {} needs a probability source in [probs]",
                    self.variant
                )));
            }
            _ => {}
        }
        for p in [&self.data.train, &self.data.dev, &self.data.test, &self.probs.file]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
                ));
            }
        }
        Ok(())
    }

    pub fn label_set(&self) -> Result<LabelSet> {
        LabelSet::builtin(&self.data.label_set)
    }

    /// The training configuration with run-level seed and threads applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            threads: self.threads,
            ..self.train.clone()
        }
    }

    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            arch: self.model.clone(),
            train: self.train_config(),
            eval: self.eval.clone(),
        }
    }

    pub fn load_split(&self, which: &str) -> Result<Option<Dataset>> {
        let path = match which {
            "train" => &self.data.train,
            "dev" => &self.data.dev,
            "test" => &self.data.test,
            other => return Err(Error::InvalidArgument(format!("unknown split '{other}'"))),
        };
        path.as_ref()
            .map(|p| parse_corpus(p, &self.label_set()?))
            .transpose()
    }

    pub fn require_split(&self, which: &str) -> Result<Dataset> {
        self.load_split(which)?
            .ok_or_else(|| Error::Config(format!("no [data].{which} path configured")))
    }

    /// Loads the probability file, or synthesises a table covering `datasets`.
    pub fn load_probs(&self, datasets: &[&Dataset]) -> Result<Option<ProbTable>> {
        let ls = self.label_set()?;
        if let Some(p) = &self.probs.file {
            return load_prob_table(p, &ls).map(Some);
        }
        let Some(s) = &self.probs.synthetic else {
            return Ok(None);
        };
        let mut all = Dataset::empty(ls);
        for d in datasets {
            all.documents.extend(d.documents.clone());
            all.pairs.extend(d.pairs.iter().cloned());
        }
        let spec = SynthProbSpec {
            sharpness: s.sharpness,
            flip_rate: s.flip_rate,
            noise: s.noise,
            seed: s.seed.unwrap_or(self.seed),
        };
        synth_prob_table_with(&all, &spec).map(Some)
    }

    /// The config echo embedded in every artifact.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_nested_sections() {
        let text = r#"
            seed = 7
            output_dir = "out"
            variant = "wo_pi"
            [data]
            label_set = "tb_dense"
            [probs.synthetic]
            sharpness = 5.0
            flip_rate = 0.1
            [model]
            d_h = 16
            heads = 2
            d_h1 = 4
            [train]
            epochs = 3
            optimizer = "sgd"
            [eval]
            max_distance = 3
        "#;
        let c = RunConfig::from_toml_str(text, Path::new("run.toml")).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.variant, Variant::WoPi);
        assert_eq!(c.model.d_h, 16);
        assert_eq!(c.model.model.heads, 2);
        assert_eq!(c.model.model.d_h2, 64);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.eval.max_distance, 3);
        assert_eq!(c.probs.synthetic.as_ref().unwrap().noise, 0.1);
        c.validate().unwrap();
        assert_eq!(c.train_config().seed, 7);
    }

    #[test]
    fn command_line_wins() {
        let mut c = RunConfig::from_toml_str("seed = 1\n[train]\nepochs = 4\n", Path::new("r")).unwrap();
        c.apply(&Overrides {
            seed: Some(9),
            epochs: Some(2),
            ..Default::default()
        });
        assert_eq!((c.seed, c.train.epochs), (9, 2));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("[train]\nepochz = 4\n", Path::new("r")).unwrap_err();
        assert!(err.to_string().contains("epochz"));
        let err = RunConfig::from_toml_str("[model]\nheadz = 4\n", Path::new("r")).unwrap_err();
        assert!(err.to_string().contains("headz"), "{err}");
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml_str(&c.to_toml(), Path::new("r")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn missing_files_are_reported() {
        let mut c = RunConfig::default();
        c.data.train = Some(PathBuf::from("/nonexistent/train.jsonl"));
        c.probs.synthetic = Some(SyntheticProbs {
            sharpness: 1.0,
            flip_rate: 0.0,
            noise: 0.1,
            seed: None,
        });
        assert_eq!(c.validate().unwrap_err().kind(), "missing_file");
    }
}
