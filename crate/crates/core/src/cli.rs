//! The `gdgat` command line.
//!
//! Every failure is reported as one JSON line on stderr,
//! `{"error":{"kind":...,"message":...,"line":...}}`, with an exit code per kind:
//!
//! | code | kind |
//! |------|------|
//! | 1 | io |
//! | 2 | usage (unknown flag or subcommand) |
//! | 3 | missing_file |
//! | 4 | dimension_mismatch |
//! | 5 | invalid_format |
//! | 6 | numerical, or a failed gradient check |
//! | 7 | invalid_config |

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::ablation::{run_all, Splits, Variant};
use crate::config::{Overrides, RunConfig};
use crate::data::{parse_corpus, Dataset, LabelSet};
use crate::error::{Error, Result};
use crate::eval::{render_comparison, render_distance_table, EvalReport};
use crate::gradcheck::certify_gat;
use crate::model::Model;
use crate::probs::{load_prob_table, ProbTable};
use crate::synth;
use crate::train::{evaluate, train};

/// Maximum relative error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "gdgat", version, about = "Edge-featured graph attention over event pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model and write a checkpoint and training history.
    Train(RunArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Run the ablation variants and print a comparison table.
    Ablate(AblateArgs),
    /// Write a synthetic corpus, probability table and run config.
    Synth(SynthArgs),
    /// Finite-difference check of the model gradients.
    Gradcheck(GradcheckArgs),
    /// Format checks for corpora and probability files.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    label_set: Option<String>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Probability file; replaces any synthetic source in the config.
    #[arg(long)]
    probs: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            output_dir: self.output_dir.clone(),
            variant: self.variant,
            threads: self.threads,
            label_set: self.label_set.clone(),
            train: self.train.clone(),
            dev: self.dev.clone(),
            test: self.test.clone(),
            probs: self.probs.clone(),
            epochs: self.epochs,
            learning_rate: self.lr,
            patience: self.patience,
        }
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let mut c = RunConfig::load(path)?;
                let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
                let base = std::path::absolute(base).map_err(|e| Error::io(base, e))?;
                c.resolve_relative_to(&base);
                c
            }
            None => RunConfig::default(),
        };
        cfg.apply(&self.overrides());
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Report path; defaults to `<output_dir>/eval.json`.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Comma-separated subset of full, wo_pi, wo_gd, wo_lp.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ScenarioKind {
    /// TB-Dense-like class profile with configurable edge quality.
    Profile,
    /// Sharp, unflipped edges; any working trainer should fit it.
    Separable,
    /// 30% of pairs have gold in second place of the edge distribution.
    SoftVsHard,
    /// Edge quality decays with distance.
    DistanceTrend,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    scenario: ScenarioKind,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Edge sharpness for `profile`.
    #[arg(long, default_value_t = 5.0)]
    sharpness: f64,
    /// Edge flip rate for `profile`.
    #[arg(long, default_value_t = 0.1)]
    flip_rate: f64,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Corpus file; may be repeated.
    #[arg(long)]
    corpus: Vec<PathBuf>,
    #[arg(long)]
    probs: Option<PathBuf>,
    #[arg(long, default_value = "matres")]
    label_set: String,
}

/// Failure that is not an [`Error`]: usage problems and failed checks.
enum Failure {
    Usage(String),
    Check(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Check(_) => 6,
            Failure::Lib(e) => exit_code(e),
        }
    }

    fn to_json(&self) -> serde_json::Value {
        let (kind, message, line) = match self {
            Failure::Usage(m) => ("usage", m.clone(), None),
            Failure::Check(m) => ("gradcheck_failed", m.clone(), None),
            Failure::Lib(e) => (e.kind(), e.to_string(), e.line()),
        };
        json!({ "error": { "kind": kind, "message": message, "line": line } })
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        "missing_file" => 3,
        "dimension_mismatch" => 4,
        "invalid_format" => 5,
        "numerical" => 6,
        "invalid_config" => 7,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            return report(Failure::Usage(first.to_string()));
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Validate(a) => cmd_validate(&a),
    };
    match outcome {
        Ok(()) => 0,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> i32 {
    eprintln!("{}", f.to_json());
    f.exit_code()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// The configured probability table. Synthetic tables are built over every
/// configured split so `train`, `eval` and `ablate` see identical edges.
fn load_table(cfg: &RunConfig) -> Result<Option<ProbTable>> {
    if cfg.probs.synthetic.is_none() {
        return cfg.load_probs(&[]);
    }
    let splits: Vec<Dataset> = ["train", "dev", "test"]
        .into_iter()
        .filter_map(|s| cfg.load_split(s).transpose())
        .collect::<Result<_>>()?;
    cfg.load_probs(&splits.iter().collect::<Vec<_>>())
}

fn cmd_train(a: &RunArgs) -> Result<(), Failure> {
    let cfg = a.resolve()?;
    let variant = cfg.variant;
    if !variant.trains() {
        return Err(Error::Config(format!("variant {variant} has no trainable model; use `ablate` or `eval`")).into());
    }
    let train_ds = cfg.require_split("train")?;
    let dev_ds = cfg.load_split("dev")?;
    let table = match variant {
        Variant::WoLp => None,
        _ => load_table(&cfg)?,
    };
    let edges = table.as_ref().and_then(|t| variant.edge_table(t));
    let arch = variant.architecture(&cfg.model);
    let (model, history) = train(&train_ds, dev_ds.as_ref(), edges.as_ref(), &arch, &cfg.train_config())?;
    let echo = cfg.echo();
    let dir = &cfg.output_dir;
    write_file(&dir.join("checkpoint.json"), &model.to_checkpoint(&echo)?)?;
    write_file(&dir.join("history.jsonl"), &history.to_jsonl(&echo))?;
    write_file(&dir.join("timing.jsonl"), &history.timing_jsonl())?;
    let last = history.epochs.last();
    println!(
        "{}",
        json!({
            "variant": variant.name(),
            "epochs": history.epochs.len(),
            "best_epoch": history.best_epoch,
            "stopped_early": history.stopped_early,
            "train_loss": last.map(|r| r.train_loss),
            "dev_micro_f1": last.and_then(|r| r.dev_micro_f1),
            "output_dir": dir,
        })
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&a.checkpoint).map_err(|e| Error::io(&a.checkpoint, e))?;
    let (model, echo) = Model::from_checkpoint(&text)?;
    let mut cfg = match &a.run.config {
        Some(_) => a.run.resolve()?,
        None => {
            let mut c: RunConfig = serde_json::from_value(echo).map_err(Error::from)?;
            c.apply(&a.run.overrides());
            c.validate()?;
            c
        }
    };
    let test = cfg.require_split("test")?;
    let table = if model.params.uses_edge_features() {
        let t = load_table(&cfg)?.ok_or_else(|| Error::Config("checkpoint uses edge features but no probability source is configured".into()))?;
        cfg.variant.edge_table(&t)
    } else {
        None
    };
    if cfg.variant == Variant::WoLp && model.params.uses_edge_features() {
        cfg.variant = Variant::Full;
    }
    let report = evaluate(&model, &test, table.as_ref(), cfg.variant.name(), &cfg.eval)?;
    let out = a.output.clone().unwrap_or_else(|| cfg.output_dir.join("eval.json"));
    let doc = json!({ "config": cfg.echo(), "report": report });
    write_file(&out, &(serde_json::to_string_pretty(&doc).map_err(Error::from)? + "\n"))?;
    let reports = [report];
    print!("{}", render_comparison(&reports));
    print!("{}", render_distance_table(&reports));
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<(), Failure> {
    let cfg = a.run.resolve()?;
    let variants = a.variants.clone().unwrap_or_else(|| Variant::ALL.to_vec());
    let train_ds = cfg.require_split("train")?;
    let dev_ds = cfg.load_split("dev")?;
    let test_ds = cfg.require_split("test")?;
    let table = load_table(&cfg)?.ok_or_else(|| Error::Config("ablation needs a probability source in [probs]".into()))?;
    let splits = Splits {
        train: &train_ds,
        dev: dev_ds.as_ref(),
        test: &test_ds,
    };
    let outcomes = run_all(&variants, splits, &table, &cfg.ablation_config())?;
    let echo = cfg.echo();
    let reports: Vec<EvalReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    for o in &outcomes {
        if let Some((model, history)) = &o.trained {
            let dir = cfg.output_dir.join(&o.report.variant);
            write_file(&dir.join("checkpoint.json"), &model.to_checkpoint(&echo)?)?;
            write_file(&dir.join("history.jsonl"), &history.to_jsonl(&echo))?;
        }
    }
    let table_text = render_comparison(&reports) + "\n" + &render_distance_table(&reports);
    let doc = json!({ "config": echo, "reports": reports });
    write_file(
        &cfg.output_dir.join("ablation.json"),
        &(serde_json::to_string_pretty(&doc).map_err(Error::from)? + "\n"),
    )?;
    write_file(&cfg.output_dir.join("ablation.txt"), &table_text)?;
    print!("{table_text}");
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<(), Failure> {
    let scenario = match a.scenario {
        ScenarioKind::Profile => synth::profile(&synth::ProfileSpec::tb_dense_like(a.sharpness, a.flip_rate, a.seed))?,
        ScenarioKind::Separable => synth::separable(a.seed)?,
        ScenarioKind::SoftVsHard => synth::soft_vs_hard(&synth::SoftHardSpec::standard(a.seed))?,
        ScenarioKind::DistanceTrend => synth::distance_trend(&synth::DistanceSpec::standard(a.seed))?,
    };
    scenario.write(&a.out)?;

    let mut cfg = RunConfig {
        seed: a.seed,
        output_dir: PathBuf::from("runs").join(&scenario.name),
        ..RunConfig::default()
    };
    cfg.data.label_set = scenario.train.label_set.name.clone();
    cfg.data.train = Some("train.jsonl".into());
    cfg.data.dev = Some("dev.jsonl".into());
    cfg.data.test = Some("test.jsonl".into());
    cfg.probs.file = Some("probs.jsonl".into());
    cfg.train.learning_rate = 5e-3;
    if a.scenario != ScenarioKind::Separable {
        cfg.train.epochs = 30;
        cfg.train.early_stop_patience = Some(5);
    }
    write_file(&a.out.join("run.toml"), &cfg.to_toml())?;

    let manifest = json!({
        "scenario": scenario.name,
        "seed": a.seed,
        "label_set": cfg.data.label_set,
        "pairs": {
            "train": scenario.train.pairs.len(),
            "dev": scenario.dev.pairs.len(),
            "test": scenario.test.pairs.len(),
        },
        "prob_rows": scenario.table.len(),
    });
    write_file(&a.out.join("synth.json"), &(manifest.to_string() + "\n"))?;
    println!("{manifest}");
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<(), Failure> {
    let c = certify_gat(a.seed, a.eps)?;
    let pass = c.max_rel_err < GRADCHECK_TOLERANCE;
    let mut line = serde_json::to_value(&c).map_err(Error::from)?;
    line["pass"] = json!(pass);
    println!("{line}");
    if pass {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "max relative error {:.3e} in {} exceeds {GRADCHECK_TOLERANCE:e}",
            c.max_rel_err, c.worst_param
        )))
    }
}

fn cmd_validate(a: &ValidateArgs) -> Result<(), Failure> {
    if a.corpus.is_empty() && a.probs.is_none() {
        return Err(Failure::Usage("validate needs --corpus or --probs".into()));
    }
    let ls = LabelSet::builtin(&a.label_set)?;
    let mut corpora = Vec::new();
    let mut summaries = Vec::new();
    for path in &a.corpus {
        let ds = parse_corpus(path, &ls)?;
        summaries.push(json!({ "path": path, "documents": ds.documents.len(), "pairs": ds.pairs.len() }));
        corpora.push(ds);
    }
    let mut out = json!({ "ok": true, "label_set": ls.name, "corpora": summaries });
    if let Some(path) = &a.probs {
        let table = load_prob_table(path, &ls)?;
        for ds in &corpora {
            table.check_covers(ds)?;
        }
        out["probs"] = json!({ "path": path, "rows": table.len(), "provenance": table.provenance });
        out["covers_corpora"] = json!(!corpora.is_empty());
    }
    println!("{out}");
    Ok(())
}
