//! Command-line driver: argument parsing, run configuration and artifact
//! output for every pipeline stage.
//!
//! Each subcommand validates its inputs before doing any work, writes only
//! under its output directory and finishes with `manifest.json` listing the
//! resolved configuration and a SHA-256 of every artifact. Wall-clock
//! timings go to `timings.json`, which the manifest leaves out so repeated
//! runs with the same seed give identical manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bayes_opt::{default_initial_points, tune_attention_filters, SearchSpace};
use crate::error::{Error, Result};
use crate::model::{build_adsnn, load_model, AttentionBlockConfig, ModelConfig, WidthMultiplier, DEFAULT_ATTENTION_BLOCKS, DEFAULT_MEMORY_BUDGET};
use crate::preprocess::{encode_png, preprocess_pipeline, read_image, PreprocessConfig};
use crate::train::{cross_validate, evaluate, kfold_split, load_dataset, to_f64, train, train_val_split, worker_threads, CvOptions, Dataset, FoldReport};
use crate::viz::{activation_maps, filter_visualization, VizConfig};

/// Exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Io { .. } | Error::Format(_) => EXIT_DATA,
        Error::NonFinite(_) | Error::Numeric(_) => EXIT_NUMERIC,
    }
}

#[derive(Debug, Parser)]
#[command(name = "adsnn", version, about = "Attention-augmented depthwise-separable CNN pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment, align and resize a class-per-directory image tree.
    Preprocess(PreprocessArgs),
    /// k-fold cross-validation; writes metrics, histories and fold models.
    Train(TrainArgs),
    /// Scores a saved model on a dataset.
    Eval(EvalArgs),
    /// Bayesian optimization of the attention filter counts.
    Tune(TuneArgs),
    /// Filter visualizations and activation maps of a saved model.
    Visualize(VisualizeArgs),
    /// Per-layer standard vs depthwise-separable cost table (CSV on stdout).
    Cost(CostArgs),
    /// Writes the seeded four-class synthetic leaf dataset.
    Synth(SynthArgs),
}

/// Flags shared by the subcommands that read a run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Width multiplier such as `1/4` or `0.25`.
    #[arg(long)]
    pub width: Option<WidthMultiplier>,
    /// Total filters per attention block, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub attention: Option<Vec<usize>>,
    /// Train the backbone without attention blocks.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub init: Option<usize>,
    /// JSON search space (`{"dims": [...]}`).
    #[arg(long)]
    pub space: Option<PathBuf>,
    /// Training epochs per candidate.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub width: Option<WidthMultiplier>,
    /// Score candidates on validation (default) or held-out test accuracy.
    #[arg(long, value_enum)]
    pub objective: Option<Objective>,
}

#[derive(Debug, Clone, Args)]
pub struct VisualizeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub layer: usize,
    #[arg(long, conflicts_with = "all")]
    pub filter: Option<usize>,
    /// Every filter of the layer.
    #[arg(long)]
    pub all: bool,
    /// Image whose activation maps are exported as well.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct CostArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub width: Option<WidthMultiplier>,
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Architecture section of the run configuration. Unset fields are filled
/// from the dataset (`input_size`, `num_classes`) or the library defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub input_size: Option<usize>,
    pub num_classes: Option<usize>,
    pub width_multiplier: WidthMultiplier,
    /// Total output filters of each attention block; `null` keeps the
    /// default blocks, `[]` gives the plain backbone.
    pub attention_filters: Option<Vec<usize>>,
    pub attention_memory_budget: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            input_size: None,
            num_classes: None,
            width_multiplier: WidthMultiplier::one(),
            attention_filters: None,
            attention_memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, input_size: usize, num_classes: usize, seed: u64) -> Result<ModelConfig> {
        let input_size = self.input_size.unwrap_or(input_size);
        let num_classes = self.num_classes.unwrap_or(num_classes);
        let mut cfg = ModelConfig::baseline(input_size, num_classes, self.width_multiplier, seed);
        cfg.attention_memory_budget = self.attention_memory_budget;
        cfg.attention_blocks = match &self.attention_filters {
            None => vec![AttentionBlockConfig::split(cfg.backbone_channels())?; DEFAULT_ATTENTION_BLOCKS],
            Some(f) => f.iter().map(|&n| AttentionBlockConfig::split(n)).collect::<Result<_>>()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneSection {
    pub budget: usize,
    /// Random initial points; `null` means `max(5, 2·dims)`.
    pub init: Option<usize>,
    /// Lower and upper total filters per attention block when no explicit
    /// space is given.
    pub filters_lower: usize,
    pub filters_upper: usize,
    pub space: Option<SearchSpace>,
    /// Training epochs per candidate.
    pub epochs: usize,
    pub objective: Objective,
}

/// What a tuning candidate is scored on. Both use the same stratified
/// split: one fold held out as test, the rest divided into train and
/// validation by `training.train_ratio`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Validation,
    Test,
}

impl Default for TuneSection {
    fn default() -> Self {
        TuneSection {
            budget: 20,
            init: None,
            filters_lower: 8,
            filters_upper: 64,
            space: None,
            epochs: 10,
            objective: Objective::Validation,
        }
    }
}

/// Everything a run needs. Loaded from JSON, then overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: u64,
    pub model: ModelSection,
    pub training: CvOptions,
    pub tuning: TuneSection,
    pub preprocess: PreprocessConfig,
    pub visualize: VizConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            output: None,
            seed: 0,
            model: ModelSection::default(),
            training: CvOptions::default(),
            tuning: TuneSection::default(),
            preprocess: PreprocessConfig::default(),
            visualize: VizConfig::default(),
        }
    }
}

/// Rejects keys the configuration does not know, suggesting the closest
/// known key. `schema` is the serialized default, so every field appears.
fn check_keys(value: &Value, schema: &Value, path: &str) -> Result<()> {
    let (Value::Object(map), Value::Object(known)) = (value, schema) else {
        return Ok(());
    };
    for (key, v) in map {
        let here = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match known.get(key) {
            Some(s) => check_keys(v, s, &here)?,
            None => {
                let best = known
                    .keys()
                    .map(|k| (strsim::damerau_levenshtein(key, k), k))
                    .min()
                    .filter(|(d, _)| *d <= 3);
                let hint = best.map_or(String::new(), |(_, k)| format!("; did you mean `{k}`?"));
                return Err(Error::Config(format!("unknown key `{here}`{hint}")));
            }
        }
    }
    Ok(())
}

/// Parses a JSON run configuration. Syntax errors carry line and column.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("line {}, column {}: {}", e.line(), e.column(), e)))?;
    let schema = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    check_keys(&value, &schema, "")?;
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

pub fn parse_config_file(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {}", path.display(), m)),
        other => other,
    })
}

fn base_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => parse_config_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &common.out {
        cfg.output = Some(o.clone());
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn require_dir(path: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    let p = path.ok_or_else(|| Error::Config(format!("{what} directory not set (flag or config)")))?;
    if !p.is_dir() {
        return Err(Error::Data(format!("{what} directory {} does not exist", p.display())));
    }
    Ok(p.clone())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Data(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.output.clone().ok_or_else(|| Error::Config("output directory not set (--out or \"output\")".into()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        write!(s, "{:02x}", b).unwrap();
        s
    })
}

/// Collects artifacts in memory and writes them, with the manifest, once
/// the subcommand has finished.
pub struct Artifacts {
    root: PathBuf,
    files: BTreeMap<String, Vec<u8>>,
    timings: BTreeMap<String, f64>,
}

impl Artifacts {
    pub fn new(root: PathBuf) -> Self {
        Artifacts {
            root,
            files: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    /// `rel` is relative to the output directory and uses `/`.
    pub fn add(&mut self, rel: impl Into<String>, bytes: impl Into<Vec<u8>>) -> Result<()> {
        let rel = rel.into();
        let p = Path::new(&rel);
        if p.is_absolute() || p.components().any(|c| !matches!(c, std::path::Component::Normal(_))) {
            return Err(Error::InvalidArgument(format!("artifact path {rel:?} escapes the output directory")));
        }
        self.files.insert(rel, bytes.into());
        Ok(())
    }

    pub fn add_png(&mut self, rel: impl Into<String>, img: &crate::preprocess::Image) -> Result<()> {
        self.add(rel, encode_png(img)?)
    }

    pub fn time(&mut self, name: &str, seconds: f64) {
        self.timings.insert(name.to_string(), seconds);
    }

    /// Writes every artifact, `manifest.json` and `timings.json`; returns
    /// the manifest.
    pub fn finish(mut self, subcommand: &str, cfg: &RunConfig, extra: Value) -> Result<Value> {
        let hashes: BTreeMap<&String, String> = self.files.iter().map(|(k, v)| (k, sha256_hex(v))).collect();
        let config = serde_json::to_value(cfg).expect("config serializes");
        let config_hash = sha256_hex(serde_json::to_string(&config).expect("json").as_bytes());
        let manifest = serde_json::json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "subcommand": subcommand,
            "seed": cfg.seed,
            "config_hash": config_hash,
            "config": config,
            "details": extra,
            "artifacts": hashes,
        });
        let text = serde_json::to_string_pretty(&manifest).expect("json") + "\n";
        self.files.insert("manifest.json".into(), text.into_bytes());
        let timings = serde_json::to_string_pretty(&self.timings).expect("json") + "\n";
        self.files.insert("timings.json".into(), timings.into_bytes());
        for (rel, bytes) in &self.files {
            let path = self.root.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(manifest)
    }
}

/// Order-preserving map over `items` on up to [`worker_threads`] threads.
fn par_map<I: Sync, O: Send>(items: &[I], f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    let threads = worker_threads().clamp(1, items.len().max(1));
    let chunk = items.len().div_ceil(threads).max(1);
    let f = &f;
    let parts: Vec<Result<Vec<O>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(move || c.iter().map(f).collect())).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numeric("worker panicked".into()))))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn timed<T>(art: &mut Artifacts, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let r = f()?;
    art.time(name, start.elapsed().as_secs_f64());
    Ok(r)
}

fn run_preprocess(args: &PreprocessArgs) -> Result<Value> {
    let mut cfg = base_config(&args.common)?;
    if let Some(i) = &args.input {
        cfg.dataset = Some(i.clone());
    }
    if let Some(s) = args.size {
        cfg.preprocess.target_size = s;
    }
    if let Some(k) = args.kernel {
        cfg.preprocess.kernel_size = k;
    }
    let input = require_dir(cfg.dataset.as_ref(), "input")?;
    let out = output_dir(&cfg)?;
    if cfg.preprocess.kernel_size < 3 || cfg.preprocess.kernel_size % 2 == 0 || cfg.preprocess.target_size == 0 {
        return Err(Error::Config("kernel must be odd and >= 3, size must be >= 1".into()));
    }
    let mut jobs = Vec::new();
    let mut classes: Vec<PathBuf> = std::fs::read_dir(&input)
        .map_err(|e| Error::io(&input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Data(format!("{}: no class directories", input.display())));
    }
    for dir in &classes {
        let class = dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| ["png", "ppm", "pgm", "pnm"].contains(&x.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();
        jobs.extend(files.into_iter().map(|f| (class.clone(), f)));
    }
    let mut art = Artifacts::new(out);
    let pcfg = cfg.preprocess.clone();
    let results = timed(&mut art, "preprocess_seconds", || {
        par_map(&jobs, |(class, path)| {
            let img = read_image(path)?;
            preprocess_pipeline(&img, &pcfg)
                .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
                .map(|r| (class.clone(), path.file_stem().unwrap().to_string_lossy().into_owned(), r))
        })
    })?;
    for (class, stem, (img, meta)) in &results {
        art.add_png(format!("{class}/{stem}.png"), img)?;
        art.add(format!("{class}/{stem}.json"), serde_json::to_string_pretty(meta).expect("json") + "\n")?;
    }
    log::info!("preprocessed {} images", results.len());
    art.finish("preprocess", &cfg, serde_json::json!({ "images": results.len() }))
}

fn train_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = base_config(&args.common)?;
    if let Some(d) = &args.data {
        cfg.dataset = Some(d.clone());
    }
    let t = &mut cfg.training;
    if let Some(e) = args.epochs {
        t.train.epochs = e;
    }
    if let Some(f) = args.folds {
        t.folds = f;
    }
    if let Some(b) = args.batch_size {
        t.train.batch_size = b;
    }
    if let Some(lr) = args.lr {
        t.train.learning_rate = lr;
    }
    if let Some(w) = args.width {
        cfg.model.width_multiplier = w;
    }
    if let Some(a) = &args.attention {
        cfg.model.attention_filters = Some(a.clone());
    }
    if args.baseline {
        cfg.model.attention_filters = Some(Vec::new());
    }
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let root = require_dir(cfg.dataset.as_ref(), "dataset")?;
    load_dataset(&root, cfg.model.input_size)
}

fn fold_rows(folds: &[FoldReport]) -> Value {
    serde_json::to_value(folds).expect("fold reports serialize")
}

fn run_train(args: &TrainArgs) -> Result<Value> {
    let cfg = train_config(args)?;
    let out = output_dir(&cfg)?;
    cfg.training.train.validate()?;
    let data = load_data(&cfg)?;
    let model_cfg = cfg.model.resolve(data.image_size(), data.num_classes(), cfg.seed)?;
    let mut art = Artifacts::new(out);
    let (report, outcomes) = timed(&mut art, "cross_validation_seconds", || {
        cross_validate(&data, &model_cfg, &cfg.training, cfg.seed)
    })?;
    art.add("metrics.csv", report.to_csv(false))?;
    art.add("report.txt", report.render())?;
    art.add(
        "confusion.json",
        serde_json::to_string_pretty(&fold_rows(&report.folds)).expect("json") + "\n",
    )?;
    art.add("model_config.json", serde_json::to_string_pretty(&model_cfg).expect("json") + "\n")?;
    for o in &outcomes {
        let k = o.report.fold;
        art.add(format!("history_fold{k}.csv"), o.history.to_csv())?;
        art.add(format!("model_fold{k}.adsnn"), o.model.to_bytes())?;
        art.time(&format!("fold{k}_minutes"), o.report.train_minutes);
    }
    print!("{}", report.render());
    art.finish(
        "train",
        &cfg,
        serde_json::json!({
            "model_config_hash": model_cfg.hash(),
            "parameters": outcomes.first().map(|o| o.model.count_parameters()),
            "mean_accuracy": report.accuracy.mean,
        }),
    )
}

fn run_eval(args: &EvalArgs) -> Result<Value> {
    let mut cfg = base_config(&args.common)?;
    if let Some(d) = &args.data {
        cfg.dataset = Some(d.clone());
    }
    let out = output_dir(&cfg)?;
    require_file(&args.model, "model file")?;
    let model = load_model::<f32>(&args.model)?;
    let root = require_dir(cfg.dataset.as_ref(), "dataset")?;
    let data = load_dataset(&root, Some(model.input_size))?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut art = Artifacts::new(out);
    let cm = timed(&mut art, "eval_seconds", || evaluate(&model, &data, &all))?;
    let rep = FoldReport::from_confusion(1, cm, f64::NAN, 0.0)?;
    let mut csv = String::from("accuracy,precision_macro,recall_macro,f1_macro");
    for n in &data.class_names {
        write!(csv, ",precision_{n},recall_{n},f1_{n}").unwrap();
    }
    write!(
        csv,
        "\n{:.6},{:.6},{:.6},{:.6}",
        rep.accuracy, rep.precision_macro, rep.recall_macro, rep.f1_macro
    )
    .unwrap();
    for c in &rep.per_class {
        write!(csv, ",{:.6},{:.6},{:.6}", c.precision, c.recall, c.f1).unwrap();
    }
    csv.push('\n');
    art.add("eval_metrics.csv", csv)?;
    art.add("confusion.json", serde_json::to_string(&rep.confusion).expect("json") + "\n")?;
    println!("accuracy {:.2}%", 100.0 * rep.accuracy);
    let model_hash = sha256_hex(&model.to_bytes());
    art.finish("eval", &cfg, serde_json::json!({ "model_sha256": model_hash, "images": data.len() }))
}

fn run_tune(args: &TuneArgs) -> Result<Value> {
    let mut cfg = base_config(&args.common)?;
    if let Some(d) = &args.data {
        cfg.dataset = Some(d.clone());
    }
    if let Some(b) = args.budget {
        cfg.tuning.budget = b;
    }
    if let Some(i) = args.init {
        cfg.tuning.init = Some(i);
    }
    if let Some(e) = args.epochs {
        cfg.tuning.epochs = e;
    }
    if let Some(w) = args.width {
        cfg.model.width_multiplier = w;
    }
    if let Some(o) = args.objective {
        cfg.tuning.objective = o;
    }
    if let Some(p) = &args.space {
        require_file(p, "search space")?;
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let space: SearchSpace = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), e)))?;
        cfg.tuning.space = Some(space);
    }
    let out = output_dir(&cfg)?;
    cfg.training.train.validate()?;
    let data = load_data(&cfg)?;
    let base = cfg.model.resolve(data.image_size(), data.num_classes(), cfg.seed)?;
    let space = match &cfg.tuning.space {
        Some(s) => s.clone(),
        None => SearchSpace::filters(base.attention_blocks.len(), cfg.tuning.filters_lower, cfg.tuning.filters_upper)?,
    };
    let n0 = cfg.tuning.init.unwrap_or_else(|| default_initial_points(space.len()));
    let labels = data.labels();
    let (train_all, test) = kfold_split(&labels, cfg.training.folds, cfg.seed)?.swap_remove(0);
    let (tr, val) = train_val_split(&train_all, &labels, cfg.training.train_ratio, cfg.seed)?;
    if val.is_empty() && cfg.tuning.objective == Objective::Validation {
        return Err(Error::Data("tuning needs a non-empty validation split".into()));
    }
    let objective = cfg.tuning.objective;
    let mut topts = cfg.training.train.clone();
    topts.epochs = cfg.tuning.epochs;
    topts.seed = cfg.seed;
    let mut art = Artifacts::new(out);
    let tuned = timed(&mut art, "tuning_seconds", || {
        tune_attention_filters(&base, &space, n0, cfg.tuning.budget, cfg.seed, |c| {
            let mut model = build_adsnn::<f32>(c)?;
            let h = train(&mut model, &data, &tr, &val, &topts)?;
            match objective {
                Objective::Validation => Ok(h.epochs[h.best_epoch - 1].val_accuracy.unwrap_or(0.0)),
                Objective::Test => Ok(to_f64(evaluate(&model, &data, &test)?.accuracy())),
            }
        })
    })?;
    art.add("tuning_log.csv", tuned.result.to_csv(false))?;
    art.add("best_config.json", serde_json::to_string_pretty(&tuned.best_config).expect("json") + "\n")?;
    for r in &tuned.result.history {
        art.time(&format!("iteration{:03}_seconds", r.iteration), r.seconds);
    }
    println!("best {:?} accuracy {:.4} at {:?}", objective, tuned.result.best_y, tuned.result.best_x);
    art.finish(
        "tune",
        &cfg,
        serde_json::json!({ "best_x": tuned.result.best_x, "best_accuracy": tuned.result.best_y, "initial_points": n0 }),
    )
}

fn run_visualize(args: &VisualizeArgs) -> Result<Value> {
    let mut cfg = base_config(&args.common)?;
    if let Some(s) = args.steps {
        cfg.visualize.steps = s;
    }
    cfg.visualize.seed = cfg.seed;
    let out = output_dir(&cfg)?;
    require_file(&args.model, "model file")?;
    if let Some(i) = &args.input {
        require_file(i, "input image")?;
    }
    let model = load_model::<f32>(&args.model)?;
    let channels = model.layer_channels(args.layer)?;
    let filters: Vec<usize> = match (args.filter, args.all) {
        (Some(f), _) => vec![f],
        (None, true) => (0..channels).collect(),
        (None, false) => return Err(Error::Config("pass --filter <n> or --all".into())),
    };
    let mut art = Artifacts::new(out);
    let vcfg = cfg.visualize.clone();
    let results = timed(&mut art, "visualize_seconds", || {
        par_map(&filters, |&f| filter_visualization(&model, args.layer, f, &vcfg))
    })?;
    let mut zero = Vec::new();
    for (&f, v) in filters.iter().zip(&results) {
        art.add_png(format!("layer{}_filter{}.png", args.layer, f), &v.image)?;
        let mut csv = String::from("step,loss\n");
        for (i, l) in v.losses.iter().enumerate() {
            writeln!(csv, "{i},{l:.9e}").unwrap();
        }
        art.add(format!("layer{}_filter{}_loss.csv", args.layer, f), csv)?;
        if v.zero_gradient {
            zero.push(f);
        }
    }
    if results.len() > 1 {
        let imgs: Vec<_> = results.iter().map(|v| v.image.clone()).collect();
        let cols = (imgs.len() as f64).sqrt().ceil() as usize;
        let grid = crate::viz::mosaic(&imgs, cols)?;
        art.add_png(format!("layer{}_filters.png", args.layer), &grid)?;
    }
    if let Some(i) = &args.input {
        let img = read_image(i)?;
        let img = if img.height != model.input_size || img.width != model.input_size {
            img.resize(model.input_size, model.input_size)?
        } else {
            img
        };
        let grid = activation_maps(&model, &img.to_tensor(), args.layer)?;
        let cols = (grid.maps.len() as f64).sqrt().ceil() as usize;
        let m = crate::viz::mosaic(&grid.maps, cols)?;
        art.add_png(format!("layer{}_activations.png", args.layer), &m)?;
    }
    art.finish(
        "visualize",
        &cfg,
        serde_json::json!({ "layer": args.layer, "filters": filters, "zero_gradient_filters": zero }),
    )
}

/// The cost table as CSV.
pub fn cost_csv(cfg: &ModelConfig) -> Result<String> {
    let model = build_adsnn::<f32>(cfg)?;
    let mut s = String::from("layer,type,kernel,in_channels,out_channels,in_size,cost_standard,cost_separable,reduction,actual\n");
    for r in model.layer_costs()? {
        let red = r.reduction();
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{:.6},{}",
            r.layer,
            r.kind,
            r.params.kernel,
            r.params.in_channels,
            r.params.out_channels,
            r.params.in_size,
            r.standard,
            r.separable,
            *red.numer() as f64 / *red.denom() as f64,
            r.actual
        )
        .unwrap();
    }
    Ok(s)
}

fn run_cost(args: &CostArgs) -> Result<Value> {
    let mut cfg = base_config(&args.common)?;
    if let Some(w) = args.width {
        cfg.model.width_multiplier = w;
    }
    if let Some(c) = args.classes {
        cfg.model.num_classes = Some(c);
    }
    if let Some(s) = args.size {
        cfg.model.input_size = Some(s);
    }
    if args.baseline {
        cfg.model.attention_filters = Some(Vec::new());
    }
    let model_cfg = cfg.model.resolve(224, 4, cfg.seed)?;
    let csv = cost_csv(&model_cfg)?;
    print!("{csv}");
    match &cfg.output {
        Some(out) => {
            let mut art = Artifacts::new(out.clone());
            art.add("cost.csv", csv)?;
            art.finish("cost", &cfg, serde_json::json!({ "model_config_hash": model_cfg.hash() }))
        }
        None => Ok(Value::Null),
    }
}

fn run_synth(args: &SynthArgs) -> Result<Value> {
    if args.per_class == 0 || args.size < 8 {
        return Err(Error::Config("need --per-class >= 1 and --size >= 8".into()));
    }
    crate::synthetic::write_shapes_dataset(&args.out, args.per_class, args.size, args.seed)?;
    Ok(Value::Null)
}

/// Runs one parsed command and returns its manifest (`null` when none is
/// written).
pub fn run(cmd: &Command) -> Result<Value> {
    match cmd {
        Command::Preprocess(a) => run_preprocess(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Tune(a) => run_tune(a),
        Command::Visualize(a) => run_visualize(a),
        Command::Cost(a) => run_cost(a),
        Command::Synth(a) => run_synth(a),
    }
}

/// Parses `args` (including the program name) and runs them; returns the
/// process exit code. Usage errors exit 1, help and version exit 0.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli.command) {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let c = parse_config_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.training.train.epochs, 100);
        assert_eq!(c.training.folds, 5);
    }

    #[test]
    fn unknown_key_suggests_closest() {
        let e = parse_config_str(r#"{"training": {"train": {"epcohs": 3}}}"#).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("training.train.epcohs"), "{msg}");
        assert!(msg.contains("did you mean `epochs`"), "{msg}");
        assert_eq!(exit_code(&e), EXIT_CONFIG);
        let e = parse_config_str(r#"{"sede": 3}"#).unwrap_err().to_string();
        assert!(e.contains("`seed`"), "{e}");
    }

    #[test]
    fn syntax_error_has_position() {
        let e = parse_config_str("{\n  \"seed\": ,\n}").unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 4, "training": {"folds": 3, "train": {"epochs": 7}}}"#).unwrap();
        let cli = Cli::try_parse_from(["adsnn", "train", "--config", p.to_str().unwrap(), "--epochs", "2", "--width", "1/4"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let c = train_config(&a).unwrap();
        assert_eq!(c.training.train.epochs, 2);
        assert_eq!(c.training.folds, 3);
        assert_eq!(c.seed, 4);
        assert_eq!(c.model.width_multiplier, WidthMultiplier::new(1, 4).unwrap());
    }

    #[test]
    fn artifacts_stay_inside_output() {
        let mut a = Artifacts::new(PathBuf::from("x"));
        assert!(a.add("../evil", "x").is_err());
        assert!(a.add("/abs", "x").is_err());
        assert!(a.add("ok/fine.csv", "x").is_ok());
    }

    #[test]
    fn model_section_resolution() {
        let m = ModelSection {
            width_multiplier: WidthMultiplier::new(1, 4).unwrap(),
            ..Default::default()
        };
        let c = m.resolve(64, 4, 1).unwrap();
        assert_eq!(c, ModelConfig::desk_scale(4, 1));
        let b = ModelSection {
            attention_filters: Some(vec![]),
            ..m
        };
        assert!(b.resolve(64, 4, 1).unwrap().attention_blocks.is_empty());
    }
}
