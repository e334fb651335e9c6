//! Command-line entry point: `train`, `evaluate`, `backtest`, `gradcheck`
//! and `gen-synth`.
//!
//! Settings come from a flat TOML file (`--config`) overridden by flags.
//! Exit codes: 0 success, 1 internal failure, 2 user or configuration error.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{GradCheckOptions, Tape};
use crate::eval::{
    compare_benchmark, metrics, run_strategy, write_predictions, write_trades, EvalError, StrategyConfig,
};
use crate::market_data::{
    build_windows, generate_synthetic, merge_days, read_prices, read_sentiment, split_dataset, write_prices,
    write_sentiment, CrossSection, DataError, DatasetSplit, IngestionReport, MarketDay, MarketSeries, SplitRatios,
    SynthConfig, WindowConfig,
};
use crate::gat::write_attention;
use crate::model::{prepare_days, Batch, EdgeMode, Model, ModelConfig, ModelError, PreparedDay};
use crate::relation_graph::{
    build_snapshots, read_relations, read_universe, write_relations, write_universe, yearly_snapshot_dates,
    GraphError, PropertyWhitelist, StockGraph,
};
use crate::training::{check_model_gradients, fit, predict_days, write_history, TrainConfig, TrainError};

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const HISTORY_FILE: &str = "history.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) | ModelError::Checkpoint { .. } | ModelError::Io(_) | ModelError::Window { .. } => {
                CliError::User(e.to_string())
            }
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::InvalidConfig(_) | TrainError::NoData(_) => CliError::User(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(_) => CliError::Internal(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "relgat", version, about = "Stock movement classification over a company relation graph")]
pub struct Cli {
    /// Flat TOML settings file, or a manifest written by `train`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, history and manifest.
    Train(TrainArgs),
    /// Score a trained run on one split and write metrics.
    Evaluate(EvaluateArgs),
    /// Trade a trained run's predictions over a date range.
    Backtest(BacktestArgs),
    /// Finite-difference check of the full network's gradients.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic market with a planted signal.
    GenSynth(GenSynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding prices.csv, sentiment.csv, relations.csv,
    /// universe.csv and benchmark.csv.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub prices: Option<PathBuf>,
    #[arg(long)]
    pub sentiment: Option<PathBuf>,
    #[arg(long)]
    pub relations: Option<PathBuf>,
    #[arg(long)]
    pub universe: Option<PathBuf>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub edges: Option<EdgeArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EdgeArg {
    Relations,
    SelfOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Also write every day's attention weights.
    #[arg(long)]
    pub attention: bool,
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// First trading date (default: start of the test split).
    #[arg(long)]
    pub from: Option<NaiveDate>,
    /// Last trading date (default: end of the test split).
    #[arg(long)]
    pub to: Option<NaiveDate>,
    /// Benchmark price file (default: the run's benchmark path).
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Permit a range that overlaps training or validation dates.
    #[arg(long)]
    pub allow_overlap: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Also check the default-size network on sampled coordinates.
    #[arg(long)]
    pub full_size: bool,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub stocks: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    /// `none`, `sentiment` or `contagion`.
    #[arg(long)]
    pub signal: Option<String>,
    #[arg(long)]
    pub probability: Option<f64>,
}

/// Every setting of a training run. Paths are relative to the working
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub prices: PathBuf,
    pub sentiment: PathBuf,
    pub relations: PathBuf,
    pub universe: PathBuf,
    pub benchmark: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub threshold: f64,
    pub shuffle: bool,
    pub lookback: usize,
    pub max_gap_days: i64,
    pub hidden: usize,
    pub media_hidden: usize,
    pub fused: usize,
    pub gat_hidden: usize,
    pub heads: usize,
    pub edges: EdgeMode,
    pub properties: Vec<String>,
    pub train_ratio: f64,
    pub validation_ratio: f64,
    pub test_ratio: f64,
    pub top_k: usize,
    pub cost_per_trade: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let model = ModelConfig::default();
        let split = SplitRatios::default();
        let data = Path::new("data");
        Self {
            prices: data.join("prices.csv"),
            sentiment: data.join("sentiment.csv"),
            relations: data.join("relations.csv"),
            universe: data.join("universe.csv"),
            benchmark: data.join("benchmark.csv"),
            out: PathBuf::from("runs/default"),
            seed: 0,
            learning_rate: train.learning_rate,
            max_epochs: train.max_epochs,
            batch_size: train.batch_size,
            patience: train.patience,
            threshold: train.threshold,
            shuffle: train.shuffle,
            lookback: WindowConfig::default().lookback,
            max_gap_days: WindowConfig::default().max_gap_days,
            hidden: model.hidden,
            media_hidden: model.media_hidden,
            fused: model.fused,
            gat_hidden: model.gat_hidden,
            heads: model.heads,
            edges: EdgeMode::Relations,
            properties: PropertyWhitelist::default().iter().map(String::from).collect(),
            train_ratio: split.train,
            validation_ratio: split.validation,
            test_ratio: split.test,
            top_k: StrategyConfig::default().top_k,
            cost_per_trade: 0.0,
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            threshold: self.threshold,
            shuffle: self.shuffle,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            media_hidden: self.media_hidden,
            fused: self.fused,
            gat_hidden: self.gat_hidden,
            heads: self.heads,
        }
    }

    pub fn window_config(&self) -> WindowConfig {
        WindowConfig {
            lookback: self.lookback,
            max_gap_days: self.max_gap_days,
            ..Default::default()
        }
    }

    pub fn split_ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train_ratio,
            validation: self.validation_ratio,
            test: self.test_ratio,
        }
    }

    pub fn strategy(&self) -> StrategyConfig {
        StrategyConfig {
            top_k: self.top_k,
            cost_per_trade: self.cost_per_trade,
        }
    }

    fn inputs(&self) -> [(&'static str, &Path); 5] {
        [
            ("prices", &self.prices),
            ("sentiment", &self.sentiment),
            ("relations", &self.relations),
            ("universe", &self.universe),
            ("benchmark", &self.benchmark),
        ]
    }
}

/// First and last target date of each split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDates {
    pub train: [NaiveDate; 2],
    pub validation: [NaiveDate; 2],
    pub test: [NaiveDate; 2],
}

/// Everything needed to reproduce a training run. Contains no timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub config: RunConfig,
    /// SHA-256 of every input file.
    pub fingerprints: BTreeMap<String, String>,
    pub split: SplitDates,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = read_text(path)?;
        toml::from_str(&text).map_err(|e| CliError::User(format!("{}: {e}", path.display())))
    }
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(args) => cmd_train(&resolve_train_config(cli, args)?).map(|_| ()),
        Command::Evaluate(args) => cmd_evaluate(cli, args),
        Command::Backtest(args) => cmd_backtest(cli, args),
        Command::Gradcheck(args) => cmd_gradcheck(cli.seed.unwrap_or(0), args.full_size),
        Command::GenSynth(args) => cmd_gen_synth(cli, args),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::User(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::User(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::User(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::User(format!("{}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::User(format!("{}: {e}", path.display())))
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

/// Hex SHA-256 of a file's bytes.
pub fn fingerprint(path: &Path) -> Result<String, CliError> {
    let mut reader = open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = reader
            .read(&mut buf)
            .map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Loads the settings file into a table. A manifest contributes its
/// `config` table and its fingerprints, which must still match the inputs.
fn load_table(path: Option<&Path>) -> Result<(toml::Table, Option<BTreeMap<String, String>>), CliError> {
    let Some(path) = path else {
        return Ok((toml::Table::new(), None));
    };
    let text = read_text(path)?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
    if table.contains_key("config") && table.contains_key("fingerprints") {
        let manifest: Manifest = toml::from_str(&text).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
        let config = toml::Table::try_from(&manifest.config).map_err(internal)?;
        return Ok((config, Some(manifest.fingerprints)));
    }
    Ok((table, None))
}

fn set<V: Into<toml::Value>>(table: &mut toml::Table, key: &str, value: Option<V>) {
    if let Some(v) = value {
        table.insert(key.to_string(), v.into());
    }
}

fn path_value(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn as_toml_int(v: usize) -> i64 {
    i64::try_from(v).unwrap_or(i64::MAX)
}

/// Applies flag > file > default precedence.
pub fn resolve_train_config(cli: &Cli, args: &TrainArgs) -> Result<RunConfig, CliError> {
    let (mut table, fingerprints) = load_table(cli.config.as_deref())?;
    if let Some(dir) = &args.data {
        for name in ["prices", "sentiment", "relations", "universe", "benchmark"] {
            table.insert(name.into(), path_value(&dir.join(format!("{name}.csv"))).into());
        }
    }
    set(&mut table, "prices", args.prices.as_deref().map(path_value));
    set(&mut table, "sentiment", args.sentiment.as_deref().map(path_value));
    set(&mut table, "relations", args.relations.as_deref().map(path_value));
    set(&mut table, "universe", args.universe.as_deref().map(path_value));
    set(&mut table, "out", cli.out.as_deref().map(path_value));
    set(&mut table, "seed", cli.seed.map(|s| i64::try_from(s).unwrap_or(i64::MAX)));
    set(&mut table, "learning_rate", args.learning_rate);
    set(&mut table, "max_epochs", args.max_epochs.map(as_toml_int));
    set(&mut table, "patience", args.patience.map(as_toml_int));
    set(&mut table, "batch_size", args.batch_size.map(as_toml_int));
    set(
        &mut table,
        "edges",
        args.edges.map(|e| match e {
            EdgeArg::Relations => "relations",
            EdgeArg::SelfOnly => "self-only",
        }),
    );
    let config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::User(format!("config: {e}")))?;
    config.train_config().validate()?;
    config.model_config().validate()?;
    if let Some(expected) = fingerprints {
        for (name, path) in config.inputs() {
            let actual = fingerprint(path)?;
            if expected.get(name) != Some(&actual) {
                return Err(CliError::User(format!(
                    "{} does not match the manifest fingerprint",
                    path.display()
                )));
            }
        }
    }
    Ok(config)
}

/// Parsed inputs of a run.
pub struct Dataset {
    pub series: MarketSeries,
    pub report: IngestionReport,
    pub split: DatasetSplit,
    pub snapshots: Vec<StockGraph>,
}

impl Dataset {
    pub fn load(config: &RunConfig) -> Result<Self, CliError> {
        for (_, path) in config.inputs() {
            if !path.is_file() {
                return Err(CliError::User(format!("input file not found: {}", path.display())));
            }
        }
        let prices = read_prices(open(&config.prices)?)?;
        let sentiment = read_sentiment(open(&config.sentiment)?)?;
        let (series, mut report) = merge_days(&prices, &sentiment)?;
        let universe = read_universe(open(&config.universe)?)?;
        let relations = read_relations(open(&config.relations)?)?;
        for symbol in series.keys() {
            if universe.index_of(symbol).is_none() {
                return Err(GraphError::UnknownTicker(symbol.clone()).into());
            }
        }
        let windows = build_windows(&series, &config.window_config())?;
        report.windows_built = windows.windows.len();
        report.windows_skipped = windows.skipped.len();
        report.score_floor_events = windows.score_floor_events;
        report.score_cap_events = windows.score_cap_events;
        let split = split_dataset(windows.windows, config.split_ratios())?;
        let first = split.train.first().map(|s| s.date);
        let last = split.test.last().map(|s| s.date);
        let (Some(first), Some(last)) = (first, last) else {
            return Err(CliError::User("no windows could be built from the inputs".into()));
        };
        let whitelist = PropertyWhitelist::new(config.properties.iter().cloned());
        let snapshots = build_snapshots(&relations, &universe, &yearly_snapshot_dates(first, last), &whitelist);
        Ok(Self {
            series,
            report,
            split,
            snapshots,
        })
    }

    pub fn split_dates(&self) -> Result<SplitDates, CliError> {
        let range = |s: &[CrossSection], name: &str| match (s.first(), s.last()) {
            (Some(a), Some(b)) => Ok([a.date, b.date]),
            _ => Err(CliError::User(format!("{name} split is empty"))),
        };
        Ok(SplitDates {
            train: range(&self.split.train, "train")?,
            validation: range(&self.split.validation, "validation")?,
            test: range(&self.split.test, "test")?,
        })
    }
}

/// Outcome of `train`.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub manifest: Manifest,
    pub best_val_f1: f64,
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainSummary, CliError> {
    let data = Dataset::load(config)?;
    let split_dates = data.split_dates()?;
    let train = prepare_days(&data.split.train, &data.snapshots, config.edges)?;
    let validation = prepare_days(&data.split.validation, &data.snapshots, config.edges)?;
    info!(
        "training on {} days, validating on {} days",
        train.len(),
        validation.len()
    );
    let model = Model::new(config.model_config(), config.seed)?;
    let outcome = fit(model, &train, &validation, &config.train_config())?;

    ensure_dir(&config.out)?;
    let mut fingerprints = BTreeMap::new();
    for (name, path) in config.inputs() {
        fingerprints.insert(name.to_string(), fingerprint(path)?);
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        fingerprints,
        split: split_dates,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
    };
    let mut checkpoint = Vec::new();
    outcome.model.save(&mut checkpoint)?;
    write_file(&config.out.join(CHECKPOINT_FILE), &checkpoint)?;
    let mut history = Vec::new();
    write_history(&mut history, &outcome.history).map_err(internal)?;
    write_file(&config.out.join(HISTORY_FILE), &history)?;
    write_file(
        &config.out.join(MANIFEST_FILE),
        toml::to_string(&manifest).map_err(internal)?.as_bytes(),
    )?;
    let report = toml::to_string(&data.report).map_err(internal)?;
    write_file(&config.out.join("ingestion.toml"), report.as_bytes())?;
    let graphs: String = data.snapshots.iter().map(StockGraph::export_text).collect();
    write_file(&config.out.join("graphs.txt"), graphs.as_bytes())?;
    println!(
        "best epoch {} of {} with validation F1 {:.4}; artifacts in {}",
        outcome.best_epoch,
        outcome.history.len(),
        outcome.best_val_f1,
        config.out.display()
    );
    Ok(TrainSummary {
        manifest,
        best_val_f1: outcome.best_val_f1,
    })
}

fn load_run(run: &Path) -> Result<(Manifest, Model), CliError> {
    let manifest = Manifest::read(&run.join(MANIFEST_FILE))?;
    let model = Model::load(open(&run.join(CHECKPOINT_FILE))?)?;
    Ok((manifest, model))
}

/// One line per nonzero weight: `date head source target weight`.
pub fn write_attention_dump<W: Write>(out: &mut W, model: &Model, days: &[PreparedDay]) -> Result<(), CliError> {
    for day in days {
        let batch = Batch::from_days(&[day])?;
        let tape = Tape::new();
        let forward = model.forward(&tape, &batch)?;
        let heads: Vec<_> = forward.attention.iter().map(|a| a.value()).collect();
        write_attention(out, day.date, &day.symbols, &heads).map_err(internal)?;
    }
    Ok(())
}

fn cmd_evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<(), CliError> {
    let (manifest, model) = load_run(&args.run)?;
    let data = Dataset::load(&manifest.config)?;
    let sections = match args.split {
        SplitArg::Train => &data.split.train,
        SplitArg::Validation => &data.split.validation,
        SplitArg::Test => &data.split.test,
    };
    let days = prepare_days(sections, &data.snapshots, manifest.config.edges)?;
    let preds = predict_days(&model, &days, manifest.config.batch_size)?;
    let m = metrics(&preds, manifest.config.threshold)?;
    let out = cli.out.clone().unwrap_or_else(|| args.run.clone());
    ensure_dir(&out)?;
    let name = format!("{:?}", args.split).to_lowercase();
    let json = serde_json::to_string_pretty(&m).map_err(internal)?;
    write_file(&out.join(format!("metrics-{name}.json")), json.as_bytes())?;
    write_predictions(create(&out.join(format!("predictions-{name}.csv")))?, &preds)?;
    if args.attention {
        let mut w = create(&out.join(format!("attention-{name}.txt")))?;
        write_attention_dump(&mut w, &model, &days)?;
        w.flush().map_err(internal)?;
    }
    println!("{name}: f1 {:.4} accuracy {:.4} mcc {:.4} ({} samples)", m.f1, m.accuracy, m.mcc, m.count);
    Ok(())
}

/// Fails when `[from, to]` intersects the dates used for fitting or model
/// selection.
pub fn check_leak(split: &SplitDates, from: NaiveDate, to: NaiveDate) -> Result<(), CliError> {
    let (seen_first, seen_last) = (split.train[0], split.validation[1]);
    if from <= seen_last && to >= seen_first {
        return Err(CliError::User(format!(
            "backtest range {from}..={to} overlaps training/validation dates {seen_first}..={seen_last}; \
             pass --allow-overlap to run anyway"
        )));
    }
    Ok(())
}

fn benchmark_days(path: &Path) -> Result<(String, Vec<MarketDay>), CliError> {
    let rows = read_prices(open(path)?)?;
    let Some(symbol) = rows.first().map(|r| r.symbol.clone()) else {
        return Err(CliError::User(format!("{}: no benchmark rows", path.display())));
    };
    if let Some(other) = rows.iter().find(|r| r.symbol != symbol) {
        return Err(CliError::User(format!(
            "{}: expected one symbol, found {symbol} and {}",
            path.display(),
            other.symbol
        )));
    }
    let days = rows
        .into_iter()
        .map(|r| MarketDay {
            date: r.date,
            symbol: r.symbol,
            adj_close: r.adj_close,
            high: r.high,
            low: r.low,
            open: r.open,
            sentiment: 0.0,
            activity: 0.0,
            score_imputed: false,
        })
        .collect();
    Ok((symbol, days))
}

#[derive(Serialize)]
struct BacktestSummary<'a> {
    from: NaiveDate,
    to: NaiveDate,
    trading_days: usize,
    trades: usize,
    skipped_trades: usize,
    strategy: &'a crate::eval::PerformanceRow,
    benchmark: &'a crate::eval::PerformanceRow,
}

fn cmd_backtest(cli: &Cli, args: &BacktestArgs) -> Result<(), CliError> {
    let (manifest, model) = load_run(&args.run)?;
    let split = &manifest.split;
    let from = args.from.unwrap_or(split.test[0]);
    let to = args.to.unwrap_or(split.test[1]);
    if from > to {
        return Err(CliError::User(format!("empty date range {from}..={to}")));
    }
    if !args.allow_overlap {
        check_leak(split, from, to)?;
    }
    let data = Dataset::load(&manifest.config)?;
    let sections: Vec<CrossSection> = [&data.split.train, &data.split.validation, &data.split.test]
        .into_iter()
        .flatten()
        .filter(|s| s.date >= from && s.date <= to)
        .cloned()
        .collect();
    if sections.is_empty() {
        return Err(CliError::User(format!("no trading days in {from}..={to}")));
    }
    let days = prepare_days(&sections, &data.snapshots, manifest.config.edges)?;
    let preds = predict_days(&model, &days, manifest.config.batch_size)?;
    let mut strategy = manifest.config.strategy();
    if let Some(k) = args.top_k {
        strategy.top_k = k;
    }
    let result = run_strategy(&preds, &data.series, &strategy);
    let bench_path = args.benchmark.clone().unwrap_or_else(|| manifest.config.benchmark.clone());
    let (symbol, bench) = benchmark_days(&bench_path)?;
    let report = compare_benchmark(&result, &bench, &symbol)?;

    let out = cli.out.clone().unwrap_or_else(|| args.run.join("backtest"));
    ensure_dir(&out)?;
    report.write_csv(create(&out.join("backtest.csv"))?)?;
    write_trades(create(&out.join("trades.csv"))?, &result.trades)?;
    write_predictions(create(&out.join("predictions.csv"))?, &preds)?;
    let summary = BacktestSummary {
        from,
        to,
        trading_days: result.dates.len(),
        trades: result.trades.len(),
        skipped_trades: result.skipped.len(),
        strategy: &report.strategy,
        benchmark: &report.benchmark,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(internal)?;
    write_file(&out.join("summary.json"), json.as_bytes())?;
    write_file(&out.join("summary.txt"), report.summary().as_bytes())?;
    print!("{}", report.summary());
    Ok(())
}

/// Model sizes used by `gradcheck`: a small network checked on every
/// coordinate, and optionally the default network on sampled coordinates.
pub fn gradcheck_suite(seed: u64, full_size: bool) -> Result<bool, CliError> {
    let small = ModelConfig {
        hidden: 6,
        media_hidden: 3,
        fused: 5,
        gat_hidden: 3,
        heads: 2,
    };
    let mut runs = vec![("small network, all coordinates", small, GradCheckOptions::default())];
    if full_size {
        runs.push((
            "default network, sampled coordinates",
            ModelConfig::default(),
            GradCheckOptions {
                max_coords_per_param: Some(24),
                seed,
                ..Default::default()
            },
        ));
    }
    let mut ok = true;
    for (label, config, options) in runs {
        let report = check_model_gradients(config, seed, &options)?;
        println!("{label}:\n{report}");
        ok &= report.passed();
    }
    Ok(ok)
}

fn cmd_gradcheck(seed: u64, full_size: bool) -> Result<(), CliError> {
    if gradcheck_suite(seed, full_size)? {
        Ok(())
    } else {
        Err(CliError::Internal("gradient check failed".into()))
    }
}

/// Resolves the synthetic-market settings with flag > file > default
/// precedence.
pub fn resolve_synth_config(cli: &Cli, args: &GenSynthArgs) -> Result<SynthConfig, CliError> {
    let (mut table, _) = load_table(cli.config.as_deref())?;
    set(&mut table, "stocks", args.stocks.map(as_toml_int));
    set(&mut table, "days", args.days.map(as_toml_int));
    set(&mut table, "signal", args.signal.clone());
    set(&mut table, "probability", args.probability);
    set(&mut table, "seed", cli.seed.map(|s| i64::try_from(s).unwrap_or(i64::MAX)));
    let config: SynthConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::User(format!("synthetic config: {e}")))?;
    config.validate()?;
    Ok(config)
}

/// Writes the five input files plus `plant.json` and `synth.toml` into `out`.
pub fn write_synthetic(config: &SynthConfig, out: &Path) -> Result<(), CliError> {
    let market = generate_synthetic(config)?;
    ensure_dir(out)?;
    write_prices(create(&out.join("prices.csv"))?, &market.series)?;
    write_sentiment(create(&out.join("sentiment.csv"))?, &market.series)?;
    write_relations(create(&out.join("relations.csv"))?, &market.relations)?;
    write_universe(create(&out.join("universe.csv"))?, &market.universe)?;
    let mut bench = MarketSeries::new();
    bench.insert(crate::market_data::synthetic::BENCHMARK_SYMBOL.to_string(), market.benchmark);
    write_prices(create(&out.join("benchmark.csv"))?, &bench)?;
    let plant = serde_json::to_string_pretty(&market.plant).map_err(internal)?;
    write_file(&out.join("plant.json"), plant.as_bytes())?;
    write_file(
        &out.join("synth.toml"),
        toml::to_string(config).map_err(internal)?.as_bytes(),
    )?;
    Ok(())
}

fn cmd_gen_synth(cli: &Cli, args: &GenSynthArgs) -> Result<(), CliError> {
    let config = resolve_synth_config(cli, args)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    write_synthetic(&config, &out)?;
    println!("wrote synthetic market ({} stocks, {} days) to {}", config.stocks, config.days, out.display());
    Ok(())
}
