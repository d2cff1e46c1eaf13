use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mfas_core::harness::config::{Objective, OptimConfig, Precision, RunConfig};
use mfas_core::harness::data::Corpus;
use mfas_core::harness::grid::{export_strategy_grid, GridEntry};
use mfas_core::harness::report::{alpha_table, fold_table, pretrain_table};
use mfas_core::harness::search::{
    extract_features, run_derive, run_eval, run_search, save_derived, FoldReport, SearchOutcome,
};
use mfas_core::harness::toy::{generate_toy_dataset, ToyConfig};
use mfas_core::harness::train::{run_pretrain, PretrainEpoch};
use mfas_core::fusion::FusionStrategy;
use mfas_core::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "mfas", version, about = "Speech/text fusion search for emotion recognition")]
struct Cli {
    /// Log verbosity (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Masked pretraining of an encoder.
    Pretrain(PretrainArgs),
    /// Pretraining with the detached emotion probe attached.
    Probe(PretrainArgs),
    /// Architecture search over the fusion cell.
    Search(SearchArgs),
    /// Retrain and evaluate the derived single-path model per fold.
    Derive(DeriveArgs),
    /// Evaluate a saved derived model on a fold.
    Eval(EvalArgs),
    /// Write a synthetic corpus, its manifest and a matching config.
    GenToy(GenToyArgs),
    /// Render per-fold strategy grids from search results.
    PlotGrid(PlotGridArgs),
    /// Print result tables from JSON outputs.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Cross-validation fold.
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Continuous,
    Quantized,
    Ctc,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Checkpoint to start from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Where to write the checkpoint.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    speech: Option<PathBuf>,
    #[arg(long)]
    text: Option<PathBuf>,
}

#[derive(Args)]
struct DeriveArgs {
    #[command(flatten)]
    common: Common,
    /// Search result (or bare strategy) JSON.
    #[arg(long)]
    strategy: PathBuf,
    /// Comma-separated folds; overrides the config.
    #[arg(long, value_delimiter = ',')]
    folds: Option<Vec<usize>>,
    #[arg(long)]
    speech: Option<PathBuf>,
    #[arg(long)]
    text: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Derived model written by `derive`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    speech: Option<PathBuf>,
    #[arg(long)]
    text: Option<PathBuf>,
}

#[derive(Args)]
struct GenToyArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 80)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Labels carried by the token motif only.
    #[arg(long)]
    text_only: bool,
}

#[derive(Args)]
struct PlotGridArgs {
    /// `.svg` or `.png` output.
    #[arg(long)]
    out: PathBuf,
    /// Search result JSON files, one per fold.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON outputs of pretrain, search, derive or eval.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Also write the tables here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Output {
    Folds(Vec<FoldReport>),
    Fold(FoldReport),
    Search(Box<SearchOutcome>),
    Pretrain(Vec<PretrainEpoch>),
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.out_dir {
            cfg.out_dir = p.clone();
        }
        if let Some(p) = &self.manifest {
            cfg.data.manifest = p.clone();
        }
        if let Some(f) = self.fold {
            cfg.data.fold = f;
        }
        if let Some(p) = self.precision {
            cfg.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        Ok(cfg)
    }

    fn optim(&self, o: &mut OptimConfig) {
        if let Some(e) = self.epochs {
            o.epochs = e;
        }
        if let Some(lr) = self.lr {
            o.lr = lr;
        }
        if let Some(b) = self.batch_size {
            o.batch_size = b;
        }
    }
}

fn corpus(cfg: &RunConfig) -> Result<Corpus, Error> {
    Corpus::load(
        &cfg.data.manifest,
        cfg.data.segment_seconds,
        cfg.data.normalization,
        cfg.cache_dir().as_deref(),
    )
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn extractors(cfg: &mut RunConfig, speech: &Option<PathBuf>, text: &Option<PathBuf>) {
    if let Some(p) = speech {
        cfg.search.speech_checkpoint = p.clone();
    }
    if let Some(p) = text {
        cfg.search.text_checkpoint = p.clone();
    }
}

fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::Continuous => "continuous",
        Objective::Quantized => "quantized",
        Objective::Ctc => "ctc",
    }
}

fn pretrain(args: PretrainArgs, probe: bool) -> Result<(), Error> {
    let mut cfg = args.common.load()?;
    args.common.optim(&mut cfg.pretrain.optim);
    if let Some(o) = args.objective {
        cfg.pretrain.objective = match o {
            ObjectiveArg::Continuous => Objective::Continuous,
            ObjectiveArg::Quantized => Objective::Quantized,
            ObjectiveArg::Ctc => Objective::Ctc,
        };
    }
    if args.init.is_some() {
        cfg.pretrain.init = args.init;
    }
    if let Some(p) = args.output {
        cfg.pretrain.output = p;
    }
    cfg.pretrain.probe |= probe;
    let corpus = corpus(&cfg)?;
    let outcome = run_pretrain(&cfg, &corpus, None)?;
    outcome.save(&cfg.pretrain.output)?;
    let name = objective_name(cfg.pretrain.objective);
    let table = pretrain_table(&outcome.history);
    write_json(&cfg.out_dir.join(format!("pretrain_{name}.json")), &outcome.history)?;
    write(&cfg.out_dir.join(format!("pretrain_{name}.md")), &table)?;
    print!("{table}");
    println!("checkpoint: {}", cfg.pretrain.output.display());
    Ok(())
}

fn search(args: SearchArgs) -> Result<(), Error> {
    let mut cfg = args.common.load()?;
    args.common.optim(&mut cfg.search.optim);
    extractors(&mut cfg, &args.speech, &args.text);
    let corpus = corpus(&cfg)?;
    let feats = extract_features(&cfg, &corpus)?;
    let outcome = run_search(&cfg, &corpus, &feats)?;
    let k = outcome.fold;
    let alphas: String = outcome.history.iter().map(|s| alpha_table(s) + "\n").collect();
    write(&cfg.out_dir.join(format!("alpha_fold{k}.md")), &alphas)?;
    write_json(&cfg.out_dir.join(format!("search_fold{k}.json")), &outcome)?;
    print!("{}", alpha_table(outcome.history.last().expect("initial snapshot")));
    println!("strategy: {}", serde_json::to_string(&outcome.strategy)?);
    println!("search result: {}", cfg.out_dir.join(format!("search_fold{k}.json")).display());
    Ok(())
}

fn load_strategy(path: &Path) -> Result<FusionStrategy, Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Either {
        Search(Box<SearchOutcome>),
        Bare(FusionStrategy),
    }
    Ok(match read_json::<Either>(path)? {
        Either::Search(s) => s.strategy,
        Either::Bare(s) => s,
    })
}

fn derive(args: DeriveArgs) -> Result<(), Error> {
    let mut cfg = args.common.load()?;
    args.common.optim(&mut cfg.derive.optim);
    extractors(&mut cfg, &args.speech, &args.text);
    if let Some(f) = args.folds {
        cfg.derive.folds = f;
    }
    let strategy = load_strategy(&args.strategy)?;
    let corpus = corpus(&cfg)?;
    let feats = extract_features(&cfg, &corpus)?;
    let folds = if cfg.derive.folds.is_empty() {
        (0..mfas_core::harness::cv::make_cv_plan(&corpus.records, cfg.data.cv)?.folds.len()).collect()
    } else {
        cfg.derive.folds.clone()
    };
    let mut rows = Vec::new();
    for k in folds {
        let (report, model) = run_derive(&cfg, &corpus, &feats, &strategy, k)?;
        save_derived(&cfg.out_dir.join(format!("derived_fold{k}.safetensors")), &model, &strategy)?;
        log::info!("fold {k}: UA {:.4} WA {:.4}", report.metrics.ua, report.metrics.wa);
        rows.push(report);
    }
    let table = fold_table(&rows);
    write_json(&cfg.out_dir.join("derive.json"), &rows)?;
    write(&cfg.out_dir.join("derive.md"), &table)?;
    print!("{table}");
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Error> {
    let mut cfg = args.common.load()?;
    extractors(&mut cfg, &args.speech, &args.text);
    let corpus = corpus(&cfg)?;
    let feats = extract_features(&cfg, &corpus)?;
    let report = run_eval(&cfg, &corpus, &feats, &args.model, cfg.data.fold)?;
    let table = fold_table(std::slice::from_ref(&report));
    write_json(&cfg.out_dir.join(format!("eval_fold{}.json", report.fold)), &report)?;
    write(&cfg.out_dir.join(format!("eval_fold{}.md", report.fold)), &table)?;
    print!("{table}");
    Ok(())
}

fn gen_toy(args: GenToyArgs) -> Result<(), Error> {
    let toy = ToyConfig {
        n_utterances: args.n,
        seed: args.seed,
        text_only: args.text_only,
        ..ToyConfig::default()
    };
    let data = generate_toy_dataset(&toy, &args.out)?;
    let mut cfg = RunConfig::toy();
    cfg.seed = args.seed;
    cfg.out_dir = PathBuf::from("runs");
    cfg.data.manifest = PathBuf::from("manifest.jsonl");
    cfg.pretrain.output = PathBuf::from("runs/encoder.safetensors");
    cfg.search.speech_checkpoint = PathBuf::from("runs/speech.safetensors");
    cfg.search.text_checkpoint = PathBuf::from("runs/text.safetensors");
    write(&args.out.join("toy.toml"), &cfg.to_toml_string()?)?;
    println!(
        "{} utterances in {}; config {}",
        data.records.len(),
        args.out.display(),
        args.out.join("toy.toml").display()
    );
    Ok(())
}

fn plot_grid(args: PlotGridArgs) -> Result<(), Error> {
    let mut entries = Vec::new();
    for p in &args.inputs {
        let s: SearchOutcome = read_json(p)?;
        entries.push(GridEntry {
            label: format!("fold {} ({})", s.fold, s.held_out_key),
            strategy: s.strategy,
        });
    }
    export_strategy_grid(&entries, &args.out)?;
    println!("grid: {}", args.out.display());
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), Error> {
    let mut text = String::new();
    let mut folds = Vec::new();
    for p in &args.inputs {
        match read_json::<Output>(p)? {
            Output::Folds(rows) => folds.extend(rows),
            Output::Fold(row) => folds.push(row),
            Output::Search(s) => {
                text.push_str(&format!("## search fold {} ({})\n\n", s.fold, s.held_out_key));
                text.push_str(&alpha_table(s.history.last().expect("initial snapshot")));
                text.push_str(&format!("\nstrategy: {}\n\n", serde_json::to_string(&s.strategy)?));
            }
            Output::Pretrain(h) => {
                text.push_str(&format!("## {}\n\n", p.display()));
                text.push_str(&pretrain_table(&h));
                text.push('\n');
            }
        }
    }
    if !folds.is_empty() {
        folds.sort_by_key(|r| r.fold);
        text.push_str("## folds\n\n");
        text.push_str(&fold_table(&folds));
    }
    if let Some(out) = &args.out {
        write(out, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Pretrain(a) => pretrain(a, false),
        Command::Probe(a) => pretrain(a, true),
        Command::Search(a) => search(a),
        Command::Derive(a) => derive(a),
        Command::Eval(a) => eval(a),
        Command::GenToy(a) => gen_toy(a),
        Command::PlotGrid(a) => plot_grid(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
