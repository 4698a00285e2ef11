//! Command-line orchestration of the full pipeline.
//!
//! Exit-code contract: 0 success, 1 usage error, 2 data error, 3 backend
//! error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::backend::{
    batch_predict, ApiKey, Backend, BackendConfig, HttpBackend, MockBackend, PromptMode,
    ResponseCache,
};
use crate::corpus::{
    contingency, delta_ratios, load_posts, ContingencyTable, Format, Post,
};
use crate::losslab::{
    default_fixture, gradient_check, label_span_accuracy, memorization_fixture, train_toy,
    LossConfig,
};
use crate::parser::parse_completion;
use crate::prompt::{
    build_finetune_record, write_finetune_jsonl, PromptTemplate, CANONICAL_SHOTS,
};
use crate::report::{
    append_manifest, evaluate, read_predictions, render_csv, render_markdown,
    render_significance, sha256_file, write_predictions, EvalError, EvaluationReport,
    ParseCounts, PredictionRecord, RunManifest,
};
use crate::stats::{pairwise_matrix, SampleVector, TTestFlavor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Backend(_) => EXIT_BACKEND,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Backend(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message())
    }
}

#[derive(Parser, Debug)]
#[command(name = "interprompt", about = "Story-completion prompting toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert a dataset into fine-tune JSONL records and print statistics.
    Prepare(PrepareArgs),
    /// Generate completions for a dataset and parse them.
    Predict(PredictArgs),
    /// Alias of predict for N-shot prompting (requires --shots).
    Nshot(PredictArgs),
    /// Score predictions against gold labels and cues.
    Evaluate(EvaluateArgs),
    /// Pairwise t-tests over score files.
    Significance(SignificanceArgs),
    /// Verify the combined objective on the toy model.
    Losslab(LosslabArgs),
    /// Re-render a saved evaluation report as Markdown.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FileFormat {
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    /// Deterministic in-process mock seeded with gold completions.
    Mock,
    /// Remote HTTP completion service.
    Http,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Dataset file (CSV or JSONL).
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<FileFormat>,
    /// TOML config file with a [template] section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output fine-tune JSONL path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<FileFormat>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Predictions JSONL output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Exemplar count for N-shot prompting; omit for fine-tuned style
    /// prompts (post text + separator).
    #[arg(long)]
    pub shots: Option<usize>,
    /// Dataset file providing exemplars for N-shot prompting.
    #[arg(long)]
    pub exemplars: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendKind,
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub model_id: Option<String>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_parallel: Option<usize>,
    #[arg(long)]
    pub retry_budget: Option<u32>,
    /// On-disk response cache directory.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Append-only run manifest file.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Predictions JSONL produced by `predict`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Gold dataset file.
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<FileFormat>,
    /// Output directory for report.md / report.csv / report.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SignificanceArgs {
    /// Score files, one value per line; the file stem is the label.
    #[arg(required = true)]
    pub scores: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "welch")]
    pub flavor: FlavorArg,
    /// Optional output path for the rendered matrix.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FlavorArg {
    Pooled,
    Welch,
    Paired,
}

impl From<FlavorArg> for TTestFlavor {
    fn from(f: FlavorArg) -> Self {
        match f {
            FlavorArg::Pooled => TTestFlavor::TwoSamplePooled,
            FlavorArg::Welch => TTestFlavor::Welch,
            FlavorArg::Paired => TTestFlavor::Paired,
        }
    }
}

#[derive(Args, Debug)]
pub struct LosslabArgs {
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda3: f64,
    /// Use the 4-record memorization fixture instead of the 50-record one.
    #[arg(long)]
    pub memorization: bool,
    /// Write the per-epoch loss trajectory as CSV.
    #[arg(long)]
    pub trajectory_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// report.json produced by `evaluate`.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
struct ConfigFile {
    #[serde(default)]
    template: Option<PromptTemplate>,
    #[serde(default)]
    backend: Option<BackendSection>,
}

#[derive(Debug, Default, Deserialize)]
struct BackendSection {
    base_url: Option<String>,
    model_id: Option<String>,
    max_tokens: Option<u32>,
    temperature: Option<f64>,
    stop: Option<Vec<String>>,
    max_parallel: Option<usize>,
    retry_budget: Option<u32>,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile, CliError> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let content = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&content).map_err(|e| CliError::Data(format!("bad config: {e}")))
}

fn load_template(config: &ConfigFile) -> Result<PromptTemplate, CliError> {
    let template = config.template.clone().unwrap_or_default();
    template
        .validate()
        .map_err(|e| CliError::Data(format!("invalid template: {e}")))?;
    Ok(template)
}

fn format_of(path: &Path, flag: Option<FileFormat>) -> Format {
    match flag {
        Some(FileFormat::Csv) => Format::Csv,
        Some(FileFormat::Jsonl) => Format::Jsonl,
        None => Format::from_path(path),
    }
}

fn load_dataset_strict(path: &Path, format: Format) -> Result<Vec<Post>, CliError> {
    let report = load_posts(path, format).map_err(|e| CliError::Data(e.to_string()))?;
    for w in &report.warnings {
        eprintln!("warning: row {}: {:?}", w.row, w.warning);
    }
    if !report.errors.is_empty() {
        let listed: Vec<String> = report.errors.iter().map(|e| e.to_string()).collect();
        return Err(CliError::Data(format!(
            "{} invalid row(s):\n{}",
            report.errors.len(),
            listed.join("\n")
        )));
    }
    if report.posts.is_empty() {
        return Err(CliError::Data(format!("dataset {} is empty", path.display())));
    }
    Ok(report.posts)
}

#[derive(Debug, Clone, Copy)]
pub struct PrepareSummary {
    pub records: usize,
    pub table: ContingencyTable,
    pub ratios: Option<(f64, f64)>,
}

/// Write fine-tune JSONL and report dataset statistics.
pub fn cmd_prepare(args: &PrepareArgs) -> Result<PrepareSummary, CliError> {
    let config = load_config(args.config.as_deref())?;
    let template = load_template(&config)?;
    let posts = load_dataset_strict(&args.dataset, format_of(&args.dataset, args.format))?;
    let mut records = Vec::with_capacity(posts.len());
    for post in &posts {
        records.push(
            build_finetune_record(post, &template)
                .map_err(|e| CliError::Data(format!("post {}: {e}", post.id)))?,
        );
    }
    let file = std::fs::File::create(&args.out)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", args.out.display())))?;
    write_finetune_jsonl(std::io::BufWriter::new(file), &records)
        .map_err(|e| CliError::Data(e.to_string()))?;

    let table = contingency(&posts);
    let ratios = delta_ratios(&table).ok();
    println!("records written: {}", records.len());
    println!(
        "contingency (TBe x PBu): n00={} n01={} n10={} n11={}",
        table.n00, table.n01, table.n10, table.n11
    );
    match ratios {
        Some((d0, d1)) => println!("delta ratios: {d0:.4} {d1:.4}"),
        None => println!("delta ratios: undefined (zero count in TBe=0 row)"),
    }
    Ok(PrepareSummary {
        records: records.len(),
        table,
        ratios,
    })
}

fn backend_config(args: &PredictArgs, section: &BackendSection, template: &PromptTemplate) -> BackendConfig {
    let defaults = BackendConfig::default();
    BackendConfig {
        base_url: args
            .base_url
            .clone()
            .or_else(|| section.base_url.clone())
            .unwrap_or(defaults.base_url),
        api_key: ApiKey::from_env(),
        model_id: args
            .model_id
            .clone()
            .or_else(|| section.model_id.clone())
            .unwrap_or(defaults.model_id),
        max_tokens: args.max_tokens.or(section.max_tokens).unwrap_or(defaults.max_tokens),
        temperature: args
            .temperature
            .or(section.temperature)
            .unwrap_or(defaults.temperature),
        stop: section
            .stop
            .clone()
            .unwrap_or_else(|| vec![template.stop_sequence.clone()]),
        max_parallel: args
            .max_parallel
            .or(section.max_parallel)
            .unwrap_or(defaults.max_parallel),
        retry_budget: args
            .retry_budget
            .or(section.retry_budget)
            .unwrap_or(defaults.retry_budget),
    }
}

/// Generate, parse and persist completions for every post.
pub fn cmd_predict(args: &PredictArgs, force_nshot: bool) -> Result<ParseCounts, CliError> {
    let config_file = load_config(args.config.as_deref())?;
    let template = load_template(&config_file)?;
    let posts = load_dataset_strict(&args.dataset, format_of(&args.dataset, args.format))?;

    if force_nshot && args.shots.is_none() {
        return Err(CliError::Usage("nshot requires --shots".into()));
    }
    let exemplars: Vec<Post> = match args.shots {
        Some(0) | None => Vec::new(),
        Some(n) => {
            let path = args.exemplars.as_ref().ok_or_else(|| {
                CliError::Usage("--shots > 0 requires --exemplars <dataset>".into())
            })?;
            let pool = load_dataset_strict(path, format_of(path, args.format))?;
            if pool.len() < n {
                return Err(CliError::Data(format!(
                    "exemplar pool has {} posts, need {n}",
                    pool.len()
                )));
            }
            pool.into_iter().take(n).collect()
        }
    };
    if let Some(n) = args.shots {
        if !CANONICAL_SHOTS.contains(&n) {
            eprintln!("warning: {n} shots is non-canonical (expected 0, 1 or 8)");
        }
    }
    let mode = match args.shots {
        Some(_) => PromptMode::NShot(&exemplars),
        None => PromptMode::FineTuned,
    };

    let config = backend_config(args, &config_file.backend.unwrap_or_default(), &template);
    let mock;
    let http;
    let backend: &dyn Backend = match args.backend {
        BackendKind::Mock => {
            // Seed the mock so each post's prompt echoes its gold completion.
            let mut m = MockBackend::new(&template);
            for post in &posts {
                let prompt = match &mode {
                    PromptMode::FineTuned => format!("{}{}", post.text, template.separator),
                    PromptMode::NShot(ex) => {
                        crate::prompt::build_nshot_prompt(post, ex, &template)
                            .map_err(|e| CliError::Data(e.to_string()))?
                    }
                };
                m.insert_fixture(prompt, crate::prompt::build_completion(post, &template).serialized);
            }
            mock = m;
            &mock
        }
        BackendKind::Http => {
            if config.base_url.is_empty() {
                return Err(CliError::Usage("http backend requires --base-url".into()));
            }
            if config.api_key.is_none() {
                return Err(CliError::Backend(format!(
                    "no API key (set {})",
                    crate::backend::API_KEY_ENV
                )));
            }
            http = HttpBackend::new();
            &http
        }
    };

    let cache = match &args.cache_dir {
        Some(dir) => Some(ResponseCache::open(dir).map_err(|e| CliError::Data(e.to_string()))?),
        None => None,
    };
    let outcomes = batch_predict(&posts, &template, backend, &config, &mode, cache.as_ref())
        .map_err(|e| CliError::Backend(e.to_string()))?;

    let mut counts = ParseCounts::default();
    let mut successes = 0usize;
    let records: Vec<PredictionRecord> = outcomes
        .into_iter()
        .map(|o| {
            let (parsed, parse_error) = match &o.completion {
                Some(text) => match parse_completion(text, &template) {
                    Ok(p) => {
                        if p.exact {
                            counts.exact += 1;
                        } else {
                            counts.repaired += 1;
                        }
                        (Some(p), None)
                    }
                    Err(e) => {
                        counts.unparseable += 1;
                        (None, Some(e.to_string()))
                    }
                },
                None => {
                    counts.unparseable += 1;
                    (None, None)
                }
            };
            if o.completion.is_some() {
                successes += 1;
            }
            PredictionRecord {
                id: o.id,
                prompt_sha256: o.prompt_sha256,
                completion: o.completion,
                parsed,
                parse_error,
                transport_error: o.error,
            }
        })
        .collect();

    let file = std::fs::File::create(&args.out)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", args.out.display())))?;
    write_predictions(std::io::BufWriter::new(file), &records)
        .map_err(|e| CliError::Data(e.to_string()))?;

    if let Some(manifest_path) = &args.manifest {
        let mut manifest = RunManifest::now(if args.shots.is_some() { "nshot" } else { "predict" });
        manifest.model_id = config.model_id.clone();
        manifest.temperature = config.temperature;
        manifest.max_tokens = config.max_tokens;
        manifest.base_url = config.base_url.clone();
        manifest.shots = args.shots;
        manifest.template_sha256 = template.fingerprint();
        if let Ok(hash) = sha256_file(&args.dataset) {
            manifest.inputs.push(crate::report::FileHash {
                path: args.dataset.display().to_string(),
                sha256: hash,
            });
        }
        manifest.counts = counts;
        append_manifest(manifest_path, &manifest).map_err(|e| CliError::Data(e.to_string()))?;
    }

    println!(
        "predictions: {} total; {} exact, {} repaired, {} unparseable",
        records.len(),
        counts.exact,
        counts.repaired,
        counts.unparseable
    );
    if successes == 0 {
        return Err(CliError::Backend("no completion succeeded".into()));
    }
    Ok(counts)
}

/// Score a predictions file against the gold dataset and write the report
/// in Markdown, CSV and JSON.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<EvaluationReport, CliError> {
    let predictions =
        read_predictions(&args.predictions).map_err(|e| CliError::Data(e.to_string()))?;
    let gold = load_dataset_strict(&args.gold, format_of(&args.gold, args.format))?;
    let report = evaluate(&predictions, &gold).map_err(|e| match e {
        EvalError::MissingIds(_) => CliError::Data(e.to_string()),
        _ => CliError::Data(e.to_string()),
    })?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", args.out.display())))?;
    let md = render_markdown(&report);
    std::fs::write(args.out.join("report.md"), &md).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(args.out.join("report.csv"), render_csv(&report))
        .map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| CliError::Data(e.to_string()))?;
    print!("{md}");
    Ok(report)
}

fn load_score_file(path: &Path) -> Result<SampleVector, CliError> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let label = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("scores")
        .to_string();
    let mut values = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: f64 = line.parse().map_err(|_| {
            CliError::Data(format!("{}:{}: not a number: {line}", path.display(), i + 1))
        })?;
        values.push(v);
    }
    SampleVector::new(label, values).map_err(|e| CliError::Data(e.to_string()))
}

/// Pairwise t-test matrix over score files.
pub fn cmd_significance(args: &SignificanceArgs) -> Result<String, CliError> {
    let vectors: Vec<SampleVector> = args
        .scores
        .iter()
        .map(|p| load_score_file(p))
        .collect::<Result<_, _>>()?;
    let cells = pairwise_matrix(&vectors, args.flavor.into())
        .map_err(|e| CliError::Data(e.to_string()))?;
    let mut rendered = format!("flavor: {}\n\n", TTestFlavor::from(args.flavor));
    rendered.push_str(&render_significance(&cells));
    if let Some(out) = &args.out {
        std::fs::write(out, &rendered).map_err(|e| CliError::Data(e.to_string()))?;
    }
    print!("{rendered}");
    Ok(rendered)
}

#[derive(Debug, Clone, Copy)]
pub struct LossLabSummary {
    pub max_gradient_error: f64,
    pub final_loss: f64,
    pub label_accuracy: f64,
    pub diverged: bool,
}

/// Run the gradient check and toy training, optionally exporting the loss
/// trajectory as CSV.
pub fn cmd_losslab(args: &LosslabArgs) -> Result<LossLabSummary, CliError> {
    let config = LossConfig {
        lambda1: args.lambda1,
        lambda2: args.lambda2,
        lambda3: args.lambda3,
    };
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let (mut model, records) = if args.memorization {
        memorization_fixture()
    } else {
        default_fixture()
    };
    let max_gradient_error =
        gradient_check(&model, &records, &config).map_err(|e| CliError::Data(e.to_string()))?;
    let outcome = train_toy(&mut model, &records, args.epochs, &config)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let final_loss = model
        .batch_loss(&records, &config)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let label_accuracy = label_span_accuracy(&model, &records);

    if let Some(path) = &args.trajectory_out {
        let mut file = std::fs::File::create(path)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        writeln!(file, "epoch,combined_loss").map_err(|e| CliError::Data(e.to_string()))?;
        for (epoch, loss) in outcome.trajectory.iter().enumerate() {
            writeln!(file, "{epoch},{loss}").map_err(|e| CliError::Data(e.to_string()))?;
        }
    }

    println!("max gradient relative error: {max_gradient_error:.3e}");
    println!("final combined loss: {final_loss:.6}");
    println!("label-span greedy accuracy: {label_accuracy:.4}");
    if outcome.diverged {
        return Err(CliError::Data("training diverged".into()));
    }
    if max_gradient_error > 1e-4 {
        return Err(CliError::Data(format!(
            "gradient check failed: {max_gradient_error:.3e} > 1e-4"
        )));
    }
    Ok(LossLabSummary {
        max_gradient_error,
        final_loss,
        label_accuracy,
        diverged: outcome.diverged,
    })
}

pub fn cmd_report(args: &ReportArgs) -> Result<String, CliError> {
    let content = std::fs::read_to_string(&args.report)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", args.report.display())))?;
    let report: EvaluationReport =
        serde_json::from_str(&content).map_err(|e| CliError::Data(e.to_string()))?;
    let md = render_markdown(&report);
    print!("{md}");
    Ok(md)
}

/// Dispatch a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result: Result<(), CliError> = match &cli.command {
        Command::Prepare(args) => cmd_prepare(args).map(|_| ()),
        Command::Predict(args) => cmd_predict(args, false).map(|_| ()),
        Command::Nshot(args) => cmd_predict(args, true).map(|_| ()),
        Command::Evaluate(args) => cmd_evaluate(args).map(|_| ()),
        Command::Significance(args) => cmd_significance(args).map(|_| ()),
        Command::Losslab(args) => cmd_losslab(args).map(|_| ()),
        Command::Report(args) => cmd_report(args).map(|_| ()),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
