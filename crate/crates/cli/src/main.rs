use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use cola_core::backend::ScoreCache;
use cola_core::config::{BackendMode, ConfigError, Engine, EngineConfig, ScorerKind, Upstream};
use cola_core::covariate::CovariateError;
use cola_core::event::{self, EventSequence, Split};
use cola_core::intervention::InterventionError;
use cola_core::task::{self, RandomScorer, TaskError};
use cola_core::temporal::{self, CorpusConfig, CorpusSplit, FinetuneHyperparams};
use cola_core::{BackendError, Event, Normalization, PipelineError};

const CACHE_ENV: &str = "COLA_CACHE_DIR";

#[derive(Parser)]
#[command(name = "cola", version, about = "Contextualized commonsense causal reasoning over event sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every pair of a dataset and print per-split metrics.
    Eval(EvalArgs),
    /// Print the full causal estimate for one pair.
    ScorePair(PairArgs),
    /// Print the covariate set sampled for one treatment event.
    SampleCovariates(PairArgs),
    /// Print the interventions generated for one event.
    GenInterventions(InterventionArgs),
    /// Build the temporal fine-tuning corpus from stories.
    BuildCorpus(CorpusArgs),
    /// Summarize the response store.
    CacheStats(CacheArgs),
    /// Expected metrics of the uniform random top-k baseline.
    RandomBaseline(RandomArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Live,
    Record,
    Replay,
}

#[derive(Clone, Copy, ValueEnum)]
enum UpstreamArg {
    Http,
    Synthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScorerArg {
    Cola,
    Clm,
    Cloze,
    Random,
}

#[derive(Args, Clone, Default)]
struct EngineArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    upstream: Option<UpstreamArg>,
    #[arg(long)]
    base_url: Option<String>,
    /// Response store directory (overrides the config file and COLA_CACHE_DIR).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Normalizations, e.g. `S,Q,E`.
    #[arg(long, value_delimiter = ',')]
    norm: Option<Vec<Normalization>>,
    /// Skip matching and average over every intervention.
    #[arg(long)]
    keep_all: bool,
    /// Disable interventions; the estimate becomes the temporal score.
    #[arg(long)]
    no_interventions: bool,
    /// Sample covariates from the treatment's timestamp only.
    #[arg(long)]
    single_stamp: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    scorer: Option<ScorerArg>,
    /// Write per-pair traces as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PairArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    sequence_id: String,
    /// 1-based index of the treatment event.
    #[arg(long)]
    index: usize,
}

#[derive(Args)]
struct InterventionArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    event: String,
}

#[derive(Args)]
struct CorpusArgs {
    /// Stories as JSON lines `{"id", "events"}`.
    #[arg(long)]
    stories: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with `[corpus]` and `[trainer]` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Maximum examples; 0 keeps everything.
    #[arg(long)]
    target_size: Option<usize>,
    #[arg(long)]
    negative_ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FinetuneFile {
    corpus: CorpusConfig,
    trainer: FinetuneHyperparams,
}

#[derive(Args)]
struct CacheArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RandomArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Also run this many random-scorer trials.
    #[arg(long, default_value_t = 0)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failures grouped by exit code.
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Backend(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Backend(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Backend(e) => e,
        }
    }
}

fn data<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Data(e.into())
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Match(_) | ConfigError::ThreadPool(_) => Failure::Usage(e.into()),
            _ => Failure::Backend(e.into()),
        }
    }
}

impl From<TaskError> for Failure {
    fn from(e: TaskError) -> Self {
        if e.backend_error().is_some() {
            Failure::Backend(e.into())
        } else {
            Failure::Data(e.into())
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.backend_error().is_some() {
            Failure::Backend(e.into())
        } else {
            Failure::Data(e.into())
        }
    }
}

impl From<CovariateError> for Failure {
    fn from(e: CovariateError) -> Self {
        match e {
            CovariateError::Backend(_) => Failure::Backend(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

impl From<InterventionError> for Failure {
    fn from(e: InterventionError) -> Self {
        match e {
            InterventionError::Backend(_) => Failure::Backend(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

impl From<BackendError> for Failure {
    fn from(e: BackendError) -> Self {
        Failure::Backend(e.into())
    }
}

type CliResult = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<EngineConfig, Failure> {
    let mut config = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))
                .map_err(Failure::Usage)?;
            toml::from_str(&text)
                .with_context(|| format!("parsing config {}", p.display()))
                .map_err(Failure::Usage)?
        }
        None => EngineConfig::default(),
    };
    if let Some(dir) = std::env::var_os(CACHE_ENV) {
        config.cache_dir = PathBuf::from(dir);
    }
    Ok(config)
}

fn engine_config(args: &EngineArgs) -> Result<EngineConfig, Failure> {
    let mut c = load_config(args.config.as_deref())?;
    if let Some(m) = args.mode {
        c.backend.mode = match m {
            ModeArg::Live => BackendMode::Live,
            ModeArg::Record => BackendMode::Record,
            ModeArg::Replay => BackendMode::Replay,
        };
    }
    if let Some(u) = args.upstream {
        c.backend.upstream = match u {
            UpstreamArg::Http => Upstream::Http,
            UpstreamArg::Synthetic => Upstream::Synthetic,
        };
    }
    if let Some(url) = &args.base_url {
        c.backend.base_url = url.clone();
    }
    if let Some(dir) = &args.cache_dir {
        c.cache_dir = dir.clone();
    }
    if let Some(seed) = args.seed {
        c.seed = seed;
    }
    if let Some(p) = args.parallelism {
        c.parallelism = p;
    }
    if let Some(eps) = args.epsilon {
        c.matching.epsilon = eps;
    }
    if let Some(norms) = &args.norm {
        c.matching.normalizations = norms.iter().copied().collect();
    }
    c.matching.keep_all |= args.keep_all;
    if args.no_interventions {
        c.interventions.enabled = false;
    }
    if args.single_stamp {
        c.sampler.multistamp = false;
    }
    Ok(c)
}

fn print_json<T: Serialize>(value: &T) -> CliResult {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(data)?;
    writeln!(out).map_err(data)?;
    Ok(())
}

fn find_sequence(path: &Path, id: &str) -> Result<EventSequence, Failure> {
    event::load_dataset(path)
        .map_err(data)?
        .into_iter()
        .find(|s| s.id == id)
        .ok_or_else(|| data(anyhow::anyhow!("no sequence `{id}` in {}", path.display())))
}

fn eval(args: EvalArgs) -> CliResult {
    let mut config = engine_config(&args.engine)?;
    if let Some(s) = args.scorer {
        config.scorer = match s {
            ScorerArg::Cola => ScorerKind::Cola,
            ScorerArg::Clm => ScorerKind::Clm,
            ScorerArg::Cloze => ScorerKind::Cloze,
            ScorerArg::Random => ScorerKind::Random,
        };
    }
    let dataset = event::load_dataset(&args.dataset).map_err(data)?;
    let engine = Engine::new(config)?;
    let scorer = engine.scorer(engine.config().scorer)?;
    let snapshot = engine.config().snapshot();
    log::info!("scoring {} sequences with {}", dataset.len(), scorer.name());
    let result = engine.install(|| task::run_experiment(&dataset, scorer.as_ref(), &snapshot))?;

    if let Some(path) = &args.trace {
        let mut w = BufWriter::new(File::create(path).map_err(data)?);
        for record in &result.pairs {
            serde_json::to_writer(&mut w, record).map_err(data)?;
            w.write_all(b"\n").map_err(data)?;
        }
        w.flush().map_err(data)?;
    }
    let report = json!({ "scorer": result.scorer, "reports": result.reports });
    if let Some(path) = &args.report {
        fs::write(path, serde_json::to_vec_pretty(&report).map_err(data)?).map_err(data)?;
    }
    print_json(&report)
}

fn score_pair(args: PairArgs) -> CliResult {
    let engine = Engine::new(engine_config(&args.engine)?)?;
    let seq = find_sequence(&args.dataset, &args.sequence_id)?;
    let pipeline = engine.pipeline()?;
    let trace = engine.install(|| pipeline.estimate_pair(&seq, args.index))?;
    print_json(&trace)
}

fn sample_covariates(args: PairArgs) -> CliResult {
    let engine = Engine::new(engine_config(&args.engine)?)?;
    let seq = find_sequence(&args.dataset, &args.sequence_id)?;
    let pipeline = engine.pipeline()?;
    let set = engine.install(|| pipeline.sampler().sample_for(&seq, args.index))?;
    let diversity = set.diversity().ok();
    print_json(&json!({ "covariates": set, "self_bleu": diversity }))
}

fn gen_interventions(args: InterventionArgs) -> CliResult {
    let engine = Engine::new(engine_config(&args.engine)?)?;
    let event = Event::new(&args.event).map_err(|e| Failure::Usage(e.into()))?;
    let pipeline = engine.pipeline()?;
    let set = engine.install(|| pipeline.generator().generate(&event))?;
    print_json(&set)
}

fn build_corpus(args: CorpusArgs) -> CliResult {
    let mut file: FinetuneFile = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))
                .map_err(Failure::Usage)?;
            toml::from_str(&text)
                .with_context(|| format!("parsing config {}", p.display()))
                .map_err(Failure::Usage)?
        }
        None => FinetuneFile::default(),
    };
    if let Some(n) = args.target_size {
        file.corpus.target_size = (n > 0).then_some(n);
    }
    if let Some(r) = args.negative_ratio {
        file.corpus.negative_ratio = r;
    }
    if let Some(seed) = args.seed {
        file.corpus.seed = seed;
    }
    let stories = event::load_stories(&args.stories).map_err(data)?;
    let examples = temporal::build_finetune_corpus(&stories, &file.corpus).map_err(data)?;
    let w = BufWriter::new(File::create(&args.out).map_err(data)?);
    temporal::write_corpus(w, &examples).map_err(data)?;
    let count = |s| examples.iter().filter(|e| e.split == s).count();
    print_json(&json!({
        "examples": examples.len(),
        "train": count(CorpusSplit::Train),
        "validation": count(CorpusSplit::Validation),
        "test": count(CorpusSplit::Test),
        "corpus": file.corpus,
        "trainer": file.trainer,
    }))
}

fn cache_stats(args: CacheArgs) -> CliResult {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(dir) = args.cache_dir {
        config.cache_dir = dir;
    }
    if !ScoreCache::exists(&config.cache_dir) {
        return Err(Failure::Backend(anyhow::anyhow!("no response store at {}", config.cache_dir.display())));
    }
    let store = ScoreCache::open(&config.cache_dir).map_err(|e| Failure::Backend(e.into()))?;
    print_json(&store.stats())
}

fn random_baseline(args: RandomArgs) -> CliResult {
    let dataset = event::load_dataset(&args.dataset).map_err(data)?;
    let mut report = serde_json::Map::new();
    let groups: [(&str, Option<Split>); 3] =
        [("validation", Some(Split::Validation)), ("testing", Some(Split::Testing)), ("all", None)];
    for (name, split) in groups {
        let subset: Vec<EventSequence> =
            dataset.iter().filter(|s| split.is_none_or(|x| s.split == x)).cloned().collect();
        if subset.is_empty() {
            continue;
        }
        let counts = event::split_counts(&subset).map_err(data)?;
        let expected = task::random_baseline_expectation(&counts)?;
        let mut entry = json!({ "expected": expected, "per_k": counts.per_k, "positives": counts.positives });
        if args.trials > 0 {
            let (mut acc, mut f1) = (0.0, 0.0);
            for t in 0..args.trials {
                let scorer = RandomScorer { seed: args.seed.wrapping_add(t as u64) };
                let run = task::run_experiment(&subset, &scorer, &Value::Null)?;
                let all = run.reports.last().expect("all report");
                acc += all.accuracy;
                f1 += all.f1;
            }
            let n = args.trials as f64;
            entry["monte_carlo"] = json!({ "trials": args.trials, "accuracy": acc / n, "f1": f1 / n });
        }
        report.insert(name.to_owned(), entry);
    }
    print_json(&report)
}

/// The error chain, skipping causes already quoted by the message above them.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Eval(a) => eval(a),
        Command::ScorePair(a) => score_pair(a),
        Command::SampleCovariates(a) => sample_covariates(a),
        Command::GenInterventions(a) => gen_interventions(a),
        Command::BuildCorpus(a) => build_corpus(a),
        Command::CacheStats(a) => cache_stats(a),
        Command::RandomBaseline(a) => random_baseline(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", describe(f.error()));
            ExitCode::from(f.code())
        }
    }
}
