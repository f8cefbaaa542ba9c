//! Command-line workflow: ingest → genq → build-matrix → retrieve / bench.
//!
//! Every command prints the root seed first. Settings come from an optional
//! JSON config file and command-line flags, with flags taking precedence.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::{self, BuildError, CompletionConfig};
use crate::clients::{Backend, ClientError, Clients, ClientsConfig};
use crate::eval::{self, BenchPlan, EvalError, TestCase};
use crate::kb::{self as store, KbError, KnowledgeBase};
use crate::pipeline::{self, GenerationConfig, PipelineError, PreferenceConfig};
use crate::retrieve::{
    Aggregation, MatrixSource, RetrievalError, RetrievalResult, Retriever, Strategy, StrategyConfig, Weighting,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
/// The command finished but left something the user should fix.
pub const EXIT_WARNING: i32 = 3;

/// Judge failures from `build-matrix` are listed here inside the KB directory.
pub const FAILURES_FILE: &str = "judge_failures.jsonl";
pub const CASES_FILE: &str = "cases.jsonl";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Format { file: String, line: usize, message: String },
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_)
            | CliError::Client(ClientError::InvalidConfig(_))
            | CliError::Pipeline(PipelineError::InvalidConfig(_))
            | CliError::Build(
                BuildError::InvalidConfig(_) | BuildError::InvalidPercentile(_) | BuildError::RankTooLarge { .. },
            )
            | CliError::Retrieval(
                RetrievalError::InvalidK | RetrievalError::KTooLarge { .. } | RetrievalError::InvalidConfig(_),
            )
            | CliError::Eval(EvalError::Config(_)) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Settings accepted in the `--config` file. Every section is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every seeded component is derived from it.
    pub seed: u64,
    pub clients: ClientsConfig,
    pub generation: GenerationConfig,
    pub matrix: MatrixSettings,
    /// Defaults for `retrieve` and for every benchmarked strategy.
    pub retrieval: StrategyConfig,
    pub bench: BenchSettings,
    pub preferences: PreferenceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixSettings {
    pub percentile: f64,
    /// Union the observed `A` into the judged candidates.
    pub include_observed: bool,
    pub completion: CompletionConfig,
}

impl Default for MatrixSettings {
    fn default() -> Self {
        Self {
            percentile: 0.05,
            include_observed: true,
            completion: CompletionConfig {
                rank: 4,
                ..CompletionConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub strategies: Vec<Strategy>,
    pub ks: Vec<usize>,
    /// Build a rephrase test set of this many cases when none is supplied.
    pub make_rephrase: Option<usize>,
    /// Build an out-of-distribution test set when none is supplied.
    pub make_ood: bool,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Naive, Strategy::QbVanilla],
            ks: vec![1, 3],
            make_rephrase: None,
            make_ood: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Push the root seed into every seeded component. Mock client seeds are
    /// left alone so that vectors stay comparable with a stored KB.
    fn propagate_seed(&mut self) {
        self.generation.seed = self.seed;
        self.matrix.completion.seed = self.seed;
        self.retrieval.seed = self.seed;
        self.preferences.seed = self.seed;
    }

    fn clients(&self) -> CliResult<Clients> {
        Ok(Clients::from_config(&self.clients)?)
    }
}

#[derive(Debug, Parser)]
#[command(name = "qbrag", version, about = "Question-based retrieval-augmented generation")]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Backend for every client role.
    #[arg(long, global = true, value_parser = parse_backend)]
    pub backend: Option<Backend>,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    match s {
        "mock" => Ok(Backend::Mock),
        "http" => Ok(Backend::Http),
        other => Err(format!("unknown backend {other:?}; expected mock or http")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a knowledge base from a contents file.
    Ingest {
        /// JSON lines with "text" and optional "created_at".
        #[arg(long)]
        contents: PathBuf,
        #[arg(long)]
        kb: PathBuf,
    },
    /// Generate and filter questions for every content.
    Genq {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        num_questions: Option<u64>,
    },
    /// Judge candidate pairs and complete the answerability matrix.
    BuildMatrix(BuildMatrixArgs),
    /// Retrieve contents for one query and print the trace as JSON.
    Retrieve(RetrieveArgs),
    /// Run strategies × k over a test set and write the report.
    Bench(BenchArgs),
    /// Build a pairwise question-preference dataset.
    Curate {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        samples: Option<u64>,
    },
}

#[derive(Debug, Args)]
pub struct BuildMatrixArgs {
    #[arg(long)]
    pub kb: PathBuf,
    /// Fraction of content–question pairs, by similarity, sent to the judge.
    #[arg(long)]
    pub percentile: Option<f64>,
    /// Do not add the observed pairs to the judged set.
    #[arg(long)]
    pub no_observed: bool,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub regularization: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: u64,
    #[arg(long, value_parser = parse_source)]
    pub matrix_source: Option<MatrixSource>,
    #[arg(long, value_parser = parse_weighting)]
    pub weighting: Option<Weighting>,
    #[arg(long, value_parser = parse_aggregation)]
    pub aggregation: Option<Aggregation>,
    #[arg(long)]
    pub temperature: Option<f64>,
    pub query: String,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub kb: PathBuf,
    /// Test cases (JSON lines). Built and written here when missing and a
    /// make flag is given.
    #[arg(long)]
    pub testset: Option<PathBuf>,
    #[arg(long)]
    pub make_rephrase: Option<usize>,
    #[arg(long)]
    pub make_ood: bool,
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<Strategy>>,
    #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(u64).range(1..))]
    pub ks: Option<Vec<u64>>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_enum<T: for<'de> Deserialize<'de>>(s: &str, valid: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown value {s:?}; expected one of {valid}"))
}

fn parse_source(s: &str) -> Result<MatrixSource, String> {
    parse_enum(s, "observed, estimate, provided")
}

fn parse_weighting(s: &str) -> Result<Weighting, String> {
    parse_enum(s, "binary, probability")
}

fn parse_aggregation(s: &str) -> Result<Aggregation, String> {
    parse_enum(s, "sum, mean, softmax")
}

fn require_dir(path: &Path) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} is not a directory", path.display())))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContentRecord {
    text: String,
    #[serde(default)]
    created_at: i64,
}

/// Read `{"text", "created_at"?}` lines. Blank lines are skipped.
pub fn read_contents(path: &Path) -> CliResult<Vec<(String, i64)>> {
    let file = File::open(path).map_err(io_err(path))?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ContentRecord = serde_json::from_str(&line).map_err(|e| CliError::Format {
            file: name.clone(),
            line: n + 1,
            message: e.to_string(),
        })?;
        if rec.text.trim().is_empty() {
            return Err(CliError::Format {
                file: name.clone(),
                line: n + 1,
                message: "empty text".into(),
            });
        }
        out.push((rec.text, rec.created_at));
    }
    if out.is_empty() {
        return Err(CliError::Format {
            file: name,
            line: 0,
            message: "no contents".into(),
        });
    }
    Ok(out)
}

/// Build and store a knowledge base with embedded contents. Returns the
/// number of contents.
pub fn cmd_ingest(contents: &Path, kb_dir: &Path, clients: &Clients, out: &mut dyn Write) -> CliResult<usize> {
    let records = read_contents(contents)?;
    let mut kb = KnowledgeBase::new();
    for (text, created_at) in &records {
        kb.add_content(text, *created_at)?;
    }
    kb.embed_pending(clients.embedder.as_ref())?;
    store::save(&kb, kb_dir)?;
    let dim = kb.embedding_dim().unwrap_or(0);
    writeln!(out, "ingested {} contents (d = {dim})", records.len()).map_err(io_err(kb_dir))?;
    Ok(records.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenqSummary {
    pub generated: usize,
    pub kept: usize,
    pub dropped: usize,
    pub mean_per_content: f64,
    /// Contents left without an answerable question.
    pub bare_contents: Vec<String>,
}

/// Regenerate the question base from scratch and filter it. Rerunning with
/// the same inputs reproduces the same questions.
pub fn cmd_genq(
    kb_dir: &Path,
    clients: &Clients,
    cfg: &GenerationConfig,
    out: &mut dyn Write,
) -> CliResult<GenqSummary> {
    require_dir(kb_dir)?;
    cfg.validate()?;
    let mut kb = store::load(kb_dir)?;
    kb.clear_questions();
    let generated = pipeline::populate_questions(clients.generator.as_ref(), &mut kb, cfg, clients.max_parallel)?;
    let report = pipeline::filter_questions(clients.judge.as_ref(), &mut kb, clients.max_parallel)?;
    kb.embed_pending(clients.embedder.as_ref())?;
    store::save(&kb, kb_dir)?;
    let summary = GenqSummary {
        generated,
        kept: report.kept,
        dropped: report.dropped,
        mean_per_content: kb.mean_questions_per_content(),
        bare_contents: report.coverage.map(|c| c.bare_contents).unwrap_or_default(),
    };
    writeln!(
        out,
        "generated {} questions, kept {}, dropped {}, mean per content {:.2}",
        summary.generated, summary.kept, summary.dropped, summary.mean_per_content
    )
    .map_err(io_err(kb_dir))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSummary {
    pub observed: usize,
    pub candidates: usize,
    pub judge_calls: usize,
    pub failures: usize,
    pub estimate_ones: usize,
    pub failures_path: Option<PathBuf>,
}

/// Select candidate pairs, judge them, complete the matrix and install the
/// estimate in the stored knowledge base.
pub fn cmd_build_matrix(
    kb_dir: &Path,
    clients: &Clients,
    settings: &MatrixSettings,
    out: &mut dyn Write,
) -> CliResult<MatrixSummary> {
    require_dir(kb_dir)?;
    let mut kb = store::load(kb_dir)?;
    let (m, n) = (kb.contents().len(), kb.active_positions().len());
    // fail on shape problems before spending judge calls
    settings.completion.validate(m, n)?;
    let selection = builder::select_candidates(&kb, settings.percentile, settings.include_observed)?;
    let evaluated = builder::evaluate_candidates(clients.judge.as_ref(), &kb, &selection, clients.max_parallel)?;
    let failures_path = if evaluated.failures.is_empty() {
        None
    } else {
        let path = kb_dir.join(FAILURES_FILE);
        builder::write_failures(&path, &evaluated.failures)?;
        Some(path)
    };
    let completion = builder::complete_matrix(&evaluated.observations, m, n, &settings.completion)?;
    let summary = MatrixSummary {
        observed: kb.observed_matrix().ones(),
        candidates: selection.pairs.len(),
        judge_calls: evaluated.judge_calls,
        failures: evaluated.failures.len(),
        estimate_ones: completion.estimate.ones(),
        failures_path,
    };
    kb.set_matrix(completion.estimate)?;
    store::save(&kb, kb_dir)?;
    writeln!(
        out,
        "observed {} entries, evaluated {} candidates ({} judge calls), completed {}x{} matrix with {} ones",
        summary.observed, summary.candidates, summary.judge_calls, m, n, summary.estimate_ones
    )
    .map_err(io_err(kb_dir))?;
    if let Some(path) = &summary.failures_path {
        writeln!(out, "{} judge failures listed in {}", summary.failures, path.display()).map_err(io_err(kb_dir))?;
    }
    Ok(summary)
}

/// Retrieve for one query and print the trace as JSON.
pub fn cmd_retrieve(
    kb_dir: &Path,
    clients: &Clients,
    query: &str,
    k: usize,
    cfg: &StrategyConfig,
    out: &mut dyn Write,
) -> CliResult<RetrievalResult> {
    require_dir(kb_dir)?;
    let kb = store::load(kb_dir)?.freeze()?;
    let result = Retriever::new(&kb, clients).retrieve(query, k, cfg)?;
    writeln!(out, "{}", result.to_json()).map_err(io_err(kb_dir))?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRequest {
    pub testset: Option<PathBuf>,
    pub make_rephrase: Option<usize>,
    pub make_ood: bool,
    pub strategies: Vec<StrategyConfig>,
    pub ks: Vec<usize>,
    pub seed: u64,
    pub out: PathBuf,
}

fn build_cases(
    kb: &KnowledgeBase,
    clients: &Clients,
    req: &BenchRequest,
    err: &mut dyn Write,
) -> CliResult<Vec<TestCase>> {
    let mut cases = Vec::new();
    let mut warnings = Vec::new();
    if let Some(n) = req.make_rephrase {
        let (c, w) = eval::build_rephrase_set(clients.generator.as_ref(), kb, n, req.seed, clients.max_parallel)?;
        cases.extend(c);
        warnings.extend(w);
    }
    if req.make_ood {
        let (c, w) = eval::build_ood_set(
            clients.generator.as_ref(),
            clients.judge.as_ref(),
            kb,
            clients.max_parallel,
        )?;
        cases.extend(c);
        warnings.extend(w);
    }
    for w in warnings {
        writeln!(err, "warning: {w}").map_err(io_err(&req.out))?;
    }
    Ok(cases)
}

/// Run the benchmark and write `report.json` and `answers.jsonl` under
/// `req.out`. Returns the report path.
pub fn cmd_bench(
    kb_dir: &Path,
    clients: &Clients,
    req: &BenchRequest,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CliResult<PathBuf> {
    require_dir(kb_dir)?;
    let kb = store::load(kb_dir)?;
    let make = req.make_rephrase.is_some() || req.make_ood;
    let cases = match &req.testset {
        Some(path) if path.exists() => eval::read_cases(path, &kb)?,
        Some(path) if make => {
            let cases = build_cases(&kb, clients, req, err)?;
            eval::write_cases(path, &cases)?;
            cases
        }
        Some(path) => return Err(CliError::Usage(format!("test set {} does not exist", path.display()))),
        None if make => {
            let cases = build_cases(&kb, clients, req, err)?;
            std::fs::create_dir_all(&req.out).map_err(io_err(&req.out))?;
            eval::write_cases(&req.out.join(CASES_FILE), &cases)?;
            cases
        }
        None => {
            return Err(CliError::Usage(
                "give --testset or one of --make-rephrase / --make-ood".into(),
            ))
        }
    };
    let kb = kb.freeze()?;
    let plan = BenchPlan {
        strategies: req.strategies.clone(),
        ks: req.ks.clone(),
        seed: req.seed,
        max_parallel: clients.max_parallel,
    };
    let output = eval::run_benchmark(&kb, clients, &cases, &plan)?;
    let path = output.write(&req.out)?;
    write!(out, "{}", output.report.table()).map_err(io_err(&path))?;
    let failed: usize = output.answers.iter().filter(|a| !a.errors.is_empty()).count();
    if failed > 0 {
        writeln!(
            err,
            "warning: {failed} of {} case runs had failures; see answers.jsonl",
            output.answers.len()
        )
        .map_err(io_err(&path))?;
    }
    writeln!(out, "report written to {}", path.display()).map_err(io_err(&path))?;
    Ok(path)
}

/// Build the preference dataset and write it as JSON lines.
pub fn cmd_curate(
    kb_dir: &Path,
    clients: &Clients,
    cfg: &PreferenceConfig,
    path: &Path,
    out: &mut dyn Write,
) -> CliResult<usize> {
    require_dir(kb_dir)?;
    let kb = store::load(kb_dir)?;
    let examples = pipeline::curate_preferences(
        clients.judge.as_ref(),
        clients.embedder.as_ref(),
        Some(clients.generator.as_ref()),
        &kb,
        cfg,
        clients.max_parallel,
    )?;
    pipeline::write_preferences(path, &examples)?;
    let high = pipeline::high_reward_examples(&examples, cfg.high_reward).len();
    writeln!(
        out,
        "wrote {} preference examples ({high} above the high-reward bar)",
        examples.len()
    )
    .map_err(io_err(path))?;
    Ok(examples.len())
}

fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<i32> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.propagate_seed();
    if let Some(backend) = cli.backend {
        for c in [
            &mut cfg.clients.generator,
            &mut cfg.clients.judge,
            &mut cfg.clients.embedder,
            &mut cfg.clients.scorer,
        ] {
            c.backend = backend;
        }
    }
    writeln!(out, "seed: {}", cfg.seed).map_err(io_err(Path::new("<stdout>")))?;
    let clients = cfg.clients()?;
    match cli.command {
        Command::Ingest { contents, kb } => {
            if !contents.is_file() {
                return Err(CliError::Usage(format!("{} does not exist", contents.display())));
            }
            cmd_ingest(&contents, &kb, &clients, out)?;
        }
        Command::Genq { kb, num_questions } => {
            if let Some(n) = num_questions {
                cfg.generation.num_questions = n as usize;
            }
            let summary = cmd_genq(&kb, &clients, &cfg.generation, out)?;
            if !summary.bare_contents.is_empty() {
                writeln!(
                    err,
                    "warning: {} contents have no answerable question: {}",
                    summary.bare_contents.len(),
                    summary.bare_contents.join(", ")
                )
                .map_err(io_err(&kb))?;
                return Ok(EXIT_WARNING);
            }
        }
        Command::BuildMatrix(a) => {
            let s = &mut cfg.matrix;
            if let Some(p) = a.percentile {
                s.percentile = p;
            }
            if a.no_observed {
                s.include_observed = false;
            }
            if let Some(r) = a.rank {
                s.completion.rank = r;
            }
            if let Some(i) = a.iterations {
                s.completion.iterations = i;
            }
            if let Some(r) = a.regularization {
                s.completion.regularization = r;
            }
            if let Some(t) = a.threshold {
                s.completion.binarize_threshold = t;
            }
            let summary = cmd_build_matrix(&a.kb, &clients, &cfg.matrix, out)?;
            if summary.failures > 0 {
                return Ok(EXIT_WARNING);
            }
        }
        Command::Retrieve(a) => {
            let mut sc = cfg.retrieval.clone();
            if let Some(s) = a.strategy {
                sc.strategy = s;
            }
            if let Some(v) = a.matrix_source {
                sc.matrix_source = v;
            }
            if let Some(v) = a.weighting {
                sc.weighting = v;
            }
            if let Some(v) = a.aggregation {
                sc.aggregation = v;
            }
            if let Some(v) = a.temperature {
                sc.temperature = v;
            }
            cmd_retrieve(&a.kb, &clients, &a.query, a.k as usize, &sc, out)?;
        }
        Command::Bench(a) => {
            let names = a.strategies.unwrap_or_else(|| cfg.bench.strategies.clone());
            let ks = match a.ks {
                Some(ks) => ks.into_iter().map(|k| k as usize).collect(),
                None => cfg.bench.ks.clone(),
            };
            let req = BenchRequest {
                testset: a.testset,
                make_rephrase: a.make_rephrase.or(cfg.bench.make_rephrase),
                make_ood: a.make_ood || cfg.bench.make_ood,
                strategies: names
                    .into_iter()
                    .map(|strategy| StrategyConfig {
                        strategy,
                        ..cfg.retrieval.clone()
                    })
                    .collect(),
                ks,
                seed: cfg.seed,
                out: a.out,
            };
            cmd_bench(&a.kb, &clients, &req, out, err)?;
        }
        Command::Curate { kb, out: path, samples } => {
            if let Some(s) = samples {
                cfg.preferences.samples_per_content = s as usize;
            }
            cmd_curate(&kb, &clients, &cfg.preferences, &path, out)?;
        }
    }
    Ok(EXIT_OK)
}

/// Parse `args` (program name first), run the command and return the exit
/// code. Usage errors print clap's message and return 2.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(sink, "{rendered}");
            return code;
        }
    };
    match execute(cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(args.iter().copied(), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_strategy_is_a_usage_error() {
        let (code, _, err) = run_capture(&["qbrag", "retrieve", "--kb", "x", "--k", "1", "--strategy", "bogus", "q"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("qb_vanilla") && err.contains("naive"), "{err}");
    }

    #[test]
    fn zero_k_is_a_usage_error() {
        let (code, _, _) = run_capture(&["qbrag", "retrieve", "--kb", "x", "--k", "0", "q"]);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn missing_kb_dir_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let kb = dir.path().join("absent");
        let (code, out, err) = run_capture(&["qbrag", "--seed", "5", "genq", "--kb", kb.to_str().unwrap()]);
        assert_eq!(code, EXIT_USAGE, "{err}");
        assert!(out.starts_with("seed: 5"));
    }

    #[test]
    fn config_rejects_unknown_keys_and_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"seed": 3, "surprise": 1}"#).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(CliError::Usage(_))));
        std::fs::write(&path, r#"{"seed": 3, "matrix": {"percentile": 0.2}}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.matrix.percentile, 0.2);
        assert_eq!(cfg.matrix.completion.rank, 4);
        let (_, out, _) = run_capture(&[
            "qbrag",
            "--config",
            path.to_str().unwrap(),
            "--seed",
            "8",
            "genq",
            "--kb",
            "/nonexistent",
        ]);
        assert!(out.starts_with("seed: 8"));
        let (_, out, _) = run_capture(&[
            "qbrag",
            "--config",
            path.to_str().unwrap(),
            "genq",
            "--kb",
            "/nonexistent",
        ]);
        assert!(out.starts_with("seed: 3"));
    }

    #[test]
    fn contents_reader_reports_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "{\"text\":\"a\"}\n{\"text\":\"b\"}\nnot json\n").unwrap();
        match read_contents(&path) {
            Err(CliError::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "\n").unwrap();
        let e = read_contents(&path).unwrap_err();
        assert!(e.to_string().contains("no contents"));
        std::fs::write(&path, "{\"text\":\"a\",\"created_at\":5}\n").unwrap();
        assert_eq!(read_contents(&path).unwrap(), vec![("a".to_string(), 5)]);
    }
}
