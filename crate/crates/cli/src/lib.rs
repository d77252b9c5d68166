//! Command-line front end: `build`, `inspect`, `query`, `serve`, `eval` and
//! the `clusters` debug dump. Every JSON output line carries a `schema` tag.

pub mod service;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hiermem::config::Profile;
use hiermem::corpus::{format, ingest, EmbedderKind};
use hiermem::eval::{eval_synthetic, EvalConfig};
use hiermem::finch::build_hierarchy;
use hiermem::retrieval::make_anchors;
use hiermem::{
    bank_stats, build_bank, load_bank, retrieve, save_bank, BankMode, BuildOptions, Config,
    Embedder, Error, ErrorClass, LevelSpec, ReadMode, Selection, StubEmbedder, Summarizer,
    SummarizerKind,
};
use serde_json::{json, Value};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_BACKEND: i32 = 4;
pub const EXIT_INTERNAL: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "hiermem", version, about = "Hierarchical caption memory banks")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parameter preset applied before the configuration file.
    #[arg(long, global = true, value_enum)]
    profile: Option<ProfileArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    Youcook2,
    Vitt,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cluster a caption corpus and write a bank file.
    Build(BuildArgs),
    /// Print per-level counts and sample summaries of a bank.
    Inspect(InspectArgs),
    /// Read a bank with the anchors of one video's frame features.
    Query(QueryArgs),
    /// Serve retrieval over HTTP.
    Serve(ServeArgs),
    /// Run the synthetic planted-hierarchy evaluation.
    Eval(EvalArgs),
    /// Dump the per-level cluster assignment of every caption.
    Clusters(CorpusArgs),
}

#[derive(Debug, Args)]
struct CorpusArgs {
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Keep embeddings as given instead of scaling them to unit length.
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Hierarchical,
    Flat,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SummarizerArg {
    Medoid,
    Centroid,
    LlmHttp,
}

#[derive(Debug, Args)]
struct BuildArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    summarizer: Option<SummarizerArg>,
    /// Record the build time in the bank (the file is then not reproducible).
    #[arg(long)]
    timestamp: bool,
}

#[derive(Debug, Args)]
struct InspectArgs {
    bank: PathBuf,
    /// Sample summaries shown per level.
    #[arg(long, default_value_t = 3)]
    samples: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SelectionArg {
    Max,
    TopK,
    Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Jsonl,
    Hcm1,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    bank: PathBuf,
    /// Frame features of one video, HCM1 format.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    k: Option<usize>,
    /// `all`, names joined by `+` (low, middle, high) or level numbers.
    #[arg(long)]
    levels: Option<String>,
    #[arg(long, value_enum)]
    selection: Option<SelectionArg>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    no_hierarchical_aggregation: bool,
    /// Temporal anchors per video.
    #[arg(long)]
    anchors: Option<usize>,
    #[arg(long, value_enum, default_value = "jsonl")]
    format: OutputFormat,
    /// Output file; stdout when omitted (JSONL only).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    bank: PathBuf,
    #[arg(long)]
    bind: Option<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Evaluation settings (TOML); defaults when omitted.
    #[arg(long)]
    settings: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    queries: Option<usize>,
}

/// Failure of a command, with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub class: &'static str,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let class = e.class();
        let code = match class {
            ErrorClass::Input => EXIT_INPUT,
            ErrorClass::Config => EXIT_CONFIG,
            ErrorClass::Backend => EXIT_BACKEND,
            ErrorClass::Internal => EXIT_INTERNAL,
        };
        Failure {
            code,
            class: class.as_str(),
            message: e.to_string(),
        }
    }
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into()).into()
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Failure {
            code: EXIT_INTERNAL,
            class: ErrorClass::Internal.as_str(),
            message: format!("{}: {e}", path.display()),
        }
    }

    pub fn to_json(&self) -> Value {
        json!({ "schema": "hiermem.error/1", "class": self.class, "exit_code": self.code, "message": self.message })
    }
}

type CmdResult = Result<(), Failure>;

fn effective_config(cli: &Cli) -> Result<Config, Failure> {
    let mut config = match cli.profile {
        Some(ProfileArg::Youcook2) => Config::profile(Profile::YouCook2),
        Some(ProfileArg::Vitt) => Config::profile(Profile::Vitt),
        None => Config::default(),
    };
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Failure::from(Error::Io {
                path: path.clone(),
                source: e,
            })
        })?;
        let overlay: toml::Table = toml::from_str(&text)
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        config = merge_toml(&config, toml::Value::Table(overlay))
            .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    }
    Ok(config)
}

/// Applies the keys present in `overlay` on top of `base`.
fn merge_toml(base: &Config, overlay: toml::Value) -> Result<Config, String> {
    fn merge(dst: &mut toml::Value, src: toml::Value) {
        match (dst, src) {
            (toml::Value::Table(d), toml::Value::Table(s)) => {
                for (k, v) in s {
                    match d.get_mut(&k) {
                        Some(slot) => merge(slot, v),
                        None => {
                            d.insert(k, v);
                        }
                    }
                }
            }
            (d, s) => *d = s,
        }
    }
    let mut value = toml::Value::try_from(base).map_err(|e| e.to_string())?;
    merge(&mut value, overlay);
    let text = toml::to_string(&value).map_err(|e| e.to_string())?;
    Config::from_toml(&text).map_err(|e| e.to_string())
}

fn print_line(v: &Value) -> CmdResult {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{v}").map_err(|e| Failure::io(Path::new("<stdout>"), e))
}

fn corpus_paths(args: &CorpusArgs, config: &mut Config) -> Result<(PathBuf, PathBuf), Failure> {
    if let Some(p) = &args.captions {
        config.corpus.captions = Some(p.clone());
    }
    if let Some(p) = &args.embeddings {
        config.corpus.embeddings = Some(p.clone());
    }
    if args.no_normalize {
        config.corpus.normalize = false;
    }
    match (&config.corpus.captions, &config.corpus.embeddings) {
        (Some(c), Some(e)) => Ok((c.clone(), e.clone())),
        _ => Err(Failure::config(
            "corpus.captions and corpus.embeddings are required",
        )),
    }
}

fn embedder_for(config: &Config, dim: usize) -> Result<Box<dyn Embedder>, Failure> {
    match config.embedder.kind {
        EmbedderKind::Stub => Ok(Box::new(StubEmbedder::new(dim))),
        EmbedderKind::Http if config.embedder.dim != dim => Err(Failure::config(format!(
            "embedder.dim {} does not match corpus dimension {dim}",
            config.embedder.dim
        ))),
        EmbedderKind::Http => Ok(config.embedder.build()?),
    }
}

fn cmd_build(args: &BuildArgs, mut config: Config) -> CmdResult {
    let (captions, embeddings) = corpus_paths(&args.corpus, &mut config)?;
    if let Some(m) = args.mode {
        config.build.mode = match m {
            ModeArg::Hierarchical => BankMode::Hierarchical,
            ModeArg::Flat => BankMode::Flat,
        };
    }
    if let Some(s) = args.summarizer {
        config.summarizer.kind = match s {
            SummarizerArg::Medoid => SummarizerKind::Medoid,
            SummarizerArg::Centroid => SummarizerKind::Centroid,
            SummarizerArg::LlmHttp => SummarizerKind::LlmHttp,
        };
    }
    config.build.record_timestamp |= args.timestamp;
    config.validate()?;

    let corpus = ingest(&captions, &embeddings, config.corpus.normalize)?;
    let embedder = embedder_for(&config, corpus.dim())?;
    let summarizer = Summarizer::from_config(&config.summarizer)?;
    let options = BuildOptions {
        mode: config.build.mode,
        finch: config.finch.clone(),
        build_timestamp: config
            .build
            .record_timestamp
            .then(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)),
        config_snapshot: config.snapshot(),
    };
    let bank = build_bank(&corpus, &summarizer, embedder.as_ref(), &options)?;
    save_bank(&bank, &args.out)?;
    print_line(&json!({
        "schema": "hiermem.build/1",
        "bank": args.out,
        "stats": bank_stats(&bank),
        "warnings": bank.provenance().warnings,
        "config": config.snapshot(),
    }))
}

fn cmd_inspect(args: &InspectArgs) -> CmdResult {
    let bank = load_bank(&args.bank)?;
    let levels: Vec<Value> = bank
        .levels()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let samples: Vec<Value> = l
                .nodes
                .iter()
                .take(args.samples)
                .map(|n| json!({ "node": n.node_id, "text": n.text, "leaf_span": n.leaf_span, "children": n.children.len() }))
                .collect();
            json!({ "level": i + 1, "count": l.len(), "samples": samples })
        })
        .collect();
    print_line(&json!({
        "schema": "hiermem.inspect/1",
        "dim": bank.dim(),
        "level_counts": bank.level_sizes(),
        "levels": levels,
        "stats": bank_stats(&bank),
        "provenance": bank.provenance(),
    }))
}

fn apply_query_flags(args: &QueryArgs, config: &mut Config) -> CmdResult {
    let r = &mut config.retrieval;
    if let Some(m) = args.mode {
        r.mode = match m {
            ModeArg::Hierarchical => ReadMode::Hierarchical,
            ModeArg::Flat => ReadMode::Flat,
        };
    }
    if let Some(k) = args.k {
        r.k = k;
    }
    if let Some(l) = &args.levels {
        r.levels = l.parse::<LevelSpec>()?;
    }
    if let Some(s) = args.selection {
        r.selection = match s {
            SelectionArg::Max => Selection::Max,
            SelectionArg::TopK => Selection::TopK,
            SelectionArg::Threshold => Selection::Threshold,
        };
    }
    if let Some(t) = args.threshold {
        r.threshold = t;
    }
    if args.no_hierarchical_aggregation {
        r.hierarchical_aggregation = false;
    }
    if let Some(w) = args.anchors {
        config.anchors.count = w;
    }
    if args.format == OutputFormat::Hcm1 && args.out.is_none() {
        return Err(Failure::config("--format hcm1 needs --out"));
    }
    config.retrieval.validate()?;
    Ok(())
}

fn cmd_query(args: &QueryArgs, mut config: Config) -> CmdResult {
    apply_query_flags(args, &mut config)?;
    let bank = load_bank(&args.bank)?;
    let frames = format::read_file(&args.frames)?;
    if frames.dim() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            actual: frames.dim(),
        }
        .into());
    }
    if frames.len() != config.anchors.frames {
        tracing::warn!(
            frames = frames.len(),
            expected = config.anchors.frames,
            "frame count differs from anchors.frames"
        );
    }
    let anchors = make_anchors(&frames, config.anchors.count, config.anchors.renormalize)?;
    let result = retrieve(&bank, &anchors.anchors, &config.retrieval)?;

    if args.format == OutputFormat::Hcm1 {
        let out = args.out.as_ref().expect("checked above");
        format::write_file(out, &result.features())?;
        return print_line(&json!({
            "schema": "hiermem.query/1",
            "kind": "summary",
            "anchors": result.per_anchor.len(),
            "features": out,
            "config": config.snapshot(),
        }));
    }
    let mut lines = Vec::with_capacity(result.per_anchor.len() + 1);
    lines.push(
        json!({ "schema": "hiermem.query/1", "kind": "config", "config": config.snapshot() }),
    );
    for a in &result.per_anchor {
        let mut v = serde_json::to_value(a).expect("anchor result serializes");
        v["schema"] = Value::from("hiermem.query/1");
        v["kind"] = Value::from("anchor");
        lines.push(v);
    }
    let mut text = String::new();
    for l in &lines {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    match &args.out {
        Some(path) => std::fs::write(path, text).map_err(|e| {
            Failure::from(Error::Io {
                path: path.clone(),
                source: e,
            })
        }),
        None => std::io::stdout()
            .lock()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::io(Path::new("<stdout>"), e)),
    }
}

fn cmd_serve(args: &ServeArgs, mut config: Config) -> CmdResult {
    if let Some(b) = &args.bind {
        config.service.bind = b.clone();
    }
    let bank = load_bank(&args.bank)?;
    let state = service::AppState {
        bank,
        defaults: config.retrieval.clone(),
        renormalize_anchors: config.anchors.renormalize,
    };
    service::serve_forever(state, &config.service.bind).map_err(|e| Failure {
        code: EXIT_INTERNAL,
        class: ErrorClass::Internal.as_str(),
        message: format!("service on {}: {e}", config.service.bind),
    })
}

fn cmd_eval(args: &EvalArgs) -> CmdResult {
    let mut ec = match &args.settings {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                Failure::from(Error::Io {
                    path: p.clone(),
                    source: e,
                })
            })?;
            toml::from_str::<EvalConfig>(&text)
                .map_err(|e| Failure::config(format!("{}: {e}", p.display())))?
        }
        None => EvalConfig::default(),
    };
    if let Some(s) = args.seed {
        ec.seed = s;
    }
    if let Some(q) = args.queries {
        ec.queries = q;
    }
    let report = eval_synthetic(&ec)?;
    print_line(&serde_json::to_value(&report).expect("report serializes"))
}

fn cmd_clusters(args: &CorpusArgs, mut config: Config) -> CmdResult {
    let (captions, embeddings) = corpus_paths(args, &mut config)?;
    let corpus = ingest(&captions, &embeddings, config.corpus.normalize)?;
    let h = build_hierarchy(&corpus, &config.finch)?;
    let mut text = String::new();
    for (i, id) in corpus.ids().iter().enumerate() {
        let path: Vec<u32> = h.levels.iter().map(|l| l.assignment[i]).collect();
        text.push_str(
            &json!({ "schema": "hiermem.clusters/1", "id": id, "clusters": path }).to_string(),
        );
        text.push('\n');
    }
    std::io::stdout()
        .lock()
        .write_all(text.as_bytes())
        .map_err(|e| Failure::io(Path::new("<stdout>"), e))
}

fn dispatch(cli: Cli) -> CmdResult {
    let config = effective_config(&cli)?;
    match &cli.command {
        Command::Build(a) => cmd_build(a, config),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Query(a) => cmd_query(a, config),
        Command::Serve(a) => cmd_serve(a, config),
        Command::Eval(a) => cmd_eval(a),
        Command::Clusters(a) => cmd_clusters(a, config),
    }
}

/// Parses `args`, runs the command and returns the process exit code. Errors
/// are written to stderr as one JSON line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("{}", f.to_json());
            f.code
        }
    }
}
