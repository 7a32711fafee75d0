//! The `phraseforge` command line.
//!
//! Every command reads its inputs, writes its artifacts under `--out` and
//! prints a short summary. Failures print one JSON line on stderr and exit
//! with 1 (runtime) or 2 (usage or configuration).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::baselines::{Pipeline, Retriever, RetrieverKind, DEFAULT_TOPK_PASSAGES};
use crate::corpus::{load_conversations, load_corpus, span_count, ConvContext, ConversationTurn, Corpus};
use crate::encoder::{encode_context, load_head, save_head, EncoderProvider, Featurizer, ProjectionHead};
use crate::error::Error;
use crate::eval::{bench_latency, BenchSystem, EvalReport, LatencyReport, DEFAULT_REPS, DEFAULT_WARMUP};
use crate::index::{build_index, load_index, save_index, search_topk, PhraseIndex, DEFAULT_CUTOFF, DEFAULT_K};
use crate::qa::{answer_conversations, report, Answerer, HistoryMode, SingleStage, TurnPrediction};
use crate::remote::RemoteEncoder;
use crate::training::{build_examples, encode_examples, finetune_query, fit, LossReport, TrainConfig};
use crate::Head;

pub const INDEX_FILE: &str = "index.bin";
pub const MANIFEST_FILE: &str = "index.manifest.json";
pub const HEAD_FILE: &str = "head.bin";

#[derive(Debug, Parser)]
#[command(name = "phraseforge", version, about = "Conversational QA by dense phrase retrieval")]
pub struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Embedding dimension; overrides the config file.
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    /// `key = value` training config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a corpus (and optionally conversations) and summarize them.
    Ingest(IngestArgs),
    /// Build the phrase index.
    Index(IndexArgs),
    /// Train the projection head, then fine-tune its query side.
    Train(TrainArgs),
    /// Fine-tune only the query side against a fixed index.
    FinetuneQuery(FinetuneArgs),
    /// Answer a question or a conversation file.
    Retrieve(RetrieveArgs),
    /// Score a system on conversations.
    Eval(EvalArgs),
    /// Time single-stage retrieval against the retriever-reader pipeline.
    Bench(BenchArgs),
    /// Train and evaluate the 2x2 grid of turn loss and query fine-tuning.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub conversations: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Head whose phrase side embeds the spans; identity when omitted.
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub conversations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Drop the turn loss (lambda2 = 0).
    #[arg(long)]
    pub no_turn_loss: bool,
    /// Stop after training; skip query-side fine-tuning.
    #[arg(long)]
    pub no_query_finetune: bool,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub conversations: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long, conflicts_with = "conversations", required_unless_present = "conversations")]
    pub question: Option<String>,
    /// Answer every turn, feeding earlier answers back as history.
    #[arg(long)]
    pub conversations: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// gold or predicted answers in the history of later turns.
    #[arg(long, default_value = "predicted")]
    pub history: HistoryMode,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub conversations: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate a retriever-reader pipeline instead of single-stage retrieval.
    #[arg(long)]
    pub pipeline: Option<RetrieverKind>,
    #[arg(long, default_value_t = DEFAULT_TOPK_PASSAGES)]
    pub topk_passages: usize,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    pub cutoff: usize,
    #[arg(long, default_value = "gold")]
    pub history: HistoryMode,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub conversations: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "bm25")]
    pub pipeline: RetrieverKind,
    #[arg(long, default_value_t = DEFAULT_TOPK_PASSAGES)]
    pub topk_passages: usize,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_REPS)]
    pub reps: usize,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    pub warmup: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Training conversations.
    #[arg(long)]
    pub conversations: PathBuf,
    /// Evaluation conversations; the training ones when omitted.
    #[arg(long)]
    pub eval_conversations: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    pub cutoff: usize,
}

/// A failure as reported to the user.
#[derive(Debug, Serialize)]
pub struct Failure {
    #[serde(skip)]
    pub code: i32,
    pub error: &'static str,
    pub cause: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl Failure {
    fn usage(cause: impl Into<String>) -> Self {
        Failure {
            code: 2,
            error: "usage",
            cause: cause.into(),
            path: None,
        }
    }

    fn missing(what: &str, path: &Path) -> Self {
        Failure {
            code: 2,
            error: "usage",
            cause: format!("{what} not found"),
            path: Some(path.display().to_string()),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, error) = match &e {
            Error::Config(_) => (2, "config"),
            Error::Parse { .. } => (1, "parse"),
            Error::Validation(_) => (1, "validation"),
            Error::NotFound(_) => (1, "not_found"),
            Error::Transport { .. } => (1, "transport"),
            Error::Protocol(_) => (1, "protocol"),
            Error::Numeric(_) => (1, "numeric"),
            Error::Diverged { .. } => (1, "diverged"),
            Error::Format(_) => (1, "format"),
            Error::Io { .. } => (1, "io"),
        };
        Failure {
            code,
            error,
            cause: e.to_string(),
            path: None,
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{}", serde_json::to_string(&f).expect("failure serializes"));
            f.code
        }
    }
}

fn execute(cli: &Cli) -> CliResult<()> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::Ingest(a) => ingest(&config, a),
        Command::Index(a) => index(&config, a),
        Command::Train(a) => train(&config, a),
        Command::FinetuneQuery(a) => finetune(&config, a),
        Command::Retrieve(a) => retrieve(&config, a),
        Command::Eval(a) => eval(&config, a),
        Command::Bench(a) => bench(&config, a),
        Command::Ablate(a) => ablate(&config, a),
    }
}

fn load_config(cli: &Cli) -> CliResult<TrainConfig> {
    let mut c = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|_| Failure::missing("config", p))?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(d) = cli.dim {
        c.dim = d;
    }
    c.validate()?;
    Ok(c)
}

fn provider(config: &TrainConfig) -> CliResult<Box<dyn EncoderProvider>> {
    Ok(match RemoteEncoder::from_env(config.dim) {
        Some(r) => Box::new(r),
        None => Box::new(Featurizer::new(config.dim, config.seed)?),
    })
}

fn require(what: &str, path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::missing(what, path))
    }
}

fn corpus_at(path: &Path) -> CliResult<Corpus> {
    require("corpus", path)?;
    Ok(load_corpus(path)?)
}

fn turns_at(path: &Path) -> CliResult<Vec<ConversationTurn>> {
    require("conversations", path)?;
    Ok(load_conversations(path)?)
}

fn head_at(path: &Path, config: &TrainConfig) -> CliResult<Head> {
    require("head", path)?;
    let head = load_head(path)?;
    if head.dim() != config.dim {
        return Err(Error::Config(format!("head dim {} does not match dim {}", head.dim(), config.dim)).into());
    }
    Ok(head)
}

fn index_at(path: &Path, corpus: &Corpus, head: &Head) -> CliResult<PhraseIndex> {
    require("index", path)?;
    let index = load_index(path, corpus)?;
    if index.dim() != head.dim() {
        return Err(Error::Config(format!(
            "index dim {} does not match head dim {}",
            index.dim(),
            head.dim()
        ))
        .into());
    }
    Ok(index)
}

fn out_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| Failure::from(Error::Config(format!("cannot create {}: {e}", path.display()))))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn json_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

#[derive(Debug, Serialize)]
struct IngestSummary {
    passages: usize,
    tokens: usize,
    spans: usize,
    max_phrase_len: usize,
    fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    conversations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    turns: Option<usize>,
    /// Turns whose gold answer can be located in their gold passage.
    #[serde(skip_serializing_if = "Option::is_none")]
    answerable_turns: Option<usize>,
}

fn ingest(config: &TrainConfig, a: &IngestArgs) -> CliResult<()> {
    let corpus = corpus_at(&a.corpus)?;
    let mut summary = IngestSummary {
        passages: corpus.len(),
        tokens: corpus.passages().iter().map(|p| p.len()).sum(),
        spans: corpus
            .passages()
            .iter()
            .map(|p| span_count(p.len(), config.max_phrase_len))
            .sum(),
        max_phrase_len: config.max_phrase_len,
        fingerprint: hex::encode(corpus.fingerprint()),
        conversations: None,
        turns: None,
        answerable_turns: None,
    };
    if let Some(path) = &a.conversations {
        let turns = turns_at(path)?;
        let (examples, _) = build_examples(&turns, &corpus, config.max_phrase_len, config.context_tokens)?;
        summary.conversations = Some(crate::corpus::conversations(&turns).len());
        summary.turns = Some(turns.len());
        summary.answerable_turns = Some(examples.len());
    }
    let text = json_pretty(&summary);
    if let Some(out) = &a.out {
        out_dir(out)?;
        write(&out.join("ingest.json"), &text)?;
    }
    print!("{text}");
    Ok(())
}

/// Written next to every index file.
#[derive(Debug, Serialize)]
pub struct IndexManifest {
    pub dim: usize,
    pub entries: usize,
    pub max_phrase_len: usize,
    pub fingerprint: String,
    pub build_seconds: f64,
}

fn write_index(dir: &Path, index: &PhraseIndex, config: &TrainConfig, build_seconds: f64) -> CliResult<()> {
    save_index(index, dir.join(INDEX_FILE))?;
    let manifest = IndexManifest {
        dim: index.dim(),
        entries: index.len(),
        max_phrase_len: config.max_phrase_len,
        fingerprint: hex::encode(index.fingerprint()),
        build_seconds,
    };
    write(&dir.join(MANIFEST_FILE), json_pretty(&manifest))
}

fn index(config: &TrainConfig, a: &IndexArgs) -> CliResult<()> {
    let corpus = corpus_at(&a.corpus)?;
    let head = match &a.head {
        Some(p) => head_at(p, config)?,
        None => ProjectionHead::identity(config.dim),
    };
    let provider = provider(config)?;
    out_dir(&a.out)?;
    let t0 = Instant::now();
    let index = build_index(&corpus, &head, provider.as_ref(), config.max_phrase_len)?;
    write_index(&a.out, &index, config, t0.elapsed().as_secs_f64())?;
    println!("indexed {} phrases from {} passages", index.len(), corpus.len());
    Ok(())
}

fn write_trajectory(path: &Path, steps: &[LossReport]) -> CliResult<()> {
    write(path, jsonl(steps))
}

fn query_finetune(
    config: &TrainConfig,
    corpus: &Corpus,
    turns: &[ConversationTurn],
    index: &PhraseIndex,
    head: Head,
    provider: &dyn EncoderProvider,
) -> CliResult<(Head, Vec<LossReport>)> {
    let (examples, _) = build_examples(turns, corpus, config.max_phrase_len, config.context_tokens)?;
    let encoded = encode_examples::<f64>(&examples, corpus, provider)?;
    let out = finetune_query(index, &encoded, head, config)?;
    Ok((out.head, out.trajectory))
}

fn train(config: &TrainConfig, a: &TrainArgs) -> CliResult<()> {
    let corpus = corpus_at(&a.corpus)?;
    let turns = turns_at(&a.conversations)?;
    let mut config = config.clone();
    if a.no_turn_loss {
        config.lambda2 = 0.0;
    }
    let provider = provider(&config)?;
    out_dir(&a.out)?;
    let out = fit::<f64>(
        &turns,
        &corpus,
        provider.as_ref(),
        ProjectionHead::identity(config.dim),
        &config,
    )?;
    write(&a.out.join("config.txt"), config.to_kv_string())?;
    write_trajectory(&a.out.join("warmup.jsonl"), &out.warmup)?;
    write_trajectory(&a.out.join("trajectory.jsonl"), &out.trajectory)?;
    let mut head = out.head;
    if !a.no_query_finetune {
        // fine-tuning leaves the phrase side alone, so this index stays valid
        let t0 = Instant::now();
        let index = build_index(&corpus, &head, provider.as_ref(), config.max_phrase_len)?;
        write_index(&a.out, &index, &config, t0.elapsed().as_secs_f64())?;
        let (h, steps) = query_finetune(&config, &corpus, &turns, &index, head, provider.as_ref())?;
        write_trajectory(&a.out.join("finetune.jsonl"), &steps)?;
        head = h;
    }
    save_head(&head, a.out.join(HEAD_FILE))?;
    let last = out.trajectory.last().map(|r| r.l_total).unwrap_or(f64::NAN);
    println!(
        "trained on {} examples ({} skipped), {} steps, final loss {last:.4}",
        out.examples,
        out.skipped,
        out.trajectory.len()
    );
    Ok(())
}

fn finetune(config: &TrainConfig, a: &FinetuneArgs) -> CliResult<()> {
    let corpus = corpus_at(&a.corpus)?;
    let turns = turns_at(&a.conversations)?;
    let head = head_at(&a.head, config)?;
    let index = index_at(&a.index, &corpus, &head)?;
    let provider = provider(config)?;
    out_dir(&a.out)?;
    let (head, steps) = query_finetune(config, &corpus, &turns, &index, head, provider.as_ref())?;
    write_trajectory(&a.out.join("finetune.jsonl"), &steps)?;
    save_head(&head, a.out.join(HEAD_FILE))?;
    println!("fine-tuned query side over {} steps", steps.len());
    Ok(())
}

fn retrieve(config: &TrainConfig, a: &RetrieveArgs) -> CliResult<()> {
    if a.k == 0 {
        return Err(Failure::usage("--k must be at least 1"));
    }
    let corpus = corpus_at(&a.corpus)?;
    let head = head_at(&a.head, config)?;
    let index = index_at(&a.index, &corpus, &head)?;
    let provider = provider(config)?;
    let system = SingleStage {
        index: &index,
        head: &head,
        provider: provider.as_ref(),
        k: a.k,
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if let Some(q) = &a.question {
        let ctx = ConvContext::standalone(q, config.context_tokens);
        let query = encode_context(&ctx, &head, provider.as_ref())?;
        for r in search_topk(&index, &query, a.k)? {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{}\t{}\t{}\t{}",
                r.rank, r.score, r.span.passage_id, r.span.start_token, r.span.end_token, r.span.surface
            );
        }
    } else if let Some(path) = &a.conversations {
        let turns = turns_at(path)?;
        for p in answer_conversations(&system, &turns, config.context_tokens, a.history)? {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{}",
                p.conversation_id, p.turn_index, p.score, p.prediction
            );
        }
    }
    Ok(())
}

fn system_name(pipeline: Option<RetrieverKind>) -> String {
    match pipeline {
        Some(kind) => format!("pipeline-{kind}"),
        None => "single-stage".to_string(),
    }
}

fn write_report(dir: &Path, stem: &str, reports: &[EvalReport]) -> CliResult<()> {
    write(&dir.join(format!("{stem}.jsonl")), jsonl(reports))?;
    let mut tsv = String::from(EvalReport::TSV_HEADER);
    tsv.push('\n');
    for r in reports {
        tsv.push_str(&r.tsv_row());
        tsv.push('\n');
    }
    write(&dir.join(format!("{stem}.tsv")), &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn eval(config: &TrainConfig, a: &EvalArgs) -> CliResult<()> {
    let corpus = corpus_at(&a.corpus)?;
    let turns = turns_at(&a.conversations)?;
    let head = head_at(&a.head, config)?;
    let index = index_at(&a.index, &corpus, &head)?;
    let provider = provider(config)?;
    out_dir(&a.out)?;
    let single = SingleStage {
        index: &index,
        head: &head,
        provider: provider.as_ref(),
        k: a.k,
    };
    let retriever;
    let pipeline;
    let system: &dyn Answerer = match a.pipeline {
        Some(kind) => {
            retriever = Retriever::build(kind, &corpus, &index)?;
            pipeline = Pipeline {
                corpus: &corpus,
                retriever: &retriever,
                head: &head,
                provider: provider.as_ref(),
                topk_passages: a.topk_passages,
                max_phrase_len: config.max_phrase_len,
            };
            &pipeline
        }
        None => &single,
    };
    let preds = answer_conversations(system, &turns, config.context_tokens, a.history)?;
    write(&a.out.join("predictions.jsonl"), jsonl(&preds))?;
    let r = report(&system_name(a.pipeline), &preds, a.cutoff)?;
    write_report(&a.out, "report", &[r])
}

fn bench(config: &TrainConfig, a: &BenchArgs) -> CliResult<()> {
    let corpus = corpus_at(&a.corpus)?;
    let turns = turns_at(&a.conversations)?;
    let head = head_at(&a.head, config)?;
    let index = index_at(&a.index, &corpus, &head)?;
    let provider = provider(config)?;
    out_dir(&a.out)?;
    let contexts: Vec<ConvContext> = crate::corpus::conversations(&turns)
        .into_iter()
        .flat_map(|conv| {
            conv.iter()
                .map(|t| crate::corpus::build_conv_context(conv, t.turn_index, config.context_tokens))
                .collect::<Vec<_>>()
        })
        .collect::<crate::Result<_>>()?;
    let retriever = Retriever::build(a.pipeline, &corpus, &index)?;
    let single = SingleStage {
        index: &index,
        head: &head,
        provider: provider.as_ref(),
        k: a.k,
    };
    let pipeline = Pipeline {
        corpus: &corpus,
        retriever: &retriever,
        head: &head,
        provider: provider.as_ref(),
        topk_passages: a.topk_passages,
        max_phrase_len: config.max_phrase_len,
    };
    let systems = [
        BenchSystem::new(system_name(None), |c: &ConvContext| {
            Ok(single.answer_context(c)?.answer)
        }),
        BenchSystem::new(system_name(Some(a.pipeline)), |c: &ConvContext| {
            Ok(pipeline.answer_context(c)?.answer)
        }),
    ];
    let report: LatencyReport = bench_latency(&systems, &contexts, a.warmup, a.reps)?;
    write(&a.out.join("latency.json"), json_pretty(&report))?;
    let mut tsv = String::from(LatencyReport::TSV_HEADER);
    tsv.push('\n');
    for row in report.tsv_rows() {
        tsv.push_str(&row);
        tsv.push('\n');
    }
    write(&a.out.join("latency.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

/// Rows of the turn-loss x query-fine-tuning grid, in table order.
pub const ABLATION_ROWS: [(&str, bool, bool); 4] = [
    ("full", true, true),
    ("w/o QF", true, false),
    ("w/o CL", false, true),
    ("w/o CL & QF", false, false),
];

fn ablate(config: &TrainConfig, a: &AblateArgs) -> CliResult<()> {
    let corpus = corpus_at(&a.corpus)?;
    let turns = turns_at(&a.conversations)?;
    let eval_turns = match &a.eval_conversations {
        Some(p) => turns_at(p)?,
        None => turns.clone(),
    };
    let provider = provider(config)?;
    out_dir(&a.out)?;
    let mut reports = Vec::with_capacity(4);
    for cl in [true, false] {
        let mut c = config.clone();
        if !cl {
            c.lambda2 = 0.0;
        }
        let out = fit::<f64>(&turns, &corpus, provider.as_ref(), ProjectionHead::identity(c.dim), &c)?;
        let index = build_index(&corpus, &out.head, provider.as_ref(), c.max_phrase_len)?;
        let tuned = query_finetune(&c, &corpus, &turns, &index, out.head.clone(), provider.as_ref())?.0;
        for (name, row_cl, qf) in ABLATION_ROWS {
            if row_cl != cl {
                continue;
            }
            let head = if qf { &tuned } else { &out.head };
            let system = SingleStage {
                index: &index,
                head,
                provider: provider.as_ref(),
                k: a.k,
            };
            let preds: Vec<TurnPrediction> =
                answer_conversations(&system, &eval_turns, c.context_tokens, HistoryMode::Gold)?;
            reports.push(report(name, &preds, a.cutoff)?);
        }
    }
    write_report(&a.out, "ablation", &reports)
}
