use std::net::IpAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use asmscribe_cli::curate::{curate, read_intents};
use asmscribe_cli::{
    count_tasks, parse_table, read_dataset, split_breakdown, values_arg, write_dataset, write_split,
};
use asmscribe_core::annotate::{apply_annotations, AnnotationOptions, AnnotationRequest};
use asmscribe_core::asm::parse_sample;
use asmscribe_core::lora::{load_adapter, load_weights, merge, save_weights, RenameTable};
use asmscribe_core::metrics::{compare_reports, EvalReport, TrainingConfig};
use asmscribe_core::stats::{fisher_exact_one_tailed, mann_whitney_one_tailed, Alternative};
use asmscribe_core::tasks::{make_qa, stratified_split, Task, TaskExample};
use asmscribe_llm::assist::annotate;
use asmscribe_llm::client::{ENV_BACKEND_URL, ENV_EMBED_URL};
use asmscribe_llm::eval::{evaluate_split, DEFAULT_GENERATION_TOKENS};
use asmscribe_llm::qa::{qa_extract, DEFAULT_MAX_PAIRS};
use asmscribe_llm::{BackendConfig, InferenceClient, LlmError};
use asmscribe_service::{ServiceConfig, DEFAULT_PORT};
use clap::{Args, Parser, Subcommand, ValueEnum};
use futures::stream::{self, StreamExt};
use serde_json::json;

#[derive(Parser)]
#[command(name = "asmscribe", version, about = "x86 assembly datasets, evaluation and annotation over local LLMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Backend {
    /// Inference server base URL
    #[arg(long, env = ENV_BACKEND_URL)]
    backend: Option<String>,

    /// Model name as known to the server
    #[arg(long, env = "REX86_MODEL", default_value = "default")]
    model: String,

    /// Concurrent requests allowed against the server
    #[arg(long, default_value_t = asmscribe_llm::client::DEFAULT_MAX_IN_FLIGHT)]
    max_in_flight: usize,
}

impl Backend {
    fn client(&self) -> Result<InferenceClient> {
        let mut cfg = BackendConfig::from_env_or(self.backend.as_deref(), ENV_BACKEND_URL, &self.model)?;
        cfg.max_in_flight = self.max_in_flight.max(1);
        Ok(InferenceClient::new(cfg)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Alt {
    Greater,
    Less,
}

impl From<Alt> for Alternative {
    fn from(a: Alt) -> Self {
        match a {
            Alt::Greater => Alternative::Greater,
            Alt::Less => Alternative::Less,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AnnotateTask {
    Header,
    Inline,
    Intent,
    Complete,
}

impl From<AnnotateTask> for Task {
    fn from(t: AnnotateTask) -> Self {
        match t {
            AnnotateTask::Header => Task::HeaderComment,
            AnnotateTask::Inline => Task::InlineComments,
            AnnotateTask::Intent => Task::CodeIntent,
            AnnotateTask::Complete => Task::CompleteTheCode,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build task records from a directory of listings
    Curate {
        #[arg(long)]
        src: PathBuf,
        /// CSV with columns source_id,intent
        #[arg(long)]
        intents: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Q&A records (as written by qa-extract) to append
        #[arg(long)]
        qa: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Split a dataset 70/10/20 per task
    Split {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Extract question/answer pairs from manual sections
    QaExtract {
        /// Directory of plain-text sections
        #[arg(long)]
        sections: PathBuf,
        #[command(flatten)]
        backend: Backend,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_PAIRS)]
        max_pairs: usize,
    },
    /// Dataset counts, or a significance test
    #[command(args_conflicts_with_subcommands = true)]
    Stats {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[command(subcommand)]
        test: Option<StatsTest>,
    },
    /// Score a split for cross-entropy and cosine similarity
    Eval {
        #[arg(long)]
        split: PathBuf,
        #[command(flatten)]
        backend: Backend,
        #[arg(long, env = ENV_EMBED_URL)]
        embed_backend: Option<String>,
        #[arg(long, default_value = "default")]
        embed_model: String,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GENERATION_TOKENS)]
        max_tokens: u32,
    },
    /// Relative change between two evaluation reports
    Compare {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        tuned: PathBuf,
    },
    /// Write the fine-tuning hyperparameters as YAML
    TrainConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fold a LoRA adapter into base weights
    MergeLora {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rename: Option<PathBuf>,
    },
    /// Annotate a listing with the model
    Annotate {
        #[arg(long)]
        file: PathBuf,
        #[arg(long, value_enum)]
        task: AnnotateTask,
        #[command(flatten)]
        backend: Backend,
        /// Write the annotated listing back to the file
        #[arg(long)]
        apply: bool,
        /// Print the raw result as JSON
        #[arg(long)]
        json: bool,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Ask a question about x86 assembly
    Ask {
        #[arg(long)]
        question: String,
        #[command(flatten)]
        backend: Backend,
    },
    /// Run the HTTP service
    Serve {
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        #[command(flatten)]
        backend: Backend,
        #[arg(long, env = ENV_EMBED_URL)]
        embed_backend: Option<String>,
        #[arg(long, default_value = "default")]
        embed_model: String,
        #[arg(long)]
        data: PathBuf,
        /// Static UI bundle served at /
        #[arg(long)]
        ui: Option<PathBuf>,
        #[arg(long)]
        system_prompt: Option<String>,
    },
}

#[derive(Subcommand)]
enum StatsTest {
    /// One-tailed Mann-Whitney U test
    Mwu {
        /// Values or a file of values, comma separated
        #[arg(long)]
        x: String,
        #[arg(long)]
        y: String,
        #[arg(long, value_enum, default_value = "greater")]
        alternative: Alt,
    },
    /// One-tailed Fisher exact test on a 2x2 table
    Fisher {
        /// a,b,c,d with rows as groups and columns as (yes, no)
        #[arg(long)]
        table: String,
        #[arg(long, value_enum, default_value = "greater")]
        alternative: Alt,
    },
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_curate(src: &Path, intents: Option<&Path>, out: &Path, qa: &[PathBuf], seed: u64) -> Result<()> {
    let intents = match intents {
        Some(p) => read_intents(p)?,
        None => Default::default(),
    };
    let mut curated = curate(src, &intents, seed)?;
    for path in qa {
        let extra = read_dataset(path)?;
        if let Some(bad) = extra.iter().find(|e| e.task != Task::QA) {
            bail!("{}: expected only Q&A records, found {}", path.display(), bad.task);
        }
        curated.examples.extend(extra);
    }
    for (id, why) in &curated.skipped {
        eprintln!("skipped {id}: {why}");
    }
    write_dataset(out, &curated.examples)?;
    print_json(&count_tasks(&curated.examples))
}

fn cmd_split(input: &Path, seed: u64, prefix: &Path) -> Result<()> {
    let data = read_dataset(input)?;
    if data.is_empty() {
        bail!("{} holds no records", input.display());
    }
    let split = stratified_split(&data, seed);
    let paths = write_split(&split, prefix)?;
    for p in &paths {
        eprintln!("wrote {}", p.display());
    }
    print_json(&json!({ "seed": seed, "per_task": split_breakdown(&split) }))
}

async fn cmd_qa_extract(sections: &Path, backend: &Backend, out: &Path, max_pairs: usize) -> Result<()> {
    let client = backend.client()?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(sections)
        .with_context(|| format!("reading {}", sections.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();

    type Extracted = (String, Result<Vec<(String, String)>>);
    let results: Vec<Extracted> = stream::iter(files)
        .map(|path| {
            let client = client.clone();
            async move {
                let id = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                let res = match std::fs::read_to_string(&path) {
                    Ok(text) => qa_extract(&client, &text, max_pairs).await.map_err(anyhow::Error::from),
                    Err(e) => Err(e.into()),
                };
                (id, res)
            }
        })
        .buffered(backend.max_in_flight.max(1))
        .collect()
        .await;

    let mut examples: Vec<TaskExample> = Vec::new();
    let mut failed = 0;
    for (id, res) in results {
        match res {
            Ok(pairs) => {
                for (q, a) in pairs {
                    examples.push(make_qa(&q, &a, &id)?);
                }
            }
            Err(e) => {
                failed += 1;
                eprintln!("{id}: {e}");
                if let Some(LlmError::UnparseableResponse { raw }) = e.downcast_ref::<LlmError>() {
                    eprintln!("--- response ---\n{raw}\n---");
                }
            }
        }
    }
    write_dataset(out, &examples)?;
    print_json(&json!({ "pairs": examples.len(), "failed_sections": failed }))
}

fn cmd_stats(input: Option<&Path>, test: Option<&StatsTest>) -> Result<()> {
    match (input, test) {
        (Some(path), None) => print_json(&count_tasks(&read_dataset(path)?)),
        (None, Some(StatsTest::Mwu { x, y, alternative })) => {
            let r = mann_whitney_one_tailed(&values_arg(x)?, &values_arg(y)?, (*alternative).into())?;
            print_json(&json!({ "statistic": r.u, "p": r.p, "method": r.method }))
        }
        (None, Some(StatsTest::Fisher { table, alternative })) => {
            let t = parse_table(table)?;
            let p = fisher_exact_one_tailed(&t, (*alternative).into());
            print_json(&json!({ "statistic": t.a, "p": p }))
        }
        _ => bail!("give either --in <jsonl> or one of the mwu/fisher subcommands"),
    }
}

async fn cmd_eval(
    split: &Path,
    backend: &Backend,
    embed_url: Option<&str>,
    embed_model: &str,
    report: &Path,
    max_tokens: u32,
) -> Result<()> {
    let data = read_dataset(split)?;
    let gen = backend.client()?;
    let embed_cfg = BackendConfig::from_env_or(embed_url, ENV_EMBED_URL, embed_model)?;
    let embedder = InferenceClient::new(embed_cfg)?;
    let split_id = split.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let rep = evaluate_split(&gen, &embedder, &data, &split_id, max_tokens).await?;
    std::fs::write(report, serde_json::to_string_pretty(&rep)?)?;
    for f in &rep.failures {
        eprintln!("example {} ({}): {}", f.example_id, f.task, f.error);
    }
    print_json(&json!({
        "model_name": rep.model_name,
        "overall_ce": rep.overall_ce,
        "overall_cossim": rep.overall_cossim,
        "N": rep.n,
        "failed": rep.failed,
    }))
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_merge(
    base: &Path,
    adapter: &Path,
    alpha: Option<f64>,
    rank: Option<usize>,
    out: &Path,
    rename: Option<&Path>,
) -> Result<()> {
    let table = match rename {
        Some(p) => RenameTable::from_toml(&std::fs::read_to_string(p)?)?,
        None => RenameTable::default(),
    };
    let weights = load_weights(base).with_context(|| format!("loading {}", base.display()))?;
    let adapter = load_adapter(adapter, rank, alpha, &table).with_context(|| format!("loading {}", adapter.display()))?;
    let merged = merge(&weights, &adapter)?;
    save_weights(&merged, out)?;
    print_json(&json!({
        "merged_tensors": adapter.entries().len(),
        "total_tensors": merged.len(),
        "rank": adapter.rank(),
        "alpha": adapter.alpha(),
    }))
}

async fn cmd_annotate(
    file: &Path,
    task: Task,
    backend: &Backend,
    apply: bool,
    as_json: bool,
    temperature: Option<f64>,
) -> Result<()> {
    let code = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let mut options = AnnotationOptions::default();
    if let Some(t) = temperature {
        options.temperature = t;
    }
    let req = AnnotationRequest { task, code: code.clone(), options };
    let res = annotate(&backend.client()?, &req).await?;
    if res.dropped_keys > 0 {
        eprintln!("dropped {} comment(s) for lines outside the listing", res.dropped_keys);
    }
    let annotated = match task {
        Task::HeaderComment | Task::InlineComments => {
            let sample = parse_sample(&code, &file.to_string_lossy())?;
            let mut text = apply_annotations(&sample, &res)?;
            if !text.ends_with('\n') {
                text.push('\n');
            }
            Some(text)
        }
        _ => None,
    };
    if apply {
        let Some(text) = &annotated else {
            bail!("--apply only works with header or inline annotations");
        };
        std::fs::write(file, text)?;
    }
    if as_json {
        print_json(&res)
    } else {
        match annotated {
            Some(text) => print!("{text}"),
            None => println!("{}", res.text.unwrap_or_default()),
        }
        Ok(())
    }
}

#[tokio::main]
async fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Curate { src, intents, out, qa, seed } => cmd_curate(&src, intents.as_deref(), &out, &qa, seed),
        Command::Split { input, seed, out_prefix } => cmd_split(&input, seed, &out_prefix),
        Command::QaExtract { sections, backend, out, max_pairs } => {
            cmd_qa_extract(&sections, &backend, &out, max_pairs).await
        }
        Command::Stats { input, test } => cmd_stats(input.as_deref(), test.as_ref()),
        Command::Eval { split, backend, embed_backend, embed_model, report, max_tokens } => {
            cmd_eval(&split, &backend, embed_backend.as_deref(), &embed_model, &report, max_tokens).await
        }
        Command::Compare { base, tuned } => print_json(&compare_reports(&read_report(&base)?, &read_report(&tuned)?)?),
        Command::TrainConfig { out } => {
            let yaml = TrainingConfig::default().to_yaml();
            match out {
                Some(p) => std::fs::write(p, yaml)?,
                None => print!("{yaml}"),
            }
            Ok(())
        }
        Command::MergeLora { base, adapter, alpha, rank, out, rename } => {
            cmd_merge(&base, &adapter, alpha, rank, &out, rename.as_deref())
        }
        Command::Annotate { file, task, backend, apply, json, temperature } => {
            cmd_annotate(&file, task.into(), &backend, apply, json, temperature).await
        }
        Command::Ask { question, backend } => {
            let req = AnnotationRequest { task: Task::QA, code: question, options: AnnotationOptions::default() };
            let res = annotate(&backend.client()?, &req).await?;
            println!("{}", res.text.unwrap_or_default());
            Ok(())
        }
        Command::Serve { port, bind, backend, embed_backend, embed_model, data, ui, system_prompt } => {
            let gen = backend.client()?;
            let embed = match BackendConfig::from_env_or(embed_backend.as_deref(), ENV_EMBED_URL, &embed_model) {
                Ok(cfg) => Some(InferenceClient::new(cfg)?),
                Err(LlmError::InvalidConfig(_)) if embed_backend.is_none() => None,
                Err(e) => return Err(e.into()),
            };
            let mut cfg = ServiceConfig::new(data);
            cfg.port = port;
            cfg.bind = bind;
            cfg.ui_dir = ui;
            cfg.system_prompt = system_prompt;
            if !bind.is_loopback() {
                eprintln!("warning: listening on {bind} without authentication");
            }
            asmscribe_service::serve(cfg, gen, embed).await?;
            Ok(())
        }
    }
}
