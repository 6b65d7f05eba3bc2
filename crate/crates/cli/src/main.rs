mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use kgqa::agent::Termination;
use kgqa::dataset::{load_dataset, read_jsonl, write_jsonl, BenchmarkSample};
use kgqa::eval::{config_digest, content_digest, merge_table, run_benchmark, HitsMode, RunReport, RunSpec};
use kgqa::ikg::{build_ikg_levels, compute_stats, subsample, DropList};
use kgqa::kg::KnowledgeGraph;
use kgqa::llm::{Gateway, HttpBackend, HttpConfig, LlmBackend, PromptSet, Script, ScriptedBackend};

use config::{BackendConfig, BuildConfig, RunConfig};

/// Exit status when a replayed run asks for a prompt the script lacks.
const EXIT_SCRIPT_MISS: u8 = 3;

#[derive(Parser)]
#[command(name = "kgqa", version, about = "Question answering over incomplete knowledge graphs")]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build incomplete-graph drop lists for one or more drop probabilities.
    BuildIkg(BuildArgs),
    /// Answer a dataset with the agent and score it.
    Run(Box<RunArgs>),
    /// Merge run reports into one Hits@1 table.
    Report(ReportArgs),
    /// Recompute statistics for an existing drop list.
    Stats(StatsArgs),
}

#[derive(Args)]
struct BuildArgs {
    /// TOML file with the same keys as the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Comma-separated drop probabilities.
    #[arg(long, value_delimiter = ',')]
    drop_prob: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Build from a seeded subset of this many samples.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Scripted,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    AnyMatch,
    Strict,
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with the same keys as the flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Drop list from build-ikg; without one the complete graph is used.
    #[arg(long)]
    droplist: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Directory of `<template>.txt` files overriding the bundled prompts.
    #[arg(long)]
    prompts_dir: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    context_budget: Option<usize>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Replay script (JSONL); implies the scripted backend.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    rpm_limit: Option<u32>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    max_rollbacks: Option<usize>,
    /// Relations kept per searched entity.
    #[arg(long)]
    top_n: Option<usize>,
    /// Observed triples handed to triple generation.
    #[arg(long)]
    choose_k: Option<usize>,
    /// Generation draws per Generate action.
    #[arg(long)]
    generate_n: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u32>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Score against answer labels only.
    #[arg(long)]
    no_aliases: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json files written by `run`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Also write the table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    droplist: PathBuf,
    /// Print JSON instead of the table.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
    let outcome = match cli.command {
        Command::BuildIkg(a) => build_ikg(a).map(|()| ExitCode::SUCCESS),
        Command::Run(a) => run(*a),
        Command::Report(a) => report(a).map(|()| ExitCode::SUCCESS),
        Command::Stats(a) => stats(a).map(|()| ExitCode::SUCCESS),
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}

fn load_graph(path: &Path) -> Result<KnowledgeGraph> {
    KnowledgeGraph::load(path).with_context(|| format!("loading graph {}", path.display()))
}

fn load_samples(path: &Path, limit: Option<usize>, seed: u64) -> Result<Vec<BenchmarkSample>> {
    let ds = load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    Ok(match limit {
        Some(n) => subsample(&ds, n, seed),
        None => ds,
    })
}

fn level_tag(p: f64) -> String {
    format!("p{}", p * 100.0)
}

fn build_ikg(a: BuildArgs) -> Result<()> {
    let mut c = BuildConfig::load(a.config.as_deref())?;
    c.graph = a.graph.or(c.graph);
    c.dataset = a.dataset.or(c.dataset);
    if let Some(p) = a.drop_prob {
        c.drop_probs = p;
    }
    c.seed = a.seed.unwrap_or(c.seed);
    c.limit = a.limit.or(c.limit);
    if let Some(d) = a.out_dir {
        c.out_dir = d;
    }
    c.validate()?;
    let graph_path = c.graph.clone().context("no graph given")?;
    let dataset_path = c.dataset.clone().context("no dataset given")?;
    let g = load_graph(&graph_path)?;
    let ds = load_samples(&dataset_path, c.limit, c.seed)?;
    let digest = config_digest(&serde_json::json!({
        "graph": content_digest(&std::fs::read(&graph_path)?),
        "dataset": content_digest(&std::fs::read(&dataset_path)?),
        "seed": c.seed,
        "limit": c.limit,
    }));
    std::fs::create_dir_all(&c.out_dir).with_context(|| format!("creating {}", c.out_dir.display()))?;
    for (mut lists, stats) in build_ikg_levels(&ds, &g, &c.drop_probs, c.seed) {
        for d in &mut lists {
            d.config_digest = Some(digest.clone());
        }
        let tag = level_tag(stats.drop_prob);
        write_jsonl(c.out_dir.join(format!("droplist-{tag}.jsonl")), &lists)?;
        std::fs::write(
            c.out_dir.join(format!("stats-{tag}.json")),
            serde_json::to_string_pretty(&stats)? + "\n",
        )?;
        std::fs::write(c.out_dir.join(format!("stats-{tag}.txt")), stats.to_string())?;
        println!("{stats}");
    }
    Ok(())
}

fn resolve_run_config(a: RunArgs) -> Result<RunConfig> {
    let mut c = RunConfig::load(a.config.as_deref())?;
    c.graph = a.graph.or(c.graph);
    c.dataset = a.dataset.or(c.dataset);
    c.droplist = a.droplist.or(c.droplist);
    c.prompts_dir = a.prompts_dir.or(c.prompts_dir);
    if let Some(v) = a.out_dir {
        c.out_dir = v;
    }
    if let Some(v) = a.label {
        c.label = v;
    }
    c.seed = a.seed.unwrap_or(c.seed);
    c.limit = a.limit.or(c.limit);
    c.parallelism = a.parallelism.unwrap_or(c.parallelism);
    c.context_budget = a.context_budget.unwrap_or(c.context_budget);

    let kind = match (a.backend, &a.script) {
        (Some(k), _) => Some(k),
        (None, Some(_)) => Some(BackendKind::Scripted),
        (None, None) => None,
    };
    match kind {
        Some(BackendKind::Scripted) if !matches!(c.backend, BackendConfig::Scripted { .. }) => {
            c.backend = BackendConfig::Scripted { script: None };
        }
        Some(BackendKind::Http) if !matches!(c.backend, BackendConfig::Http(_)) => {
            c.backend = BackendConfig::Http(HttpConfig::default());
        }
        _ => {}
    }
    match &mut c.backend {
        BackendConfig::Scripted { script } => {
            if a.script.is_some() {
                *script = a.script;
            }
        }
        BackendConfig::Http(h) => {
            if a.script.is_some() {
                bail!("--script only applies to the scripted backend");
            }
            if let Some(v) = a.endpoint {
                h.endpoint = v;
            }
            if let Some(v) = a.model {
                h.model = v;
            }
            if let Some(v) = a.api_key_env {
                h.api_key_env = v;
            }
            if let Some(v) = a.rpm_limit {
                h.rpm_limit = v;
            }
            h.parallelism = c.parallelism;
        }
    }

    let ag = &mut c.agent;
    ag.max_steps = a.max_steps.unwrap_or(ag.max_steps);
    ag.max_rollbacks = a.max_rollbacks.unwrap_or(ag.max_rollbacks);
    ag.relations_top_n = a.top_n.unwrap_or(ag.relations_top_n);
    ag.choose_k = a.choose_k.unwrap_or(ag.choose_k);
    ag.generate_n = a.generate_n.unwrap_or(ag.generate_n);
    ag.decoding.temperature = a.temperature.unwrap_or(ag.decoding.temperature);
    ag.decoding.max_tokens = a.max_tokens.unwrap_or(ag.decoding.max_tokens);
    if let Some(m) = a.mode {
        c.eval.mode = match m {
            ModeArg::AnyMatch => HitsMode::AnyMatch,
            ModeArg::Strict => HitsMode::Strict,
        };
    }
    if a.no_aliases {
        c.eval.use_aliases = false;
    }
    c.validate()?;
    Ok(c)
}

fn make_backend(c: &RunConfig) -> Result<Arc<dyn LlmBackend>> {
    Ok(match &c.backend {
        BackendConfig::Scripted { script } => {
            let path = script.as_deref().context("scripted backend without a script")?;
            let script = Script::load(path).with_context(|| format!("loading script {}", path.display()))?;
            Arc::new(ScriptedBackend::new(&script)?)
        }
        BackendConfig::Http(h) => Arc::new(HttpBackend::from_env(h.clone())?),
    })
}

fn run(a: RunArgs) -> Result<ExitCode> {
    let c = resolve_run_config(a)?;
    // Backend first: a missing key or bad script fails before the graph loads.
    let backend = make_backend(&c)?;
    let prompts = match &c.prompts_dir {
        Some(dir) => PromptSet::with_overrides(dir)?,
        None => PromptSet::default(),
    };
    let digest = c.digest(&prompts)?;
    let gateway = Gateway::new(prompts, backend).with_context_budget(c.context_budget);
    let g = load_graph(c.graph()?)?;
    let ds = load_samples(c.dataset()?, c.limit, c.seed)?;
    let droplists: Option<Vec<DropList>> = match &c.droplist {
        Some(p) => {
            let lists: Vec<DropList> = read_jsonl(p).with_context(|| format!("loading drop list {}", p.display()))?;
            let ids: std::collections::BTreeSet<&str> = ds.iter().map(|s| s.id.as_str()).collect();
            Some(lists.into_iter().filter(|d| ids.contains(d.sample_id.as_str())).collect())
        }
        None => None,
    };
    let spec = RunSpec {
        label: &c.label,
        seed: c.seed,
        config_digest: &digest,
        agent: &c.agent,
        eval: c.eval,
        parallelism: c.parallelism,
    };
    let (report, traces) = run_benchmark(&ds, &g, droplists.as_deref(), &gateway, &spec)?;
    std::fs::create_dir_all(&c.out_dir).with_context(|| format!("creating {}", c.out_dir.display()))?;
    write_jsonl(c.out_dir.join("traces.jsonl"), &traces)?;
    std::fs::write(c.out_dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let table = report.to_table();
    std::fs::write(c.out_dir.join("report.txt"), &table)?;
    print!("{table}");

    let mut misses = 0;
    for t in &traces {
        if let Termination::Error { error, message } = &t.result.termination {
            if error == "script_miss" {
                misses += 1;
                eprintln!("error: question {}: {message}", t.id);
            } else {
                eprintln!("warning: question {}: {error}: {message}", t.id);
            }
        }
    }
    if misses > 0 {
        eprintln!("error: {misses} question(s) hit prompts missing from the script");
        return Ok(ExitCode::from(EXIT_SCRIPT_MISS));
    }
    Ok(ExitCode::SUCCESS)
}

fn report(a: ReportArgs) -> Result<()> {
    let mut reports = Vec::new();
    for p in &a.reports {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let r: RunReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        if !r.is_consistent() {
            bail!("{}: aggregates do not match the per-sample records", p.display());
        }
        reports.push(r);
    }
    let table = merge_table(&reports)?;
    if let Some(out) = &a.out {
        std::fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{table}");
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let g = load_graph(&a.graph)?;
    let ds = load_samples(&a.dataset, None, 0)?;
    let lists: Vec<DropList> = read_jsonl(&a.droplist).with_context(|| format!("loading {}", a.droplist.display()))?;
    let stats = compute_stats(&lists, &ds, &g);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&stats)?);
    } else {
        println!("{stats}");
    }
    Ok(())
}
