//! Command-line front end.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use owsgg_core::metrics::MatchConfig;
use owsgg_core::taxonomy::{self, SplitIndex};
use owsgg_core::{PipelineConfig, VocabularyProfile};
use serde_json::Value;

use crate::backends::{CachedBackend, HttpConfig, HttpProvider, Stage, StageCache};
use crate::io;
use crate::pipeline::{Pipeline, StageSelection, StageStore, SPLITS_FILE};
use crate::report::{build_report, write_report};

#[derive(Debug, Parser)]
#[command(name = "owsgg", version, about = "Open-world scene graph generation pipeline and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one stage (entities, map, detect, refine, relate, eval) or `all`.
    Run(RunArgs),
    /// Check a manifest against a vocabulary and print diagnostics.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Rebuild report.json and report.csv from stored eval records.
    Report {
        #[arg(long)]
        cache: PathBuf,
        /// Split manifest; defaults to `<cache>/splits.json`.
        #[arg(long)]
        splits: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
    },
    /// Classify ground-truth triplets into open-world splits.
    Splits {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// Novel object labels, one per line; the rest count as seen in training.
    #[arg(long)]
    pub novel_objects: Option<PathBuf>,
    /// Novel predicates, one per line.
    #[arg(long)]
    pub novel_relations: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub stage: String,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub cache: PathBuf,
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long, value_enum, default_value = "replay")]
    pub backend: BackendArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Predcls,
    Sgdet,
}

impl From<TaskArg> for owsgg_core::model::Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Predcls => owsgg_core::model::Task::Predcls,
            TaskArg::Sgdet => owsgg_core::model::Task::Sgdet,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Live,
    Replay,
}

/// Exit codes: 0 success, 1 some image failed, 2 usage or input error.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            2
        }
    }
}

fn load_config(path: Option<&Path>, task: Option<TaskArg>) -> Result<PipelineConfig, String> {
    let mut cfg = match path {
        Some(p) => io::load_config(p).map_err(|e| e.to_string())?,
        None => PipelineConfig::default(),
    };
    if let Some(t) = task {
        cfg.task = t.into();
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn load_vocab(args: &VocabArgs) -> Result<VocabularyProfile, String> {
    let vocab = io::load_vocab(&args.vocab).map_err(|e| e.to_string())?;
    if args.novel_objects.is_none() && args.novel_relations.is_none() {
        return Ok(vocab);
    }
    let read = |p: &Option<PathBuf>| p.as_deref().map(io::load_label_list).transpose().map_err(|e| e.to_string());
    let objects = read(&args.novel_objects)?;
    let relations = read(&args.novel_relations)?;
    io::apply_novelty(&vocab, objects.as_deref(), relations.as_deref())
}

fn dispatch(cli: Cli) -> Result<i32, String> {
    match cli.command {
        Command::Run(args) => run_stage(args),
        Command::Validate { manifest, vocab } => {
            let vocab = io::load_vocab(&vocab).map_err(|e| e.to_string())?;
            let diagnostics = io::validate_manifest(&manifest, &vocab).map_err(|e| e.to_string())?;
            for d in &diagnostics {
                println!("{}", serde_json::to_string(d).expect("diagnostic serializes"));
            }
            eprintln!("{} diagnostic(s)", diagnostics.len());
            Ok(0)
        }
        Command::Report { cache, splits, config, task } => {
            let cfg = load_config(config.as_deref(), task)?;
            let splits_path = splits.unwrap_or_else(|| cache.join(SPLITS_FILE));
            let splits = read_splits(&splits_path)?;
            let records = StageStore::new(&cache).load_ordered(Stage::Eval).map_err(|e| e.to_string())?;
            let refs: Vec<_> = records.iter().collect();
            let match_cfg = MatchConfig::new(cfg.task, &cfg.eval).map_err(|e| format!("{e:?}"))?;
            let report = build_report(&refs, &splits, &match_cfg, refs.len()).map_err(|e| e.to_string())?;
            write_report(&cache, &report).map_err(|e| e.to_string())?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(0)
        }
        Command::Splits { manifest, vocab, out } => {
            let vocab = load_vocab(&vocab)?;
            let graphs = io::load_manifest(&manifest).map_err(|e| e.to_string())?;
            let index = taxonomy::partition(&graphs, &vocab).map_err(|e| e.to_string())?;
            io::write_json(&out, &serde_json::json!({ "split": index.manifest() })).map_err(|e| e.to_string())?;
            for (label, n) in index.sizes() {
                eprintln!("{label}: {n}");
            }
            Ok(0)
        }
    }
}

/// Read a `{"split": {"CS": [...], ...}}` file.
pub fn read_splits(path: &Path) -> Result<SplitIndex, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let obj = doc
        .get("split")
        .and_then(Value::as_object)
        .ok_or_else(|| format!("{}: missing \"split\" object", path.display()))?;
    let mut entries = Vec::with_capacity(obj.len());
    for (name, keys) in obj {
        let keys: Vec<String> =
            serde_json::from_value(keys.clone()).map_err(|e| format!("{}: split {name}: {e}", path.display()))?;
        entries.push((name.clone(), keys));
    }
    SplitIndex::from_manifest(entries.iter().map(|(n, k)| (n.as_str(), k.as_slice()))).map_err(|e| e.to_string())
}

fn run_stage(args: RunArgs) -> Result<i32, String> {
    let selection = StageSelection::parse(&args.stage).ok_or_else(|| {
        format!("unknown stage '{}'; expected entities, map, detect, refine, relate, eval or all", args.stage)
    })?;
    let cfg = load_config(args.config.as_deref(), args.task)?;
    let vocab = load_vocab(&args.vocab)?;
    let graphs = io::load_manifest(&args.manifest).map_err(|e| e.to_string())?;
    let cache = Arc::new(StageCache::open(&args.cache).map_err(|e| e.to_string())?);
    let backend = match args.backend {
        BackendArg::Replay => CachedBackend::replay(cache, cfg.models.clone()),
        BackendArg::Live => {
            let root = args.manifest.parent().unwrap_or(Path::new("."));
            let http = HttpConfig::from_env(root).map_err(|e| e.to_string())?;
            let provider = HttpProvider::new(http, cfg.models.clone()).map_err(|e| e.to_string())?;
            CachedBackend::live(Arc::new(provider), cache, cfg.models.clone())
        }
    };
    let pipeline = Pipeline::new(cfg, vocab, graphs, Arc::new(backend), &args.cache).map_err(|e| e.to_string())?;
    let summary = pipeline.run(selection).map_err(|e| e.to_string())?;
    for s in &summary.stages {
        eprintln!(
            "{}: ok {} empty {} skipped {} cached {} failed {}",
            s.stage.map(|s| s.as_str()).unwrap_or("?"),
            s.ok,
            s.empty,
            s.skipped,
            s.cached,
            s.failed
        );
    }
    for e in &summary.errors {
        println!("{}", serde_json::to_string(e).expect("error record serializes"));
    }
    Ok(if summary.success() { 0 } else { 1 })
}
