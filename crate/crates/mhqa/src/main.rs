//! Command-line pipeline: generate synthetic data, inspect evidence graphs,
//! train and evaluate models, audit gradients, and run edge ablations.
//!
//! Each subcommand surfaces its randomness as one `--seed`. A `--config`
//! file supplies `key=value` defaults under the long flag names; explicit
//! flags win. `RUST_LOG` controls log verbosity and nothing else.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mhqa::data::{parse_dataset_file, write_dataset_file, Dataset, Split};
use mhqa::encoders::{Activation, EmbeddingTable, Vocab};
use mhqa::graph::{build_graph_filtered, distance_histogram, EdgeFilter, EdgeType, GraphConfig};
use mhqa::model::{check_loss_gradients, param_seed, Model, ModelConfig, ModelError, Variant};
use mhqa::synth::{generate, GenConfig};
use mhqa::train::{evaluate, load_checkpoint, train, TrainConfig, TrainReport};

#[derive(Parser)]
#[command(
    name = "mhqa",
    version,
    about = "Multi-hop question answering over evidence graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-hop dataset.
    GenData(GenDataArgs),
    /// Build evidence graphs and emit one JSON line per instance.
    BuildGraph(BuildGraphArgs),
    /// Edge counts and question-to-answer distance histogram.
    Stats(StatsArgs),
    /// Train a model and keep the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Finite-difference audit of every model variant's gradients.
    Gradcheck(GradcheckArgs),
    /// Train one model per edge-type subset and tabulate dev accuracy.
    Ablate(AblateArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default())
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(args) => run_gen_data(args),
        Command::BuildGraph(args) => run_build_graph(args),
        Command::Stats(args) => run_stats(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Gradcheck(args) => run_gradcheck(args),
        Command::Ablate(args) => run_ablate(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

// ---- config file plumbing ----

fn load_dataset(path: &Path, split: Split) -> Result<Dataset> {
    parse_dataset_file(path, split).with_context(|| format!("reading dataset {}", path.display()))
}

/// `key=value` lines keyed by long flag names; `#` starts a comment.
struct FileConfig(BTreeMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').with_context(|| {
                    format!("{}:{}: expected key=value", path.display(), lineno + 1)
                })?;
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(FileConfig(map))
    }
}

/// Flag if present, else the config-file entry, else the default.
fn pick<T>(flag: Option<T>, file: &FileConfig, key: &str, default: T) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    if let Some(value) = flag {
        return Ok(value);
    }
    match file.0.get(key) {
        Some(raw) => raw
            .parse()
            .map_err(|e| anyhow!("config key {key}={raw}: {e}")),
        None => Ok(default),
    }
}

fn pick_filter(flag: Option<String>, file: &FileConfig, key: &str) -> Result<EdgeFilter> {
    let spec = pick(flag, file, key, "all".to_string())?;
    EdgeFilter::parse(&spec).map_err(|e| anyhow!("--{key}: {e}"))
}

#[derive(Args)]
struct ConfigFileArg {
    /// key=value defaults for the flags below; explicit flags override.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GraphFlags {
    /// Same-passage distance beyond which repeated surfaces still connect
    /// (default 200).
    #[arg(long)]
    tau_long: Option<usize>,
    /// Window edge reach in tokens (default 20).
    #[arg(long)]
    tau_window: Option<usize>,
    /// Kept neighbors per mention (default 200).
    #[arg(long)]
    neighbor_cap: Option<usize>,
}

impl GraphFlags {
    fn resolve(&self, file: &FileConfig) -> Result<GraphConfig> {
        let d = GraphConfig::default();
        Ok(GraphConfig {
            tau_long: pick(self.tau_long, file, "tau-long", d.tau_long)?,
            tau_window: pick(self.tau_window, file, "tau-window", d.tau_window)?,
            neighbor_cap: pick(self.neighbor_cap, file, "neighbor-cap", d.neighbor_cap)?,
        })
    }
}

// ---- gen-data ----

#[derive(Args)]
struct GenDataArgs {
    /// Instances to generate (default 1000).
    #[arg(long)]
    n: Option<usize>,
    /// Facts composed between subject and answer (default 2).
    #[arg(long)]
    hops: Option<usize>,
    /// Answer candidates per instance (default 4).
    #[arg(long)]
    candidates: Option<usize>,
    /// Disconnected filler facts per instance (default 10).
    #[arg(long)]
    distractors: Option<usize>,
    /// Global entity pool size (default 60).
    #[arg(long)]
    entity_vocab: Option<usize>,
    /// Relation pool size (default 8).
    #[arg(long)]
    relation_vocab: Option<usize>,
    /// Minimum token gap between same-chain mentions in different passages
    /// (default 24).
    #[arg(long)]
    min_gap: Option<usize>,
    /// Chance a bridge's second occurrence is written as a pronoun
    /// (default 0.2).
    #[arg(long)]
    pronoun_fraction: Option<f64>,
    /// Chance an instance carries tail aliases next to the roots
    /// (default 0).
    #[arg(long)]
    alias_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset path (JSON lines).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigFileArg,
}

fn run_gen_data(args: GenDataArgs) -> Result<()> {
    let file = FileConfig::load(args.config.config.as_deref())?;
    let d = GenConfig::default();
    let cfg = GenConfig {
        seed: pick(args.seed, &file, "seed", 0)?,
        instances: pick(args.n, &file, "n", 1000)?,
        hops: pick(args.hops, &file, "hops", d.hops)?,
        candidates: pick(args.candidates, &file, "candidates", d.candidates)?,
        distractor_facts: pick(args.distractors, &file, "distractors", d.distractor_facts)?,
        entity_vocab: pick(args.entity_vocab, &file, "entity-vocab", d.entity_vocab)?,
        relation_vocab: pick(
            args.relation_vocab,
            &file,
            "relation-vocab",
            d.relation_vocab,
        )?,
        min_gap: pick(args.min_gap, &file, "min-gap", d.min_gap)?,
        pronoun_fraction: pick(
            args.pronoun_fraction,
            &file,
            "pronoun-fraction",
            d.pronoun_fraction,
        )?,
        alias_fraction: pick(
            args.alias_fraction,
            &file,
            "alias-fraction",
            d.alias_fraction,
        )?,
    };
    let dataset = generate(&cfg)?;
    write_dataset_file(&dataset, &args.out)
        .with_context(|| format!("writing dataset {}", args.out.display()))?;
    println!(
        "wrote {} instances to {}",
        dataset.instances.len(),
        args.out.display()
    );
    Ok(())
}

// ---- build-graph ----

#[derive(Args)]
struct BuildGraphArgs {
    /// Input dataset (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Edge types to build: all, none, or a comma list (default all).
    #[arg(long)]
    edges: Option<String>,
    #[command(flatten)]
    graph: GraphFlags,
    /// Where to write per-instance graph rows; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigFileArg,
}

#[derive(Serialize)]
struct GraphRow {
    index: usize,
    nodes: usize,
    counts: BTreeMap<String, usize>,
    edges: Vec<mhqa::graph::Edge>,
}

fn run_build_graph(args: BuildGraphArgs) -> Result<()> {
    let file = FileConfig::load(args.config.config.as_deref())?;
    let filter = pick_filter(args.edges, &file, "edges")?;
    let graph_cfg = args.graph.resolve(&file)?;
    let dataset = load_dataset(&args.data, Split::Test)?;

    let mut sink: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut totals: BTreeMap<String, usize> = BTreeMap::new();
    for (index, inst) in dataset.instances.iter().enumerate() {
        let g = build_graph_filtered(inst, &graph_cfg, filter);
        let counts: BTreeMap<String, usize> = g
            .edge_counts()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        for (k, v) in &counts {
            *totals.entry(k.clone()).or_insert(0) += v;
        }
        let row = GraphRow {
            index,
            nodes: g.node_count,
            counts,
            edges: g.edges,
        };
        writeln!(sink, "{}", serde_json::to_string(&row)?)?;
    }
    sink.flush()?;
    drop(sink);
    log::info!(
        "built {} graphs, edge totals {:?}",
        dataset.instances.len(),
        totals
    );
    if args.out.is_some() {
        let summary = totals
            .iter()
            .map(|(k, v)| format!("{k} {v}"))
            .collect::<Vec<_>>()
            .join(", ");
        println!(
            "built {} graphs ({})",
            dataset.instances.len(),
            if summary.is_empty() {
                "no edges".to_string()
            } else {
                summary
            }
        );
    }
    Ok(())
}

// ---- stats ----

#[derive(Args)]
struct StatsArgs {
    /// Input dataset (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Edge types to traverse: all, none, or a comma list (default all).
    #[arg(long)]
    edges: Option<String>,
    #[command(flatten)]
    graph: GraphFlags,
    #[command(flatten)]
    config: ConfigFileArg,
}

fn run_stats(args: StatsArgs) -> Result<()> {
    let file = FileConfig::load(args.config.config.as_deref())?;
    let filter = pick_filter(args.edges, &file, "edges")?;
    let graph_cfg = args.graph.resolve(&file)?;
    let dataset = load_dataset(&args.data, Split::Test)?;

    let mut totals: BTreeMap<EdgeType, usize> = BTreeMap::new();
    for inst in &dataset.instances {
        let g = build_graph_filtered(inst, &graph_cfg, filter);
        for (k, v) in g.edge_counts() {
            *totals.entry(k).or_insert(0) += v;
        }
    }
    let histogram = distance_histogram(&dataset, &graph_cfg, filter);

    println!("instances {}", dataset.instances.len());
    println!(
        "directed edges: same {}, coref {}, window {}",
        totals.get(&EdgeType::Same).unwrap_or(&0),
        totals.get(&EdgeType::Coref).unwrap_or(&0),
        totals.get(&EdgeType::Window).unwrap_or(&0),
    );
    println!("question-to-answer distances over edges \"{filter}\":");
    for (d, frac) in &histogram.buckets {
        println!("  {d}  {frac:.4}");
    }
    println!("  unreachable  {:.4}", histogram.unreachable);
    log::info!("stats {}", serde_json::to_string(&histogram)?);
    Ok(())
}

// ---- train ----

#[derive(Args)]
struct ModelFlags {
    /// Model variant: local, coref-lstm, coref-grn, mhqa-grn, mhqa-gcn
    /// (default mhqa-grn).
    #[arg(long)]
    model: Option<String>,
    /// Message passing rounds; graph variants only (default 3).
    #[arg(long)]
    steps: Option<usize>,
    /// Encoder and state width (default 300).
    #[arg(long)]
    hidden: Option<usize>,
    /// Token embedding width (default 300).
    #[arg(long)]
    emb_dim: Option<usize>,
    /// Candidate nonlinearity for gated cells: sigmoid or tanh
    /// (default sigmoid).
    #[arg(long)]
    candidate_update: Option<String>,
    /// Let every node also read its own previous state (default false).
    #[arg(long)]
    self_loop: Option<bool>,
    /// Give each message passing round its own weights (default false).
    #[arg(long)]
    per_step_params: Option<bool>,
    /// Update token embeddings during training (default false).
    #[arg(long)]
    trainable_embeddings: Option<bool>,
    /// Pretrained embeddings, text rows of `token v1 .. vd`.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

impl ModelFlags {
    fn resolve(
        &self,
        file: &FileConfig,
        edges: Option<String>,
        graph: &GraphFlags,
        seed: u64,
    ) -> Result<ModelConfig> {
        let flag: Option<Variant> = self
            .model
            .as_deref()
            .map(|name| name.parse().map_err(|e| anyhow!("--model: {e}")))
            .transpose()?;
        let variant = pick(flag, file, "model", Variant::MhqaGrn)?;
        let mut config = ModelConfig::new(variant);
        if self.steps.is_some() && variant.graph_kind().is_none() {
            bail!("--steps only applies to graph variants, not {variant}");
        }
        config.steps = pick(self.steps, file, "steps", config.steps)?;
        config.hidden = pick(self.hidden, file, "hidden", config.hidden)?;
        config.emb_dim = pick(self.emb_dim, file, "emb-dim", config.emb_dim)?;
        config.edge_filter = pick_filter(edges, file, "edges")?;
        config.graph = graph.resolve(file)?;
        config.candidate = match pick(
            self.candidate_update.clone(),
            file,
            "candidate-update",
            "sigmoid".into(),
        )?
        .as_str()
        {
            "sigmoid" => Activation::Sigmoid,
            "tanh" => Activation::Tanh,
            other => bail!("--candidate-update must be sigmoid or tanh, not {other}"),
        };
        config.self_loop = pick(self.self_loop, file, "self-loop", false)?;
        config.per_step_params = pick(self.per_step_params, file, "per-step-params", false)?;
        config.trainable_embeddings = pick(
            self.trainable_embeddings,
            file,
            "trainable-embeddings",
            false,
        )?;
        config.init_seed = seed;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainFlags {
    /// Adam learning rate (default 0.001).
    #[arg(long)]
    lr: Option<f64>,
    /// L2 penalty weight (default 1e-8).
    #[arg(long)]
    l2: Option<f64>,
    /// Dropout rate on embeddings and representations (default 0.1).
    #[arg(long)]
    dropout: Option<f64>,
    /// Instances per parameter update (default 16).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Maximum epochs (default 20).
    #[arg(long)]
    epochs: Option<usize>,
    /// Epochs without dev improvement before stopping (default 5).
    #[arg(long)]
    patience: Option<usize>,
    /// Stop as soon as dev accuracy reaches this level.
    #[arg(long)]
    stop_at_dev_acc: Option<f64>,
}

impl TrainFlags {
    fn resolve(&self, file: &FileConfig, seed: u64) -> Result<TrainConfig> {
        let mut config = TrainConfig::new(pick(self.epochs, file, "epochs", 20)?, seed);
        config.lr = pick(self.lr, file, "lr", config.lr)?;
        config.l2 = pick(self.l2, file, "l2", config.l2)?;
        config.dropout = pick(self.dropout, file, "dropout", config.dropout)?;
        config.batch_size = pick(self.batch_size, file, "batch-size", config.batch_size)?;
        config.patience = pick(self.patience, file, "patience", config.patience)?;
        config.stop_at_dev_acc = match self.stop_at_dev_acc {
            Some(acc) => Some(acc),
            None => file
                .0
                .get("stop-at-dev-acc")
                .map(|raw| raw.parse().map_err(|e| anyhow!("stop-at-dev-acc: {e}")))
                .transpose()?,
        };
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (JSON lines).
    #[arg(long)]
    train: PathBuf,
    /// Development dataset used for model selection.
    #[arg(long)]
    dev: PathBuf,
    /// Edge types visible to graph variants (default all).
    #[arg(long)]
    edges: Option<String>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    training: TrainFlags,
    #[command(flatten)]
    graph: GraphFlags,
    /// Where to save the best parameters.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigFileArg,
}

fn build_model(config: ModelConfig, dataset: &Dataset, embeddings: Option<&Path>) -> Result<Model> {
    let vocab = Vocab::from_dataset(dataset);
    let mut model = Model::new(config, vocab);
    if let Some(path) = embeddings {
        if model.config.trainable_embeddings {
            bail!("--embeddings requires frozen embeddings");
        }
        model.embeddings = EmbeddingTable::from_text_file(
            path,
            model.embeddings.vocab.clone(),
            model.config.emb_dim,
            param_seed(model.config.init_seed, "emb.table"),
        )?;
    }
    Ok(model)
}

fn print_report(report: &TrainReport) {
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        println!(
            "epoch {:>2}  loss {:.6}  dev {:.4}",
            epoch, loss, report.dev_accuracies[epoch]
        );
    }
    println!(
        "best epoch {}  dev accuracy {:.4}",
        report.best_epoch, report.best_dev_accuracy
    );
    println!(
        "used {} instances per epoch, skipped {}; wall {:.1}s",
        report.used_per_epoch, report.skipped_per_epoch, report.wall_seconds
    );
    if let Some(path) = &report.best_checkpoint {
        println!("checkpoint written to {}", path.display());
    }
}

fn run_train(args: TrainArgs) -> Result<()> {
    let file = FileConfig::load(args.config.config.as_deref())?;
    let seed = pick(args.seed, &file, "seed", 0)?;
    let train_set = load_dataset(&args.train, Split::Train)?;
    let dev_set = load_dataset(&args.dev, Split::Dev)?;

    let model_cfg = args
        .model
        .resolve(&file, args.edges.clone(), &args.graph, seed)?;
    let train_cfg = args.training.resolve(&file, seed)?;
    let mut model = build_model(model_cfg, &train_set, args.model.embeddings.as_deref())?;

    let report = train(
        &mut model,
        &train_set,
        &dev_set,
        &train_cfg,
        args.checkpoint.as_deref(),
    )?;
    print_report(&report);
    log::info!("train {}", serde_json::to_string(&report)?);
    Ok(())
}

// ---- eval ----

#[derive(Args)]
struct EvalArgs {
    /// Dataset to score (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Optional per-instance prediction rows (JSON lines).
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Serialize)]
struct PredictionRow {
    index: usize,
    prediction: usize,
    answer: usize,
    correct: bool,
    probabilities: Vec<f64>,
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("reading checkpoint {}", args.checkpoint.display()))?;
    let dataset = load_dataset(&args.data, Split::Test)?;
    let prepared: Vec<_> = dataset.instances.iter().map(|i| model.prepare(i)).collect();
    let report = evaluate(&model, &prepared)?;
    println!(
        "accuracy {:.4} ({}/{}), unscorable {}",
        report.accuracy, report.correct, report.total, report.unscorable
    );
    log::info!("eval {}", serde_json::to_string(&report)?);

    if let Some(path) = &args.predictions {
        let mut sink = BufWriter::new(File::create(path)?);
        for (index, inst) in dataset.instances.iter().enumerate() {
            let probabilities = match model.predict(inst) {
                Ok(p) => p,
                Err(ModelError::Match(_)) => vec![0.0; inst.candidates.len()],
                Err(e) => return Err(e.into()),
            };
            let prediction = mhqa::train::argmax_lowest(&probabilities);
            let row = PredictionRow {
                index,
                prediction,
                answer: inst.answer,
                correct: prediction == inst.answer,
                probabilities,
            };
            writeln!(sink, "{}", serde_json::to_string(&row)?)?;
        }
        sink.flush()?;
        println!("predictions written to {}", path.display());
    }
    Ok(())
}

// ---- gradcheck ----

#[derive(Args)]
struct GradcheckArgs {
    /// Toy instances audited per variant (default 5).
    #[arg(long)]
    instances: Option<usize>,
    /// Encoder width for the audit models (default 4).
    #[arg(long)]
    hidden: Option<usize>,
    /// Embedding width for the audit models (default 3).
    #[arg(long)]
    emb_dim: Option<usize>,
    /// Message passing rounds for graph variants (default 3).
    #[arg(long)]
    steps: Option<usize>,
    /// Finite-difference step (default 1e-3).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Maximum admissible relative error (default 1e-4).
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigFileArg,
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    let file = FileConfig::load(args.config.config.as_deref())?;
    let seed = pick(args.seed, &file, "seed", 0)?;
    let instances = pick(args.instances, &file, "instances", 5)?;
    let hidden = pick(args.hidden, &file, "hidden", 4)?;
    let emb_dim = pick(args.emb_dim, &file, "emb-dim", 3)?;
    let steps = pick(args.steps, &file, "steps", 3)?;
    let epsilon = pick(args.epsilon, &file, "epsilon", 1e-3)?;
    let tolerance = pick(args.tolerance, &file, "tolerance", 1e-4)?;

    // Small instances with every structural feature present: pronoun
    // bridges, alias sentences, and a distractor.
    let gen = GenConfig {
        seed,
        instances,
        hops: 2,
        candidates: 2,
        distractor_facts: 1,
        entity_vocab: 12,
        relation_vocab: 2,
        min_gap: 2,
        pronoun_fraction: 0.5,
        alias_fraction: 0.5,
    };
    let dataset = generate(&gen)?;
    let vocab = Vocab::from_dataset(&dataset);

    let mut all_pass = true;
    for variant in Variant::ALL {
        let mut config = ModelConfig::new(variant);
        config.hidden = hidden;
        config.emb_dim = emb_dim;
        config.steps = steps;
        config.init_seed = seed;
        let mut model = Model::new(config, vocab.clone());
        let report = check_loss_gradients(&mut model, &dataset.instances, epsilon)
            .map_err(|e| anyhow!("{variant}: {e}"))?;
        let pass = report.max_rel_err < tolerance;
        all_pass &= pass;
        println!(
            "{:<11} coords {:>6}  max rel err {:.3e}  {}",
            variant.to_string(),
            report.coords,
            report.max_rel_err,
            if pass { "pass" } else { "FAIL" }
        );
        if let (false, Some((name, coord, analytic, numeric))) = (pass, &report.worst) {
            println!("  worst: {name}[{coord}] analytic {analytic:.9e} numeric {numeric:.9e}");
        }
    }
    if !all_pass {
        bail!("gradient audit exceeded tolerance {tolerance}");
    }
    println!("all gradient checks passed (tolerance {tolerance})");
    Ok(())
}

// ---- ablate ----

#[derive(Args)]
struct AblateArgs {
    /// Training dataset (JSON lines).
    #[arg(long)]
    train: PathBuf,
    /// Development dataset used for model selection.
    #[arg(long)]
    dev: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    training: TrainFlags,
    #[command(flatten)]
    graph: GraphFlags,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigFileArg,
}

/// The edge subsets tabulated by `ablate`, in output order.
fn ablation_rows() -> Vec<(&'static str, EdgeFilter)> {
    vec![
        ("all", EdgeFilter::all()),
        ("wo-same", EdgeFilter::without(EdgeType::Same)),
        ("wo-coref", EdgeFilter::without(EdgeType::Coref)),
        ("wo-window", EdgeFilter::without(EdgeType::Window)),
        ("only-same", EdgeFilter::only(EdgeType::Same)),
        ("only-coref", EdgeFilter::only(EdgeType::Coref)),
        ("only-window", EdgeFilter::only(EdgeType::Window)),
    ]
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    let file = FileConfig::load(args.config.config.as_deref())?;
    let seed = pick(args.seed, &file, "seed", 0)?;
    let train_set = load_dataset(&args.train, Split::Train)?;
    let dev_set = load_dataset(&args.dev, Split::Dev)?;

    let base_cfg = args.model.resolve(&file, None, &args.graph, seed)?;
    if base_cfg.variant.graph_kind().is_none() {
        bail!(
            "edge ablations need a graph variant, not {}",
            base_cfg.variant
        );
    }
    let train_cfg = args.training.resolve(&file, seed)?;

    println!("{:<12} {:>8}  best-epoch", "edges", "dev-acc");
    for (label, filter) in ablation_rows() {
        let mut config = base_cfg.clone();
        config.edge_filter = filter;
        let mut model = build_model(config, &train_set, args.model.embeddings.as_deref())?;
        let report = train(&mut model, &train_set, &dev_set, &train_cfg, None)?;
        println!(
            "{:<12} {:>8.4}  {}",
            label, report.best_dev_accuracy, report.best_epoch
        );
        log::info!("ablate {} accuracy {:.4}", label, report.best_dev_accuracy);
    }
    Ok(())
}
