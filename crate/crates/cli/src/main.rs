mod config;
mod manifest;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use contrastive_embed::datasets::{
    self, build_rerank_task, build_retrieval_task, generate_synthetic_corpus, RerankBuildOptions, SyntheticConfig,
};
use contrastive_embed::evaluator::{
    self, accuracy_at_k, evaluate_rerank, AnyReport, PooledEncoder, SweepData, SweepGrid, SweepSettings,
    DEFAULT_K_VALUES,
};
use contrastive_embed::trainer::{self, Regime, TrainConfig, TrainingData, TripletExample};
use contrastive_embed::{LossVariant, ModelParams, Vocabulary};
use serde::Serialize;

use config::{pick, FileConfig};
use manifest::Recorder;

/// Bad flags or config values; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(
    name = "cembed",
    version,
    about = "Contrastive text embeddings: build benchmarks, train, evaluate, sweep"
)]
struct Cli {
    /// TOML file of config keys; environment variables and flags override it.
    #[arg(long, global = true, env = "CEMBED_CONFIG")]
    config: Option<PathBuf>,
    /// The only source of randomness for every command.
    #[arg(long, global = true, env = "CEMBED_SEED")]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "CEMBED_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an evaluation task from annotated pairs.
    #[command(subcommand)]
    BuildBench(BenchKind),
    /// Train an encoder and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a task file.
    #[command(subcommand)]
    Eval(EvalKind),
    /// Train and evaluate every temperature, regime and variant combination.
    Sweep(SweepArgs),
    /// Write a seeded synthetic corpus as pair, triplet, retrieval and rerank files.
    Synth(SynthArgs),
    /// Print any JSON report as a table.
    Report { path: PathBuf },
}

#[derive(Subcommand)]
enum BenchKind {
    /// NLI pairs to rerank instances.
    Rerank {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "CEMBED_MIN_DUPLICATES")]
        min_duplicates: Option<usize>,
        #[arg(long, env = "CEMBED_MIN_REFS")]
        min_refs: Option<usize>,
    },
    /// Question/document pairs to a retrieval corpus.
    Retrieval {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CommonTrainArgs {
    #[arg(long, env = "CEMBED_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long = "lr", env = "CEMBED_LEARNING_RATE")]
    learning_rate: Option<f64>,
    #[arg(long, env = "CEMBED_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "CEMBED_MAX_LEN")]
    max_len: Option<usize>,
    #[arg(long, env = "CEMBED_MIN_LEN")]
    min_len: Option<usize>,
    #[arg(long, env = "CEMBED_NEGATIVES_PER_GROUP")]
    negatives_per_group: Option<usize>,
    #[arg(long, env = "CEMBED_DIM")]
    dim: Option<usize>,
    #[arg(long, env = "CEMBED_MIN_FREQ")]
    min_freq: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Pair file for in_batch, triplet file for hard_negative.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; the loss history goes to `<out>.history.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "CEMBED_REGIME")]
    regime: Option<Regime>,
    #[arg(long, env = "CEMBED_VARIANT")]
    variant: Option<LossVariant>,
    #[arg(long, env = "CEMBED_TEMPERATURE")]
    tau: Option<f64>,
    #[command(flatten)]
    common: CommonTrainArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    task: PathBuf,
    /// JSON report path; a text table is written alongside with a `.txt` extension.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "CEMBED_MAX_LEN")]
    max_len: Option<usize>,
    /// Expected checkpoint dimension.
    #[arg(long, env = "CEMBED_DIM")]
    dim: Option<usize>,
}

#[derive(Subcommand)]
enum EvalKind {
    Retrieval {
        #[command(flatten)]
        args: EvalArgs,
        #[arg(long, env = "CEMBED_K", value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    Rerank {
        #[command(flatten)]
        args: EvalArgs,
    },
}

#[derive(Args)]
struct SweepArgs {
    /// Pair or triplet file; pairs get their negatives sampled.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    retrieval: PathBuf,
    #[arg(long)]
    rerank: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, env = "CEMBED_TEMPERATURES", value_delimiter = ',')]
    tau: Option<Vec<f64>>,
    #[arg(long, env = "CEMBED_REGIMES", value_delimiter = ',')]
    regimes: Option<Vec<Regime>>,
    #[arg(long, env = "CEMBED_VARIANTS", value_delimiter = ',')]
    variants: Option<Vec<LossVariant>>,
    #[arg(long, env = "CEMBED_K", value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[command(flatten)]
    common: CommonTrainArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, env = "CEMBED_CLUSTERS")]
    clusters: Option<usize>,
    #[arg(long, env = "CEMBED_DOCS_PER_CLUSTER")]
    docs_per_cluster: Option<usize>,
    #[arg(long, env = "CEMBED_QUERIES_PER_CLUSTER")]
    queries_per_cluster: Option<usize>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

struct Ctx {
    file: FileConfig,
    seed: Option<u64>,
    jobs: Option<usize>,
}

impl Ctx {
    fn seed(&self) -> u64 {
        pick(self.seed, self.file.seed, TrainConfig::default().seed)
    }

    fn recorder(&self, command: &str) -> Recorder {
        Recorder::start(command, Some(self.seed()), self.jobs)
    }

    fn train_config(
        &self,
        c: &CommonTrainArgs,
        regime: Option<Regime>,
        variant: Option<LossVariant>,
        tau: Option<f64>,
    ) -> TrainConfig {
        let d = TrainConfig::default();
        let f = &self.file;
        TrainConfig {
            batch_size: pick(c.batch_size, f.batch_size, d.batch_size),
            learning_rate: pick(c.learning_rate, f.learning_rate, d.learning_rate),
            epochs: pick(c.epochs, f.epochs, d.epochs),
            temperature: pick(tau, f.temperature, d.temperature),
            variant: pick(variant, f.variant, d.variant),
            regime: pick(regime, f.regime, d.regime),
            seed: self.seed(),
            max_len: pick(c.max_len, f.max_len, d.max_len),
            min_len: pick(c.min_len, f.min_len, d.min_len),
            negatives_per_group: pick(c.negatives_per_group, f.negatives_per_group, d.negatives_per_group),
        }
    }

    fn model_shape(&self, c: &CommonTrainArgs) -> ModelShape {
        ModelShape {
            dim: pick(c.dim, self.file.dim, contrastive_embed::encoder::DEFAULT_DIM),
            min_freq: pick(c.min_freq, self.file.min_freq, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
struct ModelShape {
    dim: usize,
    min_freq: usize,
}

fn usage(e: contrastive_embed::Error) -> anyhow::Error {
    match e {
        contrastive_embed::Error::InvalidConfig(m) => UsageError(m).into(),
        other => other.into(),
    }
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("{}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))
}

fn build_bench(ctx: &Ctx, kind: BenchKind) -> anyhow::Result<()> {
    match kind {
        BenchKind::Rerank {
            input,
            out,
            min_duplicates,
            min_refs,
        } => {
            let mut rec = ctx.recorder("build-bench rerank");
            let d = RerankBuildOptions::default();
            let opts = RerankBuildOptions {
                min_duplicates: pick(min_duplicates, ctx.file.min_duplicates, d.min_duplicates),
                min_refs: pick(min_refs, ctx.file.min_refs, d.min_refs),
            };
            let pairs = datasets::read_nli_pairs(&input)?;
            rec.input(&input);
            let task = build_rerank_task(&pairs, opts);
            datasets::write_rerank_task(&task.instances, &out)?;
            rec.output(&out);
            let s = &task.stats;
            println!(
                "built {} rerank instances from {} pairs ({} premises; dropped: {} below min duplicates, {} without positive, {} without negative, {} below min refs; {} conflicting references removed)",
                task.instances.len(),
                pairs.len(),
                s.distinct_premises,
                s.below_min_duplicates,
                s.dropped_no_positive,
                s.dropped_no_negative,
                s.dropped_min_refs,
                s.conflicting_references
            );
            #[derive(Serialize)]
            struct Cfg {
                options: RerankBuildOptions,
                stats: datasets::RerankBuildStats,
            }
            rec.finish(&Cfg {
                options: opts,
                stats: task.stats,
            })
        }
        BenchKind::Retrieval { input, out } => {
            let mut rec = ctx.recorder("build-bench retrieval");
            let pairs = datasets::read_qa_pairs(&input)?;
            rec.input(&input);
            let corpus = build_retrieval_task(&pairs)?;
            datasets::write_retrieval_task(&corpus, &out)?;
            rec.output(&out);
            println!(
                "built retrieval corpus: {} documents, {} queries",
                corpus.documents.len(),
                corpus.queries.len()
            );
            rec.finish(&serde_json::json!({
                "documents": corpus.documents.len(),
                "queries": corpus.queries.len(),
            }))
        }
    }
}

fn history_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".history.json");
    PathBuf::from(name)
}

fn train_cmd(ctx: &Ctx, args: TrainArgs) -> anyhow::Result<()> {
    let cfg = ctx.train_config(&args.common, args.regime, args.variant, args.tau);
    cfg.validate().map_err(usage)?;
    let shape = ctx.model_shape(&args.common);
    let mut rec = ctx.recorder("train");

    let data = trainer::read_training_data(&args.data)?;
    rec.input(&args.data);
    data.check_regime(cfg.regime)
        .or_else(|e| match (&data, e) {
            // Missing negatives are sampled during preparation.
            (TrainingData::Triplets(_), contrastive_embed::Error::NoNegatives) => Ok(()),
            (_, e) => Err(e),
        })
        .with_context(|| format!("{}", args.data.display()))?;
    let (prepared, stats) = trainer::prepare(&data, &cfg)?;
    let vocab = Vocabulary::build(&prepared.texts(), shape.min_freq)?;
    let init = ModelParams::init(vocab, shape.dim, cfg.seed).map_err(usage)?;
    let outcome = trainer::train(init, &prepared, &cfg)?;

    outcome.params.save_checkpoint(&args.out)?;
    rec.output(&args.out);
    let hist = history_path(&args.out);
    #[derive(Serialize)]
    struct History<'a> {
        loss_history: &'a [f64],
        optimizer_steps: u64,
        dropped_remainders: usize,
        prep: &'a trainer::PrepStats,
    }
    write_json(
        &hist,
        &History {
            loss_history: &outcome.loss_history,
            optimizer_steps: outcome.optimizer_steps,
            dropped_remainders: outcome.dropped_remainders,
            prep: &stats,
        },
    )?;
    rec.output(&hist);
    for (epoch, l) in outcome.loss_history.iter().enumerate() {
        println!("epoch {}: mean loss {l:.6}", epoch + 1);
    }
    println!(
        "trained on {} examples ({} dropped by length), vocabulary {}, wrote {}",
        prepared.len(),
        stats.dropped_by_length,
        outcome.params.vocab_size(),
        args.out.display()
    );
    #[derive(Serialize)]
    struct Cfg {
        train: TrainConfig,
        model: ModelShape,
    }
    rec.finish(&Cfg {
        train: cfg,
        model: shape,
    })
}

fn load_model(ctx: &Ctx, args: &EvalArgs) -> anyhow::Result<ModelParams> {
    Ok(match args.dim.or(ctx.file.dim) {
        Some(dim) => ModelParams::load_checkpoint_expecting(&args.checkpoint, dim)?,
        None => ModelParams::load_checkpoint(&args.checkpoint)?,
    })
}

fn eval_cmd(ctx: &Ctx, kind: EvalKind) -> anyhow::Result<()> {
    let (args, k) = match &kind {
        EvalKind::Retrieval { args, k } => (args, Some(k)),
        EvalKind::Rerank { args } => (args, None),
    };
    let max_len = pick(
        args.max_len,
        ctx.file.max_len,
        contrastive_embed::encoder::DEFAULT_MAX_LEN,
    );
    let mut rec = ctx.recorder(if k.is_some() { "eval retrieval" } else { "eval rerank" });
    let params = load_model(ctx, args)?;
    rec.input(&args.checkpoint);
    let model = PooledEncoder::new(&params, max_len);
    let model_id = args.checkpoint.display().to_string();
    let table_path = args.out.with_extension("txt");

    let (table, config) = if let Some(k) = k {
        let ks = pick(k.clone(), ctx.file.k.clone(), DEFAULT_K_VALUES.to_vec());
        let corpus = datasets::read_retrieval_task(&args.task)?;
        rec.input(&args.task);
        let report = accuracy_at_k(&model, &corpus, &ks, &model_id).map_err(usage)?;
        write_json(&args.out, &report)?;
        (
            evaluator::render_retrieval_table(std::slice::from_ref(&report)),
            serde_json::json!({ "max_len": max_len, "k": ks }),
        )
    } else {
        let instances = datasets::read_rerank_task(&args.task)?;
        rec.input(&args.task);
        let report = evaluate_rerank(&model, &instances, &model_id)?;
        write_json(&args.out, &report)?;
        (
            evaluator::render_rerank_table(std::slice::from_ref(&report)),
            serde_json::json!({ "max_len": max_len }),
        )
    };
    rec.output(&args.out);
    write_text(&table_path, &table)?;
    rec.output(&table_path);
    print!("{table}");
    rec.finish(&config)
}

fn sweep_cmd(ctx: &Ctx, args: SweepArgs) -> anyhow::Result<()> {
    let d = SweepGrid::default();
    let f = &ctx.file;
    let grid = SweepGrid {
        temperatures: pick(args.tau.clone(), f.temperatures.clone(), d.temperatures),
        regimes: pick(args.regimes.clone(), f.regimes.clone(), d.regimes),
        variants: pick(args.variants.clone(), f.variants.clone(), d.variants),
    };
    let base = ctx.train_config(&args.common, None, None, None);
    for (t, r, v) in grid.points() {
        TrainConfig {
            temperature: t,
            regime: r,
            variant: v,
            ..base
        }
        .validate()
        .map_err(usage)?;
    }
    let shape = ctx.model_shape(&args.common);
    let settings = SweepSettings {
        base,
        dim: shape.dim,
        min_freq: shape.min_freq,
        k_values: pick(args.k.clone(), f.k.clone(), DEFAULT_K_VALUES.to_vec()),
    };

    let mut rec = ctx.recorder("sweep");
    let triplets: Vec<TripletExample> = match trainer::read_training_data(&args.data)? {
        TrainingData::Triplets(t) => t,
        TrainingData::Pairs(p) => p
            .into_iter()
            .map(|p| TripletExample {
                anchor: p.anchor,
                positive: p.positive,
                negatives: Vec::new(),
                group: None,
            })
            .collect(),
    };
    rec.input(&args.data);
    let retrieval = datasets::read_retrieval_task(&args.retrieval)?;
    rec.input(&args.retrieval);
    let rerank = datasets::read_rerank_task(&args.rerank)?;
    rec.input(&args.rerank);

    let data = SweepData {
        triplets: &triplets,
        retrieval: &retrieval,
        rerank: &rerank,
    };
    let (report, failure) = evaluator::sweep_temperature_partial(&settings, &grid, &data).map_err(usage)?;
    ensure_dir(&args.out_dir)?;
    let json = args.out_dir.join("sweep.json");
    let csv = args.out_dir.join("sweep.csv");
    let txt = args.out_dir.join("sweep.txt");
    write_json(&json, &report)?;
    write_text(&csv, &evaluator::sweep_csv(&report))?;
    let table = evaluator::render_sweep_table(&report);
    write_text(&txt, &table)?;
    for p in [&json, &csv, &txt] {
        rec.output(p);
    }
    print!("{table}");
    for w in evaluator::rerank_trend_warnings(&report) {
        log::warn!("{w}");
    }
    #[derive(Serialize)]
    struct Cfg<'a> {
        settings: &'a SweepSettings,
        grid: &'a SweepGrid,
        completed_points: usize,
    }
    rec.finish(&Cfg {
        settings: &settings,
        grid: &grid,
        completed_points: report.entries.len(),
    })?;
    match failure {
        None => Ok(()),
        Some(e) => Err(anyhow::Error::new(e).context(format!(
            "sweep incomplete: {} of {} points written to {}",
            report.entries.len(),
            grid.points().len(),
            json.display()
        ))),
    }
}

fn synth_cmd(ctx: &Ctx, args: SynthArgs) -> anyhow::Result<()> {
    let f = &ctx.file;
    let cfg = SyntheticConfig::new(
        pick(args.clusters, f.clusters, 16),
        pick(args.docs_per_cluster, f.docs_per_cluster, 8),
        pick(args.queries_per_cluster, f.queries_per_cluster, 4),
        ctx.seed(),
    );
    let syn = generate_synthetic_corpus(&cfg).map_err(usage)?;
    let mut rec = ctx.recorder("synth");
    ensure_dir(&args.out_dir)?;

    let pairs = args.out_dir.join("pairs.jsonl");
    trainer::write_pairs(&trainer::strip_negatives(&syn.triplets), &pairs)?;
    let triplets = args.out_dir.join("triplets.jsonl");
    trainer::write_triplets(&syn.triplets, &triplets)?;
    let retrieval = args.out_dir.join("retrieval.jsonl");
    let corpus = build_retrieval_task(&syn.qa_pairs)?;
    datasets::write_retrieval_task(&corpus, &retrieval)?;
    let rerank = args.out_dir.join("rerank.jsonl");
    let task = build_rerank_task(&syn.nli_pairs, RerankBuildOptions::default());
    datasets::write_rerank_task(&task.instances, &rerank)?;
    for p in [&pairs, &triplets, &retrieval, &rerank] {
        rec.output(p);
        println!("wrote {}", p.display());
    }
    println!(
        "{} training groups, {} documents, {} queries, {} rerank instances",
        syn.triplets.len(),
        corpus.documents.len(),
        corpus.queries.len(),
        task.instances.len()
    );
    rec.finish(&cfg)
}

fn report_cmd(path: &Path) -> anyhow::Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
    let report: AnyReport = serde_json::from_str(&text)
        .with_context(|| format!("{}: not a sweep, retrieval or rerank report", path.display()))?;
    print!("{}", report.render());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let jobs = cli.jobs.or(file.jobs);
    if let Some(n) = jobs {
        if n == 0 {
            return Err(UsageError("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ctx = Ctx {
        file,
        seed: cli.seed,
        jobs,
    };
    match cli.command {
        Command::BuildBench(kind) => build_bench(&ctx, kind),
        Command::Train(args) => train_cmd(&ctx, args),
        Command::Eval(kind) => eval_cmd(&ctx, kind),
        Command::Sweep(args) => sweep_cmd(&ctx, args),
        Command::Synth(args) => synth_cmd(&ctx, args),
        Command::Report { path } => report_cmd(&path),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
