//! Command-line front end: data generation, meta-training (GP variants and
//! the gradient baseline), evaluation and prediction.
//!
//! Every command resolves its configuration (flags override config-file
//! values), writes the resolved config as `manifest.json` next to its
//! outputs, and is deterministic given that manifest. Exit codes are stable:
//! 0 success, 2 usage error, 3 numerical failure, 4 I/O failure.

mod formats;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use unlimitd::checkpoint::{Checkpoint, LoadedModel, Phase};
use unlimitd::eval::{self, EvalReport, KRecord, Model, ReportMeta};
use unlimitd::maml::{self, MamlConfig};
use unlimitd::taskgen::{FiniteDataset, TaskKind, TaskSource, CONTEXT_NOISE_STD};
use unlimitd::trainer::{self, TrainConfig, Variant};
use unlimitd::Error;

/// Error with a process exit class attached.
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: 4,
            message: message.into(),
        }
    }

    pub fn serialization(e: serde_json::Error) -> Self {
        Self {
            code: 4,
            message: format!("serialization error: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig(_)
            | Error::InvalidSpec(_)
            | Error::ShapeMismatch(_)
            | Error::Unsupported(_) => 2,
            Error::Conditioning { .. } | Error::RankDeficientSketch(_) => 3,
            Error::Io(_) | Error::Serialization(_) => 4,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "unlimitd",
    version,
    about = "Meta-learned task distributions over linearized networks: train, evaluate, predict"
)]
struct Cli {
    /// Worker threads for parallel regions (default: machine parallelism,
    /// or the UNLIMITD_THREADS environment variable).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a frozen finite task dataset as line-oriented JSON.
    GenerateData(GenerateArgs),
    /// Meta-train a GP task distribution (variants i, r, f).
    Train(TrainArgs),
    /// Meta-train the first-order gradient-adaptation baseline.
    TrainMaml(TrainMamlArgs),
    /// Evaluate checkpoints: MSE vs K, OoD AUC, uncertainty curves.
    Eval(EvalArgs),
    /// Predict at query inputs from a context CSV.
    Predict(PredictArgs),
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli
        .threads
        .or_else(|| std::env::var("UNLIMITD_THREADS").ok().and_then(|v| v.parse().ok()))
    {
        // Errors only if a global pool already exists, which is fine.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let result = match cli.command {
        Command::GenerateData(args) => cmd_generate_data(args),
        Command::Train(args) => cmd_train(args),
        Command::TrainMaml(args) => cmd_train_maml(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message);
            std::process::exit(e.code);
        }
    }
}

fn parse_kinds(text: &str) -> Result<Vec<TaskKind>, CliError> {
    let kinds: Result<Vec<TaskKind>, _> = text.split(',').map(|t| t.trim().parse()).collect();
    let kinds = kinds.map_err(CliError::from)?;
    if kinds.is_empty() {
        return Err(CliError::usage("empty cluster list"));
    }
    Ok(kinds)
}

fn parse_k_list(text: &str) -> Result<Vec<usize>, CliError> {
    let ks: Result<Vec<usize>, _> = text.split(',').map(|t| t.trim().parse::<usize>()).collect();
    let ks = ks.map_err(|e| CliError::usage(format!("bad K list: {e}")))?;
    if ks.is_empty() {
        return Err(CliError::usage("empty K list"));
    }
    for w in ks.windows(2) {
        if w[1] <= w[0] {
            return Err(CliError::usage("K list must be strictly increasing"));
        }
    }
    Ok(ks)
}

fn read_config_file<T: for<'de> Deserialize<'de> + Default>(
    path: Option<&Path>,
) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))
        }
    }
}

fn source_kinds(sources: &[TaskSource]) -> Vec<TaskKind> {
    let mut kinds: Vec<TaskKind> = sources.iter().flat_map(|s| s.kinds()).collect();
    kinds.dedup();
    kinds
}

// ---------------------------------------------------------------------------
// generate-data

#[derive(Args)]
struct GenerateArgs {
    /// Task cluster: sine, line or quadratic.
    #[arg(long)]
    cluster: Option<String>,
    /// Number of tasks N.
    #[arg(long = "N", visible_alias = "n-tasks")]
    n_tasks: Option<usize>,
    /// Points per task M.
    #[arg(long = "M", visible_alias = "m-points")]
    m_points: Option<usize>,
    /// Observation noise std applied once when freezing the dataset.
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (line-oriented JSON).
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing output file.
    #[arg(long)]
    force: bool,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenerateFile {
    cluster: Option<String>,
    n_tasks: Option<usize>,
    m_points: Option<usize>,
    noise_std: Option<f64>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct GenerateResolved {
    cluster: TaskKind,
    n_tasks: usize,
    m_points: usize,
    noise_std: f64,
    seed: u64,
    out: PathBuf,
}

fn cmd_generate_data(args: GenerateArgs) -> Result<(), CliError> {
    let file: GenerateFile = read_config_file(args.config.as_deref())?;
    let cluster_text = args
        .cluster
        .or(file.cluster)
        .ok_or_else(|| CliError::usage("--cluster is required"))?;
    let resolved = GenerateResolved {
        cluster: cluster_text.parse().map_err(CliError::from)?,
        n_tasks: args.n_tasks.or(file.n_tasks).unwrap_or(10),
        m_points: args.m_points.or(file.m_points).unwrap_or(50),
        noise_std: args.noise_std.or(file.noise_std).unwrap_or(CONTEXT_NOISE_STD),
        seed: args.seed.or(file.seed).unwrap_or(0),
        out: args.out,
    };
    if resolved.n_tasks == 0 || resolved.m_points == 0 {
        return Err(CliError::usage("N and M must be >= 1"));
    }
    if resolved.out.exists() && !args.force {
        return Err(CliError::io(format!(
            "{} already exists; pass --force to overwrite",
            resolved.out.display()
        )));
    }
    let dataset = FiniteDataset::generate(
        resolved.cluster,
        resolved.n_tasks,
        resolved.m_points,
        resolved.noise_std,
        resolved.seed,
    )?;
    let text = formats::dataset_to_lines(&dataset)?;
    std::fs::write(&resolved.out, text)
        .map_err(|e| CliError::io(format!("{}: {e}", resolved.out.display())))?;
    if let Some(dir) = resolved.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        formats::write_manifest(dir, "generate-data", &resolved)?;
    }
    println!(
        "wrote {} tasks x {} points (seed {}) to {}",
        resolved.n_tasks,
        resolved.m_points,
        resolved.seed,
        resolved.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Args)]
struct TrainArgs {
    /// Covariance variant: i (identity), r (random projection), f (fisher).
    #[arg(long)]
    variant: Option<String>,
    /// Mixture cluster count.
    #[arg(long)]
    alpha: Option<usize>,
    /// Comma-separated training clusters (infinite task streams).
    #[arg(long)]
    cluster: Option<String>,
    /// Finite dataset files (one per cluster) instead of infinite streams.
    #[arg(long, value_delimiter = ',')]
    dataset: Vec<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Tasks per epoch.
    #[arg(long = "n")]
    tasks_per_epoch: Option<usize>,
    /// Context points per task.
    #[arg(long = "K", visible_alias = "k")]
    context_size: Option<usize>,
    /// Projection subspace size.
    #[arg(long = "s")]
    subspace_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    sigma_eps: Option<f64>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fim_aux_tasks: Option<usize>,
    #[arg(long)]
    fim_aux_inputs: Option<usize>,
    /// Emit a checkpoint every this many epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue a previous run from its checkpoint (config comes from the
    /// checkpoint; training flags are ignored).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    variant: Option<String>,
    alpha: Option<usize>,
    cluster: Option<String>,
    dataset: Option<Vec<PathBuf>>,
    epochs: Option<usize>,
    tasks_per_epoch: Option<usize>,
    context_size: Option<usize>,
    subspace_size: Option<usize>,
    lr: Option<f64>,
    sigma_eps: Option<f64>,
    hidden: Option<Vec<usize>>,
    seed: Option<u64>,
    fim_aux_tasks: Option<usize>,
    fim_aux_inputs: Option<usize>,
    checkpoint_every: Option<usize>,
}

#[derive(Serialize)]
struct TrainResolved {
    config: TrainConfig,
    clusters: Vec<TaskKind>,
    datasets: Vec<PathBuf>,
    resumed_from: Option<PathBuf>,
}

fn checkpoint_sink<'a>(
    out_dir: &'a Path,
) -> impl FnMut(&Checkpoint) -> unlimitd::Result<()> + 'a {
    move |ck: &Checkpoint| {
        let name = match ck {
            Checkpoint::Unlimitd(c)
                if c.config.variant == Variant::Fisher
                    && c.phase == Phase::Identity
                    && c.epoch == c.config.epochs / 2 =>
            {
                "checkpoint_boundary.json".to_string()
            }
            _ => format!("checkpoint_epoch{:06}.json", ck.epoch()),
        };
        ck.save(&out_dir.join(name))
    }
}

fn write_trace(path: &Path, start_epoch: usize, trace: &[f64]) -> Result<(), CliError> {
    let mut text = String::from("epoch,nll\n");
    for (i, v) in trace.iter().enumerate() {
        text.push_str(&format!("{},{}\n", start_epoch + i, v));
    }
    std::fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::io(format!("{}: {e}", args.out_dir.display())))?;

    if let Some(resume_path) = &args.resume {
        let checkpoint = Checkpoint::load(resume_path)?;
        let start_epoch = checkpoint.epoch();
        let mut sink = checkpoint_sink(&args.out_dir);
        let run = trainer::resume(&checkpoint, &mut sink)?;
        let final_path = args.out_dir.join("checkpoint.json");
        run.checkpoint.save(&final_path)?;
        write_trace(&args.out_dir.join("nll_trace.csv"), start_epoch, &run.trace)?;
        if let Checkpoint::Unlimitd(ck) = &run.checkpoint {
            let resolved = TrainResolved {
                config: ck.config.clone(),
                clusters: source_kinds(&ck.sources),
                datasets: Vec::new(),
                resumed_from: Some(resume_path.clone()),
            };
            formats::write_manifest(&args.out_dir, "train", &resolved)?;
        }
        println!(
            "resumed from epoch {start_epoch}; final checkpoint at {}",
            final_path.display()
        );
        return Ok(());
    }

    let file: TrainFile = read_config_file(args.config.as_deref())?;
    let variant: Variant = args
        .variant
        .or(file.variant)
        .ok_or_else(|| CliError::usage("--variant is required (i, r or f)"))?
        .parse()?;
    let alpha = args.alpha.or(file.alpha).unwrap_or(1);
    let config = TrainConfig {
        variant,
        alpha,
        epochs: args.epochs.or(file.epochs).unwrap_or(4000),
        tasks_per_epoch: args.tasks_per_epoch.or(file.tasks_per_epoch).unwrap_or(24),
        context_size: args.context_size.or(file.context_size).unwrap_or(10),
        subspace_size: args.subspace_size.or(file.subspace_size).unwrap_or(10),
        learning_rate: args.lr.or(file.lr).unwrap_or(1e-3),
        sigma_eps: args.sigma_eps.or(file.sigma_eps).unwrap_or(0.05),
        seed: args.seed.or(file.seed).unwrap_or(0),
        hidden: if args.hidden.is_empty() {
            file.hidden.unwrap_or_else(|| vec![40, 40])
        } else {
            args.hidden.clone()
        },
        fim_aux_tasks: args.fim_aux_tasks.or(file.fim_aux_tasks).unwrap_or(100),
        fim_aux_inputs: args.fim_aux_inputs.or(file.fim_aux_inputs),
        checkpoint_every: args.checkpoint_every.or(file.checkpoint_every),
    };
    config.validate()?;

    let dataset_paths = if args.dataset.is_empty() {
        file.dataset.unwrap_or_default()
    } else {
        args.dataset.clone()
    };
    let (sources, clusters) = if !dataset_paths.is_empty() {
        if dataset_paths.len() != alpha {
            return Err(CliError::usage(format!(
                "{} dataset files for alpha = {alpha}; supply one per cluster",
                dataset_paths.len()
            )));
        }
        let mut sources = Vec::new();
        for p in &dataset_paths {
            sources.push(TaskSource::Finite {
                dataset: formats::load_dataset(p)?,
            });
        }
        let clusters = source_kinds(&sources);
        (sources, clusters)
    } else {
        let cluster_text = args
            .cluster
            .or(file.cluster)
            .ok_or_else(|| CliError::usage("supply --cluster or --dataset"))?;
        let kinds = parse_kinds(&cluster_text)?;
        let sources = if kinds.len() == alpha {
            kinds.iter().map(|&k| TaskSource::infinite(k)).collect()
        } else if alpha == 1 {
            // A flat (single-GP) model over a multimodal stream.
            vec![TaskSource::infinite_mix(kinds.clone())]
        } else {
            return Err(CliError::usage(format!(
                "{} clusters for alpha = {alpha}; supply one per cluster",
                kinds.len()
            )));
        };
        (sources, kinds)
    };

    let resolved = TrainResolved {
        config: config.clone(),
        clusters,
        datasets: dataset_paths,
        resumed_from: None,
    };
    formats::write_manifest(&args.out_dir, "train", &resolved)?;

    eprintln!(
        "training variant {:?} for {} epochs ({} tasks/epoch, K={})",
        config.variant, config.epochs, config.tasks_per_epoch, config.context_size
    );
    let mut sink = checkpoint_sink(&args.out_dir);
    let run = trainer::train(&config, &sources, &mut sink)?;
    let final_path = args.out_dir.join("checkpoint.json");
    run.checkpoint.save(&final_path)?;
    write_trace(&args.out_dir.join("nll_trace.csv"), 0, &run.trace)?;
    println!(
        "trained {} epochs; final summed NLL {}; checkpoint at {}",
        run.trace.len(),
        run.trace.last().copied().unwrap_or(f64::NAN),
        final_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-maml

#[derive(Args)]
struct TrainMamlArgs {
    /// Comma-separated training clusters (infinite task streams).
    #[arg(long)]
    cluster: Option<String>,
    /// Finite dataset files (one per cluster) instead of infinite streams.
    #[arg(long, value_delimiter = ',')]
    dataset: Vec<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "n")]
    tasks_per_epoch: Option<usize>,
    #[arg(long = "K", visible_alias = "k")]
    context_size: Option<usize>,
    /// Query points per task.
    #[arg(long = "L", visible_alias = "query-size")]
    query_size: Option<usize>,
    #[arg(long)]
    inner_lr: Option<f64>,
    #[arg(long)]
    inner_steps_train: Option<usize>,
    #[arg(long)]
    inner_steps_test: Option<usize>,
    #[arg(long)]
    meta_lr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue a previous run from its checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainMamlFile {
    cluster: Option<String>,
    dataset: Option<Vec<PathBuf>>,
    epochs: Option<usize>,
    tasks_per_epoch: Option<usize>,
    context_size: Option<usize>,
    query_size: Option<usize>,
    inner_lr: Option<f64>,
    inner_steps_train: Option<usize>,
    inner_steps_test: Option<usize>,
    meta_lr: Option<f64>,
    hidden: Option<Vec<usize>>,
    seed: Option<u64>,
    checkpoint_every: Option<usize>,
}

#[derive(Serialize)]
struct TrainMamlResolved {
    config: MamlConfig,
    clusters: Vec<TaskKind>,
    datasets: Vec<PathBuf>,
    resumed_from: Option<PathBuf>,
}

fn cmd_train_maml(args: TrainMamlArgs) -> Result<(), CliError> {
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::io(format!("{}: {e}", args.out_dir.display())))?;

    if let Some(resume_path) = &args.resume {
        let checkpoint = Checkpoint::load(resume_path)?;
        let start_epoch = checkpoint.epoch();
        let mut sink = checkpoint_sink(&args.out_dir);
        let run = maml::resume(&checkpoint, &mut sink)?;
        let final_path = args.out_dir.join("checkpoint.json");
        run.checkpoint.save(&final_path)?;
        write_trace(&args.out_dir.join("mse_trace.csv"), start_epoch, &run.trace)?;
        println!(
            "resumed from epoch {start_epoch}; final checkpoint at {}",
            final_path.display()
        );
        return Ok(());
    }

    let file: TrainMamlFile = read_config_file(args.config.as_deref())?;
    let config = MamlConfig {
        inner_lr: args.inner_lr.or(file.inner_lr).unwrap_or(1e-3),
        inner_steps_train: args.inner_steps_train.or(file.inner_steps_train).unwrap_or(5),
        inner_steps_test: args.inner_steps_test.or(file.inner_steps_test).unwrap_or(10),
        meta_lr: args.meta_lr.or(file.meta_lr).unwrap_or(1e-3),
        epochs: args.epochs.or(file.epochs).unwrap_or(4000),
        tasks_per_epoch: args.tasks_per_epoch.or(file.tasks_per_epoch).unwrap_or(24),
        context_size: args.context_size.or(file.context_size).unwrap_or(10),
        query_size: args.query_size.or(file.query_size).unwrap_or(10),
        seed: args.seed.or(file.seed).unwrap_or(0),
        hidden: if args.hidden.is_empty() {
            file.hidden.unwrap_or_else(|| vec![40, 40])
        } else {
            args.hidden.clone()
        },
        checkpoint_every: args.checkpoint_every.or(file.checkpoint_every),
    };
    config.validate()?;

    let dataset_paths = if args.dataset.is_empty() {
        file.dataset.unwrap_or_default()
    } else {
        args.dataset.clone()
    };
    let (sources, clusters) = if !dataset_paths.is_empty() {
        let mut sources = Vec::new();
        for p in &dataset_paths {
            sources.push(TaskSource::Finite {
                dataset: formats::load_dataset(p)?,
            });
        }
        let clusters = source_kinds(&sources);
        (sources, clusters)
    } else {
        let cluster_text = args
            .cluster
            .or(file.cluster)
            .ok_or_else(|| CliError::usage("supply --cluster or --dataset"))?;
        let kinds = parse_kinds(&cluster_text)?;
        let sources = kinds.iter().map(|&k| TaskSource::infinite(k)).collect();
        (sources, kinds)
    };

    let resolved = TrainMamlResolved {
        config: config.clone(),
        clusters,
        datasets: dataset_paths,
        resumed_from: None,
    };
    formats::write_manifest(&args.out_dir, "train-maml", &resolved)?;

    eprintln!(
        "training baseline for {} epochs ({} tasks/epoch, K={}, L={})",
        config.epochs, config.tasks_per_epoch, config.context_size, config.query_size
    );
    let mut sink = checkpoint_sink(&args.out_dir);
    let run = maml::meta_train(&config, &sources, &mut sink)?;
    let final_path = args.out_dir.join("checkpoint.json");
    run.checkpoint.save(&final_path)?;
    write_trace(&args.out_dir.join("mse_trace.csv"), 0, &run.trace)?;
    println!(
        "trained {} epochs; final mean query MSE {}; checkpoint at {}",
        run.trace.len(),
        run.trace.last().copied().unwrap_or(f64::NAN),
        final_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file; repeat to aggregate several trainings. With
    /// --proj-seeds the path acts as a template containing `{seed}`.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    /// Seeds substituted into the checkpoint path template, for aggregating
    /// several random-projection trainings.
    #[arg(long)]
    proj_seeds: Option<String>,
    /// Context sizes to sweep.
    #[arg(long)]
    k_list: Option<String>,
    /// In-distribution clusters (default: the checkpoint's training clusters).
    #[arg(long)]
    cluster: Option<String>,
    /// OoD clusters; enables AUC computation.
    #[arg(long)]
    ood: Option<String>,
    #[arg(long)]
    n_tasks: Option<usize>,
    #[arg(long)]
    n_query: Option<usize>,
    /// Tasks per side in the OoD AUC.
    #[arg(long)]
    n_each: Option<usize>,
    /// Context observation noise std.
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also compute the mean posterior std per K (probabilistic models only).
    #[arg(long)]
    uncertainty: bool,
    /// Render SVG line plots next to the CSV/JSON report.
    #[arg(long)]
    svg: bool,
    /// Report file stem.
    #[arg(long)]
    stem: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalFile {
    k_list: Option<String>,
    cluster: Option<String>,
    ood: Option<String>,
    n_tasks: Option<usize>,
    n_query: Option<usize>,
    n_each: Option<usize>,
    noise_std: Option<f64>,
    seed: Option<u64>,
    stem: Option<String>,
}

#[derive(Serialize)]
struct EvalResolved {
    checkpoints: Vec<PathBuf>,
    k_list: Vec<usize>,
    in_clusters: Vec<TaskKind>,
    ood_clusters: Vec<TaskKind>,
    n_tasks: usize,
    n_query: usize,
    n_each: usize,
    noise_std: f64,
    seed: u64,
    uncertainty: bool,
    stem: String,
}

fn expand_checkpoints(args: &EvalArgs) -> Result<Vec<PathBuf>, CliError> {
    match &args.proj_seeds {
        None => Ok(args.checkpoint.clone()),
        Some(seeds) => {
            if args.checkpoint.len() != 1 {
                return Err(CliError::usage(
                    "--proj-seeds needs exactly one --checkpoint path template",
                ));
            }
            let template = args.checkpoint[0].to_string_lossy();
            if !template.contains("{seed}") {
                return Err(CliError::usage(
                    "--proj-seeds requires a '{seed}' placeholder in the checkpoint path",
                ));
            }
            seeds
                .split(',')
                .map(|s| {
                    let s = s.trim();
                    s.parse::<u64>()
                        .map_err(|_| CliError::usage(format!("bad seed '{s}'")))
                        .map(|v| PathBuf::from(template.replace("{seed}", &v.to_string())))
                })
                .collect()
        }
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let file: EvalFile = read_config_file(args.config.as_deref())?;
    let checkpoint_paths = expand_checkpoints(&args)?;
    let mut models: Vec<LoadedModel> = Vec::new();
    let mut sources_kinds: Vec<TaskKind> = Vec::new();
    for p in &checkpoint_paths {
        let ck = Checkpoint::load(p)?;
        if sources_kinds.is_empty() {
            let sources = match &ck {
                Checkpoint::Unlimitd(c) => &c.sources,
                Checkpoint::Maml(c) => &c.sources,
            };
            sources_kinds = source_kinds(sources);
        }
        models.push(ck.model()?);
    }

    let k_list = parse_k_list(
        args.k_list
            .as_deref()
            .or(file.k_list.as_deref())
            .unwrap_or("1,2,3,5,10"),
    )?;
    let in_clusters = match args.cluster.as_deref().or(file.cluster.as_deref()) {
        Some(text) => parse_kinds(text)?,
        None => {
            if sources_kinds.is_empty() {
                return Err(CliError::usage(
                    "no --cluster given and the checkpoint carries no task sources",
                ));
            }
            sources_kinds.clone()
        }
    };
    let ood_clusters = match args.ood.as_deref().or(file.ood.as_deref()) {
        Some(text) => parse_kinds(text)?,
        None => Vec::new(),
    };
    let resolved = EvalResolved {
        checkpoints: checkpoint_paths.clone(),
        k_list: k_list.clone(),
        in_clusters: in_clusters.clone(),
        ood_clusters: ood_clusters.clone(),
        n_tasks: args.n_tasks.or(file.n_tasks).unwrap_or(200),
        n_query: args.n_query.or(file.n_query).unwrap_or(100),
        n_each: args.n_each.or(file.n_each).unwrap_or(200),
        noise_std: args.noise_std.or(file.noise_std).unwrap_or(CONTEXT_NOISE_STD),
        seed: args.seed.or(file.seed).unwrap_or(0),
        uncertainty: args.uncertainty,
        stem: args.stem.or(file.stem).unwrap_or_else(|| "report".into()),
    };
    let manifest_hash = formats::write_manifest(&args.out_dir, "eval", &resolved)?;

    // Per-model metric curves, then aggregation across models (mean across
    // trainings; ci95 across trainings when there are several, the per-task
    // ci95 of the single training otherwise).
    let mut mse_curves = Vec::new();
    let mut auc_curves = Vec::new();
    let mut std_curves = Vec::new();
    for model in &models {
        mse_curves.push(eval::mse_eval(
            model,
            &in_clusters,
            &k_list,
            resolved.n_tasks,
            resolved.n_query,
            resolved.noise_std,
            resolved.seed,
        )?);
        if !ood_clusters.is_empty() {
            let mut per_k = Vec::new();
            for &k in &k_list {
                per_k.push(eval::ood_auc(
                    model,
                    &in_clusters,
                    &ood_clusters,
                    k,
                    resolved.n_each,
                    resolved.noise_std,
                    resolved.seed,
                )?);
            }
            auc_curves.push(per_k);
        }
        if resolved.uncertainty {
            std_curves.push(eval::uncertainty_curve(
                model,
                &in_clusters,
                &k_list,
                resolved.n_tasks,
                resolved.n_query,
                resolved.noise_std,
                resolved.seed,
            )?);
        }
    }

    let m = models.len();
    let mut records = Vec::with_capacity(k_list.len());
    for (ki, &k) in k_list.iter().enumerate() {
        let means: Vec<f64> = mse_curves.iter().map(|c| c[ki].mean).collect();
        let mean_mse = means.iter().sum::<f64>() / m as f64;
        let ci95_mse = if m >= 2 {
            let mu = mean_mse;
            let var = means.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / (m - 1) as f64;
            1.96 * (var / m as f64).sqrt()
        } else {
            mse_curves[0][ki].ci95
        };
        let auc = (!auc_curves.is_empty())
            .then(|| auc_curves.iter().map(|c| c[ki]).sum::<f64>() / m as f64);
        let mean_posterior_std = (!std_curves.is_empty())
            .then(|| std_curves.iter().map(|c| c[ki].1).sum::<f64>() / m as f64);
        records.push(KRecord {
            k,
            mean_mse: Some(mean_mse),
            ci95_mse: Some(ci95_mse),
            auc,
            mean_posterior_std,
        });
    }

    let report = EvalReport {
        version: eval::REPORT_FORMAT_VERSION,
        meta: ReportMeta {
            model: if m == 1 {
                models[0].describe()
            } else {
                format!("{} x {}", m, models[0].describe())
            },
            seed: resolved.seed,
            n_tasks: resolved.n_tasks,
            n_query: resolved.n_query,
            n_each: resolved.n_each,
            manifest_hash: Some(manifest_hash),
            degenerate_ci: resolved.n_tasks < 2,
        },
        records,
    };
    let written = eval::write_report(&report, &args.out_dir, &resolved.stem, args.svg)?;
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// predict

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Context CSV with header `x,y`.
    #[arg(long)]
    context: PathBuf,
    /// Query CSV with header `x`.
    #[arg(long)]
    queries: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let model = checkpoint.model()?;
    let (cx, cy) = formats::load_context_csv(&args.context)?;
    if cx.is_empty() {
        return Err(CliError::usage(format!(
            "{}: context must contain at least one point",
            args.context.display()
        )));
    }
    let qx = formats::load_query_csv(&args.queries)?;

    let text = if qx.is_empty() {
        // Still emit the right header for the model family.
        match &model {
            LoadedModel::Maml(_) => formats::predictions_to_csv(&[], &[], None, None),
            LoadedModel::Mixture(_) => formats::predictions_to_csv(&[], &[], Some(&[]), Some(0)),
            LoadedModel::Gp(_) => formats::predictions_to_csv(&[], &[], Some(&[]), None),
        }
    } else {
        let xc = unlimitd::diffnet::BatchInputs::from_scalars(&cx)?;
        let yc = nalgebra_vec(&cy);
        let xq = unlimitd::diffnet::BatchInputs::from_scalars(&qx)?;
        let pred = model.predict(&xc, &yc, &xq)?;
        let means: Vec<f64> = pred.mean.iter().copied().collect();
        let stds: Option<Vec<f64>> = pred
            .cov
            .map(|c| c.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect());
        formats::predictions_to_csv(&qx, &means, stds.as_deref(), pred.cluster)
    };
    std::fs::write(&args.out, text)
        .map_err(|e| CliError::io(format!("{}: {e}", args.out.display())))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn nalgebra_vec(values: &[f64]) -> unlimitd::nalgebra::DVector<f64> {
    unlimitd::nalgebra::DVector::from_column_slice(values)
}
