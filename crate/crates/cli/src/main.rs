use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdac::dataset::{generate_synthetic_blobs, BlobParams, EmbeddedDataset};
use cdac::format::{detect_magic, load_dataset, load_tokens, save_dataset, DataFormat, EMBEDDING_MAGIC, TOKEN_MAGIC};
use cdac::metrics::evaluate;
use cdac::pipeline::{run_variant, sweep, write_plot_csv, Aggregate, ClusteringReport, RunConfig, Stat, SweepAxis, Variant};
use clap::{Args, Parser, Subcommand, ValueEnum};

mod config;

use config::ConfigFile;

/// Intent clustering over precomputed sentence embeddings.
#[derive(Parser, Debug)]
#[command(name = "cdac", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert TSV or token-level files to the binary embedding format.
    Ingest(IngestArgs),
    /// Write a synthetic Gaussian-blob dataset.
    Synth(SynthArgs),
    /// Train and evaluate one method over one or more seeded runs.
    Train(TrainArgs),
    /// Score a predictions file against a labels file.
    Eval(EvalArgs),
    /// Repeat training over values of one parameter.
    Sweep(SweepArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum InputKind {
    Tsv,
    Binary,
    Tokens,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum OutputKind {
    Binary,
    Tsv,
}

impl From<OutputKind> for DataFormat {
    fn from(k: OutputKind) -> Self {
        match k {
            OutputKind::Binary => DataFormat::Binary,
            OutputKind::Tsv => DataFormat::Tsv,
        }
    }
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Input file.
    #[arg(long, short)]
    input: PathBuf,
    /// Output file.
    #[arg(long, short)]
    output: PathBuf,
    /// Input kind; detected from magic bytes and extension when omitted.
    #[arg(long, value_enum)]
    from: Option<InputKind>,
    /// Output encoding.
    #[arg(long, value_enum, default_value = "binary")]
    to: OutputKind,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output file.
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 10.0)]
    centroid_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output encoding; defaults from the file extension.
    #[arg(long, value_enum)]
    format: Option<OutputKind>,
}

/// Settings shared by `train` and `sweep`. Each may also come from the
/// config file; flags win.
#[derive(Args, Debug, Default)]
struct RunFlags {
    /// Dataset path (binary or TSV).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Flat key = value file with any of these flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// DAC, DAC-KM, DAC+, CDAC, CDAC-KM, CDAC+ or KM-raw.
    #[arg(long)]
    variant: Option<Variant>,
    /// Explicit cluster count (overrides the multiplier).
    #[arg(long)]
    clusters: Option<usize>,
    /// Clusters as a multiple of the true class count.
    #[arg(long)]
    clusters_multiplier: Option<f64>,
    /// Fraction of training rows of known classes that keep labels.
    #[arg(long)]
    labeled_ratio: Option<f64>,
    /// Fraction of classes withheld as new intents.
    #[arg(long)]
    unknown_ratio: Option<f64>,
    /// Class-imbalance retention parameter in (0, 1].
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Repetitions; run r uses seed + r.
    #[arg(long)]
    runs: Option<usize>,
    /// Pairwise-phase learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Refinement learning rate (defaults to --lr).
    #[arg(long)]
    refine_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Threshold schedule step.
    #[arg(long)]
    eta: Option<f64>,
    /// Refinement stops when fewer than this fraction of assignments change.
    #[arg(long)]
    delta_label: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    pairwise_epochs: Option<usize>,
    #[arg(long)]
    refine_epochs: Option<usize>,
    #[arg(long)]
    kmeans_restarts: Option<usize>,
    #[arg(long)]
    kmeans_max_iters: Option<usize>,
    /// Worker threads for independent runs.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, env = "CDAC_OUT_DIR")]
    out: Option<PathBuf>,
}

const RUN_KEYS: &[&str] = &[
    "data",
    "variant",
    "clusters",
    "clusters-multiplier",
    "labeled-ratio",
    "unknown-ratio",
    "gamma",
    "seed",
    "runs",
    "lr",
    "refine-lr",
    "batch-size",
    "eta",
    "delta-label",
    "dropout",
    "pairwise-epochs",
    "refine-epochs",
    "kmeans-restarts",
    "kmeans-max-iters",
    "jobs",
    "out",
    "include-empty-clusters",
];

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Keep empty clusters as columns of the confusion CSV.
    #[arg(long)]
    include_empty_clusters: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// TSV of `id<TAB>cluster`.
    #[arg(long)]
    predictions: PathBuf,
    /// TSV of `id<TAB>label`.
    #[arg(long)]
    labels: PathBuf,
    /// Confusion CSV destination.
    #[arg(long, default_value = "confusion.csv")]
    confusion: PathBuf,
    #[arg(long)]
    include_empty_clusters: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// cluster_multiplier, labeled_ratio, unknown_class_ratio or gamma.
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<cdac::Error> for Failure {
    fn from(e: cdac::Error) -> Self {
        Self { code: if e.is_numerical() { 3 } else { 2 }, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::input(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_ingest(args: &IngestArgs) -> CliResult {
    let kind = match args.from {
        Some(k) => k,
        None => match detect_magic(&args.input)? {
            Some(m) if &m == TOKEN_MAGIC => InputKind::Tokens,
            Some(m) if &m == EMBEDDING_MAGIC => InputKind::Binary,
            _ => match DataFormat::from_path(&args.input) {
                DataFormat::Tsv => InputKind::Tsv,
                DataFormat::Binary => InputKind::Binary,
            },
        },
    };
    let ds = match kind {
        InputKind::Tsv => load_dataset(&args.input, DataFormat::Tsv)?,
        InputKind::Binary => load_dataset(&args.input, DataFormat::Binary)?,
        InputKind::Tokens => load_tokens(&args.input)?.pool()?,
    };
    save_dataset(&ds, &args.output, args.to.into())?;
    println!("rows {} dim {}", ds.len(), ds.dim());
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> CliResult {
    let ds = generate_synthetic_blobs(&BlobParams {
        num_classes: args.classes,
        per_class: args.per_class,
        dim: args.dim,
        centroid_scale: args.centroid_scale,
        noise_sigma: args.noise_sigma,
        seed: args.seed,
    })?;
    let format = args.format.map_or_else(|| DataFormat::from_path(&args.output), Into::into);
    save_dataset(&ds, &args.output, format)?;
    println!("rows {} dim {}", ds.len(), ds.dim());
    Ok(())
}

struct Resolved {
    data: PathBuf,
    out: PathBuf,
    config: RunConfig,
    include_empty: bool,
}

fn resolve(flags: &RunFlags, include_empty: bool) -> CliResult<Resolved> {
    let file = match &flags.config {
        Some(p) => ConfigFile::load(p).map_err(Failure::input)?,
        None => ConfigFile::default(),
    };
    file.check_keys(RUN_KEYS).map_err(Failure::input)?;
    let d = RunConfig::default();
    let pick = |e: String| Failure::input(e);
    let config = RunConfig {
        variant: file.pick(flags.variant, "variant").map_err(pick)?.unwrap_or(d.variant),
        cluster_count: file.pick(flags.clusters, "clusters").map_err(pick)?,
        cluster_multiplier: file.pick(flags.clusters_multiplier, "clusters-multiplier").map_err(pick)?.unwrap_or(d.cluster_multiplier),
        labeled_ratio: file.pick(flags.labeled_ratio, "labeled-ratio").map_err(pick)?.unwrap_or(d.labeled_ratio),
        unknown_class_ratio: file.pick(flags.unknown_ratio, "unknown-ratio").map_err(pick)?.unwrap_or(d.unknown_class_ratio),
        gamma: file.pick(flags.gamma, "gamma").map_err(pick)?,
        seed: file.pick(flags.seed, "seed").map_err(pick)?.unwrap_or(d.seed),
        num_runs: file.pick(flags.runs, "runs").map_err(pick)?.unwrap_or(d.num_runs),
        pairwise_learning_rate: file.pick(flags.lr, "lr").map_err(pick)?.unwrap_or(d.pairwise_learning_rate),
        refine_learning_rate: file.pick(flags.refine_lr, "refine-lr").map_err(pick)?,
        batch_size: file.pick(flags.batch_size, "batch-size").map_err(pick)?.unwrap_or(d.batch_size),
        eta: file.pick(flags.eta, "eta").map_err(pick)?.unwrap_or(d.eta),
        delta_label: file.pick(flags.delta_label, "delta-label").map_err(pick)?.unwrap_or(d.delta_label),
        dropout: file.pick(flags.dropout, "dropout").map_err(pick)?.unwrap_or(d.dropout),
        pairwise_max_epochs: file.pick(flags.pairwise_epochs, "pairwise-epochs").map_err(pick)?.unwrap_or(d.pairwise_max_epochs),
        refine_max_epochs: file.pick(flags.refine_epochs, "refine-epochs").map_err(pick)?.unwrap_or(d.refine_max_epochs),
        kmeans_restarts: file.pick(flags.kmeans_restarts, "kmeans-restarts").map_err(pick)?.unwrap_or(d.kmeans_restarts),
        kmeans_max_iters: file.pick(flags.kmeans_max_iters, "kmeans-max-iters").map_err(pick)?.unwrap_or(d.kmeans_max_iters),
        jobs: file.pick(flags.jobs, "jobs").map_err(pick)?.unwrap_or(d.jobs),
    };
    config.validate()?;
    let data = file
        .pick(flags.data.clone(), "data")
        .map_err(pick)?
        .ok_or_else(|| Failure::input("no dataset given (--data or `data` in the config file)"))?;
    let out = file.pick(flags.out.clone(), "out").map_err(pick)?.unwrap_or_else(|| PathBuf::from("cdac-out"));
    let include_empty = include_empty || file.get::<bool>("include-empty-clusters").map_err(pick)?.unwrap_or(false);
    Ok(Resolved { data, out, config, include_empty })
}

fn load_any(path: &Path) -> CliResult<EmbeddedDataset> {
    Ok(load_dataset(path, DataFormat::from_path(path))?)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn cmd_train(args: &TrainArgs) -> CliResult {
    let r = resolve(&args.run, args.include_empty_clusters)?;
    let ds = load_any(&r.data)?;
    let report = run_variant(&r.config, &ds)?;
    fs::create_dir_all(&r.out)?;
    write_train_outputs(&report, &r)?;
    let a = &report.aggregate;
    println!(
        "{} runs={} k={} NMI {:.4}±{:.4} ARI {:.4}±{:.4} ACC {:.4}±{:.4}",
        report.variant, a.runs, report.cluster_count, a.nmi.mean, a.nmi.std, a.ari.mean, a.ari.std, a.acc.mean, a.acc.std
    );
    Ok(())
}

fn write_train_outputs(report: &ClusteringReport, r: &Resolved) -> CliResult {
    let out = &r.out;
    fs::write(out.join("report.json"), report.to_json())?;
    fs::write(out.join("config.txt"), config::echo(&r.config))?;
    for run in &report.runs {
        let tag = format!("run{:02}", run.run_index);
        if !run.pairwise_log.is_empty() {
            cdac::pairwise::write_log_csv(&run.pairwise_log, create(&out.join(format!("{tag}_pairwise.csv")))?)?;
        }
        if !run.refine_log.is_empty() {
            cdac::refine::write_log_csv(&run.refine_log, create(&out.join(format!("{tag}_refine.csv")))?)?;
        }
        if let Some(ckpt) = &run.checkpoint {
            ckpt.save(&out.join(format!("{tag}_checkpoint.bin")))?;
        }
        let mut w = create(&out.join(format!("{tag}_predictions.tsv")))?;
        writeln!(w, "id\tcluster")?;
        for (id, c) in &run.test_predictions {
            writeln!(w, "{id}\t{c}")?;
        }
        w.flush()?;
        run.test
            .confusion
            .write_csv(Some(&report.class_names), None, r.include_empty, create(&out.join(format!("{tag}_confusion.csv")))?)?;
    }
    if let Some(first) = report.runs.first() {
        first.test.confusion.write_csv(Some(&report.class_names), None, r.include_empty, create(&out.join("confusion.csv"))?)?;
    }
    Ok(())
}

/// Two-column TSV into `id -> value`, skipping an `id` header line.
fn read_pairs(path: &Path) -> CliResult<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (n == 0 && line.split('\t').next() == Some("id")) {
            continue;
        }
        let (id, value) = line
            .split_once('\t')
            .ok_or_else(|| Failure::input(format!("{}:{}: expected id<TAB>value", path.display(), n + 1)))?;
        if !seen.insert(id.to_string()) {
            return Err(Failure::input(format!("{}:{}: duplicate id {id:?}", path.display(), n + 1)));
        }
        pairs.push((id.to_string(), value.trim().to_string()));
    }
    if pairs.is_empty() {
        return Err(Failure::input(format!("{}: no rows", path.display())));
    }
    Ok(pairs)
}

fn index_values(values: &[&str]) -> (Vec<String>, Vec<usize>) {
    let names: Vec<String> = values.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>().into_iter().collect();
    let idx = values.iter().map(|v| names.binary_search_by(|n| n.as_str().cmp(v)).unwrap()).collect();
    (names, idx)
}

fn cmd_eval(args: &EvalArgs) -> CliResult {
    let labels = read_pairs(&args.labels)?;
    let predictions: BTreeMap<String, String> = read_pairs(&args.predictions)?.into_iter().collect();
    let mut pred_values = Vec::with_capacity(labels.len());
    for (id, _) in &labels {
        match predictions.get(id) {
            Some(p) => pred_values.push(p.as_str()),
            None => return Err(Failure::input(format!("id {id:?} is in the labels but missing from the predictions"))),
        }
    }
    let label_ids: BTreeSet<&str> = labels.iter().map(|(id, _)| id.as_str()).collect();
    if let Some(extra) = predictions.keys().find(|id| !label_ids.contains(id.as_str())) {
        return Err(Failure::input(format!("id {extra:?} is in the predictions but missing from the labels")));
    }
    let (class_names, truth) = index_values(&labels.iter().map(|(_, l)| l.as_str()).collect::<Vec<_>>());
    let (cluster_names, pred) = index_values(&pred_values);
    let report = evaluate(&truth, &pred, None)?;
    println!("NMI {:.6}\nARI {:.6}\nACC {:.6}", report.nmi, report.ari, report.acc);
    let mut w = create(&args.confusion)?;
    report
        .confusion
        .write_csv(Some(&class_names), Some(&cluster_names), args.include_empty_clusters, &mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> CliResult {
    let r = resolve(&args.run, false)?;
    let ds = load_any(&r.data)?;
    let reports = sweep(&r.config, args.axis, &args.values, &ds)?;
    fs::create_dir_all(&r.out)?;
    type Metric = fn(&Aggregate) -> Stat;
    let metrics: [(&str, Metric); 3] = [("nmi", |a| a.nmi), ("ari", |a| a.ari), ("acc", |a| a.acc)];
    for (name, metric) in metrics {
        let path = r.out.join(format!("sweep_{}_{name}.csv", args.axis));
        let mut w = create(&path)?;
        write_plot_csv(&args.values, &reports, metric, &mut w)?;
        w.flush()?;
    }
    let mut json = String::from("[\n");
    for (i, rep) in reports.iter().enumerate() {
        json.push_str(rep.to_json().trim_end());
        json.push_str(if i + 1 < reports.len() { ",\n" } else { "\n" });
    }
    json.push_str("]\n");
    fs::write(r.out.join(format!("sweep_{}.json", args.axis)), json)?;
    fs::write(r.out.join("config.txt"), config::echo(&r.config))?;
    for (v, rep) in args.values.iter().zip(&reports) {
        println!("{}={v} ACC {:.4}±{:.4}", args.axis, rep.aggregate.acc.mean, rep.aggregate.acc.std);
    }
    Ok(())
}
