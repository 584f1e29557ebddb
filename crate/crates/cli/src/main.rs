//! `netprint`: extract, split, train, evaluate and predict from the command line.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use netprint::dataset::{self, train_size, CategoryMap, Dataset, SplitSpec};
use netprint::device_map::DeviceMap;
use netprint::eval;
use netprint::fingerprint::{extract_instances, ExtractionConfig, DEFAULT_WINDOW};
use netprint::forest::{load_model, save_model, ForestError, ForestParams, RandomForest};
use netprint::ingest::{self, Capture, CaptureStats};
use netprint::numfmt::format_g17;

const EXIT_FORMAT: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

/// Marks a failure that indicates a bug rather than bad input.
#[derive(Debug, thiserror::Error)]
#[error("internal error: {0}")]
struct Internal(String);

#[derive(Parser)]
#[command(
    name = "netprint",
    version,
    about = "Device fingerprinting from TCP/IPv4 packet headers"
)]
#[command(after_help = "Set NETPRINT_THREADS to cap worker threads. Output does not depend on it.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn pcap or trace-CSV captures into an instance CSV.
    Extract(ExtractArgs),
    /// Shuffle an instance CSV and split it into train and test files.
    Split(SplitArgs),
    /// Train a random forest and save it as a model file.
    Train(TrainArgs),
    /// Score a model on a labeled test file and write reports.
    Evaluate(EvaluateArgs),
    /// Predict a label for every row of an instance CSV.
    Predict(PredictArgs),
    /// Replace device labels with categories using a `device_label,category` map.
    Relabel(RelabelArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelBy {
    Device,
    Category,
}

#[derive(Args)]
struct ExtractArgs {
    /// Capture files (classic pcap or trace CSV, detected by content).
    /// Multiple files are concatenated per device in file-name order.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Device map CSV with header `mac,label` or `mac,label,category`.
    #[arg(short, long)]
    devices: PathBuf,
    /// Packets per window.
    #[arg(short, long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    /// Keep the final partial window instead of dropping it.
    #[arg(long)]
    keep_remainder: bool,
    /// Drop repeated (label, features) instances, keeping the first.
    #[arg(long)]
    dedupe: bool,
    /// Label instances by device or by the map's category column.
    #[arg(long, value_enum, default_value = "device")]
    label_by: LabelBy,
    /// Output instance CSV.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// Instance CSV to split.
    input: PathBuf,
    /// Fraction of instances that go to the training file.
    #[arg(long, default_value_t = dataset::DEFAULT_TRAIN_FRACTION)]
    fraction: f64,
    /// Shuffle seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Split each label separately so both sides keep the label mix.
    #[arg(long)]
    stratified: bool,
    #[arg(long, default_value = "train.csv")]
    train_out: PathBuf,
    #[arg(long, default_value = "test.csv")]
    test_out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training instance CSV.
    input: PathBuf,
    /// Number of trees.
    #[arg(long, default_value_t = 100)]
    trees: u32,
    /// Master seed; tree seeds are derived from it.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Features tried at each split (1 to 4).
    #[arg(long, default_value_t = 2)]
    mtry: u32,
    /// Minimum instances in each child of a split.
    #[arg(long, default_value_t = 1)]
    min_leaf: u32,
    /// Maximum tree depth (unlimited when omitted).
    #[arg(long)]
    max_depth: Option<u32>,
    /// Bootstrap sample size as a fraction of the training set.
    #[arg(long, default_value_t = 1.0)]
    bootstrap_fraction: f64,
    /// Output model file.
    #[arg(short, long, default_value = "model.nfpt")]
    output: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    model: PathBuf,
    /// Labeled test instance CSV.
    test: PathBuf,
    /// Directory for report.csv, confusion.csv and summary.txt.
    #[arg(long, default_value = "reports")]
    outdir: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    model: PathBuf,
    /// Instance CSV; its label column is ignored.
    input: PathBuf,
    /// Output CSV (`row_index,predicted_label,vote_fraction`); stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RelabelArgs {
    input: PathBuf,
    /// CSV with header `device_label,category`.
    #[arg(long)]
    map: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match panic::catch_unwind(AssertUnwindSafe(|| {
        configure_threads().and_then(|()| run(cli))
    })) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Internal>().is_some() {
                ExitCode::from(EXIT_INTERNAL)
            } else {
                ExitCode::from(EXIT_FORMAT)
            }
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("NETPRINT_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("NETPRINT_THREADS must be a positive integer, got `{value}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Internal(e.to_string()))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Extract(a) => extract(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Predict(a) => predict(a),
        Command::Relabel(a) => relabel(a),
    }
}

fn read_instances(path: &Path) -> anyhow::Result<Dataset> {
    dataset::read_instances(path).with_context(|| format!("{}", path.display()))
}

fn write_instances(ds: &Dataset, path: &Path) -> anyhow::Result<()> {
    dataset::write_instances(ds, path).with_context(|| format!("writing {}", path.display()))
}

fn is_pcap(path: &Path) -> io::Result<bool> {
    let mut magic = [0u8; 4];
    let mut file = File::open(path)?;
    let mut filled = 0;
    while filled < 4 {
        match file.read(&mut magic[filled..])? {
            0 => return Ok(false),
            n => filled += n,
        }
    }
    let m = u32::from_le_bytes(magic);
    Ok([0xa1b2c3d4, 0xa1b23c4d]
        .iter()
        .any(|&k| m == k || m == u32::swap_bytes(k)))
}

fn print_stats(name: &str, s: &CaptureStats) {
    eprintln!(
        "{name}: seen={} kept={} non_tcp_ipv4={} malformed={} filtered_out={}",
        s.packets_seen,
        s.packets_kept,
        s.packets_skipped_non_tcp_ipv4,
        s.packets_skipped_malformed,
        s.packets_filtered_out
    );
}

fn extract(a: ExtractArgs) -> anyhow::Result<()> {
    let config = ExtractionConfig {
        window_size: a.window,
        drop_remainder: !a.keep_remainder,
    };
    config.validate()?;
    let map = DeviceMap::read(&a.devices).with_context(|| format!("{}", a.devices.display()))?;
    let labels = match a.label_by {
        LabelBy::Device => map.device_labels(),
        LabelBy::Category => map
            .category_labels()
            .with_context(|| format!("{}", a.devices.display()))?,
    };
    let macs = map.macs();

    let mut inputs = a.inputs.clone();
    inputs.sort_by(|x, y| x.file_name().cmp(&y.file_name()).then_with(|| x.cmp(y)));

    let mut records = Vec::new();
    let mut total = CaptureStats::default();
    for path in &inputs {
        let shown = path.display();
        let pcap = is_pcap(path).with_context(|| format!("{shown}"))?;
        let capture: Capture = if pcap {
            ingest::ingest_pcap(path, Some(&macs))
        } else {
            ingest::ingest_trace_csv(path)
        }
        .with_context(|| format!("{shown}"))?;
        if !capture.stats.is_consistent() {
            return Err(Internal(format!(
                "{shown}: inconsistent packet accounting {:?}",
                capture.stats
            ))
            .into());
        }
        print_stats(&shown.to_string(), &capture.stats);
        total.merge(&capture.stats);
        records.extend(capture.records);
    }
    if inputs.len() > 1 {
        print_stats("total", &total);
    }

    let extraction = extract_instances(&records, &labels, &config)?;
    for d in &extraction.per_device {
        eprintln!(
            "device {} ({}): packets={} instances={}",
            d.mac, d.label, d.packets, d.instances
        );
    }
    eprintln!("unlabeled packets: {}", extraction.unlabeled_packets);

    let mut ds =
        Dataset::from_instances(extraction.instances).map_err(|e| Internal(e.to_string()))?;
    if a.dedupe {
        let (deduped, removed) = ds.dedupe();
        eprintln!("duplicates removed: {removed}");
        ds = deduped;
    }
    write_instances(&ds, &a.output)?;
    eprintln!("instances: {}", ds.len());
    Ok(())
}

fn split(a: SplitArgs) -> anyhow::Result<()> {
    let ds = read_instances(&a.input)?;
    let spec = SplitSpec {
        train_fraction: a.fraction,
        seed: a.seed,
        stratified: a.stratified,
    };
    let (train, test) = ds.split(&spec)?;
    if !a.stratified && train.len() != train_size(ds.len(), a.fraction) {
        return Err(Internal("train size disagrees with the rounding rule".into()).into());
    }
    write_instances(&train, &a.train_out)?;
    write_instances(&test, &a.test_out)?;
    eprintln!(
        "total={} train={} test={}",
        ds.len(),
        train.len(),
        test.len()
    );
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let ds = read_instances(&a.input)?;
    let params = ForestParams {
        n_trees: a.trees,
        mtry: a.mtry,
        min_leaf: a.min_leaf,
        max_depth: a.max_depth,
        bootstrap_fraction: a.bootstrap_fraction,
    };
    eprintln!(
        "training: trees={} seed={} mtry={} min_leaf={} max_depth={} bootstrap_fraction={} instances={} classes={}",
        params.n_trees,
        a.seed,
        params.mtry,
        params.min_leaf,
        params.max_depth.map_or("unlimited".to_string(), |d| d.to_string()),
        format_g17(params.bootstrap_fraction),
        ds.len(),
        ds.labels().len()
    );
    let started = Instant::now();
    let forest = RandomForest::train(&ds, &params, a.seed).map_err(|e| match e {
        ForestError::ThreadPool(m) => anyhow::Error::from(Internal(m)),
        other => other.into(),
    })?;
    eprintln!("trained in {:.3} s", started.elapsed().as_secs_f64());
    save_model(&forest, &a.output).with_context(|| format!("writing {}", a.output.display()))?;
    Ok(())
}

fn load(path: &Path) -> anyhow::Result<RandomForest> {
    load_model(path).with_context(|| format!("{}", path.display()))
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let forest = load(&a.model)?;
    let test = read_instances(&a.test)?;
    let report = eval::evaluate(&forest, &test).with_context(|| format!("{}", a.test.display()))?;
    if report.matrix.total() != report.n_test as u64 {
        return Err(Internal("confusion matrix total differs from test size".into()).into());
    }
    eval::write_reports(&report, &forest, &a.outdir)
        .with_context(|| format!("writing {}", a.outdir.display()))?;
    eprintln!(
        "accuracy={} rmse={} n_test={}",
        format_g17(report.accuracy),
        format_g17(report.rmse),
        report.n_test
    );
    Ok(())
}

fn predict(a: PredictArgs) -> anyhow::Result<()> {
    let forest = load(&a.model)?;
    let ds = read_instances(&a.input)?;
    let out: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("writing {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["row_index", "predicted_label", "vote_fraction"])?;
    let n_trees = forest.trees().len() as f64;
    for (i, x) in ds.features().iter().enumerate() {
        let votes = forest.votes(x);
        let k = forest.predict_index(x);
        let fraction = f64::from(votes[k]) / n_trees;
        wtr.write_record([
            i.to_string().as_str(),
            &forest.labels()[k],
            &format_g17(fraction),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn relabel(a: RelabelArgs) -> anyhow::Result<()> {
    let ds = read_instances(&a.input)?;
    let map = CategoryMap::read(&a.map).with_context(|| format!("{}", a.map.display()))?;
    let relabeled = ds.relabel(&map)?;
    for (label, n) in relabeled.class_counts() {
        eprintln!("{label}: {n}");
    }
    if relabeled.len() != ds.len() {
        bail!(Internal("relabel changed the instance count".into()));
    }
    write_instances(&relabeled, &a.output)
}
