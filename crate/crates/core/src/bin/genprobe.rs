use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use genprobe::families::{
    grid_family, synth_family, train_toy, FamilyError, GridSpec, Link, SpectrumFamilySpec, ToyTrainConfig,
};
use genprobe::metrics::{MetricId, MetricKind, MetricsError};
use genprobe::pipeline::{evaluate, probe_container, EvaluateOptions, PipelineError};
use genprobe::stats::Target;
use genprobe::{threads_from_env, Probe};

const EXIT_FAILURE: u8 = 1;
const EXIT_FORMAT: u8 = 2;
const EXIT_NO_LAYERS: u8 = 3;
const EXIT_TOO_MANY_FAILURES: u8 = 4;

#[derive(Parser)]
#[command(name = "genprobe", version, about = "Spectral generalization metrics from saved weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer and model-level metrics of one container.
    Probe(ProbeArgs),
    /// Grouped rank correlations of metrics with accuracies over a manifest.
    Evaluate(EvaluateArgs),
    /// Synthetic family with power-law spectra and a planted accuracy link.
    Synth(SynthArgs),
    /// Train one toy MLP, saving weights after every epoch.
    TrainToy(TrainToyArgs),
    /// Train a hyperparameter grid of toy MLPs.
    Grid(GridArgs),
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    lrf: bool,
    /// Comma-separated model-level metric ids, default all.
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<MetricKindArg>,
    #[arg(long, conflicts_with = "csv")]
    json: bool,
    #[arg(long)]
    csv: bool,
    /// Write to this file instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated grouping keys (record fields or hyperparameters).
    #[arg(long, value_delimiter = ',')]
    group_by: Vec<String>,
    /// Comma-separated metric ids, `lrf.` prefix allowed; default all.
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
    /// Comma-separated targets: test_accuracy, generalization_gap.
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
    #[arg(long)]
    lrf: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n_models: usize,
    /// Comma-separated `ROWSxCOLS` layer shapes.
    #[arg(long, value_delimiter = ',', default_value = "32x48,48x48,48x16")]
    layer_shapes: Vec<String>,
    #[arg(long, default_value_t = 0.3)]
    decay_min: f64,
    #[arg(long, default_value_t = 1.5)]
    decay_max: f64,
    /// linear, neg-linear, quadratic or noisy:SIGMA.
    #[arg(long, default_value = "linear")]
    link: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ToyFlags {
    #[arg(long)]
    data_seed: u64,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 30)]
    epochs: u32,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 2048)]
    n_train: usize,
    #[arg(long, default_value_t = 2048)]
    n_test: usize,
    #[arg(long, default_value_t = 2.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.1)]
    init_gain: f64,
}

impl ToyFlags {
    fn config(&self, init_seed: u64) -> ToyTrainConfig {
        ToyTrainConfig {
            hidden: self.hidden,
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            n_train: self.n_train,
            n_test: self.n_test,
            separation: self.separation,
            init_gain: self.init_gain,
            data_seed: self.data_seed,
            init_seed,
        }
    }
}

#[derive(Args)]
struct TrainToyArgs {
    #[command(flatten)]
    toy: ToyFlags,
    #[arg(long)]
    init_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    toy: ToyFlags,
    /// Comma-separated initialization seeds, one model per seed and cell.
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "0.001,0.003,0.01,0.03,0.1")]
    lrs: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.0001,0.001")]
    wds: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "24,32")]
    widths: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy)]
struct MetricKindArg(MetricKind);

impl std::str::FromStr for MetricKindArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricKind::ALL
            .iter()
            .find(|k| k.id() == s)
            .map(|&k| MetricKindArg(k))
            .ok_or_else(|| format!("unknown metric {s:?}; expected one of SQ_p, E_L2, F_p, S_p"))
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::Store(s) => Failure::new(EXIT_FORMAT, format!("{}: {s}", s.kind())),
            PipelineError::Metrics(MetricsError::NoProbeableLayers) => Failure::new(EXIT_NO_LAYERS, e.to_string()),
            PipelineError::TooManyFailures { .. } => Failure::new(EXIT_TOO_MANY_FAILURES, e.to_string()),
            _ => Failure::new(EXIT_FAILURE, e.to_string()),
        }
    }
}

impl From<FamilyError> for Failure {
    fn from(e: FamilyError) -> Self {
        match &e {
            FamilyError::Store(s) => Failure::new(EXIT_FORMAT, format!("{}: {s}", s.kind())),
            _ => Failure::new(EXIT_FAILURE, e.to_string()),
        }
    }
}

fn io_failure(e: std::io::Error) -> Failure {
    Failure::new(EXIT_FAILURE, format!("I/O error: {e}"))
}

fn probe_document(probe: &Probe, kinds: &[MetricKind], lrf: bool) -> Value {
    let model: Map<String, Value> = kinds
        .iter()
        .map(|&k| (MetricId::new(k, lrf).to_string(), json!(probe.model.value(k))))
        .collect();
    json!({
        "layers": probe.layers,
        "model": model,
        "depth": probe.model.depth,
        "lrf_applied": lrf,
    })
}

fn probe_csv(probe: &Probe, kinds: &[MetricKind], lrf: bool) -> Result<String, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Failure::new(EXIT_FAILURE, e.to_string());
    w.write_record(["scope", "name", "metric", "value"]).map_err(fail)?;
    for l in &probe.layers {
        for (m, v) in [("sq", l.sq), ("er", l.er), ("fro", l.fro), ("spec", l.spec)] {
            w.write_record(["layer", l.layer_name.as_str(), m, &format!("{v:?}")]).map_err(fail)?;
        }
    }
    for &k in kinds {
        let id = MetricId::new(k, lrf).to_string();
        w.write_record(["model", "", id.as_str(), &format!("{:?}", probe.model.value(k))])
            .map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))
}

fn cmd_probe(a: ProbeArgs) -> Result<(), Failure> {
    let probe = probe_container(&a.weights, a.lrf)?;
    let kinds: Vec<MetricKind> = if a.metrics.is_empty() {
        MetricKind::ALL.to_vec()
    } else {
        a.metrics.iter().map(|m| m.0).collect()
    };
    let text = if a.csv {
        probe_csv(&probe, &kinds, a.lrf)?
    } else {
        let doc = probe_document(&probe, &kinds, a.lrf);
        let mut s = serde_json::to_string_pretty(&doc).map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
        s.push('\n');
        s
    };
    match a.output {
        Some(path) => fs::write(path, text).map_err(io_failure),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let bad = |m: String| Failure::new(EXIT_FAILURE, m);
    let mut opts = EvaluateOptions::new(&a.manifest, &a.out);
    opts.group_by = a.group_by.into_iter().filter(|k| !k.is_empty()).collect();
    if !a.metrics.is_empty() {
        opts.metrics = a
            .metrics
            .iter()
            .map(|m| m.parse::<MetricId>().map_err(|e| bad(e.to_string())))
            .collect::<Result<_, _>>()?;
    }
    if !a.targets.is_empty() {
        opts.targets = a
            .targets
            .iter()
            .map(|t| t.parse::<Target>().map_err(|e| bad(e.to_string())))
            .collect::<Result<_, _>>()?;
    }
    opts.lrf = a.lrf;
    opts.threads = threads_from_env();
    let bundle = evaluate(&opts)?;
    eprintln!(
        "{} records ({} failed), {} correlation cells, {} skipped; wrote {}",
        bundle.records,
        bundle.failed,
        bundle.correlations.cells.len(),
        bundle.correlations.skipped.len(),
        bundle.correlations_csv.display()
    );
    Ok(())
}

fn parse_shape(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::new(EXIT_FAILURE, format!("layer shape {s:?} is not ROWSxCOLS"));
    let (r, c) = s.split_once('x').ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

fn cmd_synth(a: SynthArgs) -> Result<(), Failure> {
    let spec = SpectrumFamilySpec {
        n_models: a.n_models,
        layer_shapes: a.layer_shapes.iter().map(|s| parse_shape(s)).collect::<Result<_, _>>()?,
        decay_range: (a.decay_min, a.decay_max),
        link: a.link.parse::<Link>()?,
        seed: a.seed,
    };
    let manifest = synth_family(&spec, &a.out)?;
    eprintln!("wrote {}", manifest.display());
    Ok(())
}

fn cmd_train_toy(a: TrainToyArgs) -> Result<(), Failure> {
    let records = match train_toy(&a.toy.config(a.init_seed), &a.out) {
        Ok(r) => r,
        Err(FamilyError::DivergenceDetected { epoch, records }) => {
            return Err(Failure::new(
                EXIT_FAILURE,
                format!("training diverged in epoch {epoch} after {} saved epochs", records.len()),
            ))
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(last) = records.last() {
        eprintln!(
            "{} epochs; final train {:.4}, test {:.4}",
            records.len(),
            last.train_accuracy,
            last.test_accuracy
        );
    }
    Ok(())
}

fn cmd_grid(a: GridArgs) -> Result<(), Failure> {
    let spec = GridSpec {
        lrs: a.lrs,
        wds: a.wds,
        widths: a.widths,
        seeds: a.seeds,
        base: a.toy.config(0),
    };
    let outcome = grid_family(&spec, &a.out, threads_from_env())?;
    for (id, err) in &outcome.failed {
        eprintln!("cell {id}: {err}");
    }
    eprintln!("{} records; wrote {}", outcome.records, outcome.manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Probe(a) => cmd_probe(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Synth(a) => cmd_synth(a),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::Grid(a) => cmd_grid(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
