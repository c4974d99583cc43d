use std::fs::File;
use std::io::{BufWriter, Read};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use carbonci::carbon::{parse_instant, synthesize_dataset, IntensityDataset, SyntheticConfig};
use carbonci::estimator::EstimatorParams;
use carbonci::scheduler::{SchedulerParams, StrategyConfig, StrategyKind, DEFAULT_SLOT_S};
use carbonci::service::{self, IntensitySource, Service, ServiceConfig};
use carbonci::simulator::{
    format_summary_table, read_summary_csv, run_simulation, synthesize_trace, write_report_dir, BufferPolicy,
    SimulationConfig, TraceConfig,
};
use carbonci::workflow::{load_trace_csv, parse_annotation, parse_job_annotations, write_trace_csv};

#[derive(Parser)]
#[command(name = "carbonci", version, about = "Carbon-aware CI/CD scheduling and trace replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a job trace under each strategy and write report files.
    Simulate(SimulateArgs),
    /// Write a synthetic intensity CSV (and optionally a job trace).
    Synth(SynthArgs),
    /// Print the carbon annotations of a workflow document as JSON.
    ParseAnnotation(ParseArgs),
    /// Run the HTTP scheduling service.
    Serve(ServeArgs),
    /// Print a summary written by `simulate`.
    Report(ReportArgs),
}

/// Settings read from the file named by `CARBONCI_CONFIG`. Keys mirror the
/// command-line flags; flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    simulate: SimulateFile,
    synth: SynthFile,
    serve: ServeFile,
    estimator: Option<EstimatorParams>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct SimulateFile {
    trace: Option<PathBuf>,
    intensity: Option<PathBuf>,
    forecast: Option<PathBuf>,
    strategies: Option<String>,
    buffers: Option<String>,
    slot_s: Option<i64>,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
    perfect_forecast: Option<bool>,
    policy: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct SynthFile {
    regions: Option<usize>,
    days: Option<f64>,
    resolution_s: Option<i64>,
    seed: Option<u64>,
    base: Option<f64>,
    amplitude: Option<f64>,
    period_h: Option<f64>,
    phase_step_h: Option<f64>,
    noise: Option<f64>,
    start: Option<String>,
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct ServeFile {
    intensity: Option<PathBuf>,
    forecast: Option<PathBuf>,
    addr: Option<String>,
    strategy: Option<String>,
    buffer_hours: Option<f64>,
    history: Option<PathBuf>,
    decision_log: Option<PathBuf>,
}

fn load_file_config() -> Result<FileConfig> {
    match std::env::var_os("CARBONCI_CONFIG") {
        None => Ok(FileConfig::default()),
        Some(path) => {
            let path = PathBuf::from(path);
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Job trace CSV (repo,workflow,start,duration_s).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Intensity CSV; rows without a kind column are actual values.
    #[arg(long)]
    intensity: Option<PathBuf>,
    /// Separate forecast CSV.
    #[arg(long)]
    forecast: Option<PathBuf>,
    /// Comma-separated: round_robin, location, location_time.
    #[arg(long)]
    strategies: Option<String>,
    /// Comma-separated buffer hours for location_time.
    #[arg(long)]
    buffers: Option<String>,
    #[arg(long)]
    slot_s: Option<i64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Plan on the actual series.
    #[arg(long)]
    perfect_forecast: bool,
    /// `uniform` (estimates equal true durations) or `annotation`.
    #[arg(long)]
    policy: Option<String>,
    /// TOML file with estimator parameters.
    #[arg(long)]
    estimator_config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    regions: Option<usize>,
    #[arg(long)]
    days: Option<f64>,
    #[arg(long)]
    resolution_s: Option<i64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    base: Option<f64>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    period_h: Option<f64>,
    #[arg(long)]
    phase_step_h: Option<f64>,
    /// Relative standard deviation of the forecast error.
    #[arg(long)]
    noise: Option<f64>,
    /// First timestamp (RFC 3339).
    #[arg(long)]
    start: Option<String>,
    /// Generator settings as TOML; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Also write a synthetic job trace here.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    jobs: usize,
    #[arg(long, default_value_t = 20)]
    workflows: usize,
}

#[derive(Args)]
struct ParseArgs {
    /// Workflow YAML file, or `-` for stdin.
    file: PathBuf,
    /// Print one entry per job instead of the merged annotation.
    #[arg(long)]
    per_job: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    intensity: Option<PathBuf>,
    #[arg(long)]
    forecast: Option<PathBuf>,
    #[arg(long)]
    addr: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    buffer_hours: Option<f64>,
    /// Append-only history CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    /// JSON lines decision log.
    #[arg(long)]
    decision_log: Option<PathBuf>,
    #[arg(long)]
    estimator_config: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by `simulate`.
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    /// Exit nonzero unless totals are ordered LTS 6h <= 3h <= 1h <= location <= round_robin.
    #[arg(long)]
    check_dominance: bool,
}

fn estimator_params(path: Option<&Path>, file: Option<EstimatorParams>) -> Result<EstimatorParams> {
    let params = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            EstimatorParams::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => file.unwrap_or_default(),
    };
    params.validate()?;
    Ok(params)
}

fn load_dataset(actual: &Path, forecast: Option<&Path>) -> Result<IntensityDataset> {
    let source = IntensitySource { actual: actual.to_path_buf(), forecast: forecast.map(Path::to_path_buf) };
    source.load().with_context(|| format!("loading intensity data from {}", actual.display()))
}

fn parse_list<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(f).collect()
}

fn strategies(kinds: &str, buffers: &str, slot_s: i64) -> Result<Vec<StrategyConfig>> {
    let buffers = parse_list(buffers, |b| b.parse::<f64>().with_context(|| format!("bad buffer {b:?}")))?;
    let mut out = Vec::new();
    for kind in parse_list(kinds, |k| StrategyKind::parse(k).with_context(|| format!("unknown strategy {k:?}")))? {
        match kind {
            StrategyKind::RoundRobin => out.push(StrategyConfig::round_robin()),
            StrategyKind::LocationShift => out.push(StrategyConfig::location_shift()),
            StrategyKind::LocationTimeShift => {
                if buffers.is_empty() {
                    bail!("location_time needs at least one buffer");
                }
                out.extend(buffers.iter().map(|b| StrategyConfig::location_time_shift(*b)));
            }
        }
    }
    let out: Vec<_> = out.into_iter().map(|s| s.with_slot_s(slot_s)).collect();
    for s in &out {
        s.validate()?;
    }
    Ok(out)
}

fn simulate(args: SimulateArgs, file: FileConfig) -> Result<()> {
    let f = file.simulate;
    let trace = args.trace.or(f.trace).context("--trace is required")?;
    let intensity = args.intensity.or(f.intensity).context("--intensity is required")?;
    let forecast = args.forecast.or(f.forecast);
    let kinds = args.strategies.or(f.strategies).unwrap_or_else(|| "round_robin,location,location_time".into());
    let buffers = args.buffers.or(f.buffers).unwrap_or_else(|| "1,3,6".into());
    let slot_s = args.slot_s.or(f.slot_s).unwrap_or(DEFAULT_SLOT_S);
    let out_dir = args.out_dir.or(f.out_dir).unwrap_or_else(|| "results".into());
    let seed = args.seed.or(f.seed).unwrap_or(0);
    let perfect = args.perfect_forecast || f.perfect_forecast.unwrap_or(false);
    let policy = match args.policy.or(f.policy).as_deref().unwrap_or("uniform") {
        "uniform" => BufferPolicy::UniformBuffer,
        "annotation" => BufferPolicy::AnnotationDriven,
        other => bail!("unknown policy {other:?} (expected uniform or annotation)"),
    };

    let jobs = load_trace_csv(&trace).with_context(|| format!("loading trace {}", trace.display()))?;
    let mut dataset = load_dataset(&intensity, forecast.as_deref())?;
    if perfect {
        dataset = dataset.with_perfect_forecast();
    }
    let mut config = SimulationConfig::new(strategies(&kinds, &buffers, slot_s)?, dataset, jobs);
    config.buffer_policy = policy;
    config.seed = seed;
    config.params = SchedulerParams {
        estimator: estimator_params(args.estimator_config.as_deref(), file.estimator)?,
        ..SchedulerParams::default()
    };

    let report = run_simulation(&config)?;
    write_report_dir(&report, &out_dir)?;
    print!("{}", format_summary_table(&report.summary_rows()));
    for s in &report.strategies {
        if s.coverage_gap_count > 0 {
            log::warn!("{}: {} jobs ran partly outside intensity coverage", s.label, s.coverage_gap_count);
        }
    }
    eprintln!("wrote {}", out_dir.display());
    Ok(())
}

fn synth(args: SynthArgs, file: FileConfig) -> Result<()> {
    let f = file.synth;
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SyntheticConfig::from_toml(&text)?
        }
        None => SyntheticConfig::default(),
    };
    if let Some(v) = args.regions.or(f.regions) {
        cfg.regions = v;
    }
    if let Some(v) = args.days.or(f.days) {
        cfg.days = v;
    }
    if let Some(v) = args.resolution_s.or(f.resolution_s) {
        cfg.resolution_s = v;
    }
    if let Some(v) = args.seed.or(f.seed) {
        cfg.seed = v;
    }
    if let Some(v) = args.base.or(f.base) {
        cfg.base = vec![v];
    }
    if let Some(v) = args.amplitude.or(f.amplitude) {
        cfg.amplitude = v;
    }
    if let Some(v) = args.period_h.or(f.period_h) {
        cfg.period_h = v;
    }
    if let Some(v) = args.phase_step_h.or(f.phase_step_h) {
        cfg.phase_step_h = v;
    }
    if let Some(v) = args.noise.or(f.noise) {
        cfg.noise = v;
    }
    if let Some(s) = args.start.or(f.start) {
        cfg.start = parse_instant(&s).with_context(|| format!("bad --start {s:?}"))?;
    }

    let dataset = synthesize_dataset(&cfg)?;
    match args.out.or(f.out) {
        Some(path) => {
            let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            dataset.write_csv(BufWriter::new(file))?;
        }
        None => dataset.write_csv(std::io::stdout().lock())?,
    }

    if let Some(path) = args.trace_out {
        let (start, end) = dataset.coverage_secs();
        let trace = synthesize_trace(&TraceConfig {
            jobs: args.jobs,
            workflows: args.workflows,
            start: cfg.start,
            // leave room for the longest job plus buffer before coverage ends
            span_s: (end - start - 8 * 3600).max(3600),
            seed: cfg.seed,
            ..TraceConfig::default()
        });
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_trace_csv(BufWriter::new(file), &trace)?;
    }
    Ok(())
}

fn parse_annotation_cmd(args: ParseArgs) -> Result<()> {
    let mut text = String::new();
    if args.file.as_os_str() == "-" {
        std::io::stdin().read_to_string(&mut text)?;
    } else {
        text = std::fs::read_to_string(&args.file).with_context(|| format!("reading {}", args.file.display()))?;
    }
    let json = if args.per_job {
        let jobs = parse_job_annotations(&text)?;
        let map: serde_json::Map<String, serde_json::Value> = jobs
            .into_iter()
            .map(|(name, a)| Ok((name, serde_json::to_value(a)?)))
            .collect::<Result<_>>()?;
        serde_json::Value::Object(map)
    } else {
        serde_json::to_value(parse_annotation(&text)?)?
    };
    println!("{}", serde_json::to_string_pretty(&json)?);
    Ok(())
}

fn serve(args: ServeArgs, file: FileConfig) -> Result<()> {
    let f = file.serve;
    let intensity = args.intensity.or(f.intensity).context("--intensity is required")?;
    let forecast = args.forecast.or(f.forecast);
    let addr: SocketAddr = args
        .addr
        .or(f.addr)
        .unwrap_or_else(|| "127.0.0.1:8080".into())
        .parse()
        .context("bad --addr")?;
    let kind = args.strategy.or(f.strategy).unwrap_or_else(|| "location_time".into());
    let kind = StrategyKind::parse(&kind).with_context(|| format!("unknown strategy {kind:?}"))?;
    let strategy = match kind {
        StrategyKind::RoundRobin => StrategyConfig::round_robin(),
        StrategyKind::LocationShift => StrategyConfig::location_shift(),
        StrategyKind::LocationTimeShift => {
            StrategyConfig::location_time_shift(args.buffer_hours.or(f.buffer_hours).unwrap_or(3.0))
        }
    };

    let dataset = load_dataset(&intensity, forecast.as_deref())?;
    let config = ServiceConfig {
        strategy,
        regions: None,
        params: SchedulerParams {
            estimator: estimator_params(args.estimator_config.as_deref(), file.estimator)?,
            ..SchedulerParams::default()
        },
        history_path: args.history.or(f.history),
        decision_log: args.decision_log.or(f.decision_log),
        source: Some(IntensitySource { actual: intensity, forecast }),
    };
    let svc = Arc::new(Service::new(config, dataset)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(svc, addr))?;
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let path = args.out_dir.join("summary.csv");
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let rows = read_summary_csv(file)?;
    print!("{}", format_summary_table(&rows));
    if args.check_dominance {
        let total = |label: &str| {
            rows.iter()
                .find(|r| r.strategy == label)
                .map(|r| r.total_reu)
                .with_context(|| format!("summary has no {label} row"))
        };
        let chain = ["location_time_6h", "location_time_3h", "location_time_1h", "location", "round_robin"];
        let totals = chain.iter().map(|l| total(l)).collect::<Result<Vec<_>>>()?;
        // totals are written with six decimals
        if let Some(i) = (1..totals.len()).find(|&i| totals[i - 1] > totals[i] + 1e-6) {
            bail!("{} ({}) exceeds {} ({})", chain[i - 1], totals[i - 1], chain[i], totals[i]);
        }
        println!("dominance ordering holds");
    }
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let file = load_file_config()?;
    match cli.command {
        Command::Simulate(a) => simulate(a, file),
        Command::Synth(a) => synth(a, file),
        Command::ParseAnnotation(a) => parse_annotation_cmd(a),
        Command::Serve(a) => serve(a, file),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
