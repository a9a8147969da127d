//! Command-line front end: `simulate`, `verify`, `quantize`, `report`.
//!
//! Every run is driven by a TOML configuration plus three overrides
//! (`--seed`, `--threads`, `--out`); there are no environment-variable
//! knobs, so the archived `config.toml` in the output directory is the
//! whole story. Persisted artifacts are deterministic functions of the
//! configuration and seed — wall-clock timing is printed, never written.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{
    bench_fedavg_uq, bench_qat_convergence, check_error_bounds, check_unbiasedness, BenchError,
    BenchReport, ErrorBoundConfig, FedBenchConfig, QatBenchConfig, UnbiasednessConfig,
};
use crate::codec::{
    encode, ClipParam, CodecError, Fp8Format, QuantStats, QuantizedTensor, RoundingMode,
};
use crate::config::{parse_config, ConfigError, RunConfig, SourceChoice};
use crate::data::{
    load_csv, partition, synth_classification, train_test_split, DataError, Dataset,
};
use crate::fed::{clients_from_partition, run_simulation, FedError};
use crate::metrics::{compute_gain, MetricsError, RoundLedger};
use crate::qat::QatError;
use crate::rng::{purpose, substream};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Qat(#[from] QatError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("failed {action} {path}: {source}")]
    Io {
        action: &'static str,
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    BadTensor { path: String, line: usize, reason: String },
}

/// Federated training with one-byte floating-point links.
#[derive(Debug, Parser)]
#[command(name = "fp8fed", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the federated loop and archive metrics, summary, and config.
    Simulate(CommonArgs),
    /// Run the built-in statistical and convergence checks
    /// (fixed internal seeds; exit 0 only if every check passes).
    Verify(CommonArgs),
    /// Compress a numeric CSV into a one-byte-per-element tensor blob,
    /// or decode such a blob back to CSV with --decode.
    Quantize(QuantizeArgs),
    /// Compare finished runs: bytes-to-accuracy gain of each run
    /// against the first (baseline) run.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Configuration file; every key is optional and defaults apply.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override the configured RNG seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Override the configured worker thread count.
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
    /// Override the configured output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RoundingChoice {
    /// Nearest grid point.
    Det,
    /// Unbiased stochastic rounding.
    Rand,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Input file: numeric CSV (encode) or tensor blob (--decode).
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Output file: tensor blob (encode) or numeric CSV (--decode).
    #[arg(long, value_name = "PATH")]
    pub output: PathBuf,
    /// Clipping magnitude: the largest representable value.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 4)]
    pub exp_bits: u32,
    #[arg(long, default_value_t = 3)]
    pub man_bits: u32,
    /// Rounding mode for encoding.
    #[arg(long, value_enum, default_value_t = RoundingChoice::Det)]
    pub mode: RoundingChoice,
    /// Seed for stochastic rounding draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Decode a blob back to CSV instead of encoding.
    #[arg(long)]
    pub decode: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories; the first is the baseline the others are
    /// compared against. Each must contain a metrics.csv.
    #[arg(value_name = "RUN_DIR", num_args = 2..)]
    pub runs: Vec<PathBuf>,
    /// Directory for the gain files; defaults to each compared run's
    /// own directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Dispatch a parsed command line; the returned code is the process
/// exit status.
pub fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(&load_config(&args)?),
        Command::Verify(args) => cmd_verify(&load_config(&args)?),
        Command::Quantize(args) => cmd_quantize(&args),
        Command::Report(args) => cmd_report(&args),
    }
}

/// Parse the configuration (or start from defaults), apply the
/// command-line overrides, and re-validate the result.
fn load_config(args: &CommonArgs) -> Result<RunConfig, CliError> {
    let (mut cfg, origin) = match &args.config {
        Some(path) => (parse_config(path)?, path.display().to_string()),
        None => (RunConfig::default(), "<defaults>".to_string()),
    };
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(threads) = args.threads {
        cfg.run.threads = threads;
    }
    if let Some(out) = &args.out {
        cfg.run.out = Some(out.clone());
    }
    cfg.validate(&origin)?;
    Ok(cfg)
}

fn build_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match cfg.data.source {
        SourceChoice::Synthetic => Ok(synth_classification(
            cfg.data.classes,
            cfg.data.dims,
            cfg.data.samples,
            cfg.data.separation,
            cfg.run.seed,
        )?),
        SourceChoice::Csv => {
            let path = cfg.data.path.as_ref().expect("validated: csv source has a path");
            Ok(load_csv(path)?)
        }
    }
}

fn default_out_dir(cfg: &RunConfig, task: &str) -> PathBuf {
    match &cfg.run.out {
        Some(dir) => dir.clone(),
        None => PathBuf::from(format!("runs/{task}-{}-s{}", cfg.method_label(), cfg.run.seed)),
    }
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<i32, CliError> {
    let ds = build_dataset(cfg)?;
    let (train, eval) = train_test_split(&ds, cfg.data.test_fraction, cfg.run.seed)?;
    let shards = partition(&train, &cfg.partition_spec())?;
    let clients = clients_from_partition(&train, &shards);
    let spec = cfg.model_spec(train.features.ncols(), train.classes)?;
    let fed_cfg = cfg.fed_config();
    let (_state, ledger, summary) = run_simulation(&spec, &clients, &eval, &fed_cfg)?;

    let mut pairs: Vec<(String, String)> = vec![
        ("method".into(), cfg.method_label().into()),
        ("rounds".into(), format!("{}", ledger.len())),
        ("clients".into(), format!("{}", clients.len())),
        ("final_accuracy".into(), format!("{}", summary.final_acc)),
        ("final_loss".into(), format!("{}", summary.final_loss)),
        ("total_bytes".into(), format!("{}", ledger.total_bytes())),
        ("max_quant_step".into(), format!("{}", summary.max_step_seen)),
        ("saturated_fraction".into(), format!("{}", summary.saturated_fraction)),
    ];
    if !summary.server_opt.is_empty() {
        let n = summary.server_opt.len() as f64;
        let mean_gain: f64 =
            summary.server_opt.iter().map(|t| t.baseline_mse - t.mse).sum::<f64>() / n;
        let fallbacks = summary.server_opt.iter().filter(|t| t.fell_back).count();
        pairs.push(("server_opt_mean_mse_gain".into(), format!("{mean_gain}")));
        pairs.push(("server_opt_fallback_rounds".into(), format!("{fallbacks}")));
    }

    let out_dir = default_out_dir(cfg, "simulate");
    let written =
        crate::metrics::persist_run(&out_dir, &cfg.to_toml(), &[("metrics", &ledger)], &pairs)?;

    for (k, v) in &pairs {
        println!("{k}: {v}");
    }
    println!("wall_ms: {} (not archived)", summary.total_wall_ms);
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(0)
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<i32, CliError> {
    let fmt = cfg.fp8_format()?;
    let mut report = BenchReport::default();
    report.merge(check_unbiasedness(fmt, &UnbiasednessConfig::default())?);
    report.merge(check_error_bounds(fmt, &ErrorBoundConfig::default())?);
    report.merge(bench_qat_convergence(&QatBenchConfig::default())?);
    report.merge(bench_fedavg_uq(&FedBenchConfig::default())?);

    for line in report.summary_lines() {
        println!("{line}");
    }

    if cfg.run.out.is_some() {
        let out_dir = default_out_dir(cfg, "verify");
        std::fs::create_dir_all(&out_dir).map_err(|source| CliError::Io {
            action: "creating",
            path: out_dir.display().to_string(),
            source,
        })?;
        let checks_path = out_dir.join("checks.txt");
        let mut text = String::new();
        for line in report.summary_lines() {
            text.push_str(&line);
            text.push('\n');
        }
        write_text(&checks_path, &text)?;
        println!("wrote {}", checks_path.display());
        for series in &report.series {
            let path = out_dir.join(format!("{}.csv", series.name));
            write_text(&path, &series.to_csv())?;
            println!("wrote {}", path.display());
        }
    }

    if report.all_pass() {
        Ok(0)
    } else {
        let failing: Vec<_> = report.checks.iter().filter(|c| !c.pass).collect();
        eprintln!("{} of {} checks failed:", failing.len(), report.checks.len());
        for c in failing {
            eprintln!("  {}", c.line());
        }
        Ok(1)
    }
}

pub fn cmd_quantize(args: &QuantizeArgs) -> Result<i32, CliError> {
    if args.decode {
        let bytes = std::fs::read(&args.input).map_err(|source| CliError::Io {
            action: "reading",
            path: args.input.display().to_string(),
            source,
        })?;
        let tensor = QuantizedTensor::from_bytes(&bytes)?;
        let values = tensor.decode()?;
        write_text(&args.output, &values_to_csv(&values, tensor.shape()))?;
        println!(
            "decoded {} values, shape {:?}, E{}M{}, alpha {}",
            values.len(),
            tensor.shape(),
            tensor.format().exp_bits(),
            tensor.format().man_bits(),
            tensor.clip().alpha()
        );
        return Ok(0);
    }

    let (values, shape) = read_tensor_csv(&args.input)?;
    let fmt = Fp8Format::new(args.exp_bits, args.man_bits)?;
    let clip = ClipParam::new(args.alpha)?;
    let mode = match args.mode {
        RoundingChoice::Det => RoundingMode::Deterministic,
        RoundingChoice::Rand => RoundingMode::Stochastic,
    };
    let mut rng = substream(args.seed, 0, 0, purpose::UPLINK);
    let mut stats = QuantStats::default();
    let tensor = encode(&values, &shape, fmt, clip, mode, &mut rng, &mut stats)?;
    let blob = tensor.to_bytes();
    std::fs::write(&args.output, &blob).map_err(|source| CliError::Io {
        action: "writing",
        path: args.output.display().to_string(),
        source,
    })?;
    println!(
        "encoded {} values into {} bytes ({} saturated, max step {})",
        stats.elements,
        blob.len(),
        stats.saturated,
        stats.max_step
    );
    Ok(0)
}

pub fn cmd_report(args: &ReportArgs) -> Result<i32, CliError> {
    let base_dir = &args.runs[0];
    let base = read_run_ledger(base_dir)?;
    let base_name = dir_label(base_dir);
    for test_dir in &args.runs[1..] {
        let test = read_run_ledger(test_dir)?;
        let gain = compute_gain(&base, &test)?;
        println!("{} vs {}:", dir_label(test_dir), base_name);
        let mut text = String::new();
        for (k, v) in gain.summary_lines() {
            println!("  {k}: {v}");
            text.push_str(&format!("{k}: {v}\n"));
        }
        let out_dir = args.out.as_ref().unwrap_or(test_dir);
        std::fs::create_dir_all(out_dir).map_err(|source| CliError::Io {
            action: "creating",
            path: out_dir.display().to_string(),
            source,
        })?;
        let name = if args.out.is_some() {
            format!("gain-{}-vs-{}.txt", dir_label(test_dir), base_name)
        } else {
            format!("gain-vs-{base_name}.txt")
        };
        let path = out_dir.join(name);
        write_text(&path, &text)?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn dir_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string())
}

fn read_run_ledger(dir: &Path) -> Result<RoundLedger, CliError> {
    let path = dir.join("metrics.csv");
    let text = std::fs::read_to_string(&path).map_err(|source| CliError::Io {
        action: "reading",
        path: path.display().to_string(),
        source,
    })?;
    Ok(RoundLedger::from_csv(&text)?)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        action: "writing",
        path: path.display().to_string(),
        source,
    })
}

/// Parse a headerless numeric CSV into row-major values plus shape:
/// one column gives a vector, anything wider a matrix.
fn read_tensor_csv(path: &Path) -> Result<(Vec<f64>, Vec<usize>), CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        action: "reading",
        path: path.display().to_string(),
        source,
    })?;
    let pathname = path.display().to_string();
    let mut values = Vec::new();
    let mut width: Option<usize> = None;
    let mut rows = 0usize;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(CliError::BadTensor {
                    path: pathname,
                    line: idx + 1,
                    reason: format!("expected {w} fields, found {}", fields.len()),
                });
            }
            Some(_) => {}
        }
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| CliError::BadTensor {
                path: pathname.clone(),
                line: idx + 1,
                reason: format!("bad numeric field {:?}", f.trim()),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(CliError::BadTensor {
            path: pathname,
            line: 1,
            reason: "no numeric rows".into(),
        });
    }
    let w = width.unwrap();
    let shape = if w == 1 { vec![rows] } else { vec![rows, w] };
    Ok((values, shape))
}

/// Render decoded values as CSV, one row per leading-dimension slice
/// for matrices and one value per line otherwise.
fn values_to_csv(values: &[f64], shape: &[usize]) -> String {
    let mut out = String::new();
    if shape.len() == 2 && shape[1] > 0 {
        for row in values.chunks(shape[1]) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
    } else {
        for v in values {
            out.push_str(&format!("{v}\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    fn common(config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> CommonArgs {
        CommonArgs {
            config: config.map(Path::to_path_buf),
            seed,
            threads: None,
            out: out.map(Path::to_path_buf),
        }
    }

    #[test]
    fn overrides_beat_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[run]\nseed = 3\nthreads = 2\n").unwrap();
        let args = CommonArgs {
            config: Some(path),
            seed: Some(99),
            threads: Some(1),
            out: Some(dir.path().join("somewhere")),
        };
        let cfg = load_config(&args).unwrap();
        assert_eq!(cfg.run.seed, 99);
        assert_eq!(cfg.run.threads, 1);
        assert_eq!(cfg.run.out.as_deref(), Some(dir.path().join("somewhere").as_path()));
        // Overrides are validated like file values.
        let args = common(None, None, None);
        let bad = CommonArgs { threads: Some(0), ..args };
        assert!(matches!(load_config(&bad), Err(CliError::Config(_))));
    }

    #[test]
    fn quantize_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.csv");
        let blob = dir.path().join("out.fp8");
        let decoded = dir.path().join("back.csv");
        let blob2 = dir.path().join("again.fp8");
        std::fs::write(&input, "0.5,-0.25,0.1\n1.5,0.0,-0.9\n").unwrap();

        let enc = QuantizeArgs {
            input: input.clone(),
            output: blob.clone(),
            alpha: 1.0,
            exp_bits: 4,
            man_bits: 3,
            mode: RoundingChoice::Det,
            seed: 0,
            decode: false,
        };
        assert_eq!(cmd_quantize(&enc).unwrap(), 0);

        let dec = QuantizeArgs {
            input: blob.clone(),
            output: decoded.clone(),
            decode: true,
            ..enc
        };
        assert_eq!(cmd_quantize(&dec).unwrap(), 0);

        // Values already on the grid re-encode to the identical blob.
        let enc2 = QuantizeArgs {
            input: decoded.clone(),
            output: blob2.clone(),
            alpha: 1.0,
            exp_bits: 4,
            man_bits: 3,
            mode: RoundingChoice::Det,
            seed: 0,
            decode: false,
        };
        assert_eq!(cmd_quantize(&enc2).unwrap(), 0);
        assert_eq!(std::fs::read(&blob).unwrap(), std::fs::read(&blob2).unwrap());

        // The decoded text keeps the matrix shape, and saturation
        // clamped the out-of-range value to the clip.
        let text = std::fs::read_to_string(&decoded).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: f64 = text.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
        assert_eq!(first, 1.0);
    }

    #[test]
    fn quantize_rejects_ragged_and_empty_input() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("bad.csv");
        std::fs::write(&input, "1.0,2.0\n3.0\n").unwrap();
        let args = QuantizeArgs {
            input: input.clone(),
            output: dir.path().join("out.fp8"),
            alpha: 1.0,
            exp_bits: 4,
            man_bits: 3,
            mode: RoundingChoice::Det,
            seed: 0,
            decode: false,
        };
        let err = cmd_quantize(&args).unwrap_err();
        assert!(matches!(err, CliError::BadTensor { line: 2, .. }), "{err}");

        std::fs::write(&input, "\n\n").unwrap();
        let err = cmd_quantize(&args).unwrap_err();
        assert!(matches!(err, CliError::BadTensor { .. }), "{err}");
    }

    #[test]
    fn simulate_writes_a_complete_deterministic_run_dir() {
        let dir = tempfile::tempdir().unwrap();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let text = "[run]\nrounds = 3\n\n[model]\nhidden = []\n\n\
                    [data]\nclasses = 3\ndims = 6\nsamples = 120\n\n\
                    [federated]\nclients = 6\nparticipation = 0.5\nlocal_steps = 2\nbatch_size = 8\n";
        let mut cfg = parse_config_str(text, "<test>").unwrap();
        cfg.run.out = Some(out_a.clone());
        cfg.validate("<test>").unwrap();
        assert_eq!(cmd_simulate(&cfg).unwrap(), 0);

        for name in ["config.toml", "metrics.csv", "summary.txt"] {
            assert!(out_a.join(name).exists(), "missing {name}");
        }
        // The archived config reproduces the effective one.
        let archived = parse_config(&out_a.join("config.toml")).unwrap();
        assert_eq!(archived, cfg);
        // The metrics parse back and cover every round.
        let ledger =
            RoundLedger::from_csv(&std::fs::read_to_string(out_a.join("metrics.csv")).unwrap())
                .unwrap();
        assert_eq!(ledger.len(), 3);
        // Same seed, fresh run: byte-identical metrics and summary.
        cfg.run.out = Some(out_b.clone());
        assert_eq!(cmd_simulate(&cfg).unwrap(), 0);
        assert_eq!(
            std::fs::read(out_a.join("metrics.csv")).unwrap(),
            std::fs::read(out_b.join("metrics.csv")).unwrap()
        );
        assert_eq!(
            std::fs::read(out_a.join("summary.txt")).unwrap(),
            std::fs::read(out_b.join("summary.txt")).unwrap()
        );
    }

    #[test]
    fn report_compares_runs_and_writes_gain_files() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |name: &str, bytes: u64| {
            let mut ledger = RoundLedger::new();
            for r in 1..=30 {
                ledger
                    .record_round(crate::metrics::RoundEntry {
                        round: r,
                        uplink_bytes: bytes,
                        downlink_bytes: bytes,
                        eval_acc: if r < 20 { 0.3 } else { 0.9 },
                        eval_loss: 0.5,
                        wall_ms: 0,
                    })
                    .unwrap();
            }
            let d = dir.path().join(name);
            std::fs::create_dir_all(&d).unwrap();
            std::fs::write(d.join("metrics.csv"), ledger.to_csv()).unwrap();
            d
        };
        let base = mk("fp32", 4000);
        let test = mk("uq", 1000);
        let args = ReportArgs { runs: vec![base, test.clone()], out: None };
        assert_eq!(cmd_report(&args).unwrap(), 0);
        let gain_file = test.join("gain-vs-fp32.txt");
        let text = std::fs::read_to_string(&gain_file).unwrap();
        assert!(text.contains("gain: 4"), "{text}");
    }

    #[test]
    fn report_propagates_broken_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full");
        std::fs::create_dir_all(&full).unwrap();
        let mut ledger = RoundLedger::new();
        for r in 1..=10 {
            ledger
                .record_round(crate::metrics::RoundEntry {
                    round: r,
                    uplink_bytes: 10,
                    downlink_bytes: 10,
                    eval_acc: 0.9,
                    eval_loss: 0.5,
                    wall_ms: 0,
                })
                .unwrap();
        }
        std::fs::write(full.join("metrics.csv"), ledger.to_csv()).unwrap();

        // A run that recorded nothing cannot anchor a gain.
        let empty = dir.path().join("empty");
        std::fs::create_dir_all(&empty).unwrap();
        std::fs::write(empty.join("metrics.csv"), RoundLedger::new().to_csv()).unwrap();
        let args = ReportArgs { runs: vec![full.clone(), empty], out: None };
        let err = cmd_report(&args).unwrap_err();
        assert!(matches!(err, CliError::Metrics(MetricsError::Empty { .. })), "{err}");

        // A directory without metrics at all fails with the path.
        let missing = dir.path().join("missing");
        std::fs::create_dir_all(&missing).unwrap();
        let args = ReportArgs { runs: vec![full, missing], out: None };
        let err = cmd_report(&args).unwrap_err();
        assert!(matches!(err, CliError::Io { .. }), "{err}");
        assert!(err.to_string().contains("metrics.csv"), "{err}");
    }
}
