//! Command-line front end. Every command parses its inputs, makes the
//! corresponding library call and writes the result plus a JSON manifest from
//! which the run can be replayed.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::Error;
use crate::init::GpKernel;
use crate::measures::{Bandwidth, MeasureKind};
use crate::metrics::md_index;
use crate::optimizer::{estimate_ica, InitStrategy, OptimizerConfig, Scheme};
use crate::simgen::{mean_stderr, run_trials, Estimator, Model, ModelSpec, SourceSpec, TrialRecord};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "mdmica", version, about = "ICA by minimizing mutual dependence measures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", content = "args", rename_all = "kebab-case")]
pub enum Command {
    /// Evaluate a dependence measure on the columns of a CSV file.
    Measure(MeasureArgs),
    /// Estimate independent components of a CSV file.
    Ica(IcaArgs),
    /// Run a simulation study and write a table of per-trial and aggregate rows.
    Benchmark(BenchmarkArgs),
    /// Score an unmixing estimate against a reference.
    Md(MdArgs),
    /// Re-run a command from a manifest written by an earlier run.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MeasureArgs {
    pub input: PathBuf,
    #[arg(long, default_value = "sym")]
    pub measure: String,
    /// Comma-separated kernel bandwidths for hsic; median heuristic if absent.
    #[arg(long, value_delimiter = ',')]
    pub bandwidth: Option<Vec<f64>>,
    #[arg(long, env = "MDMICA_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Append the run manifest here instead of printing it to stderr.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct IcaArgs {
    pub input: PathBuf,
    #[arg(long, default_value = "sym")]
    pub measure: String,
    #[arg(long, value_delimiter = ',')]
    pub bandwidth: Option<Vec<f64>>,
    #[arg(long, default_value = "par")]
    pub scheme: String,
    #[arg(long, default_value = "lhs")]
    pub init: String,
    /// Defaults to 10·d.
    #[arg(long)]
    pub lhs_points: Option<usize>,
    /// Defaults to 10·d.
    #[arg(long)]
    pub bo_iters: Option<usize>,
    #[arg(long, default_value = "exp")]
    pub kernel: String,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    #[arg(long, env = "MDMICA_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub model: u8,
    /// Comma-separated labels such as `sym,com@lhs+bo`.
    #[arg(long, value_delimiter = ',', default_value = "sym")]
    pub estimators: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Defaults to 2 for model 4 and 3 otherwise.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Catalog names or numbers: one for all components or one per component.
    /// Defaults to the first entry, or a random draw per trial for model 3.
    #[arg(long, value_delimiter = ',')]
    pub source: Option<Vec<String>>,
    #[arg(long)]
    pub lhs_points: Option<usize>,
    #[arg(long)]
    pub bo_iters: Option<usize>,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1.0)]
    pub cond_lo: f64,
    #[arg(long, default_value_t = 2.0)]
    pub cond_hi: f64,
    #[arg(long, env = "MDMICA_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "benchmark.csv")]
    pub out: PathBuf,
    /// Worker threads; 1 keeps runs bitwise reproducible.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MdArgs {
    pub w_hat: PathBuf,
    pub w0: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Replacement output directory (ica) or table path (benchmark).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// A failed command with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn estimation(err: Error) -> Self {
        match err {
            Error::InvalidConfig(_)
            | Error::Shape(_)
            | Error::InsufficientSample { .. }
            | Error::InvalidBandwidth(_)
            | Error::NonFiniteEntry { .. }
            | Error::UnknownSource(_) => Self::usage(err.to_string()),
            other => Self { code: 3, message: format!("estimation failed: {other}") },
        }
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        Self::usage(err.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::internal(format!("{}: {e}", path.display()))
}

/// Run description serialized next to every output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    #[serde(flatten)]
    pub command: Command,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub wall_time: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
}

/// Parses a numeric CSV. A first row with any non-numeric field is taken as
/// a header. Errors name the offending line.
pub fn read_csv(path: &Path) -> CliResult<DMatrix<f64>> {
    let file = File::open(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    parse_csv(BufReader::new(file)).map_err(|m| CliError::usage(format!("{}: {m}", path.display())))
}

pub fn parse_csv<R: BufRead>(reader: R) -> std::result::Result<DMatrix<f64>, String> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (idx, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| match e.position() {
            Some(pos) => format!("line {}: {e}", pos.line()),
            None => e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(idx as u64 + 1);
        let parsed: Vec<std::result::Result<f64, _>> = record.iter().map(str::parse::<f64>).collect();
        if idx == 0 && parsed.iter().any(|r| r.is_err()) {
            width = Some(record.len());
            continue;
        }
        if let Some(w) = width {
            if record.len() != w {
                return Err(format!("line {line}: expected {w} fields, found {}", record.len()));
            }
        }
        width = Some(record.len());
        for (col, (field, value)) in record.iter().zip(parsed).enumerate() {
            let v = value.map_err(|_| format!("line {line}, column {}: not a number: {field:?}", col + 1))?;
            values.push(v);
        }
        rows += 1;
    }
    let cols = width.unwrap_or(0);
    if rows == 0 || cols == 0 {
        return Err("no numeric rows".into());
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

/// Shortest decimal string that parses back to the same `f64`.
pub fn fmt_float(v: f64) -> String {
    format!("{v:?}")
}

/// `v` rounded to `digits` significant digits.
pub fn fmt_significant(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let s = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = s.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..digits as i32).contains(&exp) {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        let fixed = format!("{:.*}", decimals, v);
        trim_zeros(&fixed)
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

pub fn write_csv(path: &Path, m: &DMatrix<f64>) -> CliResult<()> {
    let mut out = String::new();
    for row in m.row_iter() {
        let fields: Vec<String> = row.iter().map(|v| fmt_float(*v)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

fn append_json_line(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
    let line = serde_json::to_string(value).map_err(|e| CliError::internal(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| io_err(path, e))
}

fn measure_kind(name: &str, bandwidth: &Option<Vec<f64>>) -> CliResult<MeasureKind> {
    let kind: MeasureKind = name.parse()?;
    match (kind, bandwidth) {
        (MeasureKind::Hsic(_), Some(bw)) => {
            let kind = MeasureKind::Hsic(Bandwidth::Fixed(bw.clone()));
            kind.validate()?;
            Ok(kind)
        }
        (_, Some(_)) => Err(CliError::usage("--bandwidth only applies to --measure hsic")),
        (kind, None) => Ok(kind),
    }
}

fn require_components(x: &DMatrix<f64>) -> CliResult<()> {
    if x.ncols() < 2 {
        return Err(CliError::usage(format!("need at least 2 columns, got {}", x.ncols())));
    }
    if x.nrows() < 2 {
        return Err(CliError::usage(format!("need at least 2 rows, got {}", x.nrows())));
    }
    Ok(())
}

/// Builds the optimizer configuration an `ica` invocation resolves to.
pub fn ica_config(args: &IcaArgs) -> CliResult<OptimizerConfig> {
    let config = OptimizerConfig {
        scheme: args.scheme.parse::<Scheme>()?,
        measure: measure_kind(&args.measure, &args.bandwidth)?,
        init: args.init.parse::<InitStrategy>()?,
        lhs_points: args.lhs_points,
        bo_iters: args.bo_iters,
        bo_kernel: args.kernel.parse::<GpKernel>()?,
        max_iters: args.max_iters,
        seed: args.seed,
        ..Default::default()
    };
    config.validate()?;
    Ok(config)
}

/// Executes a parsed command; returns the text for stdout.
pub fn run(command: Command) -> CliResult<String> {
    let start = Instant::now();
    match &command {
        Command::Measure(args) => {
            let x = read_csv(&args.input)?;
            require_components(&x)?;
            let kind = measure_kind(&args.measure, &args.bandwidth)?;
            let value = kind.evaluate_matrix(&x)?;
            let manifest = RunManifest {
                command: command.clone(),
                seed: Some(args.seed),
                inputs: vec![args.input.clone()],
                outputs: Vec::new(),
                version: VERSION.into(),
                wall_time: start.elapsed().as_secs_f64(),
                result: Some(json!({ "measure": kind.label(), "value": value })),
            };
            match &args.manifest {
                Some(path) => append_json_line(path, &manifest)?,
                None => eprintln!(
                    "{}",
                    serde_json::to_string(&manifest).map_err(|e| CliError::internal(e.to_string()))?
                ),
            }
            Ok(format!("{}\n", fmt_significant(value, 12)))
        }
        Command::Ica(args) => {
            let y = read_csv(&args.input)?;
            require_components(&y)?;
            let config = ica_config(args)?;
            let result = estimate_ica(&y, &config).map_err(CliError::estimation)?;
            let dir = &args.out_dir;
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            let outputs: Vec<PathBuf> = ["X_hat.csv", "W_hat.csv", "H.csv", "mean.csv", "result.jsonl"]
                .iter()
                .map(|f| dir.join(f))
                .collect();
            write_csv(&outputs[0], &result.x_hat)?;
            write_csv(&outputs[1], result.w_hat.matrix())?;
            write_csv(&outputs[2], &result.h)?;
            write_csv(&outputs[3], &DMatrix::from_row_slice(1, result.mean.len(), result.mean.as_slice()))?;
            let wall_time = start.elapsed().as_secs_f64();
            let manifest = RunManifest {
                command: command.clone(),
                seed: Some(args.seed),
                inputs: vec![args.input.clone()],
                outputs: outputs.clone(),
                version: VERSION.into(),
                wall_time,
                result: Some(json!({
                    "config": config,
                    "objective": result.objective,
                    "init_objective": result.init_objective,
                    "evaluations": result.evaluations,
                    "theta_hat": result.theta_hat.as_slice(),
                    "wall_time": wall_time,
                })),
            };
            // one line per run; a replay writes a fresh file
            let _ = fs::remove_file(&outputs[4]);
            append_json_line(&outputs[4], &manifest)?;
            Ok(format!(
                "objective {}\ninit_objective {}\nevaluations {}\n",
                fmt_float(result.objective),
                fmt_float(result.init_objective),
                result.evaluations
            ))
        }
        Command::Benchmark(args) => benchmark(args, &command, start),
        Command::Md(args) => {
            let w_hat = read_csv(&args.w_hat)?;
            let w0 = read_csv(&args.w0)?;
            let report = md_index(&w_hat, &w0)?;
            let perm: Vec<String> = report.permutation.iter().map(|p| p.to_string()).collect();
            let scal: Vec<String> = report.scalings.iter().map(|s| fmt_float(*s)).collect();
            Ok(format!(
                "md {}\npermutation {}\nscalings {}\n",
                fmt_float(report.md),
                perm.join(","),
                scal.join(",")
            ))
        }
        Command::Replay(args) => replay(args),
    }
}

fn replay(args: &ReplayArgs) -> CliResult<String> {
    let text = fs::read_to_string(&args.manifest)
        .map_err(|e| CliError::usage(format!("{}: {e}", args.manifest.display())))?;
    let line = text
        .lines()
        .find(|l| l.contains("\"command\""))
        .ok_or_else(|| CliError::usage("no manifest line found"))?;
    let manifest: RunManifest =
        serde_json::from_str(line).map_err(|e| CliError::usage(format!("bad manifest: {e}")))?;
    let mut command = manifest.command;
    if let Some(out) = &args.output {
        match &mut command {
            Command::Ica(a) => a.out_dir = out.clone(),
            Command::Benchmark(a) => a.out = out.clone(),
            Command::Measure(a) => a.manifest = Some(out.clone()),
            _ => return Err(CliError::usage("--output does not apply to this command")),
        }
    }
    if let Command::Replay(_) = command {
        return Err(CliError::usage("cannot replay a replay"));
    }
    run(command)
}

const BENCH_NUMERIC: [&str; 11] = [
    "md",
    "objective",
    "init_objective",
    "evaluations",
    "wall_time",
    "asym_before",
    "sym_before",
    "comp_before",
    "asym_after",
    "sym_after",
    "comp_after",
];

fn numeric_fields(r: &TrialRecord) -> [Option<f64>; 11] {
    let b = r.measures_before;
    let a = r.measures_after;
    [
        r.md,
        r.objective,
        r.init_objective,
        r.evaluations.map(|e| e as f64),
        Some(r.wall_time),
        b.map(|m| m.asym),
        b.map(|m| m.sym),
        b.map(|m| m.comp),
        a.map(|m| m.asym),
        a.map(|m| m.sym),
        a.map(|m| m.comp),
    ]
}

fn benchmark(args: &BenchmarkArgs, command: &Command, start: Instant) -> CliResult<String> {
    let model = Model::from_number(args.model)?;
    let d = args.d.unwrap_or(if model == Model::Misspecified { 2 } else { 3 });
    let sources: Vec<SourceSpec> = match &args.source {
        Some(list) => list.iter().map(|s| s.parse()).collect::<Result<_, _>>()?,
        None if model == Model::DifferentInits => Vec::new(),
        None => vec![SourceSpec::new(1)?],
    };
    let spec = ModelSpec {
        cond_lo: args.cond_lo,
        cond_hi: args.cond_hi,
        ..ModelSpec::new(model, d, args.n, sources)
    };
    let estimators: Vec<Estimator> = args
        .estimators
        .iter()
        .map(|label| {
            let mut e = Estimator::from_label(label)?;
            e.config.lhs_points = args.lhs_points.or(e.config.lhs_points);
            e.config.bo_iters = args.bo_iters.or(e.config.bo_iters);
            e.config.max_iters = args.max_iters;
            Ok(e)
        })
        .collect::<Result<_, Error>>()?;
    if args.jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    let records = run_trials(&spec, &estimators, args.trials, args.seed, args.jobs)?;

    let mut wtr = csv::Writer::from_path(&args.out)
        .map_err(|e| CliError::internal(format!("{}: {e}", args.out.display())))?;
    let mut header = vec!["row", "model", "estimator", "trial", "data_seed", "seed"];
    header.extend(BENCH_NUMERIC);
    header.push("error");
    let csv_err = |e: csv::Error| CliError::internal(e.to_string());
    wtr.write_record(&header).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
    for r in &records {
        let mut row = vec![
            "trial".to_string(),
            model.number().to_string(),
            r.estimator.clone(),
            r.trial.to_string(),
            r.data_seed.to_string(),
            r.seed.to_string(),
        ];
        row.extend(numeric_fields(r).into_iter().map(opt));
        row.push(r.error.clone().unwrap_or_default());
        wtr.write_record(&row).map_err(csv_err)?;
    }
    let mut summary = String::new();
    for e in &estimators {
        let ok: Vec<&TrialRecord> =
            records.iter().filter(|r| r.estimator == e.label && r.error.is_none()).collect();
        let failures = records.iter().filter(|r| r.estimator == e.label).count() - ok.len();
        let stats: Vec<Option<(f64, f64)>> = (0..BENCH_NUMERIC.len())
            .map(|k| {
                let vals: Vec<f64> = ok.iter().filter_map(|r| numeric_fields(r)[k]).collect();
                mean_stderr(&vals)
            })
            .collect();
        for (kind, pick) in [("mean", 0usize), ("stderr", 1)] {
            let mut row = vec![kind.to_string(), model.number().to_string(), e.label.clone()];
            row.extend([String::new(), String::new(), String::new()]);
            row.extend(stats.iter().map(|s| opt(s.map(|p| if pick == 0 { p.0 } else { p.1 }))));
            row.push(if failures > 0 { format!("{failures} failed") } else { String::new() });
            wtr.write_record(&row).map_err(csv_err)?;
        }
        let md = stats[0].map(|(m, s)| format!("md {} ± {}", fmt_significant(m, 4), fmt_significant(s, 2)));
        let obj =
            stats[1].map(|(m, s)| format!("objective {} ± {}", fmt_significant(m, 4), fmt_significant(s, 2)));
        summary.push_str(&format!(
            "{}: {}{}{}\n",
            e.label,
            md.map(|s| s + ", ").unwrap_or_default(),
            obj.unwrap_or_default(),
            if failures > 0 { format!(" ({failures} failed)") } else { String::new() }
        ));
    }
    wtr.flush().map_err(|e| io_err(&args.out, e))?;

    let jsonl = args.out.with_extension("jsonl");
    let _ = fs::remove_file(&jsonl);
    let manifest = RunManifest {
        command: command.clone(),
        seed: Some(args.seed),
        inputs: Vec::new(),
        outputs: vec![args.out.clone(), jsonl.clone()],
        version: VERSION.into(),
        wall_time: start.elapsed().as_secs_f64(),
        result: Some(json!({ "model": spec, "estimators": estimators })),
    };
    append_json_line(&jsonl, &manifest)?;
    for r in &records {
        append_json_line(&jsonl, r)?;
    }
    Ok(summary)
}

/// Parses arguments, runs, prints, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
