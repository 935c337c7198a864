//! Command-line front end: `run`, `sweep`, `report`, `validate-config`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::diagnostics::{export_report, ReportBundle};
use crate::error::{Error, Result};
use crate::pipeline::config::{apply_override, parse_table};
use crate::pipeline::{write_run_dir, Experiment, RunConfig, RunRecord, RunStatus};

/// Preset configs shipped with the binary, addressable by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("toy_ci", include_str!("../configs/toy_ci.toml")),
    ("lenet_mnist", include_str!("../configs/lenet_mnist.toml")),
    ("lenet_mnist_admm_50", include_str!("../configs/lenet_mnist_admm_50.toml")),
    ("alexnet_cifar10", include_str!("../configs/alexnet_cifar10.toml")),
    ("table1_50", include_str!("../configs/table1_50.toml")),
    ("table1_75", include_str!("../configs/table1_75.toml")),
    ("table1_87_5", include_str!("../configs/table1_87_5.toml")),
    ("fig2_sweep", include_str!("../configs/fig2_sweep.toml")),
];

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "chanprune", version, about = "Single-shot channel pruning with ADMM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured pipeline end to end.
    Run(RunArgs),
    /// One child run per value combination, then a combined report.
    Sweep(SweepArgs),
    /// Build a report bundle from completed run directories.
    Report(ReportArgs),
    /// Parse and validate a config, printing the resolved result.
    ValidateConfig(ConfigArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Config file path or preset name.
    #[arg(long)]
    pub config: String,
    /// Dotted override, e.g. `admm.prune_rate=0.75` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Replaces the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Directory name under `--out`; derived from the config when omitted.
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// `criterion`, `ratio`, or any dotted config key (repeatable).
    #[arg(long, required = true)]
    pub axis: Vec<String>,
    /// Comma-separated values for the matching `--axis`.
    #[arg(long, required = true)]
    pub values: Vec<String>,
    /// Concurrent child runs.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directories holding `record.json`.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Machine-readable failure summary written next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorSummary {
    pub kind: String,
    pub stage: Option<String>,
    pub message: String,
}

impl ErrorSummary {
    pub fn from_error(e: &Error) -> Self {
        let stage = match e {
            Error::Stage { stage, .. } => Some(stage.clone()),
            _ => None,
        };
        Self { kind: e.kind().to_string(), stage, message: e.to_string() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("summary serializes")
    }
}

/// Text of a config given as a path or as a preset name (`.toml`/`.cfg`
/// suffixes and `toy` are accepted for presets).
pub fn config_source(spec: &str) -> Result<(String, String)> {
    let path = Path::new(spec);
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or(spec).to_string();
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return Ok((stem, text));
    }
    let name = match spec.strip_suffix(".toml").or_else(|| spec.strip_suffix(".cfg")).unwrap_or(spec) {
        "toy" => "toy_ci".to_string(),
        other => other.replace('.', "_"),
    };
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(n, t)| (n.to_string(), t.to_string()))
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
            Error::Config(format!("`{spec}` is neither a file nor a preset ({})", names.join(", ")))
        })
}

/// Base table of a config after `--set` and `--seed`.
fn merged_table(args: &ConfigArgs) -> Result<(String, toml::Table)> {
    let (name, text) = config_source(&args.config)?;
    let mut table = parse_table(&text)?;
    for ov in &args.set {
        apply_override(&mut table, ov)?;
    }
    if let Some(seed) = args.seed {
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    Ok((name, table))
}

pub fn resolve_config(args: &ConfigArgs) -> Result<(String, RunConfig)> {
    let (name, table) = merged_table(args)?;
    Ok((name, RunConfig::from_table(table)?))
}

/// Outcome of one pipeline run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub record: Option<RunRecord>,
    pub error: Option<ErrorSummary>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        match &self.error {
            None => EXIT_OK,
            Some(e) if e.kind == "config" => EXIT_INVALID,
            Some(_) => EXIT_FAILED,
        }
    }
}

fn check_fresh(dir: &Path) -> Result<()> {
    if dir.join("record.json").exists() || dir.join("config.toml").exists() {
        return Err(Error::Usage(format!("run directory {} already exists", dir.display())));
    }
    Ok(())
}

fn write_error(dir: &Path, summary: &ErrorSummary) {
    let _ = std::fs::create_dir_all(dir);
    let _ = std::fs::write(dir.join("error.json"), summary.to_json());
}

/// Runs one config into `out/run_id`. Failures are reported in the outcome
/// and in `error.json`; the partial record is still written.
pub fn execute(config: RunConfig, out: &Path, run_id: &str) -> RunOutcome {
    let dir = out.join(run_id);
    let fail = |e: Error, record: Option<RunRecord>| {
        let summary = ErrorSummary::from_error(&e);
        write_error(&dir, &summary);
        RunOutcome { dir: dir.clone(), record, error: Some(summary) }
    };
    if let Err(e) = check_fresh(&dir) {
        return fail(e, None);
    }
    let mut x = match Experiment::new(config.clone(), run_id, Some(&dir)) {
        Ok(x) => x,
        Err(e) => return fail(e, None),
    };
    let result = x.run();
    if let Err(e) = write_run_dir(&dir, &config, &x.record) {
        return fail(e, Some(x.record));
    }
    match result {
        Ok(_) => RunOutcome { dir, record: Some(x.record), error: None },
        Err(e) => fail(e, Some(x.record)),
    }
}

pub fn cmd_run(args: &RunArgs) -> RunOutcome {
    let (name, config) = match resolve_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            let summary = ErrorSummary::from_error(&e);
            return RunOutcome { dir: args.out.clone(), record: None, error: Some(summary) };
        }
    };
    let run_id = args.run_id.clone().unwrap_or_else(|| format!("{name}-s{}", config.seed));
    execute(config, &args.out, &run_id)
}

/// Overrides realizing one sweep value on `table`.
fn apply_axis(table: &mut toml::Table, axis: &str, value: &str) -> Result<()> {
    match axis {
        "criterion" => {
            let pipeline = table.entry("pipeline").or_insert_with(|| toml::Value::Table(Default::default()));
            let pipeline = pipeline.as_table_mut().ok_or_else(|| Error::Config("`pipeline` is not a section".into()))?;
            if value == "taylor_iterative" || value == "iterative_te" {
                pipeline.insert("kind".into(), "iterative_te".into());
                table.entry("iterative").or_insert_with(|| toml::Value::Table(Default::default()));
                apply_override(table, "prune.criterion=taylor")
            } else {
                pipeline.insert("kind".into(), "single_shot".into());
                table.remove("iterative");
                apply_override(table, &format!("prune.criterion={value}"))
            }
        }
        "ratio" => {
            let rate = parse_ratio(value)?;
            if let Some(admm) = table.get_mut("admm").and_then(|v| v.as_table_mut()) {
                admm.remove("layer_rates");
            }
            apply_override(table, &format!("admm.prune_rate={rate:?}"))
        }
        key => apply_override(table, &format!("{key}={value}")),
    }
}

/// `0.5`, `50` or `50%` → 0.5.
pub fn parse_ratio(s: &str) -> Result<f64> {
    let t = s.trim();
    let (num, pct) = match t.strip_suffix('%') {
        Some(n) => (n, true),
        None => (t, false),
    };
    let v: f64 = num.parse().map_err(|_| Error::Config(format!("bad ratio `{s}`")))?;
    Ok(if pct || v > 1.0 { v / 100.0 } else { v })
}

/// Child id fragment of a value.
fn slug(value: &str) -> String {
    value.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Result of a sweep: child outcomes, and the report when every child succeeded.
#[derive(Debug)]
pub struct SweepOutcome {
    pub children: Vec<RunOutcome>,
    pub report: Option<ReportBundle>,
    pub warnings: Vec<String>,
    pub error: Option<ErrorSummary>,
}

impl SweepOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.error.is_some() || self.children.iter().any(|c| c.error.is_some()) {
            EXIT_FAILED
        } else {
            EXIT_OK
        }
    }
}

/// Sweep id, `(run id, config)` per child, and warnings.
pub type SweepPlan = (String, Vec<(String, RunConfig)>, Vec<String>);

/// Expands the axes into child configs: `(run id, config)` per combination.
pub fn plan_sweep(args: &SweepArgs) -> Result<SweepPlan> {
    if args.axis.len() != args.values.len() {
        return Err(Error::Usage(format!("{} --axis flags but {} --values flags", args.axis.len(), args.values.len())));
    }
    let (name, base) = merged_table(&args.config)?;
    let mut warnings = Vec::new();
    let mut axes = Vec::new();
    for (axis, raw) in args.axis.iter().zip(&args.values) {
        let mut seen = BTreeSet::new();
        let mut vals = Vec::new();
        for v in raw.split(',').map(str::trim).filter(|v| !v.is_empty()) {
            let key = if axis == "ratio" { format!("{:?}", parse_ratio(v)?) } else { v.to_string() };
            if seen.insert(key) {
                vals.push(v.to_string());
            } else {
                warnings.push(format!("duplicate value `{v}` for axis `{axis}` ignored"));
            }
        }
        if vals.is_empty() {
            return Err(Error::Usage(format!("axis `{axis}` has no values")));
        }
        axes.push((axis.clone(), vals));
    }
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (axis, vals) in &axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                vals.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((axis.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    let sweep_id = args.run_id.clone().unwrap_or_else(|| format!("{name}-sweep"));
    let mut children = Vec::with_capacity(combos.len());
    for combo in combos {
        let mut table = base.clone();
        let mut id = sweep_id.clone();
        for (axis, v) in &combo {
            apply_axis(&mut table, axis, v)?;
            id.push('-');
            id.push_str(&slug(v));
        }
        children.push((id, RunConfig::from_table(table)?));
    }
    Ok((sweep_id, children, warnings))
}

pub fn cmd_sweep(args: &SweepArgs) -> SweepOutcome {
    let (sweep_id, children, warnings) = match plan_sweep(args) {
        Ok(p) => p,
        Err(e) => {
            return SweepOutcome {
                children: Vec::new(),
                report: None,
                warnings: Vec::new(),
                error: Some(ErrorSummary::from_error(&e)),
            }
        }
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    let sweep_dir = args.out.join(&sweep_id);
    let slots: Vec<Mutex<Option<RunOutcome>>> = children.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..args.parallel.clamp(1, children.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((id, config)) = children.get(i) else { break };
                let outcome = execute(config.clone(), &sweep_dir, id);
                if let Some(e) = &outcome.error {
                    log::error!("child `{id}` failed: {}", e.message);
                }
                *slots[i].lock().expect("slot lock") = Some(outcome);
            });
        }
    });
    let outcomes: Vec<RunOutcome> =
        slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("child ran")).collect();
    let done: Vec<RunRecord> = outcomes
        .iter()
        .filter(|o| o.error.is_none())
        .filter_map(|o| o.record.clone())
        .collect();
    let mut error = None;
    let report = if done.is_empty() {
        None
    } else {
        match export_report(&done, &sweep_dir.join("report")) {
            Ok(b) => Some(b),
            Err(e) => {
                error = Some(ErrorSummary::from_error(&e));
                None
            }
        }
    };
    SweepOutcome { children: outcomes, report, warnings, error }
}

/// Loads completed records from `dirs`, naming every offending directory.
pub fn load_records(dirs: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    let mut bad = Vec::new();
    for d in dirs {
        match RunRecord::load(d) {
            Ok(r) if r.status == RunStatus::Complete => records.push(r),
            Ok(r) => bad.push(format!("{} (run `{}` is {:?})", d.display(), r.run_id, r.status)),
            Err(_) => bad.push(format!("{} (no readable record.json)", d.display())),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Usage(format!("incomplete runs: {}", bad.join(", "))));
    }
    Ok(records)
}

pub fn cmd_report(args: &ReportArgs) -> Result<ReportBundle> {
    let records = load_records(&args.dirs)?;
    export_report(&records, &args.out)
}

/// Parses, validates and dispatches; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Run(a) => {
            let o = cmd_run(&a);
            match &o.error {
                None => {
                    let acc = o.record.as_ref().and_then(|r| r.final_accuracy).unwrap_or(f64::NAN);
                    println!("{} final_accuracy={acc:.4}", o.dir.display());
                }
                Some(e) => eprintln!("{}", e.to_json()),
            }
            o.exit_code()
        }
        Command::Sweep(a) => {
            let o = cmd_sweep(&a);
            for c in &o.children {
                match &c.error {
                    None => println!(
                        "{} final_accuracy={:.4}",
                        c.dir.display(),
                        c.record.as_ref().and_then(|r| r.final_accuracy).unwrap_or(f64::NAN)
                    ),
                    Some(e) => eprintln!("{} {}", c.dir.display(), e.to_json()),
                }
            }
            if let Some(b) = &o.report {
                println!("report {}", b.root.display());
            }
            if let Some(e) = &o.error {
                eprintln!("{}", e.to_json());
            }
            o.exit_code()
        }
        Command::Report(a) => match cmd_report(&a) {
            Ok(b) => {
                println!("report {} ({} files)", b.root.display(), b.files.len());
                EXIT_OK
            }
            Err(e) => {
                eprintln!("{}", ErrorSummary::from_error(&e).to_json());
                EXIT_FAILED
            }
        },
        Command::ValidateConfig(a) => match resolve_config(&a) {
            Ok((_, c)) => {
                print!("{}", c.to_toml());
                EXIT_OK
            }
            Err(e) => {
                let msg = match &e {
                    Error::Config(m) => m.clone(),
                    other => other.to_string(),
                };
                for line in msg.split("; ") {
                    eprintln!("invalid: {line}");
                }
                EXIT_INVALID
            }
        },
    }
}
