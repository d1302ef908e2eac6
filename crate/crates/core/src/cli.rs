//! Command-line front end: `simulate`, `diagnose` and `report`.
//!
//! Exit codes: 0 when the command completed (with or without faults found),
//! 1 for input or usage errors, 2 for numerical failures.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::model::{ModelError, SystemConfig};
use crate::pipeline::{run_diagnostics, DiagnosticsConfig, FaultReport, PipelineError};
use crate::simulator::{simulate, FaultSpec, ScenarioFile, SimError};
use crate::trace_io::{read_trace_file, write_trace_file};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "valvediag", version, about = "Jammed-valve identification for digital hydraulic actuators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a duty cycle and write a pressure trace CSV.
    Simulate(SimulateArgs),
    /// Run fault identification over a trace and write a JSON report.
    Diagnose(DiagnoseArgs),
    /// Print the summary table of a saved report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// System configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Scenario document (JSON) with explicit steps or a duty cycle.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Injected fault, e.g. `AT3:closed`, `PB3:open` or `AT3:closed@200`
    /// (onset sample). Repeatable.
    #[arg(long = "fault")]
    pub faults: Vec<String>,
    /// Measurement noise seed; overrides the scenario's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output trace CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// System configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Trace CSV to analyse.
    #[arg(long)]
    pub trace: PathBuf,
    /// Diagnostics settings (JSON); flags below override it.
    #[arg(long = "diag-config")]
    pub diag_config: Option<PathBuf>,
    /// Output JSON report.
    #[arg(long)]
    pub report: PathBuf,
    /// Optional per-period CSV series for plotting.
    #[arg(long)]
    pub series: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: DiagOverrides,
}

#[derive(Debug, Args, Default)]
pub struct DiagOverrides {
    /// Samples per analysis period.
    #[arg(long)]
    pub period_len: Option<usize>,
    /// EWMA weight of the newest period.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Minimum fraction of evidence samples for a filter update.
    #[arg(long)]
    pub activity_threshold: Option<f64>,
    /// Pressure jump (Pa) between samples that marks a spike.
    #[arg(long)]
    pub spike_threshold: Option<f64>,
    /// Samples removed on each side of a spike.
    #[arg(long)]
    pub spike_window: Option<usize>,
    /// Keep all samples, even around pressure spikes.
    #[arg(long)]
    pub no_spike_rejection: bool,
    /// Filtered value needed for a verdict.
    #[arg(long)]
    pub verdict_threshold: Option<f64>,
    /// Consecutive gated periods at or above the verdict threshold.
    #[arg(long)]
    pub verdict_periods: Option<usize>,
    /// Minimum retained fraction of a period after spike rejection.
    #[arg(long)]
    pub min_retained_fraction: Option<f64>,
    /// Pressure difference (Pa) a valve needs for a sample to count as evidence.
    #[arg(long)]
    pub evidence_dp: Option<f64>,
    /// Regression quantile.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Relative slack for preferring a binary explanation.
    #[arg(long)]
    pub tie_tolerance: Option<f64>,
}

impl DiagOverrides {
    pub fn apply(&self, cfg: &mut DiagnosticsConfig) {
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = self.$field { cfg.$field = v; })* };
        }
        set!(
            period_len,
            lambda,
            activity_threshold,
            spike_threshold,
            spike_window,
            verdict_threshold,
            verdict_periods,
            min_retained_fraction,
            evidence_dp,
            tau
        );
        if self.no_spike_rejection {
            cfg.spike_rejection = false;
        }
        if let Some(v) = self.tie_tolerance {
            cfg.penalty.tie_tolerance = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON written by `diagnose`.
    pub report: PathBuf,
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, message: message.into() }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match e {
            ModelError::NoConvergence { .. } => EXIT_NUMERICAL,
            _ => EXIT_INPUT,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let code = match &e {
            SimError::Solve { source: ModelError::NoConvergence { .. }, .. } => EXIT_NUMERICAL,
            _ => EXIT_INPUT,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        Self::input(e.to_string())
    }
}

fn with_path(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::input(format!("{}: {e}", path.display()))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let rendered = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{rendered}");
            } else {
                let _ = write!(out, "{rendered}");
            }
            return code;
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Diagnose(a) => cmd_diagnose(a, out, err),
        Command::Report(a) => cmd_report(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

pub fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = SystemConfig::from_json_file(&a.config)?;
    let scenario_file = ScenarioFile::from_json_file(&a.scenario)?;
    let mut scenario = scenario_file.resolve(&config)?;
    if let Some(seed) = a.seed {
        scenario.seed = seed;
    }
    let faults = a
        .faults
        .iter()
        .map(|f| FaultSpec::parse(f, config.valves_per_dfcu()))
        .collect::<Result<Vec<_>, _>>()?;
    let trace = simulate(&config, &scenario, &faults)?;
    write_trace_file(&trace, &a.out).map_err(|e| CliError::input(format!("{}: {e}", a.out.display())))?;

    let _ = writeln!(out, "wrote {} samples to {}", trace.len(), a.out.display());
    if faults.is_empty() {
        let _ = writeln!(out, "faults injected: none");
    } else {
        for f in &faults {
            let _ = writeln!(
                out,
                "fault injected: {} {} from sample {}",
                config.valve_name(f.valve_index),
                f.mode,
                f.onset_sample
            );
        }
    }
    Ok(())
}

pub fn cmd_diagnose(a: &DiagnoseArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let config = SystemConfig::from_json_file(&a.config)?;
    let mut cfg = match &a.diag_config {
        Some(p) => DiagnosticsConfig::from_json_file(p)
            .map_err(|e| CliError::input(format!("{}: {e}", p.display())))?,
        None => DiagnosticsConfig::default(),
    };
    a.overrides.apply(&mut cfg);
    cfg.validate()?;

    let trace = read_trace_file(&a.trace).map_err(|e| CliError::input(format!("{}: {e}", a.trace.display())))?;
    if !trace.config_digest.is_empty() && trace.config_digest != config.digest() {
        let _ = writeln!(
            err,
            "warning: trace was generated with configuration {}, analysing with {}",
            trace.config_digest,
            config.digest()
        );
    }
    let report = run_diagnostics(&config, &trace, &cfg)?;
    std::fs::write(&a.report, report.to_json()).map_err(with_path(&a.report))?;
    if let Some(path) = &a.series {
        let file = std::fs::File::create(path).map_err(with_path(path))?;
        report.write_series_csv(std::io::BufWriter::new(file))?;
    }
    let _ = write!(out, "{}", report.render_table());
    Ok(())
}

pub fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.report).map_err(with_path(&a.report))?;
    let report = FaultReport::from_json_str(&text)
        .map_err(|e| CliError::input(format!("{}: {e}", a.report.display())))?;
    let _ = write!(out, "{}", report.render_table());
    Ok(())
}
