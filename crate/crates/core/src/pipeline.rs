//! Online diagnostics loop.
//!
//! The trace is cut into fixed, non-overlapping periods. Samples near
//! pressure spikes are dropped, each period is solved for the valve
//! deviation variables, and every variable whose valve showed enough
//! evidence in the period is pushed through an exponentially weighted moving
//! average. Verdicts come from the filtered values.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{estimate_period, EstimatorError, FaultVariables, PenaltyConfig};
use crate::model::{SystemConfig, ValveId};
use crate::simulator::{FaultMode, Sample, Trace};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid diagnostics configuration: {0}")]
    InvalidConfig(String),
    #[error("trace has {got} valve bits per sample, configuration expects {expected}")]
    ValveCount { got: usize, expected: usize },
    #[error("failed to read report: {0}")]
    Report(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub period_len: usize,
    pub lambda: f64,
    pub activity_threshold: f64,
    /// Sample-to-sample pressure jump (Pa) that marks a spike.
    pub spike_threshold: f64,
    /// Samples dropped on each side of a jump.
    pub spike_window: usize,
    pub spike_rejection: bool,
    pub verdict_threshold: f64,
    /// Consecutive gated periods at or above the verdict threshold.
    pub verdict_periods: usize,
    /// Periods keeping fewer than this fraction of `period_len` samples
    /// after spike rejection are not solved.
    pub min_retained_fraction: f64,
    /// Pressure difference (Pa) across a valve needed to count a sample as
    /// evidence for that valve.
    pub evidence_dp: f64,
    pub tau: f64,
    pub penalty: PenaltyConfig,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            period_len: 100,
            lambda: 0.10,
            activity_threshold: 0.10,
            spike_threshold: 0.3e6,
            spike_window: 5,
            spike_rejection: true,
            verdict_threshold: 0.5,
            verdict_periods: 3,
            min_retained_fraction: 0.25,
            evidence_dp: 5.0e4,
            tau: 0.5,
            penalty: PenaltyConfig::default(),
        }
    }
}

impl DiagnosticsConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if self.period_len == 0 {
            return bad("period_len must be >= 1");
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("lambda must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.activity_threshold) {
            return bad("activity_threshold must be in [0, 1]");
        }
        if !(self.spike_threshold > 0.0) {
            return bad("spike_threshold must be > 0");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must be in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.min_retained_fraction) {
            return bad("min_retained_fraction must be in [0, 1]");
        }
        if !(self.evidence_dp >= 0.0) {
            return bad("evidence_dp must be >= 0");
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Keep-mask: `false` for samples within `window` of a jump larger than
/// `threshold` in any measured pressure. A jump at index `k` is between
/// samples `k - 1` and `k`.
pub fn spike_mask(samples: &[Sample], threshold: f64, window: usize) -> Vec<bool> {
    let mut keep = vec![true; samples.len()];
    for k in 1..samples.len() {
        let (a, b) = (&samples[k - 1].pressures, &samples[k].pressures);
        let jump = (b.p_a - a.p_a).abs().max((b.p_b - a.p_b).abs()).max((b.p_s - a.p_s).abs());
        if jump > threshold {
            let lo = k.saturating_sub(window);
            let hi = (k + window).min(samples.len() - 1);
            keep[lo..=hi].iter_mut().for_each(|v| *v = false);
        }
    }
    keep
}

/// Drops samples around pressure spikes, preserving order.
pub fn reject_spikes(samples: &[Sample], cfg: &DiagnosticsConfig) -> Vec<Sample> {
    spike_mask(samples, cfg.spike_threshold, cfg.spike_window)
        .into_iter()
        .zip(samples)
        .filter_map(|(keep, s)| keep.then(|| s.clone()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceMode {
    Open,
    Closed,
}

/// Fraction of samples where the valve is commanded in `mode` and sees a
/// pressure difference of at least `evidence_dp`.
pub fn activity_fraction(
    config: &SystemConfig,
    samples: &[Sample],
    valve: usize,
    mode: EvidenceMode,
    evidence_dp: f64,
) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let dfcu = ValveId::from_flat(valve, config.valves_per_dfcu()).dfcu;
    let want_open = mode == EvidenceMode::Open;
    let hits = samples
        .iter()
        .filter(|s| s.commanded.get(valve) == want_open)
        .filter(|s| {
            let dp = dfcu.pressure_drop(&s.pressures, config.tank_pressure);
            dp != 0.0 && dp.abs() >= evidence_dp
        })
        .count();
    hits as f64 / samples.len() as f64
}

pub fn ewma_update(prev: f64, u: f64, lambda: f64) -> f64 {
    lambda * u + (1.0 - lambda) * prev
}

/// EWMA state for every deviation variable, stacked open then closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub y_open: Vec<f64>,
    pub y_closed: Vec<f64>,
    pub periods_seen: usize,
    /// Number of periods each variable was updated in (stacked).
    pub periods_gated_in: Vec<usize>,
    /// Current run of gated updates at or above the verdict threshold.
    streak: Vec<usize>,
    /// Period at which the current run reached the verdict length.
    confirmed_at: Vec<Option<usize>>,
}

impl FilterState {
    pub fn new(valves: usize) -> Self {
        Self {
            y_open: vec![0.0; valves],
            y_closed: vec![0.0; valves],
            periods_seen: 0,
            periods_gated_in: vec![0; 2 * valves],
            streak: vec![0; 2 * valves],
            confirmed_at: vec![None; 2 * valves],
        }
    }

    pub fn valves(&self) -> usize {
        self.y_open.len()
    }

    pub fn get(&self, var: usize) -> f64 {
        let n = self.valves();
        if var < n {
            self.y_open[var]
        } else {
            self.y_closed[var - n]
        }
    }

    fn set(&mut self, var: usize, v: f64) {
        let n = self.valves();
        if var < n {
            self.y_open[var] = v;
        } else {
            self.y_closed[var - n] = v;
        }
    }

    /// Folds one period's estimates into the filter; only gated variables move.
    pub fn apply(
        &mut self,
        estimates: &FaultVariables,
        gated: &[bool],
        cfg: &DiagnosticsConfig,
        period: usize,
    ) {
        let stacked = estimates.stacked();
        for (var, (&u, &g)) in stacked.iter().zip(gated).enumerate() {
            if !g {
                continue;
            }
            let y = ewma_update(self.get(var), u, cfg.lambda).clamp(0.0, 1.0);
            self.set(var, y);
            self.periods_gated_in[var] += 1;
            if y >= cfg.verdict_threshold {
                self.streak[var] += 1;
                if self.streak[var] == cfg.verdict_periods.max(1) {
                    self.confirmed_at[var] = Some(period);
                }
            } else {
                self.streak[var] = 0;
                self.confirmed_at[var] = None;
            }
        }
        self.periods_seen += 1;
    }

    fn skip(&mut self) {
        self.periods_seen += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeriodStatus {
    Solved,
    Skipped,
    Uninformative,
}

/// Per-period estimate ready to be folded into the filter.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowEstimate {
    pub status: PeriodStatus,
    pub estimates: FaultVariables,
    /// Stacked gating decisions (open block then closed block).
    pub gated: Vec<bool>,
    pub retained: usize,
}

/// Solves one period of already spike-filtered samples. Does not touch any
/// filter state, so periods can be estimated concurrently.
pub fn estimate_window(
    config: &SystemConfig,
    samples: &[Sample],
    cfg: &DiagnosticsConfig,
) -> WindowEstimate {
    let valves = config.valve_count();
    let idle = |status| WindowEstimate {
        status,
        estimates: FaultVariables::zeros(valves),
        gated: vec![false; 2 * valves],
        retained: samples.len(),
    };
    let min_keep = (cfg.min_retained_fraction * cfg.period_len as f64).ceil() as usize;
    if samples.is_empty() || samples.len() < min_keep {
        return idle(PeriodStatus::Uninformative);
    }
    match estimate_period(config, samples, &cfg.penalty, cfg.tau) {
        Ok(est) if est.uninformative => idle(PeriodStatus::Uninformative),
        Ok(est) => {
            let mut gated = Vec::with_capacity(2 * valves);
            for mode in [EvidenceMode::Open, EvidenceMode::Closed] {
                for v in 0..valves {
                    let frac = activity_fraction(config, samples, v, mode, cfg.evidence_dp);
                    gated.push(frac > 0.0 && frac >= cfg.activity_threshold);
                }
            }
            WindowEstimate {
                status: PeriodStatus::Solved,
                estimates: est.variables,
                gated,
                retained: samples.len(),
            }
        }
        Err(EstimatorError::NumericalFailure(_)) => idle(PeriodStatus::Skipped),
        Err(EstimatorError::EmptyPeriod) => idle(PeriodStatus::Uninformative),
    }
}

/// Estimates one period and folds it into `state`.
pub fn diagnose_period(
    config: &SystemConfig,
    samples: &[Sample],
    cfg: &DiagnosticsConfig,
    state: &mut FilterState,
    period: usize,
) -> WindowEstimate {
    let est = estimate_window(config, samples, cfg);
    fold(state, &est, cfg, period);
    est
}

fn fold(state: &mut FilterState, est: &WindowEstimate, cfg: &DiagnosticsConfig, period: usize) {
    match est.status {
        PeriodStatus::Solved => state.apply(&est.estimates, &est.gated, cfg, period),
        _ => state.skip(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    pub index: usize,
    pub status: PeriodStatus,
    pub retained: usize,
    pub estimates_open: Vec<f64>,
    pub estimates_closed: Vec<f64>,
    pub gated: Vec<bool>,
    pub filtered_open: Vec<f64>,
    pub filtered_closed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenClosed {
    pub open: Vec<f64>,
    pub closed: Vec<f64>,
}

impl OpenClosed {
    fn zeros(n: usize) -> Self {
        Self { open: vec![0.0; n], closed: vec![0.0; n] }
    }

    fn max_into(&mut self, open: &[f64], closed: &[f64]) {
        for (m, v) in self.open.iter_mut().zip(open) {
            *m = m.max(*v);
        }
        for (m, v) in self.closed.iter_mut().zip(closed) {
            *m = m.max(*v);
        }
    }

    pub fn max(&self) -> f64 {
        self.open.iter().chain(&self.closed).copied().fold(0.0, f64::max)
    }
}

/// Largest values seen per valve: of the filter output, and of the gated
/// per-period estimates fed into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxTable {
    pub filtered_max: OpenClosed,
    pub unfiltered_max: OpenClosed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub valve: String,
    pub mode: FaultMode,
    pub confidence: f64,
    pub period: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultReport {
    pub valves: Vec<String>,
    pub config_digest: String,
    pub periods: Vec<PeriodRecord>,
    pub filtered: OpenClosed,
    pub table: MaxTable,
    pub verdicts: Vec<Verdict>,
}

/// Runs the full diagnostics loop over a trace.
pub fn run_diagnostics(
    config: &SystemConfig,
    trace: &Trace,
    cfg: &DiagnosticsConfig,
) -> Result<FaultReport, PipelineError> {
    cfg.validate()?;
    let valves = config.valve_count();
    if let Some(s) = trace.samples.first() {
        if s.commanded.len() != valves {
            return Err(PipelineError::ValveCount { got: s.commanded.len(), expected: valves });
        }
    }

    let keep = if cfg.spike_rejection {
        spike_mask(&trace.samples, cfg.spike_threshold, cfg.spike_window)
    } else {
        vec![true; trace.samples.len()]
    };
    let windows: Vec<Vec<Sample>> = trace
        .samples
        .chunks_exact(cfg.period_len)
        .zip(keep.chunks_exact(cfg.period_len))
        .map(|(s, k)| s.iter().zip(k).filter_map(|(s, k)| k.then(|| s.clone())).collect())
        .collect();

    let estimates: Vec<WindowEstimate> =
        windows.par_iter().map(|w| estimate_window(config, w, cfg)).collect();

    let mut state = FilterState::new(valves);
    let mut periods = Vec::with_capacity(estimates.len());
    let mut table = MaxTable { filtered_max: OpenClosed::zeros(valves), unfiltered_max: OpenClosed::zeros(valves) };
    for (index, est) in estimates.into_iter().enumerate() {
        fold(&mut state, &est, cfg, index);
        if est.status == PeriodStatus::Solved {
            let gated_open: Vec<f64> = (0..valves)
                .map(|v| if est.gated[v] { est.estimates.open[v] } else { 0.0 })
                .collect();
            let gated_closed: Vec<f64> = (0..valves)
                .map(|v| if est.gated[valves + v] { est.estimates.closed[v] } else { 0.0 })
                .collect();
            table.unfiltered_max.max_into(&gated_open, &gated_closed);
        }
        table.filtered_max.max_into(&state.y_open, &state.y_closed);
        periods.push(PeriodRecord {
            index,
            status: est.status,
            retained: est.retained,
            estimates_open: est.estimates.open,
            estimates_closed: est.estimates.closed,
            gated: est.gated,
            filtered_open: state.y_open.clone(),
            filtered_closed: state.y_closed.clone(),
        });
    }

    let mut verdicts = Vec::new();
    for var in 0..2 * valves {
        let y = state.get(var);
        if let Some(period) = state.confirmed_at[var] {
            if y >= cfg.verdict_threshold {
                let (flat, mode) = if var < valves {
                    (var, FaultMode::JammedClosed)
                } else {
                    (var - valves, FaultMode::JammedOpen)
                };
                verdicts.push(Verdict { valve: config.valve_name(flat), mode, confidence: y, period });
            }
        }
    }
    verdicts.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));

    Ok(FaultReport {
        valves: (0..valves).map(|v| config.valve_name(v)).collect(),
        config_digest: config.digest(),
        periods,
        filtered: OpenClosed { open: state.y_open, closed: state.y_closed },
        table,
        verdicts,
    })
}

impl FaultReport {
    pub fn from_json_str(s: &str) -> Result<Self, PipelineError> {
        let report: Self = serde_json::from_str(s).map_err(|e| PipelineError::Report(e.to_string()))?;
        report.check_shape()?;
        Ok(report)
    }

    /// Every per-valve array must match the valve list.
    fn check_shape(&self) -> Result<(), PipelineError> {
        let n = self.valves.len();
        let bad = |what: &str| Err(PipelineError::Report(format!("{what} does not match {n} valves")));
        for (what, t) in [
            ("filtered", &self.filtered),
            ("table.filtered_max", &self.table.filtered_max),
            ("table.unfiltered_max", &self.table.unfiltered_max),
        ] {
            if t.open.len() != n || t.closed.len() != n {
                return bad(what);
            }
        }
        for p in &self.periods {
            let lens = [p.estimates_open.len(), p.estimates_closed.len(), p.filtered_open.len(), p.filtered_closed.len()];
            if lens.iter().any(|l| *l != n) || p.gated.len() != 2 * n {
                return bad(&format!("period {}", p.index));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Largest filtered value over valves without a verdict.
    pub fn false_filtered_max(&self) -> f64 {
        self.max_excluding(&self.table.filtered_max)
    }

    pub fn false_unfiltered_max(&self) -> f64 {
        self.max_excluding(&self.table.unfiltered_max)
    }

    fn max_excluding(&self, t: &OpenClosed) -> f64 {
        let mut m: f64 = 0.0;
        for (i, name) in self.valves.iter().enumerate() {
            let flagged = |mode| self.verdicts.iter().any(|v| &v.valve == name && v.mode == mode);
            if !flagged(FaultMode::JammedClosed) {
                m = m.max(t.open[i]);
            }
            if !flagged(FaultMode::JammedOpen) {
                m = m.max(t.closed[i]);
            }
        }
        m
    }

    /// Writes `period,valve,x_open,x_closed,filtered_open,filtered_closed`.
    pub fn write_series_csv<W: Write>(&self, out: W) -> Result<(), PipelineError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["period", "valve", "x_open", "x_closed", "filtered_open", "filtered_closed"])?;
        for p in &self.periods {
            for (i, name) in self.valves.iter().enumerate() {
                w.write_record([
                    p.index.to_string(),
                    name.clone(),
                    format!("{:.6}", p.estimates_open[i]),
                    format!("{:.6}", p.estimates_closed[i]),
                    format!("{:.6}", p.filtered_open[i]),
                    format!("{:.6}", p.filtered_closed[i]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Filtered versus unfiltered maxima per valve, with verdict rows marked.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let counts = |s: PeriodStatus| self.periods.iter().filter(|p| p.status == s).count();
        let _ = writeln!(
            out,
            "periods: {} ({} solved, {} uninformative, {} skipped)",
            self.periods.len(),
            counts(PeriodStatus::Solved),
            counts(PeriodStatus::Uninformative),
            counts(PeriodStatus::Skipped),
        );
        let _ = writeln!(
            out,
            "  {:<6} {:>10} {:>10} {:>10} {:>10}  {}",
            "valve", "filt open", "filt clsd", "raw open", "raw clsd", "fault"
        );
        for (i, name) in self.valves.iter().enumerate() {
            let verdict: Vec<String> = self
                .verdicts
                .iter()
                .filter(|v| &v.valve == name)
                .map(|v| format!("{} {:.2}", v.mode, v.confidence))
                .collect();
            let marker = if verdict.is_empty() { ' ' } else { '*' };
            let _ = writeln!(
                out,
                "{marker} {:<6} {:>10.2} {:>10.2} {:>10.2} {:>10.2}  {}",
                name,
                self.table.filtered_max.open[i],
                self.table.filtered_max.closed[i],
                self.table.unfiltered_max.open[i],
                self.table.unfiltered_max.closed[i],
                verdict.join(", "),
            );
        }
        let _ = writeln!(
            out,
            "largest value on valves without a verdict: filtered {:.2}, not filtered {:.2}",
            self.false_filtered_max(),
            self.false_unfiltered_max()
        );
        if self.verdicts.is_empty() {
            let _ = writeln!(out, "no faults identified");
        } else {
            for v in &self.verdicts {
                let _ = writeln!(
                    out,
                    "{} {} confidence={:.2} at period {}",
                    v.valve, v.mode, v.confidence, v.period
                );
            }
        }
        out
    }
}
