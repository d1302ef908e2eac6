//! Per-period fault estimation.
//!
//! Every sample contributes one row relating the balance residual to the
//! deviation variables of all valves: `x_open[v]` (valve commanded open but
//! passing less than expected) and `x_closed[v]` (valve commanded closed but
//! passing flow). A diagonal penalty block pulls every variable toward zero,
//! and the stacked system is solved by median regression on the unit box.

pub mod lp;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    balance_residual, complement_flow, valve_flow, Dfcu, PressureState, SystemConfig, ValveId,
    ValveStateWord,
};
use crate::simulator::Sample;

pub use lp::{check_loss, quantile_objective, LpError, LpOptions, Matrix, QrSolution};

/// Flow scale (m/s) below which a period carries no usable evidence.
pub const MIN_FLOW_SCALE: f64 = 1.0e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("period contains no samples")]
    EmptyPeriod,
    #[error("numerical failure: {0}")]
    NumericalFailure(#[from] LpError),
}

/// Deviation estimates per valve, both in valve-word order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultVariables {
    /// Near 1 when a commanded-open valve does not open (jammed closed).
    pub open: Vec<f64>,
    /// Near 1 when a commanded-closed valve does not close (jammed open).
    pub closed: Vec<f64>,
}

impl FaultVariables {
    pub fn zeros(valves: usize) -> Self {
        Self { open: vec![0.0; valves], closed: vec![0.0; valves] }
    }

    /// Splits a stacked `[open..., closed...]` vector.
    pub fn from_stacked(x: &[f64]) -> Self {
        let half = x.len() / 2;
        Self { open: x[..half].to_vec(), closed: x[half..].to_vec() }
    }

    pub fn stacked(&self) -> Vec<f64> {
        self.open.iter().chain(&self.closed).copied().collect()
    }

    pub fn valve_count(&self) -> usize {
        self.open.len()
    }
}

/// How the closed-deviation penalties are set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosedPenalty {
    /// `closed_weight` for every variable, in normalized units.
    Uniform,
    /// `closed_weight` times the mean complement flow of the column, the
    /// same rule as the open block.
    Flow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    /// Multiplier on the averaged-flow penalties of the open-deviation block.
    pub open_scale: f64,
    pub closed_weight: f64,
    #[serde(default = "default_closed_mode")]
    pub closed_mode: ClosedPenalty,
    /// Divide data rows by the period's flow scale before solving.
    pub normalize: bool,
    /// Prefer a binary explanation over a fractional optimum when it costs
    /// at most `tie_tolerance` (relative) more.
    #[serde(default = "default_true")]
    pub resolve_ties: bool,
    #[serde(default = "default_tie_tolerance")]
    pub tie_tolerance: f64,
}

/// Penalty rows weigh as much as this many average data rows. At 1, the
/// few rows hit by a transition spike can outweigh the penalty and a whole
/// unit gets flagged; 5 keeps those periods clean while a valve active in
/// 10% of a period still has twice the weight needed to register.
pub const DEFAULT_PENALTY_SCALE: f64 = 5.0;

fn default_tie_tolerance() -> f64 {
    0.25
}

fn default_true() -> bool {
    true
}

fn default_closed_mode() -> ClosedPenalty {
    ClosedPenalty::Flow
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            open_scale: DEFAULT_PENALTY_SCALE,
            closed_weight: DEFAULT_PENALTY_SCALE,
            closed_mode: default_closed_mode(),
            normalize: true,
            resolve_ties: true,
            tie_tolerance: default_tie_tolerance(),
        }
    }
}

/// Stacked data and penalty rows of one analysis period.
#[derive(Debug, Clone, PartialEq)]
pub struct SensingSystem {
    pub matrix: Matrix,
    pub rhs: Vec<f64>,
    /// Sample position (within the period slice) of each data row.
    pub row_meta: Vec<usize>,
    /// Divisor applied to data rows and rhs (1 when not normalized).
    pub scale: f64,
    /// True when the period carries no flow evidence at all.
    pub uninformative: bool,
}

impl SensingSystem {
    pub fn data_rows(&self) -> usize {
        self.row_meta.len()
    }

    pub fn variables(&self) -> usize {
        self.matrix.cols()
    }

    /// Penalty diagonal entries.
    pub fn penalties(&self) -> Vec<f64> {
        let k = self.data_rows();
        (0..self.variables()).map(|j| self.matrix.get(k + j, j)).collect()
    }

    /// Dumps the system as CSV: `row,sample,rhs,c1..cN` (penalty rows have an
    /// empty sample field).
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["row".to_string(), "sample".into(), "rhs".into()];
        header.extend((1..=self.variables()).map(|j| format!("c{j}")));
        w.write_record(&header)?;
        for i in 0..self.matrix.rows() {
            let mut rec = vec![
                i.to_string(),
                self.row_meta.get(i).map(|s| s.to_string()).unwrap_or_default(),
                format!("{:e}", self.rhs[i]),
            ];
            rec.extend(self.matrix.row(i).iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Sign of the open-deviation coefficient for each unit; the closed-deviation
/// coefficient carries the opposite sign.
fn open_sign(dfcu: Dfcu) -> f64 {
    match dfcu {
        Dfcu::PA | Dfcu::PB => 1.0,
        Dfcu::BT | Dfcu::AT => -1.0,
    }
}

fn chamber_area(config: &SystemConfig, dfcu: Dfcu) -> f64 {
    match dfcu {
        Dfcu::PA | Dfcu::AT => config.area_a,
        Dfcu::PB | Dfcu::BT => config.area_b,
    }
}

/// Coefficients of one data row (open block then closed block) and the
/// measured balance residual.
pub fn sensing_row(
    config: &SystemConfig,
    pressures: &PressureState,
    commanded: &ValveStateWord,
) -> (Vec<f64>, f64) {
    let count = config.valve_count();
    let n = config.valves_per_dfcu();
    let mut row = vec![0.0; 2 * count];
    for flat in 0..count {
        let id = ValveId::from_flat(flat, n);
        let params = &config.dfcus.get(id.dfcu)[id.index];
        let dp = id.dfcu.pressure_drop(pressures, config.tank_pressure);
        let u = commanded.get(flat);
        let sign = open_sign(id.dfcu);
        let area = chamber_area(config, id.dfcu);
        row[flat] = sign * valve_flow(u, params, dp, config.laminar_dp) / area;
        row[count + flat] = -sign * complement_flow(u, params, dp, config.laminar_dp) / area;
    }
    (row, balance_residual(config, commanded, pressures))
}

/// Builds the stacked system for one period of samples.
pub fn build_system(
    config: &SystemConfig,
    samples: &[Sample],
    penalty: &PenaltyConfig,
) -> Result<SensingSystem, EstimatorError> {
    let rows: Vec<(Vec<f64>, f64)> =
        samples.iter().map(|s| sensing_row(config, &s.pressures, &s.commanded)).collect();
    build_system_from_rows(config.valve_count(), rows, penalty)
}

fn build_system_from_rows(
    valves: usize,
    rows: Vec<(Vec<f64>, f64)>,
    penalty: &PenaltyConfig,
) -> Result<SensingSystem, EstimatorError> {
    if rows.is_empty() {
        return Err(EstimatorError::EmptyPeriod);
    }
    let k = rows.len();
    let nvar = 2 * valves;

    // Mean |q| per column over the samples where the column is nonzero.
    let mut sums = vec![0.0; nvar];
    let mut counts = vec![0usize; nvar];
    for (row, _) in &rows {
        for (j, v) in row.iter().enumerate() {
            if *v != 0.0 {
                sums[j] += v.abs();
                counts[j] += 1;
            }
        }
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let flow_scale = means.iter().copied().fold(0.0, f64::max);
    let uninformative = flow_scale < MIN_FLOW_SCALE;
    let scale = if penalty.normalize && !uninformative { flow_scale } else { 1.0 };

    let mut pen: Vec<f64> = (0..nvar)
        .map(|j| {
            if j < valves {
                penalty.open_scale * means[j] / scale
            } else {
                match penalty.closed_mode {
                    ClosedPenalty::Uniform => penalty.closed_weight,
                    ClosedPenalty::Flow => penalty.closed_weight * means[j] / scale,
                }
            }
        })
        .collect();
    let floor = pen.iter().copied().fold(0.0, f64::max);
    let floor = if floor > 0.0 { floor } else { penalty.open_scale.max(f64::MIN_POSITIVE) };
    for p in pen.iter_mut().filter(|p| **p <= 0.0) {
        *p = floor;
    }

    let mut matrix = Matrix::zeros(k + nvar, nvar);
    let mut rhs = vec![0.0; k + nvar];
    for (i, (row, r)) in rows.iter().enumerate() {
        for (dst, src) in matrix.row_mut(i).iter_mut().zip(row) {
            *dst = src / scale;
        }
        rhs[i] = r / scale;
    }
    for (j, p) in pen.iter().enumerate() {
        matrix.set(k + j, j, *p);
    }

    Ok(SensingSystem { matrix, rhs, row_meta: (0..k).collect(), scale, uninformative })
}

/// Median (or general quantile) regression of the system on the unit box.
pub fn quantile_regression(system: &SensingSystem, tau: f64) -> Result<QrSolution, EstimatorError> {
    Ok(lp::solve_box_quantile(&system.matrix, &system.rhs, tau, &LpOptions::default())?)
}

const TIE_TOLERANCE: f64 = 1e-9;
const FRACTION_EPS: f64 = 1e-9;

/// Tie repair for rank-deficient periods.
///
/// When valves are always commanded together, or a step contributes a single
/// distinct row, a jammed valve is explained equally well by fractional
/// combinations of other columns because every penalty scales with flow.
/// Capacities that are powers of two make the binary explanation unique, so
/// binary candidates (every assignment within one DFCU block, all other
/// variables zero) are scored and the best one replaces the LP point when it
/// is as good. Among equal candidates the sparsest wins.
pub fn resolve_ties(
    system: &SensingSystem,
    tau: f64,
    valves_per_dfcu: usize,
    relative: f64,
    sol: &mut QrSolution,
) {
    let n = valves_per_dfcu;
    let a = &system.matrix;
    let nvar = a.cols();
    if n == 0 || n > 12 || nvar % n != 0 {
        return;
    }
    let tol = TIE_TOLERANCE * sol.objective.abs().max(1.0);
    let slack = tol.max(relative * sol.objective.abs());
    let is_binary = |x: &[f64]| x.iter().all(|v| *v <= FRACTION_EPS || *v >= 1.0 - FRACTION_EPS);
    let ones = |x: &[f64]| x.iter().filter(|v| **v >= 1.0 - FRACTION_EPS).count();
    let lp_binary = is_binary(&sol.x);
    let lp_ones = ones(&sol.x);

    let mut best = Some((binary_objective(a, &system.rhs, &[], tau), 0, Vec::new()));
    let mut support = Vec::with_capacity(n);
    for start in (0..nvar).step_by(n) {
        for mask in 1u32..(1 << n) {
            support.clear();
            support.extend((0..n).filter(|i| mask >> i & 1 == 1).map(|i| start + i));
            let obj = binary_objective(a, &system.rhs, &support, tau);
            let better = match &best {
                None => true,
                Some((o, c, _)) => obj < o - tol || (obj <= o + tol && support.len() < *c),
            };
            if better {
                best = Some((obj, support.len(), support.clone()));
            }
        }
    }
    let Some((obj, count, support)) = best else { return };
    let as_good = obj <= sol.objective + slack;
    if as_good && (!lp_binary || count < lp_ones) {
        sol.x = vec![0.0; nvar];
        for j in support {
            sol.x[j] = 1.0;
        }
        sol.objective = obj;
    }
}

/// Objective at the binary point whose ones are `support`.
fn binary_objective(a: &Matrix, b: &[f64], support: &[usize], tau: f64) -> f64 {
    (0..a.rows())
        .map(|i| {
            let row = a.row(i);
            let ax: f64 = support.iter().map(|&j| row[j]).sum();
            check_loss(b[i] - ax, tau)
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodEstimate {
    pub variables: FaultVariables,
    pub objective: f64,
    pub uninformative: bool,
}

/// Builds and solves one period; idle periods return zeros flagged
/// uninformative without solving.
pub fn estimate_period(
    config: &SystemConfig,
    samples: &[Sample],
    penalty: &PenaltyConfig,
    tau: f64,
) -> Result<PeriodEstimate, EstimatorError> {
    let system = build_system(config, samples, penalty)?;
    if system.uninformative {
        return Ok(PeriodEstimate {
            variables: FaultVariables::zeros(config.valve_count()),
            objective: 0.0,
            uninformative: true,
        });
    }
    let mut sol = quantile_regression(&system, tau)?;
    if penalty.resolve_ties {
        resolve_ties(&system, tau, config.valves_per_dfcu(), penalty.tie_tolerance, &mut sol);
    }
    Ok(PeriodEstimate {
        variables: FaultVariables::from_stacked(&sol.x),
        objective: sol.objective,
        uninformative: false,
    })
}
