//! Steady-state model of a cylinder driven by four digital flow control units.
//!
//! Each unit (PA, BT, AT, PB) is a bank of parallel on/off valves. Valve flow
//! follows the orifice law `Q = u * kv * SP(dp)^alpha`, where `SP` is the
//! signed power. Chamber A is fed from supply through PA and drained to tank
//! through AT; chamber B is fed through PB and drained through BT. A positive
//! piston velocity extends the piston, growing chamber A.
//!
//! All quantities are SI: Pa, m³/s, m², N, m/s.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Pressure difference below which orifice flow is blended into a laminar
/// segment so the flow derivative stays bounded at zero.
pub const DEFAULT_LAMINAR_DP: f64 = 1.0e3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid valve parameters: {0}")]
    InvalidValve(String),
    #[error("invalid system configuration: {0}")]
    InvalidConfig(String),
    #[error("valve state word has {got} bits, expected {expected}")]
    StateLength { got: usize, expected: usize },
    #[error("invalid valve state word: {0}")]
    StateParse(String),
    #[error("steady state did not converge within {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("no open valve connects either chamber; chamber pressures are indeterminate")]
    SingularSystem,
    #[error("steady state out of range: p_a={p_a:.6e} Pa, p_b={p_b:.6e} Pa (limit {limit:.6e} Pa)")]
    OutOfRange { p_a: f64, p_b: f64, limit: f64 },
    #[error("failed to read configuration: {0}")]
    Io(String),
}

/// Flow coefficient and exponent of a single on/off valve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValveParams {
    pub kv: f64,
    pub alpha: f64,
}

impl ValveParams {
    pub fn new(kv: f64, alpha: f64) -> Result<Self, ModelError> {
        let p = Self { kv, alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.kv.is_finite() && self.kv > 0.0) {
            return Err(ModelError::InvalidValve(format!("kv must be > 0, got {}", self.kv)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(ModelError::InvalidValve(format!(
                "alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Flow through the valve when open, including the laminar blend below
    /// `laminar_dp`.
    pub fn open_flow(&self, dp: f64, laminar_dp: f64) -> f64 {
        self.kv * regularized_power(dp, self.alpha, laminar_dp)
    }

    /// Derivative of [`ValveParams::open_flow`] with respect to `dp`.
    pub fn open_flow_slope(&self, dp: f64, laminar_dp: f64) -> f64 {
        self.kv * regularized_power_slope(dp, self.alpha, laminar_dp)
    }
}

/// The four digital flow control units, in valve-word order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dfcu {
    PA,
    BT,
    AT,
    PB,
}

impl Dfcu {
    pub const ALL: [Dfcu; 4] = [Dfcu::PA, Dfcu::BT, Dfcu::AT, Dfcu::PB];

    pub fn position(self) -> usize {
        match self {
            Dfcu::PA => 0,
            Dfcu::BT => 1,
            Dfcu::AT => 2,
            Dfcu::PB => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dfcu::PA => "PA",
            Dfcu::BT => "BT",
            Dfcu::AT => "AT",
            Dfcu::PB => "PB",
        }
    }

    /// Pressure difference across a valve of this unit, upstream minus downstream.
    pub fn pressure_drop(self, pressures: &PressureState, tank_pressure: f64) -> f64 {
        match self {
            Dfcu::PA => pressures.p_s - pressures.p_a,
            Dfcu::AT => pressures.p_a - tank_pressure,
            Dfcu::PB => pressures.p_s - pressures.p_b,
            Dfcu::BT => pressures.p_b - tank_pressure,
        }
    }
}

impl FromStr for Dfcu {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "PA" => Ok(Dfcu::PA),
            "BT" => Ok(Dfcu::BT),
            "AT" => Ok(Dfcu::AT),
            "PB" => Ok(Dfcu::PB),
            other => Err(ModelError::StateParse(format!("unknown flow control unit '{other}'"))),
        }
    }
}

/// A single valve, addressed by unit and 0-based position inside the unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValveId {
    pub dfcu: Dfcu,
    pub index: usize,
}

impl ValveId {
    pub fn from_flat(flat: usize, valves_per_dfcu: usize) -> Self {
        Self {
            dfcu: Dfcu::ALL[flat / valves_per_dfcu],
            index: flat % valves_per_dfcu,
        }
    }

    pub fn flat(&self, valves_per_dfcu: usize) -> usize {
        self.dfcu.position() * valves_per_dfcu + self.index
    }

    /// Parses names like `AT3` (1-based valve number).
    pub fn parse(s: &str, valves_per_dfcu: usize) -> Result<Self, ModelError> {
        let s = s.trim();
        if s.len() < 3 || !s.is_char_boundary(2) {
            return Err(ModelError::StateParse(format!("malformed valve name '{s}'")));
        }
        let dfcu: Dfcu = s[..2].parse()?;
        let number: usize = s[2..]
            .parse()
            .map_err(|_| ModelError::StateParse(format!("malformed valve name '{s}'")))?;
        if number == 0 || number > valves_per_dfcu {
            return Err(ModelError::StateParse(format!(
                "valve index out of range: '{s}' (unit has {valves_per_dfcu} valves)"
            )));
        }
        Ok(Self { dfcu, index: number - 1 })
    }
}

impl fmt::Display for ValveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.dfcu.name(), self.index + 1)
    }
}

/// Valve lists per unit, each in ascending valve number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DfcuValves {
    #[serde(rename = "PA")]
    pub pa: Vec<ValveParams>,
    #[serde(rename = "BT")]
    pub bt: Vec<ValveParams>,
    #[serde(rename = "AT")]
    pub at: Vec<ValveParams>,
    #[serde(rename = "PB")]
    pub pb: Vec<ValveParams>,
}

impl DfcuValves {
    pub fn get(&self, dfcu: Dfcu) -> &[ValveParams] {
        match dfcu {
            Dfcu::PA => &self.pa,
            Dfcu::BT => &self.bt,
            Dfcu::AT => &self.at,
            Dfcu::PB => &self.pb,
        }
    }

    pub fn get_mut(&mut self, dfcu: Dfcu) -> &mut Vec<ValveParams> {
        match dfcu {
            Dfcu::PA => &mut self.pa,
            Dfcu::BT => &mut self.bt,
            Dfcu::AT => &mut self.at,
            Dfcu::PB => &mut self.pb,
        }
    }
}

fn default_laminar_dp() -> f64 {
    DEFAULT_LAMINAR_DP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub area_a: f64,
    pub area_b: f64,
    pub tank_pressure: f64,
    pub dfcus: DfcuValves,
    #[serde(default = "default_laminar_dp")]
    pub laminar_dp: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self::binary_coded(5, 1.0e-8, 0.5)
    }
}

impl SystemConfig {
    /// Four identical units of `n` valves whose capacities double with each
    /// valve number, on the default asymmetric cylinder.
    pub fn binary_coded(n: usize, kv_base: f64, alpha: f64) -> Self {
        let bank: Vec<ValveParams> = (0..n)
            .map(|i| ValveParams { kv: kv_base * (1u64 << i) as f64, alpha })
            .collect();
        Self {
            area_a: 2.0e-3,
            area_b: 1.0e-3,
            tank_pressure: 0.0,
            dfcus: DfcuValves { pa: bank.clone(), bt: bank.clone(), at: bank.clone(), pb: bank },
            laminar_dp: DEFAULT_LAMINAR_DP,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.area_a.is_finite() && self.area_a > 0.0) {
            return Err(ModelError::InvalidConfig(format!("area_a must be > 0, got {}", self.area_a)));
        }
        if !(self.area_b.is_finite() && self.area_b > 0.0) {
            return Err(ModelError::InvalidConfig(format!("area_b must be > 0, got {}", self.area_b)));
        }
        if !(self.tank_pressure.is_finite() && self.tank_pressure >= 0.0) {
            return Err(ModelError::InvalidConfig(format!(
                "tank_pressure must be >= 0, got {}",
                self.tank_pressure
            )));
        }
        if !(self.laminar_dp.is_finite() && self.laminar_dp > 0.0) {
            return Err(ModelError::InvalidConfig(format!(
                "laminar_dp must be > 0, got {}",
                self.laminar_dp
            )));
        }
        let n = self.dfcus.pa.len();
        if n == 0 {
            return Err(ModelError::InvalidConfig("each unit needs at least one valve".into()));
        }
        for dfcu in Dfcu::ALL {
            let bank = self.dfcus.get(dfcu);
            if bank.len() != n {
                return Err(ModelError::InvalidConfig(format!(
                    "unit {} has {} valves, expected {n}",
                    dfcu.name(),
                    bank.len()
                )));
            }
            for (i, v) in bank.iter().enumerate() {
                v.validate().map_err(|e| {
                    ModelError::InvalidConfig(format!("{}{}: {e}", dfcu.name(), i + 1))
                })?;
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self, ModelError> {
        let cfg: SystemConfig =
            serde_json::from_str(s).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn valves_per_dfcu(&self) -> usize {
        self.dfcus.pa.len()
    }

    pub fn valve_count(&self) -> usize {
        4 * self.valves_per_dfcu()
    }

    /// Parameters of the valve at flat position `flat` in valve-word order.
    pub fn valve(&self, flat: usize) -> &ValveParams {
        let id = ValveId::from_flat(flat, self.valves_per_dfcu());
        &self.dfcus.get(id.dfcu)[id.index]
    }

    pub fn valve_name(&self, flat: usize) -> String {
        ValveId::from_flat(flat, self.valves_per_dfcu()).to_string()
    }

    /// Short stable identifier of this configuration (hex, 16 chars).
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let hash = Sha256::digest(json.as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Sum of every valve's fully open flow at the given supply pressure;
    /// a flow scale for normalizing residuals.
    pub fn capacity_flow(&self, p_s: f64) -> f64 {
        let dp = (p_s - self.tank_pressure).abs().max(self.laminar_dp);
        Dfcu::ALL
            .iter()
            .flat_map(|d| self.dfcus.get(*d).iter())
            .map(|v| v.open_flow(dp, self.laminar_dp))
            .sum()
    }
}

/// Commanded (or actual) open/closed state of every valve, ordered
/// PA1..PAn, BT1..BTn, AT1..ATn, PB1..PBn.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ValveStateWord {
    bits: Vec<bool>,
}

impl ValveStateWord {
    pub fn closed(len: usize) -> Self {
        Self { bits: vec![false; len] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// Builds a word from one binary code per unit; bit `i` of a code opens
    /// valve `i + 1`.
    pub fn from_codes(n: usize, pa: u32, bt: u32, at: u32, pb: u32) -> Self {
        let mut bits = Vec::with_capacity(4 * n);
        for code in [pa, bt, at, pb] {
            bits.extend((0..n).map(|i| code >> i & 1 == 1));
        }
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, flat: usize) -> bool {
        self.bits[flat]
    }

    pub fn set(&mut self, flat: usize, open: bool) {
        self.bits[flat] = open;
    }

    pub fn is_open(&self, dfcu: Dfcu, index: usize) -> bool {
        let n = self.bits.len() / 4;
        self.bits[dfcu.position() * n + index]
    }

    pub fn any_open(&self, dfcu: Dfcu) -> bool {
        let n = self.bits.len() / 4;
        self.bits[dfcu.position() * n..(dfcu.position() + 1) * n].iter().any(|b| *b)
    }

    pub fn check_len(&self, config: &SystemConfig) -> Result<(), ModelError> {
        if self.bits.len() != config.valve_count() {
            return Err(ModelError::StateLength {
                got: self.bits.len(),
                expected: config.valve_count(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for ValveStateWord {
    /// Groups of `n` bits per unit separated by spaces.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = (self.bits.len() / 4).max(1);
        for (i, b) in self.bits.iter().enumerate() {
            if i > 0 && i % n == 0 {
                f.write_str(" ")?;
            }
            f.write_str(if *b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for ValveStateWord {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut bits = Vec::new();
        for c in s.chars() {
            match c {
                '0' => bits.push(false),
                '1' => bits.push(true),
                c if c.is_whitespace() || c == '_' || c == '|' => {}
                other => {
                    return Err(ModelError::StateParse(format!("unexpected character '{other}'")))
                }
            }
        }
        if bits.is_empty() || bits.len() % 4 != 0 {
            return Err(ModelError::StateParse(format!(
                "word length {} is not a positive multiple of 4",
                bits.len()
            )));
        }
        Ok(Self { bits })
    }
}

impl Serialize for ValveStateWord {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ValveStateWord {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PressureState {
    pub p_s: f64,
    pub p_a: f64,
    pub p_b: f64,
}

impl PressureState {
    pub fn new(p_s: f64, p_a: f64, p_b: f64) -> Self {
        Self { p_s, p_a, p_b }
    }

    pub fn is_valid(&self) -> bool {
        [self.p_s, self.p_a, self.p_b].iter().all(|p| p.is_finite() && *p >= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyState {
    pub pressure: PressureState,
    /// Piston velocity, positive when chamber A grows.
    pub velocity: f64,
    pub force: f64,
}

/// Aggregate flow of each unit, in m³/s.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DfcuFlows {
    pub q_pa: f64,
    pub q_at: f64,
    pub q_pb: f64,
    pub q_bt: f64,
}

/// `sign(x) * |x|^alpha`.
pub fn signed_power(x: f64, alpha: f64) -> f64 {
    x.signum() * x.abs().powf(alpha)
}

/// Signed power with an odd cubic blend on `|x| < laminar_dp`, matching value
/// and slope at the blend points.
pub fn regularized_power(x: f64, alpha: f64, laminar_dp: f64) -> f64 {
    let d = laminar_dp;
    if x.abs() >= d || alpha >= 1.0 {
        return signed_power(x, alpha);
    }
    let (a, b) = blend_coefficients(alpha, d);
    x * (a + b * x * x)
}

pub fn regularized_power_slope(x: f64, alpha: f64, laminar_dp: f64) -> f64 {
    let d = laminar_dp;
    if alpha >= 1.0 {
        return 1.0;
    }
    if x.abs() >= d {
        return alpha * x.abs().powf(alpha - 1.0);
    }
    let (a, b) = blend_coefficients(alpha, d);
    a + 3.0 * b * x * x
}

// f(x) = a x + b x^3 with f(d) = d^alpha and f'(d) = alpha d^(alpha-1).
fn blend_coefficients(alpha: f64, d: f64) -> (f64, f64) {
    let a = d.powf(alpha - 1.0) * (3.0 - alpha) / 2.0;
    let b = (alpha - 1.0) * d.powf(alpha - 3.0) / 2.0;
    (a, b)
}

/// Flow through one valve: `kv * SP(dp)^alpha` when open, zero when closed.
pub fn valve_flow(open: bool, params: &ValveParams, dp: f64, laminar_dp: f64) -> f64 {
    if open {
        params.open_flow(dp, laminar_dp)
    } else {
        0.0
    }
}

/// The flow a commanded-closed valve would pass if it were open.
pub fn complement_flow(open: bool, params: &ValveParams, dp: f64, laminar_dp: f64) -> f64 {
    valve_flow(!open, params, dp, laminar_dp)
}

pub fn dfcu_flows(
    config: &SystemConfig,
    state: &ValveStateWord,
    pressures: &PressureState,
) -> DfcuFlows {
    let n = config.valves_per_dfcu();
    let sum = |dfcu: Dfcu| -> f64 {
        let dp = dfcu.pressure_drop(pressures, config.tank_pressure);
        config
            .dfcus
            .get(dfcu)
            .iter()
            .enumerate()
            .map(|(i, v)| valve_flow(state.get(dfcu.position() * n + i), v, dp, config.laminar_dp))
            .sum()
    };
    DfcuFlows { q_pa: sum(Dfcu::PA), q_at: sum(Dfcu::AT), q_pb: sum(Dfcu::PB), q_bt: sum(Dfcu::BT) }
}

/// `(Q_PA - Q_AT)/A_A + (Q_PB - Q_BT)/A_B`; zero when the commanded state and
/// the pressures are consistent with a steady state.
pub fn balance_residual(
    config: &SystemConfig,
    state: &ValveStateWord,
    pressures: &PressureState,
) -> f64 {
    let q = dfcu_flows(config, state, pressures);
    (q.q_pa - q.q_at) / config.area_a + (q.q_pb - q.q_bt) / config.area_b
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Convergence threshold on the max normalized equation residual.
    pub tolerance: f64,
    pub max_halvings: usize,
    /// Solutions with a chamber pressure above `max_pressure_ratio * p_s`
    /// are rejected.
    pub max_pressure_ratio: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iters: 100, tolerance: 1.0e-13, max_halvings: 30, max_pressure_ratio: 2.0 }
    }
}

/// Normalized residuals of the three steady-state equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyResiduals {
    pub chamber_a: f64,
    pub chamber_b: f64,
    pub force: f64,
}

impl SteadyResiduals {
    pub fn max_abs(&self) -> f64 {
        self.chamber_a.abs().max(self.chamber_b.abs()).max(self.force.abs())
    }

    fn norm_sq(&self) -> f64 {
        self.chamber_a.powi(2) + self.chamber_b.powi(2) + self.force.powi(2)
    }
}

struct Scales {
    flow: f64,
    force: f64,
}

fn scales(config: &SystemConfig, p_s: f64) -> Scales {
    let flow = config.capacity_flow(p_s);
    let force = config.area_a.max(config.area_b) * p_s.max(config.tank_pressure).max(1.0);
    Scales { flow: if flow > 0.0 { flow } else { 1.0 }, force }
}

/// Evaluates the chamber-A continuity, chamber-B continuity and force balance
/// equations at `(velocity, p_a, p_b)`, normalized by the system flow capacity
/// and the supply-pressure force.
pub fn steady_residuals(
    config: &SystemConfig,
    state: &ValveStateWord,
    p_s: f64,
    force: f64,
    velocity: f64,
    p_a: f64,
    p_b: f64,
) -> SteadyResiduals {
    let sc = scales(config, p_s);
    let q = dfcu_flows(config, state, &PressureState::new(p_s, p_a, p_b));
    SteadyResiduals {
        chamber_a: (q.q_pa - q.q_at - config.area_a * velocity) / sc.flow,
        chamber_b: (q.q_pb - q.q_bt + config.area_b * velocity) / sc.flow,
        force: (config.area_a * p_a - config.area_b * p_b - force) / sc.force,
    }
}

/// Derivatives of the net chamber inflows with respect to the chamber pressure.
fn chamber_slopes(config: &SystemConfig, state: &ValveStateWord, p: &PressureState) -> (f64, f64) {
    let n = config.valves_per_dfcu();
    let lam = config.laminar_dp;
    let slope = |dfcu: Dfcu| -> f64 {
        let dp = dfcu.pressure_drop(p, config.tank_pressure);
        config
            .dfcus
            .get(dfcu)
            .iter()
            .enumerate()
            .filter(|(i, _)| state.get(dfcu.position() * n + i))
            .map(|(_, v)| v.open_flow_slope(dp, lam))
            .sum()
    };
    // Q_PA falls and Q_AT rises with p_a; same for B.
    let da = -slope(Dfcu::PA) - slope(Dfcu::AT);
    let db = -slope(Dfcu::PB) - slope(Dfcu::BT);
    (da, db)
}

/// Solves the steady state `(v, p_a, p_b)` for a valve state, supply pressure
/// and external force with damped Newton iteration.
pub fn steady_state_solve(
    config: &SystemConfig,
    state: &ValveStateWord,
    p_s: f64,
    force: f64,
) -> Result<SteadyState, ModelError> {
    steady_state_solve_with(config, state, p_s, force, &SolverOptions::default())
}

pub fn steady_state_solve_with(
    config: &SystemConfig,
    state: &ValveStateWord,
    p_s: f64,
    force: f64,
    opts: &SolverOptions,
) -> Result<SteadyState, ModelError> {
    state.check_len(config)?;
    let a_connected = state.any_open(Dfcu::PA) || state.any_open(Dfcu::AT);
    let b_connected = state.any_open(Dfcu::PB) || state.any_open(Dfcu::BT);
    if !a_connected && !b_connected {
        return Err(ModelError::SingularSystem);
    }

    let sc = scales(config, p_s);
    let (aa, ab) = (config.area_a, config.area_b);
    let mid = 0.5 * (p_s + config.tank_pressure);
    let (mut v, mut pa, mut pb) = (0.0, mid, mid);
    let eval = |v: f64, pa: f64, pb: f64| steady_residuals(config, state, p_s, force, v, pa, pb);
    let mut res = eval(v, pa, pb);

    for _ in 0..opts.max_iters {
        if res.max_abs() <= opts.tolerance {
            let limit = opts.max_pressure_ratio * p_s;
            if !(pa >= 0.0 && pb >= 0.0 && pa <= limit && pb <= limit) {
                return Err(ModelError::OutOfRange { p_a: pa, p_b: pb, limit });
            }
            return Ok(SteadyState {
                pressure: PressureState::new(p_s, pa, pb),
                velocity: v,
                force,
            });
        }

        let (da, db) = chamber_slopes(config, state, &PressureState::new(p_s, pa, pb));
        // Unknown order (v, p_a, p_b).
        let jac = [
            [-aa / sc.flow, da / sc.flow, 0.0],
            [ab / sc.flow, 0.0, db / sc.flow],
            [0.0, aa / sc.force, -ab / sc.force],
        ];
        let rhs = [-res.chamber_a, -res.chamber_b, -res.force];
        let step = solve3(jac, rhs).ok_or(ModelError::SingularSystem)?;

        let base = res.norm_sq();
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = (v + scale * step[0], pa + scale * step[1], pb + scale * step[2]);
            let r = eval(cand.0, cand.1, cand.2);
            if r.norm_sq() < base {
                accepted = Some((cand, r));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some(((nv, npa, npb), r)) => {
                v = nv;
                pa = npa;
                pb = npb;
                res = r;
            }
            // No descent at machine precision; accept if already tight enough.
            None => break,
        }
    }

    if res.max_abs() <= opts.tolerance.max(1.0e-10) {
        let limit = opts.max_pressure_ratio * p_s;
        if !(pa >= 0.0 && pb >= 0.0 && pa <= limit && pb <= limit) {
            return Err(ModelError::OutOfRange { p_a: pa, p_b: pb, limit });
        }
        return Ok(SteadyState { pressure: PressureState::new(p_s, pa, pb), velocity: v, force });
    }
    Err(ModelError::NoConvergence { iterations: opts.max_iters, residual: res.max_abs() })
}

/// Gaussian elimination with partial pivoting on a 3x3 system.
fn solve3(mut m: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1.0e-300 {
            return None;
        }
        m.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut s = b[row];
        for k in row + 1..3 {
            s -= m[row][k] * x[k];
        }
        x[row] = s / m[row][row];
    }
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}
