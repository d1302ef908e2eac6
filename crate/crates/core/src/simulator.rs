//! Quasi-static trace generator with valve fault injection.
//!
//! Every sample is an independent steady-state solve with the *actual* valve
//! word (commanded word with faults applied). The trace records only the
//! commanded word, so a jammed valve is visible to diagnostics solely through
//! the pressures. Sensor noise and decaying pressure spikes after each
//! commanded transition are superimposed on the recorded pressures.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    steady_state_solve, ModelError, PressureState, SystemConfig, ValveId, ValveStateWord,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("two faults target valve {0}")]
    ConflictingFaults(String),
    #[error("valve index out of range: {index} (system has {count} valves)")]
    ValveOutOfRange { index: usize, count: usize },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid fault specification: {0}")]
    InvalidFault(String),
    #[error("steady state failed at sample {sample}: {source}")]
    Solve { sample: usize, source: ModelError },
    #[error("failed to read scenario: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultMode {
    JammedOpen,
    JammedClosed,
}

impl fmt::Display for FaultMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultMode::JammedOpen => "jammed-open",
            FaultMode::JammedClosed => "jammed-closed",
        })
    }
}

/// Ground-truth fault injected into a simulation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    /// Position in valve-word order.
    pub valve_index: usize,
    pub mode: FaultMode,
    #[serde(default)]
    pub onset_sample: usize,
}

impl FaultSpec {
    pub fn new(valve_index: usize, mode: FaultMode) -> Self {
        Self { valve_index, mode, onset_sample: 0 }
    }

    /// Parses the shorthand `AT3:closed`, `PB3:open` or `AT3:closed@200`
    /// (onset sample after `@`).
    pub fn parse(s: &str, valves_per_dfcu: usize) -> Result<Self, SimError> {
        let (valve, rest) = s
            .split_once(':')
            .ok_or_else(|| SimError::InvalidFault(format!("expected VALVE:MODE, got '{s}'")))?;
        let (mode, onset) = match rest.split_once('@') {
            Some((m, o)) => {
                let onset = o
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| SimError::InvalidFault(format!("bad onset sample in '{s}'")))?;
                (m, onset)
            }
            None => (rest, 0),
        };
        let id = ValveId::parse(valve, valves_per_dfcu)
            .map_err(|e| SimError::InvalidFault(e.to_string()))?;
        let mode: FaultMode = mode.trim().to_ascii_lowercase().parse()?;
        Ok(Self { valve_index: id.flat(valves_per_dfcu), mode, onset_sample: onset })
    }
}

/// Applies active faults to a commanded word; the input is left untouched.
pub fn apply_fault(
    commanded: &ValveStateWord,
    faults: &[FaultSpec],
    sample_index: usize,
) -> Result<ValveStateWord, SimError> {
    validate_faults(faults, commanded.len())?;
    let mut actual = commanded.clone();
    for f in faults.iter().filter(|f| sample_index >= f.onset_sample) {
        actual.set(f.valve_index, f.mode == FaultMode::JammedOpen);
    }
    Ok(actual)
}

fn validate_faults(faults: &[FaultSpec], count: usize) -> Result<(), SimError> {
    for (i, f) in faults.iter().enumerate() {
        if f.valve_index >= count {
            return Err(SimError::ValveOutOfRange { index: f.valve_index, count });
        }
        if faults[..i].iter().any(|g| g.valve_index == f.valve_index) {
            return Err(SimError::ConflictingFaults(format!("#{}", f.valve_index)));
        }
    }
    Ok(())
}

/// One constant-command segment of a duty cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub duration: usize,
    pub valves: ValveStateWord,
    #[serde(default)]
    pub force: f64,
}

fn default_sample_period() -> f64 {
    0.01
}
fn default_supply() -> f64 {
    10.0e6
}
fn default_noise() -> f64 {
    20.0e3
}
fn default_spike_magnitude() -> f64 {
    0.5e6
}
fn default_spike_decay() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub steps: Vec<Step>,
    #[serde(default = "default_sample_period")]
    pub sample_period: f64,
    #[serde(default = "default_supply")]
    pub supply_pressure: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default = "default_spike_magnitude")]
    pub spike_magnitude: f64,
    /// Spike e-folding time in samples.
    #[serde(default = "default_spike_decay")]
    pub spike_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Scenario {
    pub fn new(steps: Vec<Step>) -> Self {
        Self {
            steps,
            sample_period: default_sample_period(),
            supply_pressure: default_supply(),
            noise_sigma: default_noise(),
            spike_magnitude: default_spike_magnitude(),
            spike_decay: default_spike_decay(),
            seed: 0,
        }
    }

    /// Same scenario without noise or spikes.
    pub fn noiseless(mut self) -> Self {
        self.noise_sigma = 0.0;
        self.spike_magnitude = 0.0;
        self
    }

    pub fn total_samples(&self) -> usize {
        self.steps.iter().map(|s| s.duration).sum()
    }

    pub fn validate(&self, config: &SystemConfig) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if self.steps.is_empty() {
            return bad("scenario has no steps".into());
        }
        if !(self.sample_period > 0.0 && self.sample_period.is_finite()) {
            return bad(format!("sample_period must be > 0, got {}", self.sample_period));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.supply_pressure > config.tank_pressure && self.supply_pressure.is_finite()) {
            return bad(format!(
                "supply_pressure must exceed tank pressure, got {}",
                self.supply_pressure
            ));
        }
        if !(self.spike_magnitude.is_finite() && self.spike_decay > 0.0) {
            return bad("spike_magnitude must be finite and spike_decay > 0".into());
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.duration == 0 {
                return bad(format!("step {i} has zero duration"));
            }
            if s.valves.len() != config.valve_count() {
                return bad(format!(
                    "step {i} has {} valve bits, expected {}",
                    s.valves.len(),
                    config.valve_count()
                ));
            }
            if !s.force.is_finite() {
                return bad(format!("step {i} force is not finite"));
            }
        }
        Ok(())
    }
}

/// Scenario document as stored on disk: either explicit steps or a generated
/// duty cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub steps: Option<Vec<Step>>,
    #[serde(default)]
    pub duty_cycle: Option<DutyCycle>,
    #[serde(default = "default_sample_period")]
    pub sample_period: f64,
    #[serde(default = "default_supply")]
    pub supply_pressure: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default = "default_spike_magnitude")]
    pub spike_magnitude: f64,
    #[serde(default = "default_spike_decay")]
    pub spike_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioFile {
    pub fn from_json_str(s: &str) -> Result<Self, SimError> {
        serde_json::from_str(s).map_err(|e| SimError::InvalidScenario(e.to_string()))
    }

    pub fn from_json_file(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn resolve(&self, config: &SystemConfig) -> Result<Scenario, SimError> {
        let steps = match (&self.steps, &self.duty_cycle) {
            (Some(steps), None) => steps.clone(),
            (None, Some(dc)) => dc.generate(config, self.supply_pressure),
            _ => {
                return Err(SimError::InvalidScenario(
                    "exactly one of 'steps' or 'duty_cycle' must be given".into(),
                ))
            }
        };
        let sc = Scenario {
            steps,
            sample_period: self.sample_period,
            supply_pressure: self.supply_pressure,
            noise_sigma: self.noise_sigma,
            spike_magnitude: self.spike_magnitude,
            spike_decay: self.spike_decay,
            seed: self.seed,
        };
        sc.validate(config)?;
        Ok(sc)
    }
}

/// Randomized boom-like duty cycle: alternating extend and retract moves
/// with varying valve codes, occasional idle holds and mixed-command steps,
/// so every valve spends time both open and closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DutyCycle {
    pub total_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "DutyCycle::default_min_step")]
    pub min_step: usize,
    #[serde(default = "DutyCycle::default_max_step")]
    pub max_step: usize,
    /// Force range as fractions of `area_b * supply` (load on the piston).
    #[serde(default = "DutyCycle::default_force_range")]
    pub force_range: (f64, f64),
    /// Healthy chamber pressures must stay inside this band, as fractions
    /// of supply, so no valve works across a vanishing pressure drop.
    #[serde(default = "DutyCycle::default_pressure_band")]
    pub pressure_band: (f64, f64),
}

impl DutyCycle {
    fn default_min_step() -> usize {
        15
    }
    fn default_max_step() -> usize {
        45
    }
    fn default_force_range() -> (f64, f64) {
        (0.0, 0.6)
    }
    fn default_pressure_band() -> (f64, f64) {
        (0.1, 0.9)
    }

    pub fn new(total_samples: usize, seed: u64) -> Self {
        Self {
            total_samples,
            seed,
            min_step: Self::default_min_step(),
            max_step: Self::default_max_step(),
            force_range: Self::default_force_range(),
            pressure_band: Self::default_pressure_band(),
        }
    }

    pub fn generate(&self, config: &SystemConfig, supply_pressure: f64) -> Vec<Step> {
        let n = config.valves_per_dfcu();
        let full = (1u32 << n) - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_d07c);
        let (lo, hi) = (self.min_step.max(1), self.max_step.max(self.min_step.max(1)));
        let force_unit = config.area_b * supply_pressure;
        let (band_lo, band_hi) = (self.pressure_band.0 * supply_pressure, self.pressure_band.1 * supply_pressure);
        let feasible = |w: &ValveStateWord, f: f64| match steady_state_solve(config, w, supply_pressure, f) {
            Ok(ss) => [ss.pressure.p_a, ss.pressure.p_b]
                .iter()
                .all(|p| *p >= band_lo && *p <= band_hi),
            Err(_) => false,
        };

        let mut steps: Vec<Step> = Vec::new();
        let mut used = 0;
        let mut extend = rng.gen_bool(0.5);
        let mut force = force_unit * rng.gen_range(self.force_range.0..=self.force_range.1);
        while used < self.total_samples {
            let duration = rng.gen_range(lo..=hi).min(self.total_samples - used);
            if rng.gen_bool(0.35) {
                extend = !extend;
                force = force_unit * rng.gen_range(self.force_range.0..=self.force_range.1);
            }
            let idle = !steps.is_empty() && rng.gen_bool(0.06);
            let mut valves = ValveStateWord::closed(4 * n);
            if !idle {
                // Resample codes (and eventually the load) until the healthy
                // steady state keeps both chambers inside the pressure band.
                for attempt in 0..64 {
                    if attempt > 0 && attempt % 8 == 0 {
                        force = force_unit * rng.gen_range(self.force_range.0..=self.force_range.1);
                    }
                    let mixed = rng.gen_bool(0.17);
                    let mut code = || rng.gen_range(1..=full);
                    let cand = if mixed {
                        let (pa, bt, at, pb) = (code(), code(), code(), code());
                        ValveStateWord::from_codes(n, pa, bt, at, pb)
                    } else if extend {
                        let (pa, bt) = (code(), code());
                        ValveStateWord::from_codes(n, pa, bt, 0, 0)
                    } else {
                        let (at, pb) = (code(), code());
                        ValveStateWord::from_codes(n, 0, 0, at, pb)
                    };
                    if feasible(&cand, force) {
                        valves = cand;
                        break;
                    }
                }
                if !valves.bits().iter().any(|b| *b) && steps.is_empty() {
                    // Always-solvable fallback: both chambers at mid pressure.
                    force = 0.0;
                    valves = ValveStateWord::from_codes(n, 1, 0, 1, 0);
                }
            }
            steps.push(Step { duration, valves, force });
            used += duration;
        }
        steps
    }

    pub fn into_scenario(self, config: &SystemConfig) -> Scenario {
        let mut sc = Scenario::new(self.generate(config, default_supply()));
        sc.seed = self.seed;
        sc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub pressures: PressureState,
    pub commanded: ValveStateWord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub samples: Vec<Sample>,
    pub sample_period: f64,
    pub config_digest: String,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Generates a trace for `scenario` with the given faults injected.
///
/// Steps whose actual valve word leaves both chambers isolated hold the
/// previous pressures (trapped oil); such a step at the very start is an
/// error.
pub fn simulate(
    config: &SystemConfig,
    scenario: &Scenario,
    faults: &[FaultSpec],
) -> Result<Trace, SimError> {
    config.validate().map_err(|e| SimError::InvalidScenario(e.to_string()))?;
    scenario.validate(config)?;
    validate_faults(faults, config.valve_count())?;

    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let noise = Normal::new(0.0, scenario.noise_sigma.max(0.0))
        .map_err(|e| SimError::InvalidScenario(e.to_string()))?;
    let p_s = scenario.supply_pressure;

    let mut samples = Vec::with_capacity(scenario.total_samples());
    let mut held: Option<PressureState> = None;
    let mut last_cmd: Option<&ValveStateWord> = None;
    let mut since_transition: Option<usize> = None;
    let mut cache: Option<(ValveStateWord, f64, PressureState)> = None;

    let mut k = 0usize;
    for step in &scenario.steps {
        for _ in 0..step.duration {
            let actual = apply_fault(&step.valves, faults, k)?;

            if let Some(prev) = last_cmd {
                if prev != &step.valves {
                    since_transition = Some(0);
                }
            }
            last_cmd = Some(&step.valves);

            let clean = match &cache {
                Some((w, f, p)) if *w == actual && *f == step.force => *p,
                _ => {
                    let p = match steady_state_solve(config, &actual, p_s, step.force) {
                        Ok(ss) => ss.pressure,
                        Err(ModelError::SingularSystem) => match held {
                            Some(h) => h,
                            None => {
                                return Err(SimError::Solve {
                                    sample: k,
                                    source: ModelError::SingularSystem,
                                })
                            }
                        },
                        Err(ModelError::OutOfRange { p_a, p_b, limit }) => {
                            cavitated_state(config, p_s, step.force, p_a, p_b, limit)
                        }
                        Err(e) => return Err(SimError::Solve { sample: k, source: e }),
                    };
                    cache = Some((actual.clone(), step.force, p));
                    p
                }
            };
            held = Some(clean);

            let spike = match since_transition {
                Some(j) => scenario.spike_magnitude * (-(j as f64) / scenario.spike_decay).exp(),
                None => 0.0,
            };
            let mut noisy = |p: f64| -> f64 {
                let e = if scenario.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (p + e).max(0.0)
            };
            let p_s_meas = noisy(clean.p_s);
            let p_a_meas = noisy(clean.p_a + spike);
            let p_b_meas = noisy(clean.p_b + spike);
            samples.push(Sample {
                t: k as f64 * scenario.sample_period,
                pressures: PressureState::new(p_s_meas, p_a_meas, p_b_meas),
                commanded: step.valves.clone(),
            });

            since_transition = since_transition.map(|j| j + 1);
            k += 1;
        }
    }

    Ok(Trace { samples, sample_period: scenario.sample_period, config_digest: config.digest() })
}

/// Pressures when the steady state would need a negative chamber pressure
/// (a fault starving one side against the load): that chamber sits at zero
/// and the other carries the force alone. Over-limit values are clamped.
fn cavitated_state(config: &SystemConfig, p_s: f64, force: f64, p_a: f64, p_b: f64, limit: f64) -> PressureState {
    let (pa, pb) = if p_b < 0.0 {
        (force / config.area_a, 0.0)
    } else if p_a < 0.0 {
        (0.0, -force / config.area_b)
    } else {
        (p_a, p_b)
    };
    PressureState::new(p_s, pa.clamp(0.0, limit), pb.clamp(0.0, limit))
}

/// Fraction of samples in which the valve is commanded open.
pub fn open_fraction(steps: &[Step], flat: usize) -> f64 {
    let total: usize = steps.iter().map(|s| s.duration).sum();
    let open: usize = steps.iter().filter(|s| s.valves.get(flat)).map(|s| s.duration).sum();
    if total == 0 {
        0.0
    } else {
        open as f64 / total as f64
    }
}

impl FromStr for FaultMode {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jammed-open" | "jammed_open" | "open" => Ok(FaultMode::JammedOpen),
            "jammed-closed" | "jammed_closed" | "closed" => Ok(FaultMode::JammedClosed),
            other => Err(SimError::InvalidFault(format!("unknown fault mode '{other}'"))),
        }
    }
}
