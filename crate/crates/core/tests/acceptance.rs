//! Acceptance suite. Each criterion prints one PASS/FAIL line; the lines are
//! written straight to the stderr handle so they survive output capture.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use valvediag::estimator::{build_system, lp, quantile_regression, Matrix, PenaltyConfig};
use valvediag::estimator::{estimate_period, FaultVariables};
use valvediag::model::{
    balance_residual, steady_state_solve, Dfcu, ModelError, PressureState, SystemConfig, ValveParams,
    ValveStateWord,
};
use valvediag::pipeline::{
    run_diagnostics, DiagnosticsConfig, FaultReport, FilterState, OpenClosed, PeriodStatus,
};
use valvediag::simulator::{simulate, DutyCycle, FaultMode, FaultSpec, Scenario, Trace};

fn announce(criterion: u32, name: &str, ok: bool, detail: &str) {
    let line = format!(
        "acceptance {criterion} {name}: {} ({detail})\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn finish(criterion: u32, name: &str, failures: &[String], detail: String) {
    let ok = failures.is_empty();
    let detail = if ok { detail } else { format!("{detail}; {}", failures.join("; ")) };
    announce(criterion, name, ok, &detail);
    assert!(ok, "criterion {criterion} failed: {detail}");
}

fn check_loss(u: f64, tau: f64) -> f64 {
    if u >= 0.0 {
        tau * u
    } else {
        (tau - 1.0) * u
    }
}

fn objective(a: &[Vec<f64>], b: &[f64], x: &[f64], tau: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(row, bi)| check_loss(bi - row.iter().zip(x).map(|(p, q)| p * q).sum::<f64>(), tau))
        .sum()
}

#[test]
fn criterion_1_qr_matches_grid_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc1);
    let tau = 0.5;
    let step = 0.02;
    let grid: Vec<f64> = (0..=50).map(|i| i as f64 * step).collect();
    let mut failures = Vec::new();
    let mut solve_time = Duration::ZERO;
    let start = Instant::now();
    let mut worst_gap: f64 = 0.0;
    for case in 0..200 {
        let k = rng.gen_range(5..=20);
        let a: Vec<Vec<f64>> = (0..k).map(|_| (0..3).map(|_| rng.gen_range(-1.0..=1.0)).collect()).collect();
        let b: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..=1.0)).collect();

        let t = Instant::now();
        let sol = lp::solve_box_quantile(&Matrix::from_rows(&a).unwrap(), &b, tau, &lp::LpOptions::default()).unwrap();
        solve_time += t.elapsed();

        let mut grid_min = f64::INFINITY;
        for &x0 in &grid {
            for &x1 in &grid {
                for &x2 in &grid {
                    grid_min = grid_min.min(objective(&a, &b, &[x0, x1, x2], tau));
                }
            }
        }
        let l1: f64 = a.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).sum();
        let bound = tau.max(1.0 - tau) * l1 * step / 2.0;
        let obj = objective(&a, &b, &sol.x, tau);
        worst_gap = worst_gap.max(grid_min - obj);
        if !(obj <= grid_min + 1e-9 && obj >= grid_min - bound) {
            failures.push(format!("case {case}: lp {obj} grid {grid_min} bound {bound}"));
        }
        if sol.x.iter().any(|v| !(-1e-12..=1.0 + 1e-12).contains(v)) {
            failures.push(format!("case {case}: x outside the box {:?}", sol.x));
        }
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(10) {
        failures.push(format!("took {elapsed:?}"));
    }
    finish(
        1,
        "QR oracle equivalence",
        &failures,
        format!(
            "200 systems, largest grid-minus-lp gap {worst_gap:.2e}, solver {solve_time:?}, total {elapsed:?}"
        ),
    );
}

#[test]
fn criterion_2_median_recovery() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc2);
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for case in 0..500 {
        let k = 2 * rng.gen_range(0..15) + 1;
        let b: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let ones: Vec<Vec<f64>> = vec![vec![1.0]; k];
        let sol = lp::solve_box_quantile(&Matrix::from_rows(&ones).unwrap(), &b, 0.5, &lp::LpOptions::default()).unwrap();
        let mut sorted = b.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[k / 2];
        let err = (sol.x[0] - median).abs();
        worst = worst.max(err);
        if err > 1e-9 {
            failures.push(format!("case {case} (K={k}): {} vs median {median}", sol.x[0]));
        }
    }
    finish(2, "median recovery", &failures, format!("500 odd-K cases, worst error {worst:.1e}"));
}

/// Orifice law with the laminar blend, written out independently of the
/// model code.
fn oracle_flow(p: &ValveParams, dp: f64, laminar: f64) -> f64 {
    let a = p.alpha;
    let x = dp.abs();
    let mag = if laminar > 0.0 && x < laminar {
        let c1 = laminar.powf(a - 1.0) * (3.0 - a) / 2.0;
        let c3 = (a - 1.0) * laminar.powf(a - 3.0) / 2.0;
        c1 * x + c3 * x * x * x
    } else {
        x.powf(a)
    };
    p.kv * mag * dp.signum()
}

fn oracle_unit_flow(c: &SystemConfig, w: &ValveStateWord, d: Dfcu, p: &PressureState) -> f64 {
    let n = c.valves_per_dfcu();
    let dp = match d {
        Dfcu::PA => p.p_s - p.p_a,
        Dfcu::AT => p.p_a - c.tank_pressure,
        Dfcu::PB => p.p_s - p.p_b,
        Dfcu::BT => p.p_b - c.tank_pressure,
    };
    c.dfcus
        .get(d)
        .iter()
        .enumerate()
        .filter(|(i, _)| w.get(d.position() * n + i))
        .map(|(_, v)| oracle_flow(v, dp, c.laminar_dp))
        .sum()
}

#[test]
fn criterion_3_steady_state_self_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc3);
    let mut failures = Vec::new();
    let (mut solved, mut attempts, mut rejected) = (0, 0, 0);
    let mut worst: f64 = 0.0;
    while solved < 1000 && attempts < 20_000 {
        attempts += 1;
        let mut c = SystemConfig::default();
        c.area_a = rng.gen_range(5e-4..4e-3);
        c.area_b = rng.gen_range(3e-4..c.area_a);
        c.tank_pressure = rng.gen_range(0.0..5e5);
        let base = rng.gen_range(2e-9..5e-8);
        for d in Dfcu::ALL {
            for (i, v) in c.dfcus.get_mut(d).iter_mut().enumerate() {
                v.kv = base * 2f64.powi(i as i32);
            }
        }
        let p_s = rng.gen_range(5e6..25e6);
        let mut code = || if rng.gen_bool(0.8) { rng.gen_range(0..32) } else { 0 };
        let w = ValveStateWord::from_codes(5, code(), code(), code(), code());
        let span = p_s - c.tank_pressure;
        let force = rng.gen_range(-0.5..0.8) * c.area_b * span;
        let ss = match steady_state_solve(&c, &w, p_s, force) {
            Ok(ss) => ss,
            Err(ModelError::SingularSystem | ModelError::OutOfRange { .. }) => {
                rejected += 1;
                continue;
            }
            Err(e) => {
                failures.push(format!("attempt {attempts}: {e}"));
                continue;
            }
        };
        solved += 1;
        let p = ss.pressure;
        let q = |d| oracle_unit_flow(&c, &w, d, &p);
        let cap: f64 = Dfcu::ALL
            .iter()
            .flat_map(|d| c.dfcus.get(*d).iter())
            .map(|v| oracle_flow(v, span, c.laminar_dp))
            .sum();
        let r_a = (q(Dfcu::PA) - q(Dfcu::AT) - c.area_a * ss.velocity) / cap;
        let r_b = (q(Dfcu::PB) - q(Dfcu::BT) + c.area_b * ss.velocity) / cap;
        let r_f = (c.area_a * p.p_a - c.area_b * p.p_b - force) / (c.area_a.max(c.area_b) * p_s);
        let balance = balance_residual(&c, &w, &p) * c.area_a.min(c.area_b) / cap;
        let m = r_a.abs().max(r_b.abs()).max(r_f.abs()).max(balance.abs());
        worst = worst.max(m);
        if m > 1e-9 {
            failures.push(format!("attempt {attempts}: residuals {r_a:e} {r_b:e} {r_f:e} balance {balance:e}"));
        }
    }
    if solved < 1000 {
        failures.push(format!("only {solved} feasible scenarios"));
    }

    // Symmetric meter-in/meter-out with equal areas and no load: the chamber
    // pressures sit halfway between supply and tank.
    let mut worst_sym: f64 = 0.0;
    for case in 0..200 {
        let mut c = SystemConfig::default();
        let area = rng.gen_range(5e-4..3e-3);
        c.area_a = area;
        c.area_b = area;
        c.tank_pressure = rng.gen_range(0.0..1e6);
        let p_s = rng.gen_range(5e6..25e6);
        let code = rng.gen_range(1..32);
        let w = if case % 2 == 0 {
            ValveStateWord::from_codes(5, code, code, 0, 0)
        } else {
            ValveStateWord::from_codes(5, 0, 0, code, code)
        };
        let ss = steady_state_solve(&c, &w, p_s, 0.0).unwrap();
        let mid = (p_s + c.tank_pressure) / 2.0;
        let e = ((ss.pressure.p_a - mid) / mid).abs().max(((ss.pressure.p_b - mid) / mid).abs());
        worst_sym = worst_sym.max(e);
        if e > 1e-9 {
            failures.push(format!("symmetric case {case}: {:?} vs {mid}", ss.pressure));
        }
    }
    finish(
        3,
        "steady-state self-consistency",
        &failures,
        format!(
            "{solved} feasible scenarios ({rejected} infeasible draws skipped), worst residual {worst:.1e}, symmetric worst relative error {worst_sym:.1e}"
        ),
    );
}

fn duty_cycle_trace(seed: u64, faults: &[FaultSpec], noiseless: bool) -> (SystemConfig, Trace) {
    let cfg = SystemConfig::default();
    let mut sc: Scenario = DutyCycle::new(6000, seed).into_scenario(&cfg);
    sc.seed = seed;
    if noiseless {
        sc = sc.noiseless();
    }
    let trace = simulate(&cfg, &sc, faults).unwrap();
    (cfg, trace)
}

#[test]
fn criterion_4_noiseless_exact_recovery() {
    let target = 12; // AT3
    let fault = [FaultSpec::new(target, FaultMode::JammedClosed)];
    let diag = DiagnosticsConfig::default();
    let mut failures = Vec::new();
    let mut checked = 0;
    let mut slowest = Duration::ZERO;
    for seed in 0..5u64 {
        let t = Instant::now();
        let (cfg, trace) = duty_cycle_trace(seed, &fault, true);
        let report = run_diagnostics(&cfg, &trace, &diag).unwrap();
        slowest = slowest.max(t.elapsed());
        for p in &report.periods {
            // periods where AT3 was commanded open with pressure across it
            // for at least 10% of the samples
            if p.status != PeriodStatus::Solved || !p.gated[target] {
                continue;
            }
            checked += 1;
            let x = FaultVariables { open: p.estimates_open.clone(), closed: p.estimates_closed.clone() };
            let stacked = x.stacked();
            if stacked[target] < 0.99 {
                failures.push(format!("seed {seed} period {}: AT3 {:.3}", p.index, stacked[target]));
            }
            for (j, v) in stacked.iter().enumerate() {
                if j != target && *v > 0.01 {
                    failures.push(format!("seed {seed} period {}: variable {j} = {v:.3}", p.index));
                }
            }
        }
    }
    if slowest > Duration::from_secs(5) {
        failures.push(format!("60 s trace took {slowest:?}"));
    }
    if checked == 0 {
        failures.push("no period exercised AT3".into());
    }
    finish(
        4,
        "noiseless exact fault recovery",
        &failures,
        format!("AT3 jammed closed, 5 duty cycles, {checked} active periods, slowest simulate+diagnose {slowest:?}"),
    );
}

fn max_excluding(t: &OpenClosed, skip: Option<usize>) -> f64 {
    t.open
        .iter()
        .chain(&t.closed)
        .enumerate()
        .filter(|(j, _)| Some(*j) != skip)
        .map(|(_, v)| *v)
        .fold(0.0, f64::max)
}

fn fault_variable(f: &FaultSpec, valves: usize) -> usize {
    match f.mode {
        FaultMode::JammedClosed => f.valve_index,
        FaultMode::JammedOpen => valves + f.valve_index,
    }
}

fn stacked_get(t: &OpenClosed, var: usize) -> f64 {
    let n = t.open.len();
    if var < n {
        t.open[var]
    } else {
        t.closed[var - n]
    }
}

struct Run {
    label: String,
    seed: u64,
    report: FaultReport,
    var: Option<usize>,
}

fn runs(spike_rejection: bool, faults: &[Option<FaultSpec>]) -> Vec<Run> {
    let mut diag = DiagnosticsConfig::default();
    diag.spike_rejection = spike_rejection;
    let mut out = Vec::new();
    for f in faults {
        for seed in 0..10u64 {
            let list: Vec<FaultSpec> = f.iter().cloned().collect();
            let (cfg, trace) = duty_cycle_trace(seed, &list, false);
            let report = run_diagnostics(&cfg, &trace, &diag).unwrap();
            let var = f.as_ref().map(|f| fault_variable(f, cfg.valve_count()));
            let label = match f {
                None => "no fault".to_string(),
                Some(f) => format!("{} {}", cfg.valve_name(f.valve_index), f.mode),
            };
            out.push(Run { label, seed, report, var });
        }
    }
    out
}

fn closed(name: &str) -> Option<FaultSpec> {
    Some(FaultSpec::parse(&format!("{name}:closed"), 5).unwrap())
}

#[test]
fn criterion_5_and_6_separation_under_noise() {
    let jammed_closed: Vec<Option<FaultSpec>> =
        ["AT1", "AT3", "AT5", "PA3", "PB3"].iter().map(|n| closed(n)).collect();
    let mut scenarios = vec![None];
    scenarios.extend(jammed_closed.iter().cloned());
    let jammed_open = Some(FaultSpec::parse("PB3:open", 5).unwrap());
    scenarios.push(jammed_open);

    // criterion 5: spike rejection on
    let with_rejection = runs(true, &scenarios);
    let mut failures = Vec::new();
    let mut summary: Vec<String> = Vec::new();
    let mut label = String::new();
    let (mut worst_true, mut worst_false) = (f64::INFINITY, 0.0f64);
    let flush = |label: &str, t: f64, f: f64, summary: &mut Vec<String>| {
        if !label.is_empty() {
            summary.push(if t.is_finite() {
                format!("{label}: fault >= {t:.2}, false <= {f:.2}")
            } else {
                format!("{label}: false <= {f:.2}")
            });
        }
    };
    for run in &with_rejection {
        if run.label != label {
            flush(&label, worst_true, worst_false, &mut summary);
            label = run.label.clone();
            worst_true = f64::INFINITY;
            worst_false = 0.0;
        }
        let filtered = &run.report.table.filtered_max;
        let false_max = max_excluding(filtered, run.var);
        worst_false = worst_false.max(false_max);
        match run.var {
            None => {
                if false_max > 0.15 {
                    failures.push(format!("no fault seed {}: filtered {false_max:.3}", run.seed));
                }
            }
            Some(var) => {
                let fault = stacked_get(filtered, var);
                worst_true = worst_true.min(fault);
                if fault < 0.80 {
                    failures.push(format!("{} seed {}: filtered {fault:.3}", run.label, run.seed));
                }
                let open_fault = var >= filtered.open.len();
                if !open_fault && false_max > 0.33 {
                    failures.push(format!("{} seed {}: healthy filtered {false_max:.3}", run.label, run.seed));
                }
            }
        }
    }
    flush(&label, worst_true, worst_false, &mut summary);
    let ok5 = failures.is_empty();
    announce(
        5,
        "separation under noise",
        ok5,
        &if ok5 { summary.join("; ") } else { format!("{}; {}", summary.join("; "), failures.join("; ")) },
    );

    // criterion 6: same no-fault and jammed-closed runs, spike rejection off
    let mut six = Vec::new();
    let mut closed_runs = vec![None];
    closed_runs.extend(jammed_closed.iter().cloned());
    let without = runs(false, &closed_runs);
    let mut worst_unfiltered: f64 = 0.0;
    let mut worst_filtered: f64 = 0.0;
    for run in &without {
        worst_unfiltered = worst_unfiltered.max(max_excluding(&run.report.table.unfiltered_max, run.var));
        let f = max_excluding(&run.report.table.filtered_max, run.var);
        worst_filtered = worst_filtered.max(f);
        if f > 0.33 {
            six.push(format!("{} seed {}: healthy filtered {f:.3}", run.label, run.seed));
        }
    }
    if worst_unfiltered <= 0.5 {
        six.push(format!("largest unfiltered healthy value only {worst_unfiltered:.3}"));
    }
    let ok6 = six.is_empty();
    announce(
        6,
        "filter necessity",
        ok6,
        &format!(
            "spike rejection off, {} runs: largest unfiltered healthy {worst_unfiltered:.2}, largest filtered healthy {worst_filtered:.2}{}",
            without.len(),
            if ok6 { String::new() } else { format!("; {}", six.join("; ")) }
        ),
    );
    assert!(ok5, "criterion 5 failed: {}", failures.join("; "));
    assert!(ok6, "criterion 6 failed: {}", six.join("; "));
}

#[test]
fn criterion_7_ewma_and_gating_analytics() {
    let mut failures = Vec::new();
    let diag = DiagnosticsConfig::default();
    let lambda = diag.lambda;
    let valves = 20;
    let mut state = FilterState::new(valves);
    let mut gated = vec![false; 2 * valves];
    for g in gated.iter_mut().step_by(3) {
        *g = true;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc7);
    let c: Vec<f64> = (0..2 * valves).map(|_| rng.gen_range(0.0..=1.0)).collect();
    let input = FaultVariables::from_stacked(&c);
    let mut worst: f64 = 0.0;
    let initial: Vec<u64> = (0..2 * valves).map(|j| state.get(j).to_bits()).collect();
    for k in 1..=200 {
        state.apply(&input, &gated, &diag, k - 1);
        for j in 0..2 * valves {
            if gated[j] {
                let expected = c[j] * (1.0 - (1.0 - lambda).powi(k as i32));
                let err = (state.get(j) - expected).abs();
                worst = worst.max(err);
                if err > 1e-12 {
                    failures.push(format!("variable {j} after {k} periods: {} vs {expected}", state.get(j)));
                }
            } else if state.get(j).to_bits() != initial[j] {
                failures.push(format!("gated-out variable {j} moved at period {k}"));
            }
        }
    }
    failures.truncate(5);
    finish(
        7,
        "EWMA and gating analytics",
        &failures,
        format!("200 periods, worst closed-form error {worst:.1e}, gated-out variables bit-identical"),
    );
}

#[test]
fn criterion_8_single_period_throughput() {
    let (cfg, trace) = duty_cycle_trace(3, &[FaultSpec::new(12, FaultMode::JammedClosed)], false);
    let penalty = PenaltyConfig::default();
    let mut failures = Vec::new();
    let mut times = Vec::new();
    for (i, period) in trace.samples.chunks_exact(100).enumerate() {
        let t = Instant::now();
        let system = build_system(&cfg, period, &penalty).unwrap();
        let _ = quantile_regression(&system, 0.5).unwrap();
        let est = estimate_period(&cfg, period, &penalty, 0.5).unwrap();
        let elapsed = t.elapsed();
        assert_eq!(system.matrix.rows(), 140, "period {i}");
        assert_eq!(est.variables.valve_count(), 20);
        times.push(elapsed);
    }
    times.sort();
    let worst = *times.last().unwrap();
    let median = times[times.len() / 2];
    if worst >= Duration::from_millis(100) {
        failures.push(format!("slowest period {worst:?}"));
    }
    finish(
        8,
        "single-period throughput",
        &failures,
        format!("{} periods of 100 samples (140x40 system, solve and tie repair): median {median:?}, slowest {worst:?}", times.len()),
    );
}
