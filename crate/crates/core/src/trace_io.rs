//! Trace CSV reading and writing.
//!
//! Layout: an optional `# config_digest=<hex>` line, then the header
//! `t,p_s,p_a,p_b,u_PA1,..,u_PB<n>` and one row per sample. Pressures are
//! printed with 9 significant digits, valve bits as 0/1.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::{PressureState, ValveId, ValveStateWord};
use crate::simulator::{Sample, Trace};

const DIGEST_PREFIX: &str = "# config_digest=";
const SIGNIFICANT: i32 = 9;
const DEFAULT_SAMPLE_PERIOD: f64 = 0.01;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("no samples")]
    NoSamples,
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn parse_err(line: u64, message: impl Into<String>) -> TraceError {
    TraceError::Parse { line, message: message.into() }
}

/// Decimal rendering with `SIGNIFICANT` significant digits.
pub fn format_significant(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_finite() { "0".into() } else { v.to_string() };
    }
    let before = v.abs().log10().floor() as i32 + 1;
    let decimals = (SIGNIFICANT - before).max(0) as usize;
    format!("{v:.decimals$}")
}

fn header(valves: usize) -> Vec<String> {
    let n = valves / 4;
    let mut h: Vec<String> = ["t", "p_s", "p_a", "p_b"].iter().map(|s| s.to_string()).collect();
    h.extend((0..valves).map(|i| format!("u_{}", ValveId::from_flat(i, n))));
    h
}

pub fn write_trace<W: Write>(trace: &Trace, mut out: W) -> Result<(), TraceError> {
    if !trace.config_digest.is_empty() {
        writeln!(out, "{DIGEST_PREFIX}{}", trace.config_digest)?;
    }
    let valves = trace.samples.first().map_or(20, |s| s.commanded.len());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(valves))?;
    for s in &trace.samples {
        let mut rec = vec![
            format_significant(s.t),
            format_significant(s.pressures.p_s),
            format_significant(s.pressures.p_a),
            format_significant(s.pressures.p_b),
        ];
        rec.extend(s.commanded.bits().iter().map(|b| if *b { "1" } else { "0" }.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_file(trace: &Trace, path: &Path) -> Result<(), TraceError> {
    let file = std::fs::File::create(path)?;
    write_trace(trace, std::io::BufWriter::new(file))
}

pub fn read_trace<R: Read>(mut input: R) -> Result<Trace, TraceError> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let (digest, body, offset) = match text.strip_prefix(DIGEST_PREFIX) {
        Some(rest) => {
            let end = rest.find('\n').unwrap_or(rest.len());
            let digest = rest[..end].trim().to_string();
            (digest, &rest[(end + 1).min(rest.len())..], 1)
        }
        None => (String::new(), text.as_str(), 0),
    };
    if body.trim().is_empty() {
        return Err(TraceError::NoSamples);
    }

    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
    let head = reader.headers().map_err(|e| parse_err(1 + offset, e.to_string()))?.clone();
    let fields: Vec<&str> = head.iter().collect();
    if fields.len() < 8 || fields[..4] != ["t", "p_s", "p_a", "p_b"] || (fields.len() - 4) % 4 != 0 {
        return Err(parse_err(1 + offset, "expected header t,p_s,p_a,p_b,u_PA1,..."));
    }
    let valves = fields.len() - 4;
    if fields[4..] != header(valves)[4..] {
        return Err(parse_err(1 + offset, "valve columns out of order"));
    }

    let mut samples = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line()) + offset;
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line()) + offset;
        let num = |i: usize| -> Result<f64, TraceError> {
            let v: f64 = rec[i]
                .parse()
                .map_err(|_| parse_err(line, format!("column {}: not a number: '{}'", fields[i], &rec[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(line, format!("column {}: not finite", fields[i])))
            }
        };
        let (t, p_s, p_a, p_b) = (num(0)?, num(1)?, num(2)?, num(3)?);
        let bits = (4..4 + valves)
            .map(|i| match &rec[i] {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(parse_err(line, format!("column {}: expected 0 or 1, got '{other}'", fields[i]))),
            })
            .collect::<Result<Vec<bool>, _>>()?;
        samples.push(Sample {
            t,
            pressures: PressureState::new(p_s, p_a, p_b),
            commanded: ValveStateWord::from_bits(bits),
        });
    }
    if samples.is_empty() {
        return Err(TraceError::NoSamples);
    }
    let sample_period = match samples.as_slice() {
        [a, b, ..] if b.t > a.t => b.t - a.t,
        _ => DEFAULT_SAMPLE_PERIOD,
    };
    Ok(Trace { samples, sample_period, config_digest: digest })
}

pub fn read_trace_file(path: &Path) -> Result<Trace, TraceError> {
    read_trace(std::fs::File::open(path)?)
}
