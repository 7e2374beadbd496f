//! Line-oriented sequence documents.
//!
//! ```text
//! name pe-hmqc
//! param delta = 0.0033
//! cycle phi1 = x, -x
//! receiver = 1, -1
//! quad = states slot=phi1
//! pulse 1H 90 x
//! delay delta/2
//! pulse 13C 90 @phi1
//! filter 1H:-1,1 13C:-1,1
//! mark a
//! delay t1/4
//! acquire 1H decouple=13C
//! ```
//!
//! Within a `filter` line, `;` separates alternative groups and every group
//! lists `<isotope>:<orders>` constraints; isotopes not listed are free.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::hilbert::CoherenceSelection;
use crate::spin_system::Isotope;

use super::{
    DelayExpr, Phase, PhaseCycle, PulseSequence, QuadMode, QuadScheme, Rational, SequenceError,
    SequenceEvent,
};

fn perr(line: usize, message: impl Into<String>) -> SequenceError {
    SequenceError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_isotope(s: &str, line: usize) -> Result<Isotope, SequenceError> {
    s.parse::<Isotope>()
        .map_err(|_| perr(line, format!("unknown isotope '{s}'")))
}

fn parse_phase_value(s: &str, line: usize) -> Result<f64, SequenceError> {
    match s {
        "x" => Ok(0.0),
        "y" => Ok(90.0),
        "-x" => Ok(180.0),
        "-y" => Ok(270.0),
        _ => s
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| perr(line, format!("bad phase '{s}'"))),
    }
}

fn format_phase_value(p: f64) -> String {
    match p {
        v if v == 0.0 => "x".into(),
        v if v == 90.0 => "y".into(),
        v if v == 180.0 => "-x".into(),
        v if v == 270.0 => "-y".into(),
        v => format!("{v}"),
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64, SequenceError> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| perr(line, format!("bad number '{s}'")))
}

fn parse_rational(s: &str, line: usize) -> Result<Rational, SequenceError> {
    let bad = || perr(line, format!("bad rational '{s}'"));
    let (n, d) = match s.split_once('/') {
        Some((n, d)) => (n.trim(), d.trim()),
        None => (s.trim(), "1"),
    };
    let n: i64 = n.parse().map_err(|_| bad())?;
    let d: i64 = d.parse().map_err(|_| bad())?;
    if d == 0 {
        return Err(bad());
    }
    Ok(Rational::new(n, d))
}

/// Parses `t1`, `t1*r`, `t1/n`, `delta`, `delta*r`, `delta/n` or seconds
/// (optionally suffixed `s`, `ms`, `us`), joined by `+`.
fn parse_delay(expr: &str, line: usize) -> Result<DelayExpr, SequenceError> {
    let mut out = DelayExpr::constant(0.0);
    for term in expr.split('+').map(str::trim) {
        if term.is_empty() {
            return Err(perr(line, format!("empty term in delay '{expr}'")));
        }
        let symbolic = ["t1", "delta"]
            .iter()
            .find(|sym| term.starts_with(**sym))
            .copied();
        if let Some(sym) = symbolic {
            let rest = term[sym.len()..].trim();
            let coeff = if rest.is_empty() {
                Rational::from_integer(1)
            } else if let Some(r) = rest.strip_prefix('*') {
                parse_rational(r, line)?
            } else if let Some(d) = rest.strip_prefix('/') {
                Rational::from_integer(1) / parse_rational(d, line)?
            } else {
                return Err(perr(line, format!("bad delay term '{term}'")));
            };
            let slot = if sym == "t1" {
                &mut out.t1
            } else {
                &mut out.delta
            };
            *slot += coeff;
        } else {
            let (num, scale) = if let Some(v) = term.strip_suffix("us") {
                (v, 1e-6)
            } else if let Some(v) = term.strip_suffix("ms") {
                (v, 1e-3)
            } else if let Some(v) = term.strip_suffix('s') {
                (v, 1.0)
            } else {
                (term, 1.0)
            };
            out.constant_s += parse_f64(num.trim(), line)? * scale;
        }
    }
    Ok(out)
}

pub(crate) fn format_delay(d: &DelayExpr) -> String {
    let mut terms = Vec::new();
    let fmt_coeff = |sym: &str, r: Rational| -> String {
        if r == Rational::from_integer(1) {
            sym.to_string()
        } else if *r.numer() == 1 {
            format!("{sym}/{}", r.denom())
        } else if *r.denom() == 1 {
            format!("{sym}*{}", r.numer())
        } else {
            format!("{sym}*{}/{}", r.numer(), r.denom())
        }
    };
    if *d.t1.numer() != 0 {
        terms.push(fmt_coeff("t1", d.t1));
    }
    if *d.delta.numer() != 0 {
        terms.push(fmt_coeff("delta", d.delta));
    }
    if d.constant_s != 0.0 || terms.is_empty() {
        terms.push(format!("{}", d.constant_s));
    }
    terms.join(" + ")
}

fn parse_orders(s: &str, line: usize) -> Result<BTreeSet<i32>, SequenceError> {
    s.split(',')
        .map(|o| {
            o.trim()
                .parse::<i32>()
                .map_err(|_| perr(line, format!("bad coherence order '{o}'")))
        })
        .collect()
}

fn parse_filter(spec: &str, line: usize) -> Result<CoherenceSelection, SequenceError> {
    let mut groups = Vec::new();
    for group in spec.split(';') {
        let mut g = BTreeMap::new();
        for item in group.split_whitespace() {
            let (iso, orders) = item
                .split_once(':')
                .ok_or_else(|| perr(line, format!("bad filter item '{item}'")))?;
            let iso = parse_isotope(iso, line)?;
            if g.insert(iso, parse_orders(orders, line)?).is_some() {
                return Err(perr(
                    line,
                    format!("isotope {} repeated in filter group", iso.label()),
                ));
            }
        }
        groups.push(g);
    }
    Ok(CoherenceSelection { groups })
}

fn format_filter(f: &CoherenceSelection) -> String {
    f.groups
        .iter()
        .map(|g| {
            g.iter()
                .map(|(iso, set)| {
                    let orders: Vec<String> = set.iter().map(|o| o.to_string()).collect();
                    format!("{}:{}", iso.label(), orders.join(","))
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join(" ; ")
}

fn split_assignment<'a>(rest: &'a str, line: usize) -> Result<(&'a str, &'a str), SequenceError> {
    let (k, v) = rest
        .split_once('=')
        .ok_or_else(|| perr(line, "expected '='"))?;
    Ok((k.trim(), v.trim()))
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// Parses a sequence document and checks its structural invariants.
pub fn parse_sequence(text: &str) -> Result<PulseSequence, SequenceError> {
    let mut name = String::from("sequence");
    let mut events = Vec::new();
    let mut cycle = PhaseCycle::default();
    let mut quad: Option<QuadScheme> = None;
    let mut params = BTreeMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (kw, rest) = content
            .split_once(char::is_whitespace)
            .map(|(k, r)| (k, r.trim()))
            .unwrap_or((content, ""));
        match kw {
            "name" => {
                if rest.is_empty() {
                    return Err(perr(line, "missing name"));
                }
                name = rest.to_string();
            }
            "param" => {
                let (k, v) = split_assignment(rest, line)?;
                params.insert(k.to_string(), parse_f64(v, line)?);
            }
            "cycle" => {
                let (slot, v) = split_assignment(rest, line)?;
                let phases = list(v)
                    .map(|p| parse_phase_value(p, line))
                    .collect::<Result<Vec<_>, _>>()?;
                cycle.slots.insert(slot.to_string(), phases);
            }
            "receiver" | "receiver=" => {
                let v = rest.trim_start_matches('=').trim();
                cycle.receiver = list(v)
                    .map(|w| match parse_f64(w, line)? {
                        x if x == 1.0 || x == -1.0 => Ok(x),
                        _ => Err(perr(line, format!("receiver weight must be ±1, got '{w}'"))),
                    })
                    .collect::<Result<_, _>>()?;
            }
            "quad" | "quad=" => {
                let v = rest.trim_start_matches('=').trim();
                let mut parts = v.split_whitespace();
                let mode = match parts.next() {
                    Some("states") => QuadMode::States,
                    Some("states-tppi") => QuadMode::StatesTppi,
                    other => return Err(perr(line, format!("bad quad mode {other:?}"))),
                };
                let slot = parts
                    .next()
                    .and_then(|s| s.strip_prefix("slot="))
                    .ok_or_else(|| perr(line, "quad needs slot=<name>"))?;
                quad = Some(QuadScheme {
                    mode,
                    incremented_slot: slot.to_string(),
                });
            }
            "pulse" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(perr(line, "pulse needs <isotope> <flip> <phase>"));
                }
                let isotope = parse_isotope(parts[0], line)?;
                let flip_deg = parse_f64(parts[1], line)?;
                let phase = match parts[2].strip_prefix('@') {
                    Some(slot) if !slot.is_empty() => Phase::Slot(slot.to_string()),
                    Some(_) => return Err(perr(line, "empty slot name")),
                    None => Phase::Fixed(parse_phase_value(parts[2], line)?),
                };
                events.push(SequenceEvent::Pulse {
                    isotope,
                    flip_deg,
                    phase,
                });
            }
            "delay" => events.push(SequenceEvent::Delay(parse_delay(rest, line)?)),
            "filter" => events.push(SequenceEvent::Filter(parse_filter(rest, line)?)),
            "mark" => {
                if rest.is_empty() || rest.contains(char::is_whitespace) {
                    return Err(perr(line, "mark needs a single label"));
                }
                events.push(SequenceEvent::Mark(rest.to_string()));
            }
            "acquire" => {
                let mut parts = rest.split_whitespace();
                let detect = parse_isotope(
                    parts
                        .next()
                        .ok_or_else(|| perr(line, "acquire needs an isotope"))?,
                    line,
                )?;
                let mut decouple = BTreeSet::new();
                for p in parts {
                    let v = p
                        .strip_prefix("decouple=")
                        .ok_or_else(|| perr(line, format!("unexpected '{p}'")))?;
                    for iso in list(v) {
                        decouple.insert(parse_isotope(iso, line)?);
                    }
                }
                events.push(SequenceEvent::Acquire { detect, decouple });
            }
            other => return Err(perr(line, format!("unknown keyword '{other}'"))),
        }
    }

    let quad = match quad {
        Some(q) => q,
        None => QuadScheme {
            mode: QuadMode::States,
            incremented_slot: cycle
                .slots
                .keys()
                .next()
                .cloned()
                .ok_or(SequenceError::EmptyCycle)?,
        },
    };
    let seq = PulseSequence {
        name,
        events,
        phase_cycle: cycle,
        quad,
        params,
    };
    seq.validate()?;
    Ok(seq)
}

/// Writes a document that [`parse_sequence`] maps back to an equal sequence.
pub fn serialize_sequence(seq: &PulseSequence) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "name {}", seq.name);
    for (k, v) in &seq.params {
        let _ = writeln!(s, "param {k} = {v}");
    }
    for (slot, phases) in &seq.phase_cycle.slots {
        let list: Vec<String> = phases.iter().map(|p| format_phase_value(*p)).collect();
        let _ = writeln!(s, "cycle {slot} = {}", list.join(", "));
    }
    let rx: Vec<String> = seq
        .phase_cycle
        .receiver
        .iter()
        .map(|w| format!("{w}"))
        .collect();
    let _ = writeln!(s, "receiver = {}", rx.join(", "));
    let _ = writeln!(
        s,
        "quad = {} slot={}",
        seq.quad.mode.label(),
        seq.quad.incremented_slot
    );
    for e in &seq.events {
        let _ = match e {
            SequenceEvent::Pulse {
                isotope,
                flip_deg,
                phase,
            } => {
                let ph = match phase {
                    Phase::Fixed(p) => format_phase_value(*p),
                    Phase::Slot(slot) => format!("@{slot}"),
                };
                writeln!(s, "pulse {} {} {}", isotope.label(), flip_deg, ph)
            }
            SequenceEvent::Delay(d) => writeln!(s, "delay {}", format_delay(d)),
            SequenceEvent::Filter(f) => writeln!(s, "filter {}", format_filter(f)),
            SequenceEvent::Mark(l) => writeln!(s, "mark {l}"),
            SequenceEvent::Acquire { detect, decouple } => {
                let d: Vec<&str> = decouple.iter().map(|i| i.label()).collect();
                if d.is_empty() {
                    writeln!(s, "acquire {}", detect.label())
                } else {
                    writeln!(s, "acquire {} decouple={}", detect.label(), d.join(","))
                }
            }
        };
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::{build_hmqc, build_pe_hmqc_with, pulse_acquire, HmqcOptions};

    const MINIMAL: &str = "\
cycle phi1 = x, -x
receiver = 1, -1
pulse 1H 90 @phi1
delay t1/4
acquire 1H
";

    #[test]
    fn builders_round_trip() {
        for refocus in [false, true] {
            for n in 1..=3 {
                let opts = HmqcOptions {
                    refocus_inept: refocus,
                    quad: QuadMode::StatesTppi,
                    ..HmqcOptions::default()
                };
                let seq = build_pe_hmqc_with(0.0034, n, opts).unwrap();
                assert_eq!(parse_sequence(&serialize_sequence(&seq)).unwrap(), seq);
            }
        }
        let h = build_hmqc(1.0 / 290.0, false).unwrap();
        assert_eq!(parse_sequence(&serialize_sequence(&h)).unwrap(), h);
        let p = pulse_acquire();
        assert_eq!(parse_sequence(&serialize_sequence(&p)).unwrap(), p);
    }

    #[test]
    fn quarter_t1_token() {
        let seq = parse_sequence(MINIMAL).unwrap();
        assert_eq!(
            seq.events[1],
            SequenceEvent::Delay(DelayExpr::t1_fraction(1, 4))
        );
        let alt = parse_sequence(&MINIMAL.replace("t1/4", "t1*1/4")).unwrap();
        assert_eq!(alt, seq);
    }

    #[test]
    fn delay_forms() {
        let d = parse_delay("t1*3/8 + delta/2 + 1.5ms", 1).unwrap();
        assert_eq!(d.t1, Rational::new(3, 8));
        assert_eq!(d.delta, Rational::new(1, 2));
        assert!((d.constant_s - 1.5e-3).abs() < 1e-18);
        assert_eq!(parse_delay("0.002", 1).unwrap(), DelayExpr::constant(0.002));
        assert!((parse_delay("40us", 1).unwrap().constant_s - 40e-6).abs() < 1e-20);
    }

    #[test]
    fn missing_acquire() {
        let doc = MINIMAL.replace("acquire 1H\n", "");
        assert_eq!(parse_sequence(&doc), Err(SequenceError::AcquireCount));
    }

    #[test]
    fn acquire_not_last() {
        let doc = format!("{MINIMAL}mark z\n");
        assert_eq!(parse_sequence(&doc), Err(SequenceError::AcquireNotLast));
    }

    #[test]
    fn duplicate_mark() {
        let doc = MINIMAL.replace("delay", "mark a\nmark a\ndelay");
        assert_eq!(
            parse_sequence(&doc),
            Err(SequenceError::DuplicateMark("a".into()))
        );
    }

    #[test]
    fn negative_delay_rejected() {
        let doc = MINIMAL.replace("t1/4", "t1*-1/4");
        assert!(matches!(
            parse_sequence(&doc),
            Err(SequenceError::NegativeCapableDelay(_))
        ));
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let doc = MINIMAL.replace("pulse 1H 90 @phi1", "pulse 2H 90 x");
        assert!(matches!(
            parse_sequence(&doc),
            Err(SequenceError::Parse { line: 3, .. })
        ));
        let doc = MINIMAL.replace("delay t1/4", "wait 3");
        assert!(matches!(
            parse_sequence(&doc),
            Err(SequenceError::Parse { line: 4, .. })
        ));
    }

    #[test]
    fn unknown_slot_and_missing_delta() {
        let doc = MINIMAL.replace("@phi1", "@phi9");
        assert_eq!(
            parse_sequence(&doc),
            Err(SequenceError::UnknownSlot("phi9".into()))
        );
        let doc = MINIMAL.replace("t1/4", "delta");
        assert_eq!(parse_sequence(&doc), Err(SequenceError::MissingDelta));
    }

    #[test]
    fn filter_union_groups() {
        let f = parse_filter("1H:1 13C:1 ; 1H:-1,1 13C:0", 1).unwrap();
        assert_eq!(f.groups.len(), 2);
        assert_eq!(format_filter(&f), "1H:1 13C:1 ; 1H:-1,1 13C:0");
    }
}
