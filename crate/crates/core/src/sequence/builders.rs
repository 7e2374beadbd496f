use std::collections::{BTreeMap, BTreeSet};

use crate::hilbert::CoherenceSelection;
use crate::spin_system::Isotope;

use super::{
    DelayExpr, Phase, PhaseCycle, PulseSequence, QuadMode, QuadScheme, SequenceError, SequenceEvent,
};

/// Default INEPT-type delay, 1/(2·145 Hz).
pub const DEFAULT_DELTA_S: f64 = 1.0 / 290.0;
/// Gradient amplitudes kept as metadata; gradients themselves are filters.
pub const G1_PURGE: f64 = 17.0;
pub const G2_SELECT: f64 = 50.0;
pub const G3_SELECT: f64 = 55.0;

const PHI1: &str = "phi1";

/// Options shared by the HMQC builders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmqcOptions {
    /// Insert the heteronuclear multiple-quantum filter after the φ1 pulse.
    pub filters: bool,
    /// Split each Δ around simultaneous ¹H/¹³C 180°x pulses so that ¹H
    /// offsets are refocused before and after t1.
    pub refocus_inept: bool,
    pub quad: QuadMode,
}

impl Default for HmqcOptions {
    fn default() -> Self {
        HmqcOptions {
            filters: true,
            refocus_inept: true,
            quad: QuadMode::States,
        }
    }
}

fn pulse(isotope: Isotope, flip_deg: f64) -> SequenceEvent {
    SequenceEvent::Pulse {
        isotope,
        flip_deg,
        phase: Phase::Fixed(0.0),
    }
}

fn t1_delay(den: i64) -> SequenceEvent {
    SequenceEvent::Delay(DelayExpr::t1_fraction(1, den))
}

fn mark(label: &str) -> SequenceEvent {
    SequenceEvent::Mark(label.to_string())
}

fn inept_delay(events: &mut Vec<SequenceEvent>, refocus: bool) {
    if refocus {
        events.push(SequenceEvent::Delay(DelayExpr::delta_fraction(1, 2)));
        events.push(pulse(Isotope::H1, 180.0));
        events.push(pulse(Isotope::C13, 180.0));
        events.push(SequenceEvent::Delay(DelayExpr::delta_fraction(1, 2)));
    } else {
        events.push(SequenceEvent::Delay(DelayExpr::delta_fraction(1, 1)));
    }
}

fn hmq_filter() -> CoherenceSelection {
    CoherenceSelection::product(&[(Isotope::H1, &[-1, 1]), (Isotope::C13, &[-1, 1])])
}

fn proton_sq_filter() -> CoherenceSelection {
    CoherenceSelection::product(&[(Isotope::H1, &[-1, 1]), (Isotope::C13, &[0])])
}

/// Shared frame: excitation, MQ creation, `t1_block`, reconversion, acquire.
fn hmqc_frame(
    name: &str,
    delta_s: f64,
    opts: HmqcOptions,
    t1_block: Vec<SequenceEvent>,
    extra_params: &[(&str, f64)],
) -> Result<PulseSequence, SequenceError> {
    if !(delta_s > 0.0 && delta_s.is_finite()) {
        return Err(SequenceError::Delta(delta_s));
    }
    let mut events = vec![pulse(Isotope::H1, 90.0)];
    inept_delay(&mut events, opts.refocus_inept);
    events.push(SequenceEvent::Pulse {
        isotope: Isotope::C13,
        flip_deg: 90.0,
        phase: Phase::Slot(PHI1.into()),
    });
    if opts.filters {
        events.push(SequenceEvent::Filter(hmq_filter()));
    }
    events.push(mark("a"));
    events.extend(t1_block);
    events.push(mark("d"));
    events.push(pulse(Isotope::C13, 90.0));
    inept_delay(&mut events, opts.refocus_inept);
    events.push(SequenceEvent::Filter(proton_sq_filter()));
    events.push(SequenceEvent::Acquire {
        detect: Isotope::H1,
        decouple: BTreeSet::from([Isotope::C13]),
    });

    let mut params = BTreeMap::from([
        ("delta".to_string(), delta_s),
        ("g1".to_string(), G1_PURGE),
        ("g2".to_string(), G2_SELECT),
        ("g3".to_string(), G3_SELECT),
    ]);
    for (k, v) in extra_params {
        params.insert(k.to_string(), *v);
    }
    let seq = PulseSequence {
        name: name.to_string(),
        events,
        phase_cycle: PhaseCycle {
            slots: BTreeMap::from([(PHI1.to_string(), vec![0.0, 180.0])]),
            receiver: vec![1.0, -1.0],
        },
        quad: QuadScheme {
            mode: opts.quad,
            incremented_slot: PHI1.into(),
        },
        params,
    };
    seq.validate()?;
    Ok(seq)
}

/// Conventional HMQC with a single ¹H 180°x at the centre of t1.
pub fn build_hmqc(delta_s: f64, filters: bool) -> Result<PulseSequence, SequenceError> {
    build_hmqc_with(
        delta_s,
        HmqcOptions {
            filters,
            ..HmqcOptions::default()
        },
    )
}

pub fn build_hmqc_with(delta_s: f64, opts: HmqcOptions) -> Result<PulseSequence, SequenceError> {
    let block = vec![t1_delay(2), pulse(Isotope::H1, 180.0), t1_delay(2)];
    hmqc_frame("hmqc", delta_s, opts, block, &[])
}

/// HMQC whose t1 period holds `n` perfect-echo blocks
/// (τ – 180°x – τ – 90°x – τ – 180°x – τ with τ = t1/4n).
pub fn build_pe_hmqc(delta_s: f64, n: usize) -> Result<PulseSequence, SequenceError> {
    build_pe_hmqc_with(delta_s, n, HmqcOptions::default())
}

pub fn build_pe_hmqc_with(
    delta_s: f64,
    n: usize,
    opts: HmqcOptions,
) -> Result<PulseSequence, SequenceError> {
    if n < 1 {
        return Err(SequenceError::BlockCount);
    }
    let den = 4 * n as i64;
    let mut block = Vec::new();
    for i in 0..n {
        block.push(t1_delay(den));
        block.push(pulse(Isotope::H1, 180.0));
        block.push(t1_delay(den));
        if i == 0 {
            block.push(mark("b"));
        }
        block.push(pulse(Isotope::H1, 90.0));
        if i == 0 {
            block.push(mark("c"));
        }
        block.push(t1_delay(den));
        block.push(pulse(Isotope::H1, 180.0));
        block.push(t1_delay(den));
    }
    hmqc_frame("pe-hmqc", delta_s, opts, block, &[("n", n as f64)])
}

/// Single ¹H 90° pulse followed by acquisition.
pub fn pulse_acquire() -> PulseSequence {
    PulseSequence {
        name: "pulse-acquire".into(),
        events: vec![
            SequenceEvent::Pulse {
                isotope: Isotope::H1,
                flip_deg: 90.0,
                phase: Phase::Slot(PHI1.into()),
            },
            SequenceEvent::Acquire {
                detect: Isotope::H1,
                decouple: BTreeSet::from([Isotope::C13]),
            },
        ],
        phase_cycle: PhaseCycle {
            slots: BTreeMap::from([(PHI1.to_string(), vec![0.0])]),
            receiver: vec![1.0],
        },
        quad: QuadScheme {
            mode: QuadMode::States,
            incremented_slot: PHI1.into(),
        },
        params: BTreeMap::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::{resolve, QuadComponent, ResolvePoint, ResolvedEvent};

    fn count_pulses(seq: &PulseSequence, from: &str, to: &str, iso: Isotope, flip: f64) -> usize {
        let a = seq.events.iter().position(|e| *e == mark(from)).unwrap();
        let d = seq.events.iter().position(|e| *e == mark(to)).unwrap();
        seq.events[a..d]
            .iter()
            .filter(|e| {
                matches!(e, SequenceEvent::Pulse { isotope, flip_deg, .. }
                    if *isotope == iso && *flip_deg == flip)
            })
            .count()
    }

    fn quarter_delay(t1: f64) -> f64 {
        let seq = build_pe_hmqc(DEFAULT_DELTA_S, 1).unwrap();
        let r = resolve(&seq, &ResolvePoint::new(t1, 0, QuadComponent::Cos)).unwrap();
        let a = r
            .events
            .iter()
            .position(|e| *e == ResolvedEvent::Mark("a".into()))
            .unwrap();
        match r.events[a + 1] {
            ResolvedEvent::Delay(t) => t,
            ref e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn pe_n1_pulse_inventory() {
        let seq = build_pe_hmqc(DEFAULT_DELTA_S, 1).unwrap();
        assert_eq!(count_pulses(&seq, "a", "d", Isotope::H1, 180.0), 2);
        assert_eq!(count_pulses(&seq, "a", "d", Isotope::H1, 90.0), 1);
        assert_eq!(count_pulses(&seq, "a", "d", Isotope::C13, 180.0), 0);
        assert_eq!(seq.marks(), vec!["a", "b", "c", "d"]);
    }

    #[test]
    fn pe_n2_pulse_inventory() {
        let seq = build_pe_hmqc(DEFAULT_DELTA_S, 2).unwrap();
        assert_eq!(count_pulses(&seq, "a", "d", Isotope::H1, 180.0), 4);
        assert_eq!(count_pulses(&seq, "a", "d", Isotope::H1, 90.0), 2);
        assert_eq!(seq.params["n"], 2.0);
    }

    #[test]
    fn quarter_delays_at_paper_extremes() {
        assert!((quarter_delay(0.3692) - 0.0923).abs() < 1e-15);
        assert!((quarter_delay(186e-6) - 46.5e-6).abs() < 1e-18);
    }

    #[test]
    fn hmqc_at_zero_t1_is_well_formed() {
        let seq = build_hmqc(0.0033, true).unwrap();
        let r = resolve(&seq, &ResolvePoint::new(0.0, 0, QuadComponent::Cos)).unwrap();
        let zero = r
            .events
            .iter()
            .filter(|e| matches!(e, ResolvedEvent::Delay(t) if *t == 0.0))
            .count();
        assert_eq!(zero, 2);
        assert_eq!(seq.params["delta"], 0.0033);
    }

    #[test]
    fn outside_t1_identical() {
        for refocus in [false, true] {
            let opts = HmqcOptions {
                refocus_inept: refocus,
                ..HmqcOptions::default()
            };
            let h = build_hmqc_with(0.0033, opts).unwrap();
            let p = build_pe_hmqc_with(0.0033, 3, opts).unwrap();
            let split = |s: &PulseSequence| {
                let a = s.events.iter().position(|e| *e == mark("a")).unwrap();
                let d = s.events.iter().position(|e| *e == mark("d")).unwrap();
                (s.events[..=a].to_vec(), s.events[d..].to_vec())
            };
            assert_eq!(split(&h), split(&p));
        }
    }

    #[test]
    fn carbon_evolves_for_full_t1() {
        let seq = build_pe_hmqc(DEFAULT_DELTA_S, 3).unwrap();
        let r = resolve(&seq, &ResolvePoint::new(0.05, 0, QuadComponent::Cos)).unwrap();
        let a = r
            .events
            .iter()
            .position(|e| *e == ResolvedEvent::Mark("a".into()))
            .unwrap();
        let d = r
            .events
            .iter()
            .position(|e| *e == ResolvedEvent::Mark("d".into()))
            .unwrap();
        let total: f64 = r.events[a..d]
            .iter()
            .filter_map(|e| match e {
                ResolvedEvent::Delay(t) => Some(*t),
                _ => None,
            })
            .sum();
        assert!((total - 0.05).abs() < 1e-15);
    }

    #[test]
    fn builder_errors() {
        assert_eq!(build_pe_hmqc(0.0033, 0), Err(SequenceError::BlockCount));
        assert_eq!(build_hmqc(0.0, true), Err(SequenceError::Delta(0.0)));
    }
}
