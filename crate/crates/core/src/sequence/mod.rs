//! Pulse sequences as t1-parametrized event lists.
//!
//! A [`PulseSequence`] keeps delays symbolic (`t1`, `delta` and constants) and
//! pulse phases either fixed or bound to a phase-cycle slot. [`resolve`]
//! turns it into concrete events for one (t1, cycle step, quadrature
//! component) point.

mod builders;
mod text;

pub use builders::{
    build_hmqc, build_hmqc_with, build_pe_hmqc, build_pe_hmqc_with, pulse_acquire, HmqcOptions,
    DEFAULT_DELTA_S, G1_PURGE, G2_SELECT, G3_SELECT,
};
pub use text::{parse_sequence, serialize_sequence};

use std::collections::{BTreeMap, BTreeSet};

use num_rational::Ratio;
use thiserror::Error;

use crate::hilbert::CoherenceSelection;
use crate::spin_system::Isotope;

pub type Rational = Ratio<i64>;

#[derive(Debug, Error, PartialEq)]
pub enum SequenceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate mark '{0}'")]
    DuplicateMark(String),
    #[error("sequence must contain exactly one acquire event")]
    AcquireCount,
    #[error("acquire must be the last event")]
    AcquireNotLast,
    #[error("delay expression '{0}' can become negative")]
    NegativeCapableDelay(String),
    #[error("delay uses 'delta' but no 'param delta' is defined")]
    MissingDelta,
    #[error("phase slot '{0}' is not defined by a cycle directive")]
    UnknownSlot(String),
    #[error("phase cycle lists have unequal lengths")]
    CycleLength,
    #[error("phase cycle is empty")]
    EmptyCycle,
    #[error("quadrature slot '{0}' is not a cycled slot")]
    QuadSlot(String),
    #[error("negative t1 {0} s")]
    NegativeT1(f64),
    #[error("cycle step {step} out of range (cycle length {len})")]
    CycleStep { step: usize, len: usize },
    #[error("perfect-echo block count must be at least 1")]
    BlockCount,
    #[error("delta must be positive, got {0}")]
    Delta(f64),
}

/// Pulse phase: a constant in degrees or a reference to a cycled slot.
#[derive(Debug, Clone, PartialEq)]
pub enum Phase {
    Fixed(f64),
    Slot(String),
}

/// `t1·a + delta·b + c` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayExpr {
    pub t1: Rational,
    pub delta: Rational,
    pub constant_s: f64,
}

impl DelayExpr {
    pub fn t1_fraction(num: i64, den: i64) -> Self {
        DelayExpr {
            t1: Rational::new(num, den),
            delta: Rational::from_integer(0),
            constant_s: 0.0,
        }
    }

    pub fn delta_fraction(num: i64, den: i64) -> Self {
        DelayExpr {
            t1: Rational::from_integer(0),
            delta: Rational::new(num, den),
            constant_s: 0.0,
        }
    }

    pub fn constant(seconds: f64) -> Self {
        DelayExpr {
            t1: Rational::from_integer(0),
            delta: Rational::from_integer(0),
            constant_s: seconds,
        }
    }

    pub fn uses_delta(&self) -> bool {
        *self.delta.numer() != 0
    }

    /// True if some t1 ≥ 0 (and delta > 0) makes the delay negative.
    pub fn can_be_negative(&self) -> bool {
        *self.t1.numer() < 0 || *self.delta.numer() < 0 || self.constant_s < 0.0
    }

    pub fn evaluate(&self, t1_s: f64, delta_s: f64) -> f64 {
        ratio_f64(self.t1) * t1_s + ratio_f64(self.delta) * delta_s + self.constant_s
    }
}

pub(crate) fn ratio_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub enum SequenceEvent {
    Pulse {
        isotope: Isotope,
        flip_deg: f64,
        phase: Phase,
    },
    Delay(DelayExpr),
    Filter(CoherenceSelection),
    Mark(String),
    Acquire {
        detect: Isotope,
        decouple: BTreeSet<Isotope>,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PhaseCycle {
    /// Phases in degrees per slot.
    pub slots: BTreeMap<String, Vec<f64>>,
    /// Receiver weights, ±1.
    pub receiver: Vec<f64>,
}

impl PhaseCycle {
    pub fn len(&self) -> usize {
        self.receiver.len()
    }

    pub fn is_empty(&self) -> bool {
        self.receiver.is_empty()
    }

    fn check(&self) -> Result<(), SequenceError> {
        if self.receiver.is_empty() {
            return Err(SequenceError::EmptyCycle);
        }
        if self.slots.values().any(|v| v.len() != self.receiver.len()) {
            return Err(SequenceError::CycleLength);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuadMode {
    States,
    StatesTppi,
}

impl QuadMode {
    pub fn label(self) -> &'static str {
        match self {
            QuadMode::States => "states",
            QuadMode::StatesTppi => "states-tppi",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadScheme {
    pub mode: QuadMode,
    pub incremented_slot: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PulseSequence {
    pub name: String,
    pub events: Vec<SequenceEvent>,
    pub phase_cycle: PhaseCycle,
    pub quad: QuadScheme,
    pub params: BTreeMap<String, f64>,
}

impl PulseSequence {
    /// Checks the structural invariants shared by builders and the parser.
    pub fn validate(&self) -> Result<(), SequenceError> {
        self.phase_cycle.check()?;
        let acquires = self
            .events
            .iter()
            .filter(|e| matches!(e, SequenceEvent::Acquire { .. }))
            .count();
        if acquires != 1 {
            return Err(SequenceError::AcquireCount);
        }
        if !matches!(self.events.last(), Some(SequenceEvent::Acquire { .. })) {
            return Err(SequenceError::AcquireNotLast);
        }
        let mut marks = BTreeSet::new();
        for e in &self.events {
            match e {
                SequenceEvent::Mark(label) => {
                    if !marks.insert(label.as_str()) {
                        return Err(SequenceError::DuplicateMark(label.clone()));
                    }
                }
                SequenceEvent::Delay(d) => {
                    if d.can_be_negative() {
                        return Err(SequenceError::NegativeCapableDelay(text::format_delay(d)));
                    }
                    if d.uses_delta() && !self.params.contains_key("delta") {
                        return Err(SequenceError::MissingDelta);
                    }
                }
                SequenceEvent::Pulse {
                    phase: Phase::Slot(s),
                    ..
                } => {
                    if !self.phase_cycle.slots.contains_key(s) {
                        return Err(SequenceError::UnknownSlot(s.clone()));
                    }
                }
                _ => {}
            }
        }
        if !self
            .phase_cycle
            .slots
            .contains_key(&self.quad.incremented_slot)
        {
            return Err(SequenceError::QuadSlot(self.quad.incremented_slot.clone()));
        }
        Ok(())
    }

    pub fn delta(&self) -> f64 {
        self.params.get("delta").copied().unwrap_or(0.0)
    }

    pub fn cycle_len(&self) -> usize {
        self.phase_cycle.len()
    }

    pub fn marks(&self) -> Vec<&str> {
        self.events
            .iter()
            .filter_map(|e| match e {
                SequenceEvent::Mark(l) => Some(l.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn acquire(&self) -> (Isotope, &BTreeSet<Isotope>) {
        match self.events.last() {
            Some(SequenceEvent::Acquire { detect, decouple }) => (*detect, decouple),
            _ => unreachable!("validated sequences end with acquire"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuadComponent {
    Cos,
    Sin,
}

/// One acquisition point of the 2D experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvePoint {
    pub t1_s: f64,
    pub t1_index: usize,
    pub cycle_step: usize,
    pub component: QuadComponent,
}

impl ResolvePoint {
    pub fn new(t1_s: f64, cycle_step: usize, component: QuadComponent) -> Self {
        ResolvePoint {
            t1_s,
            t1_index: 0,
            cycle_step,
            component,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedEvent {
    Pulse {
        isotope: Isotope,
        flip_deg: f64,
        phase_deg: f64,
    },
    Delay(f64),
    Filter(CoherenceSelection),
    Mark(String),
    Acquire {
        detect: Isotope,
        decouple: BTreeSet<Isotope>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedSequence {
    pub events: Vec<ResolvedEvent>,
    pub receiver: f64,
}

/// Evaluates delays and substitutes phases for one acquisition point.
///
/// The sine component advances the incremented slot by +90°. In
/// States-TPPI mode the slot and the receiver are additionally inverted on
/// odd t1 increments, which leaves the selected pathway untouched and moves
/// axial signal to the edge of F1.
pub fn resolve(seq: &PulseSequence, at: &ResolvePoint) -> Result<ResolvedSequence, SequenceError> {
    if at.t1_s < 0.0 {
        return Err(SequenceError::NegativeT1(at.t1_s));
    }
    let len = seq.cycle_len();
    if at.cycle_step >= len {
        return Err(SequenceError::CycleStep {
            step: at.cycle_step,
            len,
        });
    }
    let tppi_flip = seq.quad.mode == QuadMode::StatesTppi && at.t1_index % 2 == 1;
    let slot_phase = |slot: &str| -> f64 {
        let mut p = seq.phase_cycle.slots[slot][at.cycle_step];
        if slot == seq.quad.incremented_slot {
            if at.component == QuadComponent::Sin {
                p += 90.0;
            }
            if tppi_flip {
                p += 180.0;
            }
        }
        p
    };
    let delta = seq.delta();
    let events = seq
        .events
        .iter()
        .map(|e| match e {
            SequenceEvent::Pulse {
                isotope,
                flip_deg,
                phase,
            } => ResolvedEvent::Pulse {
                isotope: *isotope,
                flip_deg: *flip_deg,
                phase_deg: match phase {
                    Phase::Fixed(p) => *p,
                    Phase::Slot(s) => slot_phase(s),
                },
            },
            SequenceEvent::Delay(d) => ResolvedEvent::Delay(d.evaluate(at.t1_s, delta)),
            SequenceEvent::Filter(f) => ResolvedEvent::Filter(f.clone()),
            SequenceEvent::Mark(l) => ResolvedEvent::Mark(l.clone()),
            SequenceEvent::Acquire { detect, decouple } => ResolvedEvent::Acquire {
                detect: *detect,
                decouple: decouple.clone(),
            },
        })
        .collect();
    let mut receiver = seq.phase_cycle.receiver[at.cycle_step];
    if tppi_flip {
        receiver = -receiver;
    }
    Ok(ResolvedSequence { events, receiver })
}
