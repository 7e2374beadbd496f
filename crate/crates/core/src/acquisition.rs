//! Two-dimensional acquisition: t1 increments × quadrature components ×
//! phase-cycle steps, with ideal heteronuclear decoupling during t2.
//!
//! Rows are computed in parallel and written back by index; within a row
//! the cycle steps are summed in ascending order, so results do not depend
//! on the number of worker threads.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hilbert::{
    element_orders, equilibrium_state, hamiltonian, pulse_propagator, unitarity_error, CMatrix,
    CoherenceSelection, DensityState, EngineError, Evolver, HamiltonianSpec,
};
use crate::sequence::{
    resolve, PulseSequence, QuadComponent, ResolvePoint, ResolvedEvent, SequenceError,
    SequenceEvent,
};
use crate::spin_system::{Isotope, SpinSystem};

/// Default first t1 value, s.
pub const DEFAULT_T1_INITIAL_S: f64 = 186e-6;

#[derive(Debug, Error)]
pub enum AcqError {
    #[error("invalid acquisition parameter: {0}")]
    Params(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error("initial state dimension {got} does not match system dimension {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("raw data I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("raw metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("raw data file {file} has {got} bytes, expected {expected}")]
    RawSize {
        file: String,
        got: usize,
        expected: usize,
    },
    #[error("non-finite sample in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcqParams {
    pub sw2_hz: f64,
    pub n2: usize,
    pub sw1_hz: f64,
    pub n1: usize,
    pub t1_initial_s: f64,
}

impl AcqParams {
    pub fn validate(&self) -> Result<(), AcqError> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.sw2_hz) {
            return Err(AcqError::Params(format!(
                "sw2 must be positive, got {}",
                self.sw2_hz
            )));
        }
        if !pos(self.sw1_hz) {
            return Err(AcqError::Params(format!(
                "sw1 must be positive, got {}",
                self.sw1_hz
            )));
        }
        if self.n2 == 0 {
            return Err(AcqError::Params("n2 must be at least 1".into()));
        }
        if self.n1 == 0 {
            return Err(AcqError::Params("n1 must be at least 1".into()));
        }
        if !(self.t1_initial_s.is_finite() && self.t1_initial_s >= 0.0) {
            return Err(AcqError::Params(format!(
                "t1 initial must be non-negative, got {}",
                self.t1_initial_s
            )));
        }
        Ok(())
    }

    pub fn dwell1(&self) -> f64 {
        1.0 / self.sw1_hz
    }

    pub fn dwell2(&self) -> f64 {
        1.0 / self.sw2_hz
    }

    pub fn t1_at(&self, i: usize) -> f64 {
        self.t1_initial_s + i as f64 / self.sw1_hz
    }

    pub fn t1_max(&self) -> f64 {
        self.t1_at(self.n1 - 1)
    }

    pub fn acquisition_time(&self) -> f64 {
        self.n2 as f64 / self.sw2_hz
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub sequence: String,
    pub system: String,
    pub system_hash: String,
    pub cycle_len: usize,
    pub quad_mode: String,
    /// Dimension labels as given for the reference experiment.
    pub dimension_labels: [String; 2],
    pub conventions: Conventions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub detection: String,
    pub rotation: String,
    pub sine_component: String,
}

impl Default for Conventions {
    fn default() -> Self {
        Conventions {
            detection: "Tr(rho * sum I+), Ix -> 1/2, Iy -> i/2".into(),
            rotation: "exp(-i theta (Ix cos phi + Iy sin phi)), 90x: Iz -> -Iy".into(),
            sine_component: "incremented slot +90 deg".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawData2D {
    /// `n1 × n2`, cosine (unshifted) component.
    pub cos_plane: Array2<Complex64>,
    /// `n1 × n2`, sine (+90°) component.
    pub sin_plane: Array2<Complex64>,
    pub params: AcqParams,
    pub provenance: Provenance,
}

/// Worst deviations seen while propagating.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub unitarity: f64,
    pub hermiticity: f64,
    pub trace_drift: f64,
    pub purity_drift: f64,
    pub steps: usize,
}

impl Audit {
    fn merge(&mut self, o: &Audit) {
        self.unitarity = self.unitarity.max(o.unitarity);
        self.hermiticity = self.hermiticity.max(o.hermiticity);
        self.trace_drift = self.trace_drift.max(o.trace_drift);
        self.purity_drift = self.purity_drift.max(o.purity_drift);
        self.steps += o.steps;
    }

    pub fn worst(&self) -> f64 {
        self.unitarity
            .max(self.hermiticity)
            .max(self.trace_drift)
            .max(self.purity_drift)
    }

    fn unitary_step(&mut self, before: &DensityState, after: &DensityState) {
        let scale = before.purity().max(1.0);
        self.hermiticity = self.hermiticity.max(after.hermiticity_error());
        self.trace_drift = self
            .trace_drift
            .max((after.trace() - before.trace()).norm());
        self.purity_drift = self
            .purity_drift
            .max((after.purity() - before.purity()).abs() / scale);
        self.steps += 1;
    }
}

fn pulse_key(iso: Isotope, flip: f64, phase: f64) -> (Isotope, u64, u64) {
    (iso, flip.to_bits(), phase.to_bits())
}

/// Precomputed operators for propagating one sequence on one system.
pub struct Propagator<'a> {
    system: &'a SpinSystem,
    evolver: Evolver,
    pulses: HashMap<(Isotope, u64, u64), CMatrix>,
    /// Keep-masks for filter events, indexed like the sequence events.
    masks: HashMap<usize, Vec<bool>>,
    audit: bool,
}

impl<'a> Propagator<'a> {
    pub fn new(system: &'a SpinSystem, seq: &PulseSequence, audit: bool) -> Result<Self, AcqError> {
        let evolver = Evolver::new(&hamiltonian(system, &HamiltonianSpec::full())?);
        let mut pulses = HashMap::new();
        for step in 0..seq.cycle_len() {
            for component in [QuadComponent::Cos, QuadComponent::Sin] {
                for t1_index in [0, 1] {
                    let at = ResolvePoint {
                        t1_s: 0.0,
                        t1_index,
                        cycle_step: step,
                        component,
                    };
                    for e in resolve(seq, &at)?.events {
                        if let ResolvedEvent::Pulse {
                            isotope,
                            flip_deg,
                            phase_deg,
                        } = e
                        {
                            if system.has_isotope(isotope) {
                                pulses
                                    .entry(pulse_key(isotope, flip_deg, phase_deg))
                                    .or_insert(pulse_propagator(
                                        system, isotope, flip_deg, phase_deg,
                                    )?);
                            }
                        }
                    }
                }
            }
        }
        let d = system.dim();
        let mut masks = HashMap::new();
        for (i, e) in seq.events.iter().enumerate() {
            if let SequenceEvent::Filter(sel) = e {
                masks.insert(i, filter_mask(system, sel, d));
            }
        }
        Ok(Propagator {
            system,
            evolver,
            pulses,
            masks,
            audit,
        })
    }

    /// State at the acquire event.
    pub fn run(
        &self,
        events: &[ResolvedEvent],
        rho0: &DensityState,
        audit: &mut Audit,
    ) -> Result<DensityState, AcqError> {
        let mut rho = rho0.clone();
        for (i, e) in events.iter().enumerate() {
            match e {
                ResolvedEvent::Pulse {
                    isotope,
                    flip_deg,
                    phase_deg,
                } => {
                    if !self.system.has_isotope(*isotope) {
                        continue;
                    }
                    let key = pulse_key(*isotope, *flip_deg, *phase_deg);
                    let computed;
                    let u = match self.pulses.get(&key) {
                        Some(u) => u,
                        None => {
                            computed =
                                pulse_propagator(self.system, *isotope, *flip_deg, *phase_deg)?;
                            &computed
                        }
                    };
                    let next = rho.transformed(u);
                    if self.audit {
                        audit.unitarity = audit.unitarity.max(unitarity_error(u));
                        audit.unitary_step(&rho, &next);
                    }
                    rho = next;
                }
                ResolvedEvent::Delay(t) => {
                    let next = self.evolver.evolve(&rho, *t)?;
                    if self.audit {
                        audit.unitarity = audit
                            .unitarity
                            .max(unitarity_error(&self.evolver.propagator(*t)));
                        audit.unitary_step(&rho, &next);
                    }
                    rho = next;
                }
                ResolvedEvent::Filter(sel) => {
                    let d = rho.dim();
                    let owned;
                    let mask = match self.masks.get(&i) {
                        Some(m) => m,
                        None => {
                            owned = filter_mask(self.system, sel, d);
                            &owned
                        }
                    };
                    for (k, keep) in mask.iter().enumerate() {
                        if !keep {
                            rho.matrix[(k / d, k % d)] = Complex64::new(0.0, 0.0);
                        }
                    }
                }
                ResolvedEvent::Mark(_) => {}
                ResolvedEvent::Acquire { .. } => break,
            }
        }
        Ok(rho)
    }
}

fn filter_mask(system: &SpinSystem, sel: &CoherenceSelection, d: usize) -> Vec<bool> {
    (0..d * d)
        .map(|k| sel.allows(&element_orders(system, k / d, k % d)))
        .collect()
}

/// Precomputed t2 evolution: `s(k) = Σ w_ab e^{-i(E_a-E_b) k dt}`.
pub struct FidKernel {
    evolver: Evolver,
    /// (a, b, D'_ba) for nonzero detection elements in the eigenbasis.
    pairs: Vec<(usize, usize, Complex64)>,
    /// `phasors[k * pairs + p]`.
    phasors: Vec<Complex64>,
    n2: usize,
}

impl FidKernel {
    pub fn new(
        system: &SpinSystem,
        detect: Isotope,
        decouple: &std::collections::BTreeSet<Isotope>,
        p: &AcqParams,
    ) -> Result<Self, AcqError> {
        let h = hamiltonian(
            system,
            &HamiltonianSpec::decoupled(decouple.iter().copied()),
        )?;
        let evolver = Evolver::new(&h);
        let det = crate::hilbert::detection_operator(system, detect);
        let det_e = evolver.to_eigenbasis(&det);
        let d = system.dim();
        let mut pairs = Vec::new();
        for a in 0..d {
            for b in 0..d {
                let v = det_e[(b, a)];
                if v.norm() > 1e-14 {
                    pairs.push((a, b, v));
                }
            }
        }
        let e = evolver.energies();
        let dt = p.dwell2();
        let mut phasors = Vec::with_capacity(p.n2 * pairs.len());
        for k in 0..p.n2 {
            let t = k as f64 * dt;
            for &(a, b, _) in &pairs {
                phasors.push(Complex64::from_polar(1.0, -(e[a] - e[b]) * t));
            }
        }
        Ok(FidKernel {
            evolver,
            pairs,
            phasors,
            n2: p.n2,
        })
    }

    pub fn fid(&self, state: &DensityState) -> Vec<Complex64> {
        let rho_e = self.evolver.to_eigenbasis(&state.matrix);
        let w: Vec<Complex64> = self
            .pairs
            .iter()
            .map(|&(a, b, v)| rho_e[(a, b)] * v)
            .collect();
        let np = self.pairs.len();
        (0..self.n2)
            .map(|k| {
                let row = &self.phasors[k * np..(k + 1) * np];
                row.iter().zip(&w).map(|(p, w)| p * w).sum()
            })
            .collect()
    }
}

/// One FID of `n2` points from `state` under the decoupled Hamiltonian.
pub fn run_fid(
    system: &SpinSystem,
    state: &DensityState,
    p: &AcqParams,
    detect: Isotope,
    decouple: &std::collections::BTreeSet<Isotope>,
) -> Result<Vec<Complex64>, AcqError> {
    p.validate()?;
    if state.dim() != system.dim() {
        return Err(AcqError::Dimension {
            got: state.dim(),
            expected: system.dim(),
        });
    }
    if !system.has_isotope(detect) {
        return Err(EngineError::MissingIsotope(detect).into());
    }
    Ok(FidKernel::new(system, detect, decouple, p)?.fid(state))
}

pub fn run_experiment(
    system: &SpinSystem,
    seq: &PulseSequence,
    p: &AcqParams,
) -> Result<RawData2D, AcqError> {
    run_experiment_from(system, seq, p, &equilibrium_state(system), false).map(|(d, _)| d)
}

/// Runs the experiment from an arbitrary initial state; with `audit` set,
/// also reports the worst invariant deviations over all unitary steps.
pub fn run_experiment_from(
    system: &SpinSystem,
    seq: &PulseSequence,
    p: &AcqParams,
    rho0: &DensityState,
    audit: bool,
) -> Result<(RawData2D, Audit), AcqError> {
    p.validate()?;
    seq.validate()?;
    if rho0.dim() != system.dim() {
        return Err(AcqError::Dimension {
            got: rho0.dim(),
            expected: system.dim(),
        });
    }
    let prop = Propagator::new(system, seq, audit)?;
    let (detect, decouple) = seq.acquire();
    let kernel = if system.has_isotope(detect) {
        Some(FidKernel::new(system, detect, decouple, p)?)
    } else {
        None
    };
    let rows: Vec<Result<([Vec<Complex64>; 2], Audit), AcqError>> = (0..p.n1)
        .into_par_iter()
        .map(|i| {
            let mut audit = Audit::default();
            let mut planes: [Vec<Complex64>; 2] = [Vec::new(), Vec::new()];
            for (slot, component) in [QuadComponent::Cos, QuadComponent::Sin]
                .into_iter()
                .enumerate()
            {
                let mut acc = DensityState::zeros(system.dim());
                for step in 0..seq.cycle_len() {
                    let at = ResolvePoint {
                        t1_s: p.t1_at(i),
                        t1_index: i,
                        cycle_step: step,
                        component,
                    };
                    let r = resolve(seq, &at)?;
                    let rho = prop.run(&r.events, rho0, &mut audit)?;
                    acc = acc.add(&rho.scaled(r.receiver));
                }
                planes[slot] = match &kernel {
                    Some(k) => k.fid(&acc),
                    None => vec![Complex64::new(0.0, 0.0); p.n2],
                };
            }
            Ok((planes, audit))
        })
        .collect();

    let mut cos_plane = Array2::zeros((p.n1, p.n2));
    let mut sin_plane = Array2::zeros((p.n1, p.n2));
    let mut total = Audit::default();
    for (i, row) in rows.into_iter().enumerate() {
        let ([c, s], a) = row?;
        for k in 0..p.n2 {
            cos_plane[(i, k)] = c[k];
            sin_plane[(i, k)] = s[k];
        }
        total.merge(&a);
    }
    let provenance = Provenance {
        sequence: seq.name.clone(),
        system: system.name.clone(),
        system_hash: system.content_hash(),
        cycle_len: seq.cycle_len(),
        quad_mode: seq.quad.mode.label().into(),
        dimension_labels: ["F2 (SQ)".into(), "F1 (3Q)".into()],
        conventions: Conventions::default(),
    };
    Ok((
        RawData2D {
            cos_plane,
            sin_plane,
            params: *p,
            provenance,
        },
        total,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawMetadata {
    params: AcqParams,
    provenance: Provenance,
    layout: String,
}

const LAYOUT: &str = "little-endian f64, interleaved re/im, row-major n1 x n2";

fn plane_bytes(plane: &Array2<Complex64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(plane.len() * 16);
    for z in plane.iter() {
        out.extend_from_slice(&z.re.to_le_bytes());
        out.extend_from_slice(&z.im.to_le_bytes());
    }
    out
}

fn plane_from_bytes(
    bytes: &[u8],
    n1: usize,
    n2: usize,
    file: &str,
) -> Result<Array2<Complex64>, AcqError> {
    let expected = n1 * n2 * 16;
    if bytes.len() != expected {
        return Err(AcqError::RawSize {
            file: file.into(),
            got: bytes.len(),
            expected,
        });
    }
    let vals: Vec<Complex64> = bytes
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[..8].try_into().unwrap());
            let im = f64::from_le_bytes(c[8..].try_into().unwrap());
            Complex64::new(re, im)
        })
        .collect();
    Ok(Array2::from_shape_vec((n1, n2), vals).expect("length checked above"))
}

/// Writes `metadata.json`, `cos.bin` and `sin.bin` into `dir`.
pub fn write_raw(dir: &Path, data: &RawData2D) -> Result<(), AcqError> {
    if data
        .cos_plane
        .iter()
        .chain(data.sin_plane.iter())
        .any(|z| !z.re.is_finite() || !z.im.is_finite())
    {
        return Err(AcqError::NonFinite("raw planes"));
    }
    fs::create_dir_all(dir)?;
    let meta = RawMetadata {
        params: data.params,
        provenance: data.provenance.clone(),
        layout: LAYOUT.into(),
    };
    fs::write(
        dir.join("metadata.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    fs::write(dir.join("cos.bin"), plane_bytes(&data.cos_plane))?;
    fs::write(dir.join("sin.bin"), plane_bytes(&data.sin_plane))?;
    Ok(())
}

pub fn read_raw(dir: &Path) -> Result<RawData2D, AcqError> {
    let meta: RawMetadata = serde_json::from_str(&fs::read_to_string(dir.join("metadata.json"))?)?;
    meta.params.validate()?;
    let (n1, n2) = (meta.params.n1, meta.params.n2);
    let cos_plane = plane_from_bytes(&fs::read(dir.join("cos.bin"))?, n1, n2, "cos.bin")?;
    let sin_plane = plane_from_bytes(&fs::read(dir.join("sin.bin"))?, n1, n2, "sin.bin")?;
    Ok(RawData2D {
        cos_plane,
        sin_plane,
        params: meta.params,
        provenance: meta.provenance,
    })
}
