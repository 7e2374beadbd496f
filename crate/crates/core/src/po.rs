//! Product-operator propagation under weak-coupling rules.
//!
//! A [`POTerm`] is a per-spin letter string; a term with `k` non-identity
//! letters denotes `2^{k-1}` times the product of single-spin operators
//! (e.g. `2 I1x Sy`). Everything here works on coefficient maps and never
//! touches a density matrix except in the explicit basis conversions.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::hilbert::{CMatrix, CoherenceSelection, DensityState};
use crate::sequence::{
    self, PulseSequence, QuadComponent, ResolvePoint, ResolvedEvent, SequenceError,
};
use crate::spin_system::{CouplingModel, Isotope, SpinSystem};

/// Coefficients at or below this magnitude are dropped.
pub const PRUNE_TOL: f64 = 1e-15;

#[derive(Debug, Error)]
pub enum PoError {
    #[error(
        "coupling {a}-{b} uses the isotropic model; product-operator rules need weak coupling"
    )]
    UnsupportedModel { a: String, b: String },
    #[error("isotope {0} not present in the system")]
    MissingIsotope(&'static str),
    #[error("non-finite pulse angle")]
    NonFinitePulse,
    #[error("negative duration {0} s")]
    NegativeTime(f64),
    #[error("term length {got} does not match system size {expected}")]
    TermLength { got: usize, expected: usize },
    #[error("state dimension {got} does not match system dimension {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("unknown mark '{0}'")]
    UnknownMark(String),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Letter {
    E,
    X,
    Y,
    Z,
}

impl Letter {
    fn from_axis(i: usize) -> Letter {
        [Letter::X, Letter::Y, Letter::Z][i]
    }

    fn axis(self) -> Option<usize> {
        match self {
            Letter::E => None,
            Letter::X => Some(0),
            Letter::Y => Some(1),
            Letter::Z => Some(2),
        }
    }

    pub fn is_transverse(self) -> bool {
        matches!(self, Letter::X | Letter::Y)
    }

    pub fn symbol(self) -> char {
        match self {
            Letter::E => 'E',
            Letter::X => 'x',
            Letter::Y => 'y',
            Letter::Z => 'z',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct POTerm(pub Vec<Letter>);

impl POTerm {
    pub fn identity(n: usize) -> Self {
        POTerm(vec![Letter::E; n])
    }

    /// Term with the given letters on the given spin indices, `E` elsewhere.
    pub fn with(n: usize, letters: &[(usize, Letter)]) -> Self {
        let mut t = POTerm::identity(n);
        for &(k, l) in letters {
            t.0[k] = l;
        }
        t
    }

    /// Builds a term from spin ids, e.g. `[("H1", 'x'), ("C1", 'y')]`.
    pub fn from_ids(system: &SpinSystem, letters: &[(&str, char)]) -> Option<Self> {
        let mut t = POTerm::identity(system.len());
        for (id, c) in letters {
            let k = system.spin_index(id).ok()?;
            t.0[k] = match c {
                'x' => Letter::X,
                'y' => Letter::Y,
                'z' => Letter::Z,
                'E' => Letter::E,
                _ => return None,
            };
        }
        Some(t)
    }

    pub fn order(&self) -> usize {
        self.0.iter().filter(|l| **l != Letter::E).count()
    }

    /// Implicit normalization factor `2^{k-1}` (1 for the identity).
    pub fn prefactor(&self) -> f64 {
        match self.order() {
            0 => 1.0,
            k => (1u64 << (k - 1)) as f64,
        }
    }

    /// `Tr(T·T)` for an `n`-spin term.
    pub fn norm_sq(&self) -> f64 {
        let n = self.0.len() as i32;
        if self.order() == 0 {
            2f64.powi(n)
        } else {
            2f64.powi(n - 2)
        }
    }

    /// Renders e.g. `2 H1x C1y`, spins in document order.
    pub fn render(&self, system: &SpinSystem) -> String {
        let mut parts = Vec::new();
        let k = self.order();
        if k == 0 {
            return "E".into();
        }
        if k > 1 {
            parts.push(format!("{}", self.prefactor()));
        }
        for (spin, l) in system.spins.iter().zip(&self.0) {
            if *l != Letter::E {
                parts.push(format!("{}{}", spin.id, l.symbol()));
            }
        }
        parts.join(" ")
    }

    /// Explicit `2^N × 2^N` matrix of the term.
    pub fn matrix(&self) -> CMatrix {
        let n = self.0.len();
        let dim = 1usize << n;
        let (flip, _) = pauli_masks(&self.0);
        let scale = if self.order() == 0 { 1.0 } else { 0.5 };
        let mut m = CMatrix::zeros(dim, dim);
        for c in 0..dim {
            let r = c ^ flip;
            m[(r, c)] = pauli_element(&self.0, r, c) * scale;
        }
        m
    }
}

impl fmt::Display for POTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.0 {
            write!(f, "{}", l.symbol())?;
        }
        Ok(())
    }
}

fn bit(n: usize, state: usize, k: usize) -> usize {
    (state >> (n - 1 - k)) & 1
}

/// Bit mask of spins flipped by the Pauli string and of spins carrying `y`.
fn pauli_masks(letters: &[Letter]) -> (usize, usize) {
    let n = letters.len();
    let mut flip = 0;
    let mut ys = 0;
    for (k, l) in letters.iter().enumerate() {
        let b = 1 << (n - 1 - k);
        if matches!(l, Letter::X | Letter::Y) {
            flip |= b;
        }
        if *l == Letter::Y {
            ys |= b;
        }
    }
    (flip, ys)
}

/// `⟨r| ⊗σ |c⟩` for a Pauli string (σ_E = 1); zero unless `r = c ^ flip`.
fn pauli_element(letters: &[Letter], r: usize, c: usize) -> Complex64 {
    let n = letters.len();
    let mut v = Complex64::new(1.0, 0.0);
    for (k, l) in letters.iter().enumerate() {
        let (br, bc) = (bit(n, r, k), bit(n, c, k));
        v *= match l {
            Letter::E | Letter::X => Complex64::new(1.0, 0.0),
            Letter::Y => {
                if br == 0 {
                    Complex64::new(0.0, -1.0)
                } else {
                    Complex64::new(0.0, 1.0)
                }
            }
            Letter::Z => Complex64::new(if bc == 0 { 1.0 } else { -1.0 }, 0.0),
        };
    }
    v
}

/// Sparse real expansion over product operators.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct POState {
    pub n_spins: usize,
    pub terms: BTreeMap<POTerm, f64>,
}

impl POState {
    pub fn zero(n_spins: usize) -> Self {
        POState {
            n_spins,
            terms: BTreeMap::new(),
        }
    }

    pub fn from_terms(n_spins: usize, items: impl IntoIterator<Item = (POTerm, f64)>) -> Self {
        let mut s = POState::zero(n_spins);
        for (t, c) in items {
            s.add_term(t, c);
        }
        s.prune();
        s
    }

    /// `Σ I_z` over all ¹H spins.
    pub fn equilibrium(system: &SpinSystem) -> Self {
        let n = system.len();
        POState::from_terms(
            n,
            system
                .spins_of(Isotope::H1)
                .into_iter()
                .map(|k| (POTerm::with(n, &[(k, Letter::Z)]), 1.0)),
        )
    }

    pub fn coefficient(&self, term: &POTerm) -> f64 {
        self.terms.get(term).copied().unwrap_or(0.0)
    }

    fn add_term(&mut self, term: POTerm, c: f64) {
        *self.terms.entry(term).or_insert(0.0) += c;
    }

    fn prune(&mut self) {
        self.terms.retain(|_, c| c.abs() > PRUNE_TOL);
    }

    pub fn scaled(&self, k: f64) -> Self {
        POState::from_terms(
            self.n_spins,
            self.terms.iter().map(|(t, c)| (t.clone(), c * k)),
        )
    }

    pub fn add(&self, other: &POState) -> Self {
        POState::from_terms(
            self.n_spins,
            self.terms
                .iter()
                .chain(other.terms.iter())
                .map(|(t, c)| (t.clone(), *c)),
        )
    }

    /// Largest coefficient difference over the union of both supports.
    pub fn max_diff(&self, other: &POState) -> f64 {
        self.terms
            .keys()
            .chain(other.terms.keys())
            .map(|t| (self.coefficient(t) - other.coefficient(t)).abs())
            .fold(0.0, f64::max)
    }

    /// Euclidean norm of the coefficients over terms accepted by `keep`.
    pub fn norm_where(&self, keep: impl Fn(&POTerm) -> bool) -> f64 {
        self.terms
            .iter()
            .filter(|(t, _)| keep(t))
            .map(|(_, c)| c * c)
            .sum::<f64>()
            .sqrt()
    }

    /// Plain-text rows `term  coefficient`.
    pub fn render(&self, system: &SpinSystem) -> Vec<(String, f64)> {
        self.terms
            .iter()
            .map(|(t, c)| (t.render(system), *c))
            .collect()
    }
}

fn check_dim(system: &SpinSystem, state: &POState) -> Result<(), PoError> {
    if state.n_spins != system.len() {
        return Err(PoError::TermLength {
            got: state.n_spins,
            expected: system.len(),
        });
    }
    Ok(())
}

/// Expands a density matrix on the product-operator basis.
pub fn po_from_density(system: &SpinSystem, state: &DensityState) -> Result<POState, PoError> {
    let n = system.len();
    let dim = 1usize << n;
    if state.dim() != dim {
        return Err(PoError::Dimension {
            got: state.dim(),
            expected: dim,
        });
    }
    let mut out = POState::zero(n);
    let total = 1usize << (2 * n);
    for code in 0..total {
        let letters: Vec<Letter> = (0..n)
            .map(|k| match (code >> (2 * (n - 1 - k))) & 3 {
                0 => Letter::E,
                1 => Letter::X,
                2 => Letter::Y,
                _ => Letter::Z,
            })
            .collect();
        let term = POTerm(letters);
        let (flip, _) = pauli_masks(&term.0);
        let scale = if term.order() == 0 { 1.0 } else { 0.5 };
        // Tr(ρT) = Σ_r ρ[r, c] T[c, r] with c = r ^ flip
        let mut tr = Complex64::new(0.0, 0.0);
        for r in 0..dim {
            let c = r ^ flip;
            tr += state.matrix[(r, c)] * pauli_element(&term.0, c, r) * scale;
        }
        let coeff = tr.re / term.norm_sq();
        if coeff.abs() > PRUNE_TOL {
            out.terms.insert(term, coeff);
        }
    }
    Ok(out)
}

/// Rebuilds the density matrix `Σ c_T T`.
pub fn po_to_density(state: &POState) -> DensityState {
    let dim = 1usize << state.n_spins;
    let mut m = CMatrix::zeros(dim, dim);
    for (t, c) in &state.terms {
        m += t.matrix() * Complex64::new(*c, 0.0);
    }
    DensityState::from_matrix(m)
}

/// Rotation matrix `R` with `exp(-iθ I_n) I_a exp(iθ I_n) = Σ_b R[b][a] I_b`.
fn rotation(theta: f64, n: [f64; 3]) -> [[f64; 3]; 3] {
    let (s, c) = theta.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = n;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

/// Applies a per-spin rotation to every term; `rot[k]` is `None` for
/// untouched spins.
fn rotate_terms(state: &POState, rot: &[Option<[[f64; 3]; 3]>]) -> POState {
    let mut out = POState::zero(state.n_spins);
    for (term, coeff) in &state.terms {
        let mut partial: Vec<(Vec<Letter>, f64)> = vec![(term.0.clone(), *coeff)];
        for (k, r) in rot.iter().enumerate() {
            let (Some(r), Some(a)) = (r, term.0[k].axis()) else {
                continue;
            };
            let mut next = Vec::with_capacity(partial.len() * 3);
            for (letters, c) in &partial {
                for b in 0..3 {
                    let w = r[b][a];
                    if w.abs() > PRUNE_TOL {
                        let mut l = letters.clone();
                        l[k] = Letter::from_axis(b);
                        next.push((l, c * w));
                    }
                }
            }
            partial = next;
        }
        for (l, c) in partial {
            out.add_term(POTerm(l), c);
        }
    }
    out.prune();
    out
}

/// Ideal pulse on all spins of `isotope`.
pub fn po_pulse(
    system: &SpinSystem,
    state: &POState,
    isotope: Isotope,
    flip_deg: f64,
    phase_deg: f64,
) -> Result<POState, PoError> {
    check_dim(system, state)?;
    if !system.has_isotope(isotope) {
        return Err(PoError::MissingIsotope(isotope.label()));
    }
    if !flip_deg.is_finite() || !phase_deg.is_finite() {
        return Err(PoError::NonFinitePulse);
    }
    let phi = phase_deg.to_radians();
    let r = rotation(flip_deg.to_radians(), [phi.cos(), phi.sin(), 0.0]);
    let rot: Vec<_> = system
        .spins
        .iter()
        .map(|s| (s.isotope == isotope).then_some(r))
        .collect();
    Ok(rotate_terms(state, &rot))
}

/// Applies the weak-coupling rule for one pair to every term.
fn couple(state: &POState, i: usize, j: usize, angle: f64) -> POState {
    let (s, c) = angle.sin_cos();
    let mut out = POState::zero(state.n_spins);
    for (term, coeff) in &state.terms {
        let ti = term.0[i].is_transverse();
        let tj = term.0[j].is_transverse();
        if ti == tj {
            out.add_term(term.clone(), *coeff);
            continue;
        }
        let (act, partner) = if ti { (i, j) } else { (j, i) };
        out.add_term(term.clone(), coeff * c);
        let mut other = term.clone();
        // x·E → y·z, y·E → −x·z, x·z → y·E, y·z → −x·E
        let sign = if term.0[act] == Letter::X { 1.0 } else { -1.0 };
        other.0[act] = if term.0[act] == Letter::X {
            Letter::Y
        } else {
            Letter::X
        };
        other.0[partner] = if term.0[partner] == Letter::E {
            Letter::Z
        } else {
            Letter::E
        };
        out.add_term(other, coeff * s * sign);
    }
    out.prune();
    out
}

/// Free evolution under offsets and weak couplings.
pub fn po_evolve(
    system: &SpinSystem,
    state: &POState,
    duration_s: f64,
) -> Result<POState, PoError> {
    check_dim(system, state)?;
    if duration_s < 0.0 {
        return Err(PoError::NegativeTime(duration_s));
    }
    for c in &system.couplings {
        if c.model == CouplingModel::Isotropic {
            return Err(PoError::UnsupportedModel {
                a: c.a.clone(),
                b: c.b.clone(),
            });
        }
    }
    if duration_s == 0.0 {
        return Ok(state.clone());
    }
    let rot: Vec<_> = system
        .spins
        .iter()
        .map(|s| {
            let w = 2.0 * std::f64::consts::PI * s.offset_hz * duration_s;
            (s.offset_hz != 0.0).then(|| rotation(w, [0.0, 0.0, 1.0]))
        })
        .collect();
    let mut out = rotate_terms(state, &rot);
    for (i, j, j_hz, _) in system.indexed_couplings() {
        if j_hz != 0.0 {
            out = couple(&out, i, j, std::f64::consts::PI * j_hz * duration_s);
        }
    }
    Ok(out)
}

/// Expands each transverse letter into raising/lowering parts and keeps
/// the combinations whose per-isotope orders are selected.
pub fn po_filter(
    system: &SpinSystem,
    state: &POState,
    allowed: &CoherenceSelection,
) -> Result<POState, PoError> {
    check_dim(system, state)?;
    let n = system.len();
    let mut out = POState::zero(n);
    for (term, coeff) in &state.terms {
        let transverse: Vec<usize> = (0..n).filter(|&k| term.0[k].is_transverse()).collect();
        // x = (p+m)/2, y = (p-m)/(2i); pick p (+1) or m (-1) per transverse spin
        let m = transverse.len();
        // accumulated weight per selected sign pattern, expressed back on x/y
        let mut kept: BTreeMap<Vec<Letter>, Complex64> = BTreeMap::new();
        for pattern in 0..(1usize << m) {
            let mut orders: BTreeMap<Isotope, i32> = Isotope::ALL.iter().map(|&i| (i, 0)).collect();
            let mut w = Complex64::new(1.0, 0.0);
            for (bit_i, &k) in transverse.iter().enumerate() {
                let plus = (pattern >> bit_i) & 1 == 0;
                *orders.get_mut(&system.spins[k].isotope).unwrap() += if plus { 1 } else { -1 };
                w *= match (term.0[k], plus) {
                    (Letter::X, _) => Complex64::new(0.5, 0.0),
                    (Letter::Y, true) => Complex64::new(0.0, -0.5),
                    (Letter::Y, false) => Complex64::new(0.0, 0.5),
                    _ => unreachable!(),
                };
            }
            if !allowed.allows(&orders) {
                continue;
            }
            // each I± = x ± i y; expand the product back onto x/y letters
            for back in 0..(1usize << m) {
                let mut letters = term.0.clone();
                let mut v = w;
                for (bit_i, &k) in transverse.iter().enumerate() {
                    let plus = (pattern >> bit_i) & 1 == 0;
                    if (back >> bit_i) & 1 == 0 {
                        letters[k] = Letter::X;
                    } else {
                        letters[k] = Letter::Y;
                        v *= if plus {
                            Complex64::new(0.0, 1.0)
                        } else {
                            Complex64::new(0.0, -1.0)
                        };
                    }
                }
                *kept.entry(letters).or_insert(Complex64::new(0.0, 0.0)) += v;
            }
        }
        for (letters, v) in kept {
            out.add_term(POTerm(letters), coeff * v.re);
        }
    }
    out.prune();
    Ok(out)
}

/// Where a trace starts.
#[derive(Debug, Clone)]
pub enum TraceStart {
    Equilibrium,
    /// Replace the state right after the given mark.
    AtMark(String, POState),
}

/// Product-operator states right after each requested mark, for the cosine
/// component of cycle step 0 at the given t1.
pub fn po_trace(
    seq: &PulseSequence,
    system: &SpinSystem,
    t1_s: f64,
    marks: &[&str],
) -> Result<BTreeMap<String, POState>, PoError> {
    po_trace_from(seq, system, t1_s, marks, &TraceStart::Equilibrium)
}

pub fn po_trace_from(
    seq: &PulseSequence,
    system: &SpinSystem,
    t1_s: f64,
    marks: &[&str],
    start: &TraceStart,
) -> Result<BTreeMap<String, POState>, PoError> {
    let known = seq.marks();
    for m in marks {
        if !known.contains(m) {
            return Err(PoError::UnknownMark(m.to_string()));
        }
    }
    if let TraceStart::AtMark(label, _) = start {
        if !known.contains(&label.as_str()) {
            return Err(PoError::UnknownMark(label.clone()));
        }
    }
    let resolved = sequence::resolve(seq, &ResolvePoint::new(t1_s, 0, QuadComponent::Cos))?;
    let mut started = matches!(start, TraceStart::Equilibrium);
    let mut state = POState::equilibrium(system);
    let mut out = BTreeMap::new();
    for event in &resolved.events {
        match event {
            ResolvedEvent::Mark(label) => {
                if let TraceStart::AtMark(from, injected) = start {
                    if !started && from == label {
                        started = true;
                        state = injected.clone();
                    }
                }
                if started && marks.contains(&label.as_str()) {
                    out.insert(label.clone(), state.clone());
                }
            }
            _ if !started => {}
            ResolvedEvent::Pulse {
                isotope,
                flip_deg,
                phase_deg,
            } => {
                if system.has_isotope(*isotope) {
                    state = po_pulse(system, &state, *isotope, *flip_deg, *phase_deg)?;
                }
            }
            ResolvedEvent::Delay(t) => state = po_evolve(system, &state, *t)?,
            ResolvedEvent::Filter(f) => state = po_filter(system, &state, f)?,
            ResolvedEvent::Acquire { .. } => break,
        }
    }
    Ok(out)
}

/// Plain-text table, one row per (mark, term, coefficient).
pub const RENDER_TOL: f64 = 1e-12;

/// Table of the traced states; coefficients below `RENDER_TOL` are left out.
pub fn render_trace(
    system: &SpinSystem,
    trace: &BTreeMap<String, POState>,
    order: &[&str],
) -> String {
    let mut s = format!("{:<6} {:<28} {:>20}\n", "mark", "term", "coefficient");
    for m in order {
        if let Some(state) = trace.get(*m) {
            for (term, c) in state
                .render(system)
                .into_iter()
                .filter(|(_, c)| c.abs() >= RENDER_TOL)
            {
                s.push_str(&format!("{m:<6} {term:<28} {c:>20.12e}\n"));
            }
        }
    }
    s
}

/// Linear least squares `min |A x - y|`; returns the solution and the
/// residual norm.
pub fn least_squares(a: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, f64) {
    let svd = a.clone().svd(true, true);
    let x = svd
        .solve(y, 1e-12)
        .expect("SVD was computed with both singular vector sets");
    let resid = (a * &x - y).norm();
    (x, resid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{apply_pulse, coherence_filter, evolve, hamiltonian, HamiltonianSpec};
    use crate::spin_system::builtin_system;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn single(offset: f64) -> SpinSystem {
        crate::spin_system::load_system(&format!(
            r#"{{"name":"one","spins":[{{"id":"H","isotope":"1H","offset_hz":{offset}}}],"couplings":[]}}"#
        ))
        .unwrap()
    }

    fn ax_on_resonance() -> SpinSystem {
        let mut s = builtin_system("ax").unwrap();
        for sp in &mut s.spins {
            sp.offset_hz = 0.0;
        }
        s
    }

    fn term(system: &SpinSystem, spec: &[(&str, char)]) -> POTerm {
        POTerm::from_ids(system, spec).unwrap()
    }

    #[test]
    fn iz_from_density() {
        let s = single(0.0);
        let rho = DensityState::from_matrix(POTerm(vec![Letter::Z]).matrix());
        let po = po_from_density(&s, &rho).unwrap();
        assert_eq!(po.terms.len(), 1);
        assert!((po.coefficient(&POTerm(vec![Letter::Z])) - 1.0).abs() < 1e-15);
        // Iz matrix equals diag(½, −½)
        let m = POTerm(vec![Letter::Z]).matrix();
        assert_eq!(m[(0, 0)].re, 0.5);
        assert_eq!(m[(1, 1)].re, -0.5);
    }

    #[test]
    fn product_term_from_embedded_operators() {
        let s = builtin_system("ch2").unwrap();
        let ix = crate::hilbert::embed_operator(&s, "H1", crate::hilbert::Axis::X).unwrap();
        let sy = crate::hilbert::embed_operator(&s, "C1", crate::hilbert::Axis::Y).unwrap();
        let rho = DensityState::from_matrix(ix * sy * Complex64::new(2.0, 0.0));
        let po = po_from_density(&s, &rho).unwrap();
        assert_eq!(po.terms.len(), 1);
        assert!((po.coefficient(&term(&s, &[("H1", 'x'), ("C1", 'y')])) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn pulse_rules() {
        let s = single(0.0);
        let z = POState::from_terms(1, [(POTerm(vec![Letter::Z]), 1.0)]);
        let out = po_pulse(&s, &z, Isotope::H1, 90.0, 0.0).unwrap();
        assert!((out.coefficient(&POTerm(vec![Letter::Y])) + 1.0).abs() < 1e-15);
        assert_eq!(out.terms.len(), 1);
        for (l, sign) in [(Letter::X, 1.0), (Letter::Y, -1.0), (Letter::Z, -1.0)] {
            let st = POState::from_terms(1, [(POTerm(vec![l]), 1.0)]);
            let out = po_pulse(&s, &st, Isotope::H1, 180.0, 0.0).unwrap();
            assert!((out.coefficient(&POTerm(vec![l])) - sign).abs() < 1e-15);
            assert_eq!(out.terms.len(), 1);
        }
        assert!(matches!(
            po_pulse(&s, &z, Isotope::C13, 90.0, 0.0),
            Err(PoError::MissingIsotope("13C"))
        ));
    }

    #[test]
    fn a_to_b_exchange_under_proton_90x() {
        let s = builtin_system("ch2").unwrap();
        let (c, sn) = (0.3_f64.cos(), 0.3_f64.sin());
        let a = POState::from_terms(
            3,
            [
                (term(&s, &[("H1", 'x')]), c),
                (term(&s, &[("H1", 'y'), ("H2", 'z')]), sn),
                (term(&s, &[("H2", 'x')]), c),
                (term(&s, &[("H2", 'y'), ("H1", 'z')]), sn),
            ],
        );
        let b = POState::from_terms(
            3,
            [
                (term(&s, &[("H1", 'x')]), c),
                (term(&s, &[("H1", 'y'), ("H2", 'z')]), -sn),
                (term(&s, &[("H2", 'x')]), c),
                (term(&s, &[("H2", 'y'), ("H1", 'z')]), -sn),
            ],
        );
        let out = po_pulse(&s, &a, Isotope::H1, 90.0, 0.0).unwrap();
        assert!(out.max_diff(&b) < 1e-15);
    }

    #[test]
    fn free_precession() {
        let nu = 37.0;
        let t = 0.0123;
        let s = single(nu);
        let x = POState::from_terms(1, [(POTerm(vec![Letter::X]), 1.0)]);
        let out = po_evolve(&s, &x, t).unwrap();
        let w = 2.0 * PI * nu * t;
        assert!((out.coefficient(&POTerm(vec![Letter::X])) - w.cos()).abs() < 1e-15);
        assert!((out.coefficient(&POTerm(vec![Letter::Y])) - w.sin()).abs() < 1e-15);
    }

    #[test]
    fn ax_weak_coupling_matches_matrix_engine() {
        let s = ax_on_resonance();
        let t = 0.0371;
        let start = POState::from_terms(2, [(POTerm::with(2, &[(0, Letter::X)]), 1.0)]);
        let out = po_evolve(&s, &start, t).unwrap();
        let j = 10.0;
        assert!(
            (out.coefficient(&POTerm::with(2, &[(0, Letter::X)])) - (PI * j * t).cos()).abs()
                < 1e-14
        );
        assert!(
            (out.coefficient(&POTerm::with(2, &[(0, Letter::Y), (1, Letter::Z)]))
                - (PI * j * t).sin())
            .abs()
                < 1e-14
        );
        let h = hamiltonian(&s, &HamiltonianSpec::full()).unwrap();
        let rho = evolve(&po_to_density(&start), &h, t).unwrap();
        assert!(po_from_density(&s, &rho).unwrap().max_diff(&out) < 1e-12);
    }

    #[test]
    fn heteronuclear_mq_not_modulated_by_active_coupling() {
        let s = builtin_system("ch2").unwrap();
        let mq = POState::from_terms(3, [(term(&s, &[("H1", 'x'), ("C1", 'y')]), 1.0)]);
        let mut quiet = s.clone();
        for sp in &mut quiet.spins {
            sp.offset_hz = 0.0;
        }
        quiet.couplings.retain(|c| c.a == "H1" && c.b == "C1");
        let out = po_evolve(&quiet, &mq, 0.0042).unwrap();
        assert!(out.max_diff(&mq) < 1e-15);
    }

    #[test]
    fn isotropic_rejected() {
        let mut s = builtin_system("ax").unwrap();
        s.couplings[0].model = CouplingModel::Isotropic;
        let st = POState::equilibrium(&s);
        assert!(matches!(
            po_evolve(&s, &st, 0.01),
            Err(PoError::UnsupportedModel { .. })
        ));
    }

    #[test]
    fn filter_matches_matrix_filter() {
        let s = builtin_system("ch2").unwrap();
        let sel = CoherenceSelection::product(&[(Isotope::H1, &[1]), (Isotope::C13, &[1])]);
        let st = POState::from_terms(
            3,
            [
                (term(&s, &[("H1", 'x'), ("C1", 'y')]), 1.0),
                (term(&s, &[("H2", 'y'), ("C1", 'x'), ("H1", 'z')]), -0.4),
                (term(&s, &[("H1", 'x'), ("H2", 'y')]), 0.7),
                (term(&s, &[("H2", 'z')]), 0.2),
            ],
        );
        let po = po_filter(&s, &st, &sel).unwrap();
        let mat = coherence_filter(&s, &po_to_density(&st), &sel);
        assert!(po_from_density(&s, &mat).unwrap().max_diff(&po) < 1e-14);
        // 2IxSy keeps only its double-quantum half: ½(2IxSy + 2IySx)
        assert!((po.coefficient(&term(&s, &[("H1", 'x'), ("C1", 'y')])) - 0.5).abs() < 1e-15);
        assert!((po.coefficient(&term(&s, &[("H1", 'y'), ("C1", 'x')])) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn render_terms() {
        let s = builtin_system("ch2").unwrap();
        assert_eq!(
            term(&s, &[("C1", 'y'), ("H1", 'x')]).render(&s),
            "2 H1x C1y"
        );
        assert_eq!(term(&s, &[("H2", 'z')]).render(&s), "H2z");
        assert_eq!(
            term(&s, &[("H1", 'z'), ("H2", 'z'), ("C1", 'x')]).render(&s),
            "4 H1z H2z C1x"
        );
        assert_eq!(POTerm::identity(3).render(&s), "E");
    }

    #[test]
    fn least_squares_recovers_coefficients() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]);
        let y = &a * DVector::from_vec(vec![0.25, -3.0]);
        let (x, r) = least_squares(&a, &y);
        assert!((x[0] - 0.25).abs() < 1e-12 && (x[1] + 3.0).abs() < 1e-12);
        assert!(r < 1e-12);
    }

    fn random_hermitian(n: usize, vals: &[f64]) -> DensityState {
        let dim = 1 << n;
        let mut m = CMatrix::zeros(dim, dim);
        let mut it = vals.iter().cycle();
        for r in 0..dim {
            m[(r, r)] = Complex64::new(*it.next().unwrap(), 0.0);
            for c in r + 1..dim {
                let z = Complex64::new(*it.next().unwrap(), *it.next().unwrap());
                m[(r, c)] = z;
                m[(c, r)] = z.conj();
            }
        }
        DensityState::from_matrix(m)
    }

    proptest! {
        #[test]
        fn density_round_trip(n in 1usize..=3, vals in prop::collection::vec(-1.0f64..1.0, 64..=64)) {
            let s = match n {
                1 => single(0.0),
                2 => builtin_system("ax").unwrap(),
                _ => builtin_system("ch2").unwrap(),
            };
            let rho = random_hermitian(n, &vals);
            let po = po_from_density(&s, &rho).unwrap();
            prop_assert!(po_to_density(&po).max_diff(&rho) < 1e-12);
        }

        #[test]
        fn pulse_matches_matrix_engine(
            flip in -400.0f64..400.0,
            phase in -360.0f64..360.0,
            vals in prop::collection::vec(-1.0f64..1.0, 64..=64),
            carbon in any::<bool>(),
        ) {
            let s = builtin_system("ch2").unwrap();
            let iso = if carbon { Isotope::C13 } else { Isotope::H1 };
            let rho = random_hermitian(3, &vals);
            let po = po_from_density(&s, &rho).unwrap();
            let out = po_pulse(&s, &po, iso, flip, phase).unwrap();
            let mat = apply_pulse(&s, &rho, iso, flip, phase).unwrap();
            prop_assert!(po_from_density(&s, &mat).unwrap().max_diff(&out) < 1e-12);
        }
    }
}
