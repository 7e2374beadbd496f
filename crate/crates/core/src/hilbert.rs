//! Dense density-matrix propagation for spin-½ systems.
//!
//! Basis states are Kronecker products in document order: spin 0 is the most
//! significant factor, bit value 0 is |α⟩ (m = +½). Rotations follow
//! `exp(-iθ I_φ)`, so a 90°x pulse takes `I_z` to `-I_y` and free precession
//! under `+ν I_z` takes `I_x` to `I_x cos + I_y sin`.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use thiserror::Error;

use crate::spin_system::{CouplingModel, Isotope, SpinSystem, SystemError};

pub type CMatrix = DMatrix<Complex64>;

const I: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("isotope {0} is not present in the system")]
    MissingIsotope(Isotope),
    #[error("non-finite pulse parameter (flip {flip_deg}, phase {phase_deg})")]
    NonFinitePulse { flip_deg: f64, phase_deg: f64 },
    #[error("negative evolution time {0} s")]
    NegativeTime(f64),
    #[error("dimension mismatch: state {state} vs system {system}")]
    Dimension { state: usize, system: usize },
    #[error("coupling index {0} out of range")]
    CouplingIndex(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
    Plus,
    Minus,
}

fn single_spin(axis: Axis) -> [[Complex64; 2]; 2] {
    let h = Complex64::new(0.5, 0.0);
    let z = Complex64::new(0.0, 0.0);
    let one = Complex64::new(1.0, 0.0);
    match axis {
        Axis::X => [[z, h], [h, z]],
        Axis::Y => [[z, -I * 0.5], [I * 0.5, z]],
        Axis::Z => [[h, z], [z, -h]],
        Axis::Plus => [[z, one], [z, z]],
        Axis::Minus => [[z, z], [one, z]],
    }
}

fn to_matrix(m: &[[Complex64; 2]; 2]) -> CMatrix {
    CMatrix::from_fn(2, 2, |r, c| m[r][c])
}

/// Kronecker product of per-spin 2×2 factors (identity where `None`).
fn kron_chain(factors: &[Option<CMatrix>]) -> CMatrix {
    let eye = CMatrix::identity(2, 2);
    let mut out = CMatrix::identity(1, 1);
    for f in factors {
        out = out.kronecker(f.as_ref().unwrap_or(&eye));
    }
    out
}

/// Bit of spin `k` in basis index `state` (0 = α, 1 = β).
#[inline]
pub fn spin_bit(n_spins: usize, state: usize, k: usize) -> usize {
    (state >> (n_spins - 1 - k)) & 1
}

/// Embeds a single-spin operator on `spin_id` into the full space.
pub fn embed_operator(
    system: &SpinSystem,
    spin_id: &str,
    axis: Axis,
) -> Result<CMatrix, EngineError> {
    let k = system.spin_index(spin_id)?;
    Ok(embed_at(system.len(), k, axis))
}

pub(crate) fn embed_at(n_spins: usize, k: usize, axis: Axis) -> CMatrix {
    let factors: Vec<Option<CMatrix>> = (0..n_spins)
        .map(|i| (i == k).then(|| to_matrix(&single_spin(axis))))
        .collect();
    kron_chain(&factors)
}

/// Selects which couplings enter a Hamiltonian.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HamiltonianSpec {
    /// Indices into `system.couplings`; `None` keeps all of them.
    pub active_couplings: Option<Vec<usize>>,
    /// Heteronuclear couplings touching these isotopes are dropped.
    pub decoupled_isotopes: BTreeSet<Isotope>,
}

impl HamiltonianSpec {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn decoupled(isotopes: impl IntoIterator<Item = Isotope>) -> Self {
        HamiltonianSpec {
            active_couplings: None,
            decoupled_isotopes: isotopes.into_iter().collect(),
        }
    }
}

/// `H` in rad/s: `2π (Σ ν_i I_iz + Σ J_ij K_ij)` with `K = I_zI_z` for weak
/// pairs and `I·I` for isotropic pairs.
pub fn hamiltonian(system: &SpinSystem, spec: &HamiltonianSpec) -> Result<CMatrix, EngineError> {
    let n = system.len();
    let dim = system.dim();
    let mut h = CMatrix::zeros(dim, dim);
    // offsets and weak couplings are diagonal
    for s in 0..dim {
        let mut e = 0.0;
        for (k, spin) in system.spins.iter().enumerate() {
            e += spin.offset_hz * m_value(spin_bit(n, s, k));
        }
        h[(s, s)] += Complex64::new(2.0 * PI * e, 0.0);
    }
    let all = system.indexed_couplings();
    let chosen: Vec<usize> = match &spec.active_couplings {
        Some(list) => {
            if let Some(&bad) = list.iter().find(|&&i| i >= all.len()) {
                return Err(EngineError::CouplingIndex(bad));
            }
            list.clone()
        }
        None => (0..all.len()).collect(),
    };
    for ci in chosen {
        let (a, b, j, model) = all[ci];
        let (ia, ib) = (system.isotope_of(a), system.isotope_of(b));
        if ia != ib
            && (spec.decoupled_isotopes.contains(&ia) || spec.decoupled_isotopes.contains(&ib))
        {
            continue;
        }
        let w = 2.0 * PI * j;
        match model {
            CouplingModel::Weak => {
                for s in 0..dim {
                    let zz = m_value(spin_bit(n, s, a)) * m_value(spin_bit(n, s, b));
                    h[(s, s)] += Complex64::new(w * zz, 0.0);
                }
            }
            CouplingModel::Isotropic => {
                for axis in [Axis::X, Axis::Y, Axis::Z] {
                    let term = embed_at(n, a, axis) * embed_at(n, b, axis);
                    h += term * Complex64::new(w, 0.0);
                }
            }
        }
    }
    Ok(h)
}

#[inline]
fn m_value(bit: usize) -> f64 {
    if bit == 0 {
        0.5
    } else {
        -0.5
    }
}

/// Hermitian density operator (traceless deviation part, unnormalized).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityState {
    pub matrix: CMatrix,
}

impl DensityState {
    pub fn zeros(dim: usize) -> Self {
        DensityState {
            matrix: CMatrix::zeros(dim, dim),
        }
    }

    pub fn from_matrix(matrix: CMatrix) -> Self {
        DensityState { matrix }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> Complex64 {
        self.matrix.trace()
    }

    /// `Tr(ρ²)`.
    pub fn purity(&self) -> f64 {
        self.matrix.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Largest `|ρ - ρ†|` element.
    pub fn hermiticity_error(&self) -> f64 {
        let d = self.dim();
        let mut worst: f64 = 0.0;
        for r in 0..d {
            for c in r..d {
                worst = worst.max((self.matrix[(r, c)] - self.matrix[(c, r)].conj()).norm());
            }
        }
        worst
    }

    /// `Tr(ρ · op)`.
    pub fn expectation(&self, op: &CMatrix) -> Complex64 {
        let d = self.dim();
        let mut acc = Complex64::new(0.0, 0.0);
        for r in 0..d {
            for c in 0..d {
                acc += self.matrix[(r, c)] * op[(c, r)];
            }
        }
        acc
    }

    pub fn add(&self, other: &DensityState) -> DensityState {
        DensityState::from_matrix(&self.matrix + &other.matrix)
    }

    pub fn scaled(&self, k: f64) -> DensityState {
        DensityState::from_matrix(&self.matrix * Complex64::new(k, 0.0))
    }

    /// Conjugation `U ρ U†`.
    pub fn transformed(&self, u: &CMatrix) -> DensityState {
        DensityState::from_matrix(u * &self.matrix * u.adjoint())
    }

    /// Largest element-wise difference.
    pub fn max_diff(&self, other: &DensityState) -> f64 {
        self.matrix
            .iter()
            .zip(other.matrix.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// `ρ₀ = Σ I_iz` over ¹H spins; ¹³C polarization is left out.
pub fn equilibrium_state(system: &SpinSystem) -> DensityState {
    let n = system.len();
    let mut m = CMatrix::zeros(system.dim(), system.dim());
    for k in system.spins_of(Isotope::H1) {
        m += embed_at(n, k, Axis::Z);
    }
    DensityState::from_matrix(m)
}

fn rotation_2x2(flip_rad: f64, phase_rad: f64) -> CMatrix {
    let c = Complex64::new((flip_rad / 2.0).cos(), 0.0);
    let s = (flip_rad / 2.0).sin();
    let e_minus = Complex64::from_polar(1.0, -phase_rad);
    let e_plus = Complex64::from_polar(1.0, phase_rad);
    CMatrix::from_row_slice(2, 2, &[c, -I * s * e_minus, -I * s * e_plus, c])
}

/// Ideal hard pulse `exp(-iθ Σ (I_x cos φ + I_y sin φ))` on every spin of
/// `isotope`.
pub fn pulse_propagator(
    system: &SpinSystem,
    isotope: Isotope,
    flip_deg: f64,
    phase_deg: f64,
) -> Result<CMatrix, EngineError> {
    if !flip_deg.is_finite() || !phase_deg.is_finite() {
        return Err(EngineError::NonFinitePulse {
            flip_deg,
            phase_deg,
        });
    }
    if !system.has_isotope(isotope) {
        return Err(EngineError::MissingIsotope(isotope));
    }
    let r = rotation_2x2(flip_deg.to_radians(), phase_deg.to_radians());
    let factors: Vec<Option<CMatrix>> = system
        .spins
        .iter()
        .map(|s| (s.isotope == isotope).then(|| r.clone()))
        .collect();
    Ok(kron_chain(&factors))
}

/// Applies a pulse; a pulse on an isotope absent from the system is a no-op.
pub fn apply_pulse(
    system: &SpinSystem,
    state: &DensityState,
    isotope: Isotope,
    flip_deg: f64,
    phase_deg: f64,
) -> Result<DensityState, EngineError> {
    if !system.has_isotope(isotope) {
        return Ok(state.clone());
    }
    let u = pulse_propagator(system, isotope, flip_deg, phase_deg)?;
    Ok(state.transformed(&u))
}

/// Eigendecomposition of a Hamiltonian, reused for every evolution time.
#[derive(Debug, Clone)]
pub struct Evolver {
    energies: Vec<f64>,
    /// `None` when `H` is already diagonal in the product basis.
    vectors: Option<CMatrix>,
}

impl Evolver {
    pub fn new(h: &CMatrix) -> Self {
        let d = h.nrows();
        let diagonal =
            (0..d).all(|r| (0..d).all(|c| r == c || h[(r, c)] == Complex64::new(0.0, 0.0)));
        if diagonal {
            Evolver {
                energies: (0..d).map(|i| h[(i, i)].re).collect(),
                vectors: None,
            }
        } else {
            let eig = SymmetricEigen::new(h.clone());
            Evolver {
                energies: eig.eigenvalues.iter().copied().collect(),
                vectors: Some(eig.eigenvectors),
            }
        }
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn eigenvectors(&self) -> Option<&CMatrix> {
        self.vectors.as_ref()
    }

    /// `U(t) = exp(-iHt)`.
    pub fn propagator(&self, t: f64) -> CMatrix {
        let d = self.energies.len();
        let phases = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            d,
            self.energies
                .iter()
                .map(|&e| Complex64::from_polar(1.0, -e * t)),
        ));
        match &self.vectors {
            None => phases,
            Some(v) => v * phases * v.adjoint(),
        }
    }

    /// Moves an operator into the eigenbasis.
    pub fn to_eigenbasis(&self, op: &CMatrix) -> CMatrix {
        match &self.vectors {
            None => op.clone(),
            Some(v) => v.adjoint() * op * v,
        }
    }

    fn from_eigenbasis(&self, op: CMatrix) -> CMatrix {
        match &self.vectors {
            None => op,
            Some(v) => v * op * v.adjoint(),
        }
    }

    pub fn evolve(&self, state: &DensityState, t: f64) -> Result<DensityState, EngineError> {
        if t < 0.0 {
            return Err(EngineError::NegativeTime(t));
        }
        if t == 0.0 {
            return Ok(state.clone());
        }
        let mut m = self.to_eigenbasis(&state.matrix);
        let d = self.energies.len();
        for r in 0..d {
            for c in 0..d {
                let w = self.energies[r] - self.energies[c];
                if w != 0.0 {
                    m[(r, c)] *= Complex64::from_polar(1.0, -w * t);
                }
            }
        }
        Ok(DensityState::from_matrix(self.from_eigenbasis(m)))
    }
}

/// `ρ(t) = U ρ U†` with `U = exp(-iHt)`.
pub fn evolve(
    state: &DensityState,
    h: &CMatrix,
    duration_s: f64,
) -> Result<DensityState, EngineError> {
    Evolver::new(h).evolve(state, duration_s)
}

/// Allowed coherence orders: a union of groups, each group a product of
/// per-isotope order sets. Isotopes a group does not mention are free.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct CoherenceSelection {
    pub groups: Vec<BTreeMap<Isotope, BTreeSet<i32>>>,
}

impl CoherenceSelection {
    pub fn all() -> Self {
        CoherenceSelection {
            groups: vec![BTreeMap::new()],
        }
    }

    pub fn product(spec: &[(Isotope, &[i32])]) -> Self {
        let group = spec
            .iter()
            .map(|(iso, orders)| (*iso, orders.iter().copied().collect()))
            .collect();
        CoherenceSelection {
            groups: vec![group],
        }
    }

    fn allows_exact(&self, orders: &BTreeMap<Isotope, i32>) -> bool {
        self.groups.iter().any(|g| {
            g.iter()
                .all(|(iso, set)| set.contains(orders.get(iso).unwrap_or(&0)))
        })
    }

    /// An order tuple passes if it, or its negation, is allowed. Keeping
    /// both signs leaves the filtered state Hermitian.
    pub fn allows(&self, orders: &BTreeMap<Isotope, i32>) -> bool {
        if self.allows_exact(orders) {
            return true;
        }
        let neg = orders.iter().map(|(k, v)| (*k, -v)).collect();
        self.allows_exact(&neg)
    }
}

/// Per-isotope coherence order of the element `|row⟩⟨col|`.
pub fn element_orders(system: &SpinSystem, row: usize, col: usize) -> BTreeMap<Isotope, i32> {
    let n = system.len();
    let mut out: BTreeMap<Isotope, i32> = Isotope::ALL.iter().map(|&i| (i, 0)).collect();
    for (k, spin) in system.spins.iter().enumerate() {
        let d = spin_bit(n, col, k) as i32 - spin_bit(n, row, k) as i32;
        *out.get_mut(&spin.isotope).unwrap() += d;
    }
    out
}

/// Zeroes every density-matrix element whose coherence orders are not
/// selected (ideal gradient selection).
pub fn coherence_filter(
    system: &SpinSystem,
    state: &DensityState,
    allowed: &CoherenceSelection,
) -> DensityState {
    let d = state.dim();
    let mut m = state.matrix.clone();
    for r in 0..d {
        for c in 0..d {
            if !allowed.allows(&element_orders(system, r, c)) {
                m[(r, c)] = Complex64::new(0.0, 0.0);
            }
        }
    }
    DensityState::from_matrix(m)
}

/// Detection operator `Σ (I_x + i I_y) = Σ I⁺` over the spins of `isotope`.
pub fn detection_operator(system: &SpinSystem, isotope: Isotope) -> CMatrix {
    let n = system.len();
    let mut op = CMatrix::zeros(system.dim(), system.dim());
    for k in system.spins_of(isotope) {
        op += embed_at(n, k, Axis::Plus);
    }
    op
}

/// Quadrature signal `Tr(ρ Σ I⁺)`: `I_x → ½`, `I_y → i/2`.
pub fn detect(
    system: &SpinSystem,
    state: &DensityState,
    isotope: Isotope,
) -> Result<Complex64, EngineError> {
    if !system.has_isotope(isotope) {
        return Err(EngineError::MissingIsotope(isotope));
    }
    Ok(state.expectation(&detection_operator(system, isotope)))
}

/// Largest element of `U U† - 1`.
pub fn unitarity_error(u: &CMatrix) -> f64 {
    let d = u.nrows();
    let p = u * u.adjoint();
    let mut worst: f64 = 0.0;
    for r in 0..d {
        for c in 0..d {
            let target = if r == c { 1.0 } else { 0.0 };
            worst = worst.max((p[(r, c)] - Complex64::new(target, 0.0)).norm());
        }
    }
    worst
}
