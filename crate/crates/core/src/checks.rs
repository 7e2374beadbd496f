//! Closed-form product-operator expressions for a ¹H₂–¹³C fragment and the
//! numerical checks that compare them with traced sequences.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::po::{
    least_squares, po_trace, po_trace_from, Letter, POState, POTerm, PoError, TraceStart,
};
use crate::sequence::PulseSequence;
use crate::spin_system::{Isotope, SpinSystem};

#[derive(Debug, Error)]
pub enum CheckError {
    #[error("closed-form checks need exactly two 1H spins and one 13C spin (got {protons} and {carbons})")]
    Topology { protons: usize, carbons: usize },
    #[error("sequence '{0}' lacks mark '{1}'")]
    MissingMark(String, String),
    #[error(transparent)]
    Po(#[from] PoError),
}

/// Spin indices of a ¹H₂–¹³C fragment.
#[derive(Debug, Clone, Copy)]
pub struct Fragment {
    pub h1: usize,
    pub h2: usize,
    pub c: usize,
    pub n: usize,
    pub j_hh: f64,
    pub nu_c: f64,
}

impl Fragment {
    pub fn of(system: &SpinSystem) -> Result<Self, CheckError> {
        let h = system.spins_of(Isotope::H1);
        let c = system.spins_of(Isotope::C13);
        if h.len() != 2 || c.len() != 1 {
            return Err(CheckError::Topology {
                protons: h.len(),
                carbons: c.len(),
            });
        }
        Ok(Fragment {
            h1: h[0],
            h2: h[1],
            c: c[0],
            n: system.len(),
            j_hh: system.j_between(h[0], h[1]),
            nu_c: system.spins[c[0]].offset_hz,
        })
    }

    fn term(&self, letters: &[(usize, Letter)]) -> POTerm {
        POTerm::with(self.n, letters)
    }

    /// `Σ_k 2 I_kx S_y` with unit coefficients.
    pub fn mq_start(&self) -> POState {
        POState::from_terms(
            self.n,
            [self.h1, self.h2].map(|k| (self.term(&[(k, Letter::X), (self.c, Letter::Y)]), 1.0)),
        )
    }

    /// Proton part `I1x c + 2I1yI2z s + I2x c + 2I2yI1z s`; `sign = -1`
    /// flips the antiphase terms.
    fn proton_part(&self, t1: f64, sign: f64) -> Vec<(Vec<(usize, Letter)>, f64)> {
        let (s, c) = (PI * self.j_hh * t1 / 2.0).sin_cos();
        vec![
            (vec![(self.h1, Letter::X)], c),
            (vec![(self.h1, Letter::Y), (self.h2, Letter::Z)], sign * s),
            (vec![(self.h2, Letter::X)], c),
            (vec![(self.h2, Letter::Y), (self.h1, Letter::Z)], sign * s),
        ]
    }

    fn with_carbon(&self, t1: f64, sign: f64) -> POState {
        let (s, c) = (2.0 * PI * self.nu_c * t1 / 2.0).sin_cos();
        let mut items = Vec::new();
        for (carbon, w) in [(Letter::Y, c), (Letter::X, -s)] {
            for (mut letters, k) in self.proton_part(t1, sign) {
                letters.push((self.c, carbon));
                items.push((self.term(&letters), w * k));
            }
        }
        POState::from_terms(self.n, items)
    }

    /// `2S_y cos(Ω_S t1/2)[A] − 2S_x sin(Ω_S t1/2)[A]`.
    pub fn expected_b(&self, t1: f64) -> POState {
        self.with_carbon(t1, 1.0)
    }

    /// Same as [`Self::expected_b`] with `[B]`, the antiphase-flipped `[A]`.
    pub fn expected_c(&self, t1: f64) -> POState {
        self.with_carbon(t1, -1.0)
    }

    /// `(2I1xSy + 2I2xSy) cos(Ω_S t1) − (2I1xSx + 2I2xSx) sin(Ω_S t1)`.
    pub fn expected_d(&self, t1: f64) -> POState {
        let (s, c) = (2.0 * PI * self.nu_c * t1).sin_cos();
        let mut items = Vec::new();
        for k in [self.h1, self.h2] {
            items.push((self.term(&[(k, Letter::X), (self.c, Letter::Y)]), c));
            items.push((self.term(&[(k, Letter::X), (self.c, Letter::X)]), -s));
        }
        POState::from_terms(self.n, items)
    }

    /// `cos(Ω_S t1)·cos(πJ_HH t1)`, the conventional-HMQC `2I1xSy` coefficient.
    pub fn hmqc_doublet_coefficient(&self, t1: f64) -> f64 {
        (2.0 * PI * self.nu_c * t1).cos() * (PI * self.j_hh * t1).cos()
    }

    pub fn term_i1x_sy(&self) -> POTerm {
        self.term(&[(self.h1, Letter::X), (self.c, Letter::Y)])
    }
}

/// Heteronuclear multiple-quantum amplitude carried by proton `k`: the norm
/// of all terms with spin `k` and every ¹³C transverse and all other ¹H
/// longitudinal or identity.
pub fn proton_mq_amplitude(system: &SpinSystem, state: &POState, k: usize) -> f64 {
    state.norm_where(|t| {
        t.0.iter().enumerate().all(|(i, l)| {
            if i == k || system.spins[i].isotope == Isotope::C13 {
                l.is_transverse()
            } else {
                !l.is_transverse()
            }
        })
    })
}

/// Result of fitting every term at a mark against
/// `{cos Ωt, sin Ωt} ⊗ {1, cos πJt, sin πJt}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModulationFit {
    /// Largest fitted weight on a J-modulated basis function.
    pub max_j_weight: f64,
    /// Largest fit residual norm.
    pub max_residual: f64,
    pub terms: usize,
}

pub fn fit_j_modulation(
    seq: &PulseSequence,
    system: &SpinSystem,
    mark: &str,
    t1s: &[f64],
    nu: f64,
    j: f64,
) -> Result<ModulationFit, CheckError> {
    if !seq.marks().contains(&mark) {
        return Err(CheckError::MissingMark(seq.name.clone(), mark.into()));
    }
    let states = t1s
        .iter()
        .map(|&t| po_trace(seq, system, t, &[mark]).map(|mut m| m.remove(mark).unwrap()))
        .collect::<Result<Vec<_>, _>>()?;
    let terms: BTreeSet<POTerm> = states
        .iter()
        .flat_map(|s| s.terms.keys().cloned())
        .collect();
    let mut a = DMatrix::zeros(t1s.len(), 6);
    for (r, &t) in t1s.iter().enumerate() {
        let (so, co) = (2.0 * PI * nu * t).sin_cos();
        let (sj, cj) = (PI * j * t).sin_cos();
        let row = [co, so, co * cj, so * cj, co * sj, so * sj];
        for (c, v) in row.iter().enumerate() {
            a[(r, c)] = *v;
        }
    }
    let mut fit = ModulationFit {
        max_j_weight: 0.0,
        max_residual: 0.0,
        terms: terms.len(),
    };
    for term in &terms {
        let y = DVector::from_iterator(t1s.len(), states.iter().map(|s| s.coefficient(term)));
        let (x, resid) = least_squares(&a, &y);
        let jw = x.iter().skip(2).fold(0.0f64, |m, v| m.max(v.abs()));
        fit.max_j_weight = fit.max_j_weight.max(jw);
        fit.max_residual = fit.max_residual.max(resid);
    }
    Ok(fit)
}

/// Eight t1 values spread over a few J periods.
pub fn sample_t1s() -> Vec<f64> {
    (0..8).map(|j| 0.0123 + 0.0371 * j as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
}

impl CheckLine {
    pub fn pass(&self) -> bool {
        self.value.is_finite() && self.value <= self.tolerance
    }
}

fn line(name: impl Into<String>, value: f64, tolerance: f64) -> CheckLine {
    CheckLine {
        name: name.into(),
        value,
        tolerance,
    }
}

/// Compares traced states with the closed forms at marks a–d of a
/// perfect-echo sequence and at mark d of a conventional one.
pub fn closed_form_checks(
    system: &SpinSystem,
    pe: &PulseSequence,
    hmqc: &PulseSequence,
    t1s: &[f64],
    tolerance: f64,
) -> Result<Vec<CheckLine>, CheckError> {
    let f = Fragment::of(system)?;
    for m in ["a", "b", "c", "d"] {
        if !pe.marks().contains(&m) {
            return Err(CheckError::MissingMark(pe.name.clone(), m.into()));
        }
    }
    let delta = pe.delta();
    let mut out = Vec::new();

    let at_a = po_trace(pe, system, t1s[0], &["a"])?.remove("a").unwrap();
    let mut err_a: f64 = 0.0;
    for k in [f.h1, f.h2] {
        let j = system.j_between(k, f.c);
        let expected = (PI * j * delta).sin().abs();
        err_a = err_a.max((proton_mq_amplitude(system, &at_a, k) - expected).abs());
    }
    out.push(line(
        "point a: per-proton MQ amplitude = |sin(pi J_CH delta)|",
        err_a,
        tolerance,
    ));

    let start = TraceStart::AtMark("a".into(), f.mq_start());
    let (mut eb, mut ec, mut ed) = (0.0f64, 0.0f64, 0.0f64);
    let (mut exch, mut eh) = (0.0f64, 0.0f64);
    for &t in t1s {
        let tr = po_trace_from(pe, system, t, &["b", "c", "d"], &start)?;
        eb = eb.max(tr["b"].max_diff(&f.expected_b(t)));
        ec = ec.max(tr["c"].max_diff(&f.expected_c(t)));
        ed = ed.max(tr["d"].max_diff(&f.expected_d(t)));
        let flipped = crate::po::po_pulse(system, &tr["b"], Isotope::H1, 90.0, 0.0)?;
        exch = exch.max(flipped.max_diff(&f.expected_c(t)));
        let hd = po_trace_from(hmqc, system, t, &["d"], &start)?
            .remove("d")
            .unwrap();
        eh = eh.max((hd.coefficient(&f.term_i1x_sy()) - f.hmqc_doublet_coefficient(t)).abs());
    }
    out.push(line("point b: closed form", eb, tolerance));
    out.push(line("point c: closed form", ec, tolerance));
    out.push(line(
        "antiphase exchange A -> B under 1H 90x",
        exch,
        tolerance,
    ));
    out.push(line("point d: closed form", ed, tolerance));
    out.push(line(
        "conventional d: 2I1xSy = cos(Wt1)cos(pi J t1)",
        eh,
        tolerance,
    ));

    let fit = fit_j_modulation(pe, system, "d", &sample_t1s(), f.nu_c, f.j_hh)?;
    out.push(line("point d: J-modulated weight", fit.max_j_weight, 1e-9));
    out.push(line("point d: fit residual", fit.max_residual, 1e-9));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::po::po_evolve;
    use crate::sequence::{
        build_hmqc, build_pe_hmqc, build_pe_hmqc_with, HmqcOptions, DEFAULT_DELTA_S,
    };
    use crate::spin_system::builtin_system;

    #[test]
    fn ch2_closed_forms_hold() {
        let s = builtin_system("ch2").unwrap();
        let pe = build_pe_hmqc(1.0 / 280.0, 1).unwrap();
        let h = build_hmqc(1.0 / 280.0, true).unwrap();
        let t1s = [0.0, 0.0071, 0.0213, 0.0555, 0.1234];
        for l in closed_form_checks(&s, &pe, &h, &t1s, 1e-12).unwrap() {
            assert!(l.pass(), "{} = {:e}", l.name, l.value);
        }
    }

    #[test]
    fn matched_delay_gives_unit_amplitude() {
        let s = builtin_system("ch2").unwrap();
        let pe = build_pe_hmqc(1.0 / 280.0, 1).unwrap();
        let a = po_trace(&pe, &s, 0.0, &["a"]).unwrap().remove("a").unwrap();
        for k in [0, 1] {
            assert!((proton_mq_amplitude(&s, &a, k) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn literal_inept_also_keeps_amplitude() {
        let s = builtin_system("ch2").unwrap();
        let opts = HmqcOptions {
            refocus_inept: false,
            ..HmqcOptions::default()
        };
        let pe = build_pe_hmqc_with(0.0033, 1, opts).unwrap();
        let a = po_trace(&pe, &s, 0.0, &["a"]).unwrap().remove("a").unwrap();
        let expected = (PI * 140.0 * 0.0033).sin();
        for k in [0, 1] {
            assert!((proton_mq_amplitude(&s, &a, k) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn hmqc_is_j_modulated() {
        let s = builtin_system("ch2").unwrap();
        let h = build_hmqc(DEFAULT_DELTA_S, true).unwrap();
        let fit = fit_j_modulation(&h, &s, "d", &sample_t1s(), 500.0, 13.9).unwrap();
        assert!(fit.max_j_weight > 0.1);
    }

    #[test]
    fn pe_n2_is_j_free() {
        let s = builtin_system("ch2").unwrap();
        let pe = build_pe_hmqc(DEFAULT_DELTA_S, 2).unwrap();
        let fit = fit_j_modulation(&pe, &s, "d", &sample_t1s(), 500.0, 13.9).unwrap();
        assert!(
            fit.max_j_weight < 1e-9 && fit.max_residual < 1e-9,
            "{fit:?}"
        );
    }

    #[test]
    fn topology_checked() {
        let s = builtin_system("ax").unwrap();
        assert!(matches!(
            Fragment::of(&s),
            Err(CheckError::Topology {
                protons: 2,
                carbons: 0
            })
        ));
    }

    #[test]
    fn mq_start_is_stationary_without_offsets_and_hh_coupling() {
        let mut s = builtin_system("ch2").unwrap();
        for sp in &mut s.spins {
            sp.offset_hz = 0.0;
        }
        s.couplings.retain(|c| c.a != "H1" || c.b != "H2");
        let f = Fragment::of(&s).unwrap();
        // only passive H–C couplings act; they refocus after a full period
        let out = po_evolve(&s, &f.mq_start(), 2.0 / 140.0).unwrap();
        assert!(out.max_diff(&f.mq_start()) < 1e-12);
    }
}
