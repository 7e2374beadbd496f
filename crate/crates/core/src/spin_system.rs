//! Spin systems: isotopes, rotating-frame offsets and scalar couplings.
//!
//! A system is loaded from a small JSON document or taken from the builtin
//! table. Spin order is the order of the document and every operator index in
//! the engines refers to it.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Largest number of spins a system may hold (dense 2^N matrices).
pub const MAX_SPINS: usize = 8;

/// Default ¹H offsets of the builtin systems, Hz.
pub const DEFAULT_H_OFFSETS: [f64; 2] = [1200.0, 1450.0];
/// Default ¹³C offset of the builtin systems, Hz.
pub const DEFAULT_C_OFFSET: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Isotope {
    #[serde(rename = "1H")]
    H1,
    #[serde(rename = "13C")]
    C13,
}

impl Isotope {
    pub const ALL: [Isotope; 2] = [Isotope::H1, Isotope::C13];

    pub fn label(self) -> &'static str {
        match self {
            Isotope::H1 => "1H",
            Isotope::C13 => "13C",
        }
    }

    /// Gyromagnetic ratio relative to ¹H.
    pub fn gamma_rel(self) -> f64 {
        match self {
            Isotope::H1 => 1.0,
            Isotope::C13 => 0.25144,
        }
    }

    pub fn from_label(label: &str) -> Option<Isotope> {
        Isotope::ALL.into_iter().find(|i| i.label() == label)
    }
}

impl fmt::Display for Isotope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Isotope {
    type Err = SystemError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Isotope::from_label(s).ok_or_else(|| SystemError::UnknownIsotope(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Spin {
    pub id: String,
    pub isotope: Isotope,
    pub offset_hz: f64,
}

/// Coupling Hamiltonian form: `weak` keeps only `J IzSz`, `isotropic` the
/// full `J I·S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingModel {
    Weak,
    Isotropic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coupling {
    pub a: String,
    pub b: String,
    pub j_hz: f64,
    pub model: CouplingModel,
}

/// Coupling as written in a document; `model` may be omitted.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CouplingDoc {
    a: String,
    b: String,
    j_hz: f64,
    #[serde(default)]
    model: Option<CouplingModel>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemDoc {
    name: String,
    spins: Vec<Spin>,
    #[serde(default)]
    couplings: Vec<CouplingDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpinSystem {
    pub name: String,
    pub spins: Vec<Spin>,
    pub couplings: Vec<Coupling>,
}

/// A single broken invariant found by [`SpinSystem::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoSpins,
    TooManySpins(usize),
    DuplicateSpinId(String),
    NonFiniteOffset(String),
    SelfCoupling(String),
    DanglingCoupling {
        a: String,
        b: String,
        missing: String,
    },
    DuplicateCoupling {
        a: String,
        b: String,
    },
    NonFiniteCoupling {
        a: String,
        b: String,
    },
    HeteronuclearIsotropic {
        a: String,
        b: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoSpins => write!(f, "system has no spins"),
            Violation::TooManySpins(n) => write!(f, "spin count exceeds {MAX_SPINS} (got {n})"),
            Violation::DuplicateSpinId(id) => write!(f, "duplicate spin id '{id}'"),
            Violation::NonFiniteOffset(id) => write!(f, "offset of spin '{id}' is not finite"),
            Violation::SelfCoupling(id) => write!(f, "spin '{id}' is coupled to itself"),
            Violation::DanglingCoupling { a, b, missing } => {
                write!(f, "coupling {a}-{b} references undeclared spin '{missing}'")
            }
            Violation::DuplicateCoupling { a, b } => {
                write!(f, "more than one coupling declared for pair {a}-{b}")
            }
            Violation::NonFiniteCoupling { a, b } => {
                write!(f, "coupling {a}-{b} is not finite")
            }
            Violation::HeteronuclearIsotropic { a, b } => {
                write!(f, "heteronuclear coupling {a}-{b} must use the weak model")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid spin system: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("unknown builtin system '{0}' (expected ch2, ch-remote, ch2-remote or ax)")]
    UnknownBuiltin(String),
    #[error("unknown spin id '{0}'")]
    UnknownSpin(String),
    #[error("unknown isotope '{0}'")]
    UnknownIsotope(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl SpinSystem {
    /// Builds and validates a system.
    pub fn new(
        name: impl Into<String>,
        spins: Vec<Spin>,
        couplings: Vec<Coupling>,
    ) -> Result<Self, SystemError> {
        let sys = SpinSystem {
            name: name.into(),
            spins,
            couplings,
        };
        let violations = sys.validate();
        if violations.is_empty() {
            Ok(sys)
        } else {
            Err(SystemError::Invalid(violations))
        }
    }

    pub fn len(&self) -> usize {
        self.spins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spins.is_empty()
    }

    /// Hilbert-space dimension, 2^N.
    pub fn dim(&self) -> usize {
        1 << self.spins.len()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.spins.iter().position(|s| s.id == id)
    }

    pub fn spin_index(&self, id: &str) -> Result<usize, SystemError> {
        self.index_of(id)
            .ok_or_else(|| SystemError::UnknownSpin(id.to_string()))
    }

    pub fn isotope_of(&self, index: usize) -> Isotope {
        self.spins[index].isotope
    }

    pub fn has_isotope(&self, iso: Isotope) -> bool {
        self.spins.iter().any(|s| s.isotope == iso)
    }

    /// Indices of all spins of one isotope, in document order.
    pub fn spins_of(&self, iso: Isotope) -> Vec<usize> {
        self.spins
            .iter()
            .enumerate()
            .filter(|(_, s)| s.isotope == iso)
            .map(|(i, _)| i)
            .collect()
    }

    /// Couplings resolved to spin indices.
    pub fn indexed_couplings(&self) -> Vec<(usize, usize, f64, CouplingModel)> {
        self.couplings
            .iter()
            .filter_map(|c| {
                let a = self.index_of(&c.a)?;
                let b = self.index_of(&c.b)?;
                Some((a, b, c.j_hz, c.model))
            })
            .collect()
    }

    /// Scalar coupling between two spins, 0 when undeclared.
    pub fn j_between(&self, a: usize, b: usize) -> f64 {
        self.indexed_couplings()
            .into_iter()
            .find(|&(x, y, _, _)| (x == a && y == b) || (x == b && y == a))
            .map(|(_, _, j, _)| j)
            .unwrap_or(0.0)
    }

    pub fn all_weak(&self) -> bool {
        self.couplings
            .iter()
            .all(|c| c.model == CouplingModel::Weak)
    }

    /// Checks every invariant; an empty list means the system is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.spins.is_empty() {
            out.push(Violation::NoSpins);
        }
        if self.spins.len() > MAX_SPINS {
            out.push(Violation::TooManySpins(self.spins.len()));
        }
        let mut seen = HashSet::new();
        for s in &self.spins {
            if !seen.insert(s.id.as_str()) {
                out.push(Violation::DuplicateSpinId(s.id.clone()));
            }
            if !s.offset_hz.is_finite() {
                out.push(Violation::NonFiniteOffset(s.id.clone()));
            }
        }
        let mut pairs = HashSet::new();
        for c in &self.couplings {
            if c.a == c.b {
                out.push(Violation::SelfCoupling(c.a.clone()));
                continue;
            }
            let ia = self.index_of(&c.a);
            let ib = self.index_of(&c.b);
            for (idx, id) in [(ia, &c.a), (ib, &c.b)] {
                if idx.is_none() {
                    out.push(Violation::DanglingCoupling {
                        a: c.a.clone(),
                        b: c.b.clone(),
                        missing: id.clone(),
                    });
                }
            }
            if !c.j_hz.is_finite() {
                out.push(Violation::NonFiniteCoupling {
                    a: c.a.clone(),
                    b: c.b.clone(),
                });
            }
            let key = if c.a < c.b {
                (c.a.as_str(), c.b.as_str())
            } else {
                (c.b.as_str(), c.a.as_str())
            };
            if !pairs.insert(key) {
                out.push(Violation::DuplicateCoupling {
                    a: c.a.clone(),
                    b: c.b.clone(),
                });
            }
            if let (Some(ia), Some(ib)) = (ia, ib) {
                if self.spins[ia].isotope != self.spins[ib].isotope
                    && c.model == CouplingModel::Isotropic
                {
                    out.push(Violation::HeteronuclearIsotropic {
                        a: c.a.clone(),
                        b: c.b.clone(),
                    });
                }
            }
        }
        out
    }

    /// Canonical JSON document; `load_system(to_json())` reproduces `self`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spin system serializes")
    }

    /// SHA-256 of the canonical document, hex encoded.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        hex::encode(digest)
    }

    /// Copy with every offset of `iso` multiplied by `factor`.
    pub fn with_scaled_offsets(&self, iso: Isotope, factor: f64) -> SpinSystem {
        let mut out = self.clone();
        for s in out.spins.iter_mut().filter(|s| s.isotope == iso) {
            s.offset_hz *= factor;
        }
        out
    }

    /// Shrinks offsets of `iso` so the largest sits at `fraction` of the
    /// spectral width. Offsets already inside that limit are kept.
    pub fn fit_offsets_into(&self, iso: Isotope, sw_hz: f64, fraction: f64) -> SpinSystem {
        let max = self
            .spins
            .iter()
            .filter(|s| s.isotope == iso)
            .map(|s| s.offset_hz.abs())
            .fold(0.0, f64::max);
        let limit = fraction * sw_hz;
        if max <= limit || max == 0.0 {
            self.clone()
        } else {
            self.with_scaled_offsets(iso, limit / max)
        }
    }
}

/// Parses and validates a spin-system JSON document.
pub fn load_system(text: &str) -> Result<SpinSystem, SystemError> {
    let doc: SystemDoc = serde_json::from_str(text).map_err(|e| SystemError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let isotope_of = |id: &str| doc.spins.iter().find(|s| s.id == id).map(|s| s.isotope);
    let couplings = doc
        .couplings
        .into_iter()
        .map(|c| {
            let model = c
                .model
                .unwrap_or_else(|| match (isotope_of(&c.a), isotope_of(&c.b)) {
                    (Some(x), Some(y)) if x != y => CouplingModel::Weak,
                    _ => CouplingModel::Isotropic,
                });
            Coupling {
                a: c.a,
                b: c.b,
                j_hz: c.j_hz,
                model,
            }
        })
        .collect();
    SpinSystem::new(doc.name, doc.spins, couplings)
}

fn spin(id: &str, isotope: Isotope, offset_hz: f64) -> Spin {
    Spin {
        id: id.to_string(),
        isotope,
        offset_hz,
    }
}

fn weak(a: &str, b: &str, j_hz: f64) -> Coupling {
    Coupling {
        a: a.to_string(),
        b: b.to_string(),
        j_hz,
        model: CouplingModel::Weak,
    }
}

/// Default two-bond ¹³C–¹H coupling of the `ch-remote` builtin, Hz.
pub const DEFAULT_REMOTE_2J: f64 = 15.0;

/// Builtin reference systems: `ch2`, `ch-remote`, `ch2-remote`, `ax`.
pub fn builtin_system(name: &str) -> Result<SpinSystem, SystemError> {
    match name {
        "ch-remote" => ch_remote(DEFAULT_REMOTE_2J),
        _ => builtin_inner(name),
    }
}

/// `¹³C(¹H)–¹²C(¹H)`: H1 bound to C1 (145 Hz), H2 on the spinless
/// neighbour with a two-bond coupling `two_j_hz` to C1, H1–H2 7 Hz.
pub fn ch_remote(two_j_hz: f64) -> Result<SpinSystem, SystemError> {
    let [h1, h2] = DEFAULT_H_OFFSETS;
    SpinSystem::new(
        "ch-remote",
        vec![
            spin("H1", Isotope::H1, h1),
            spin("H2", Isotope::H1, h2),
            spin("C1", Isotope::C13, DEFAULT_C_OFFSET),
        ],
        vec![
            weak("H1", "C1", 145.0),
            weak("H1", "H2", 7.0),
            weak("H2", "C1", two_j_hz),
        ],
    )
}

fn builtin_inner(name: &str) -> Result<SpinSystem, SystemError> {
    let [h1, h2] = DEFAULT_H_OFFSETS;
    match name {
        // isolated methylene
        "ch2" => SpinSystem::new(
            "ch2",
            vec![
                spin("H1", Isotope::H1, h1),
                spin("H2", Isotope::H1, h2),
                spin("C1", Isotope::C13, DEFAULT_C_OFFSET),
            ],
            vec![
                weak("H1", "H2", 13.9),
                weak("H1", "C1", 140.0),
                weak("H2", "C1", 140.0),
            ],
        ),
        "ch2-remote" => SpinSystem::new(
            "ch2-remote",
            vec![
                spin("H1", Isotope::H1, h1),
                spin("H2", Isotope::H1, h2),
                spin("C1", Isotope::C13, DEFAULT_C_OFFSET),
                spin("H3", Isotope::H1, 950.0),
            ],
            vec![
                weak("H1", "H2", 13.9),
                weak("H1", "C1", 140.0),
                weak("H2", "C1", 140.0),
                weak("H1", "H3", 7.0),
                weak("H2", "H3", 7.0),
                weak("H3", "C1", 5.0),
            ],
        ),
        "ax" => SpinSystem::new(
            "ax",
            vec![spin("A", Isotope::H1, h1), spin("X", Isotope::H1, h2)],
            vec![weak("A", "X", 10.0)],
        ),
        other => Err(SystemError::UnknownBuiltin(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAR3: &str = r#"{
        "name": "sar3-ch2",
        "spins": [
            {"id": "H1", "isotope": "1H", "offset_hz": 1200},
            {"id": "H2", "isotope": "1H", "offset_hz": 1450},
            {"id": "C1", "isotope": "13C", "offset_hz": 500}
        ],
        "couplings": [
            {"a": "H1", "b": "H2", "j_hz": 13.9, "model": "weak"},
            {"a": "H1", "b": "C1", "j_hz": 140, "model": "weak"},
            {"a": "H2", "b": "C1", "j_hz": 140, "model": "weak"}
        ]
    }"#;

    #[test]
    fn loads_sar3_document() {
        let sys = load_system(SAR3).unwrap();
        assert_eq!(sys.name, "sar3-ch2");
        assert_eq!(sys.len(), 3);
        let ids: Vec<_> = sys.spins.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["H1", "H2", "C1"]);
        assert_eq!(sys.j_between(0, 1), 13.9);
        assert_eq!(sys.j_between(2, 0), 140.0);
    }

    #[test]
    fn single_spin_document() {
        let sys = load_system(
            r#"{"name": "one", "spins": [{"id": "H", "isotope": "1H", "offset_hz": 0}], "couplings": []}"#,
        )
        .unwrap();
        assert_eq!(sys.len(), 1);
        assert_eq!(sys.dim(), 2);
    }

    #[test]
    fn dangling_coupling_rejected() {
        let doc = r#"{"name": "x", "spins": [{"id": "H1", "isotope": "1H", "offset_hz": 0}],
            "couplings": [{"a": "H1", "b": "X9", "j_hz": 5, "model": "weak"}]}"#;
        match load_system(doc) {
            Err(SystemError::Invalid(v)) => {
                assert!(
                    matches!(&v[0], Violation::DanglingCoupling { missing, .. } if missing == "X9")
                )
            }
            other => panic!("expected dangling coupling error, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_has_position() {
        let err = load_system("{\n  \"name\": 3,\n}").unwrap_err();
        match err {
            SystemError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let doc = r#"{"name": "x", "spins": [], "couplings": [], "field": 400}"#;
        assert!(matches!(load_system(doc), Err(SystemError::Parse { .. })));
    }

    #[test]
    fn missing_model_defaults_by_pair_type() {
        let doc = r#"{"name": "x", "spins": [
            {"id": "H1", "isotope": "1H", "offset_hz": 0},
            {"id": "H2", "isotope": "1H", "offset_hz": 50},
            {"id": "C", "isotope": "13C", "offset_hz": 0}],
            "couplings": [{"a": "H1", "b": "H2", "j_hz": 5}, {"a": "H1", "b": "C", "j_hz": 140}]}"#;
        let sys = load_system(doc).unwrap();
        assert_eq!(sys.couplings[0].model, CouplingModel::Isotropic);
        assert_eq!(sys.couplings[1].model, CouplingModel::Weak);
    }

    #[test]
    fn builtins_are_valid() {
        for name in ["ch2", "ch-remote", "ch2-remote", "ax"] {
            let sys = builtin_system(name).unwrap();
            assert!(sys.validate().is_empty(), "{name}");
        }
        let ch2 = builtin_system("ch2").unwrap();
        assert_eq!(ch2.len(), 3);
        assert_eq!(ch2.j_between(0, 1), 13.9);
        assert_eq!(ch2.j_between(0, 2), 140.0);
        assert_eq!(ch2.j_between(1, 2), 140.0);
        let ax = builtin_system("ax").unwrap();
        assert_eq!((ax.len(), ax.couplings.len()), (2, 1));
        assert!(!ax.has_isotope(Isotope::C13));
        let remote = ch_remote(15.0).unwrap();
        assert_eq!(remote.j_between(1, 2), 15.0);
        assert!(matches!(
            builtin_system("ch4"),
            Err(SystemError::UnknownBuiltin(_))
        ));
    }

    #[test]
    fn nine_spins_violate_cap() {
        let spins = (0..9)
            .map(|i| spin(&format!("H{i}"), Isotope::H1, i as f64 * 10.0))
            .collect();
        let sys = SpinSystem {
            name: "big".into(),
            spins,
            couplings: vec![],
        };
        let v = sys.validate();
        assert_eq!(v, vec![Violation::TooManySpins(9)]);
        assert!(v[0].to_string().contains("spin count exceeds 8"));
    }

    #[test]
    fn heteronuclear_isotropic_violation_names_pair() {
        let mut sys = builtin_system("ch2").unwrap();
        sys.couplings[1].model = CouplingModel::Isotropic;
        let v = sys.validate();
        assert_eq!(
            v,
            vec![Violation::HeteronuclearIsotropic {
                a: "H1".into(),
                b: "C1".into()
            }]
        );
        assert!(v[0].to_string().contains("H1-C1"));
    }

    #[test]
    fn duplicate_ids_and_pairs() {
        let sys = SpinSystem {
            name: "d".into(),
            spins: vec![spin("A", Isotope::H1, 0.0), spin("A", Isotope::H1, 1.0)],
            couplings: vec![weak("A", "A", 1.0)],
        };
        let v = sys.validate();
        assert!(v.contains(&Violation::DuplicateSpinId("A".into())));
        assert!(v.contains(&Violation::SelfCoupling("A".into())));
    }

    #[test]
    fn gamma_table() {
        assert_eq!(Isotope::H1.gamma_rel(), 1.0);
        assert_eq!(Isotope::C13.gamma_rel(), 0.25144);
        assert_eq!("13C".parse::<Isotope>().unwrap(), Isotope::C13);
    }

    #[test]
    fn fit_offsets_scales_only_when_needed() {
        let sys = builtin_system("ch2").unwrap();
        let fitted = sys.fit_offsets_into(Isotope::H1, 800.0, 0.35);
        assert!((fitted.spins[1].offset_hz - 280.0).abs() < 1e-12);
        assert_eq!(fitted.spins[2].offset_hz, 500.0);
        let same = sys.fit_offsets_into(Isotope::C13, 6500.0, 0.35);
        assert_eq!(same, sys);
    }
}
