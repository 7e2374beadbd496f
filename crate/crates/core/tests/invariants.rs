use num_complex::Complex64;
use pehmqc::hilbert::{
    apply_pulse, coherence_filter, hamiltonian, CoherenceSelection, DensityState, Evolver, HamiltonianSpec,
};
use pehmqc::po::{po_evolve, po_from_density, po_pulse, po_to_density, Letter, POState, POTerm};
use pehmqc::processing::{fft_forward, fft_inverse};
use pehmqc::spin_system::{Coupling, CouplingModel, Isotope, Spin, SpinSystem};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Pulse { carbon: bool, flip: f64, phase: f64 },
    Delay(f64),
}

fn system_strategy() -> impl Strategy<Value = SpinSystem> {
    (1usize..=3)
        .prop_flat_map(|n| {
            (
                prop::collection::vec((any::<bool>(), -1500.0f64..1500.0), n),
                prop::collection::vec(-150.0f64..150.0, n * (n - 1) / 2),
            )
        })
        .prop_map(|(spins, js)| {
            let n = spins.len();
            let spins = spins
                .into_iter()
                .enumerate()
                .map(|(k, (carbon, nu))| Spin {
                    id: format!("S{k}"),
                    isotope: if carbon { Isotope::C13 } else { Isotope::H1 },
                    offset_hz: nu,
                })
                .collect();
            let mut couplings = Vec::new();
            let mut it = js.into_iter();
            for a in 0..n {
                for b in a + 1..n {
                    couplings.push(Coupling {
                        a: format!("S{a}"),
                        b: format!("S{b}"),
                        j_hz: it.next().unwrap(),
                        model: CouplingModel::Weak,
                    });
                }
            }
            SpinSystem::new("prop", spins, couplings).unwrap()
        })
}

fn state_for(n: usize, vals: &[f64]) -> POState {
    let letters = [Letter::E, Letter::X, Letter::Y, Letter::Z];
    let terms = (0..4usize.pow(n as u32)).map(|index| {
        let mut code = index;
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(letters[code % 4]);
            code /= 4;
        }
        (POTerm(v), vals[index % vals.len()])
    });
    POState::from_terms(n, terms.collect::<Vec<_>>())
}

fn op_strategy() -> impl Strategy<Value = Op> {
    prop_oneof![
        (any::<bool>(), -360.0f64..360.0, -360.0f64..360.0).prop_map(|(carbon, flip, phase)| Op::Pulse {
            carbon,
            flip,
            phase
        }),
        (0.0f64..0.05).prop_map(Op::Delay),
    ]
}

fn selection_strategy() -> impl Strategy<Value = CoherenceSelection> {
    (prop::collection::btree_set(-2i32..=2, 1..4), prop::collection::btree_set(-2i32..=2, 1..4)).prop_map(|(h, c)| {
        let h: Vec<i32> = h.into_iter().collect();
        let c: Vec<i32> = c.into_iter().collect();
        CoherenceSelection::product(&[(Isotope::H1, &h), (Isotope::C13, &c)])
    })
}

fn sorted_eigenvalues(rho: &DensityState) -> Vec<f64> {
    let mut e: Vec<f64> = rho.matrix.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    e.sort_by(f64::total_cmp);
    e
}

fn apply(sys: &SpinSystem, ev: &Evolver, rho: &DensityState, op: &Op) -> DensityState {
    match *op {
        Op::Pulse { carbon, flip, phase } => {
            let iso = if carbon { Isotope::C13 } else { Isotope::H1 };
            apply_pulse(sys, rho, iso, flip, phase).unwrap()
        }
        Op::Delay(t) => ev.evolve(rho, t).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chains_preserve_trace_purity_spectrum_and_hermiticity(
        sys in system_strategy(),
        vals in prop::collection::vec(-1.0f64..1.0, 64),
        ops in prop::collection::vec(op_strategy(), 1..30),
    ) {
        let ev = Evolver::new(&hamiltonian(&sys, &HamiltonianSpec::full()).unwrap());
        let rho0 = po_to_density(&state_for(sys.len(), &vals));
        let mut rho = rho0.clone();
        for op in &ops {
            rho = apply(&sys, &ev, &rho, op);
            prop_assert!(rho.hermiticity_error() <= 1e-12);
        }
        prop_assert!((rho.trace() - rho0.trace()).norm() <= 1e-10);
        prop_assert!((rho.purity() - rho0.purity()).abs() <= 1e-10);
        for (a, b) in sorted_eigenvalues(&rho).iter().zip(sorted_eigenvalues(&rho0)) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn evolution_composes(
        sys in system_strategy(),
        vals in prop::collection::vec(-1.0f64..1.0, 64),
        t1 in 0.0f64..0.1,
        t2 in 0.0f64..0.1,
    ) {
        let ev = Evolver::new(&hamiltonian(&sys, &HamiltonianSpec::full()).unwrap());
        let rho = po_to_density(&state_for(sys.len(), &vals));
        let whole = ev.evolve(&rho, t1 + t2).unwrap();
        let split = ev.evolve(&ev.evolve(&rho, t1).unwrap(), t2).unwrap();
        prop_assert!(whole.max_diff(&split) <= 1e-10);
    }

    #[test]
    fn filter_is_idempotent_and_commutes_with_free_evolution(
        sys in system_strategy(),
        vals in prop::collection::vec(-1.0f64..1.0, 64),
        sel in selection_strategy(),
        t in 0.0f64..0.05,
    ) {
        let rho = po_to_density(&state_for(sys.len(), &vals));
        let once = coherence_filter(&sys, &rho, &sel);
        prop_assert_eq!(&coherence_filter(&sys, &once, &sel), &once);
        // weak-coupling Hamiltonians are diagonal, so free evolution is a z-rotation
        let ev = Evolver::new(&hamiltonian(&sys, &HamiltonianSpec::full()).unwrap());
        let a = coherence_filter(&sys, &ev.evolve(&rho, t).unwrap(), &sel);
        let b = ev.evolve(&once, t).unwrap();
        prop_assert!(a.max_diff(&b) <= 1e-12);
    }

    #[test]
    fn product_operator_chain_matches_matrix_chain(
        sys in system_strategy(),
        vals in prop::collection::vec(-1.0f64..1.0, 64),
        ops in prop::collection::vec(op_strategy(), 1..30),
    ) {
        let ev = Evolver::new(&hamiltonian(&sys, &HamiltonianSpec::full()).unwrap());
        let mut po = state_for(sys.len(), &vals);
        let mut rho = po_to_density(&po);
        for op in &ops {
            rho = apply(&sys, &ev, &rho, op);
            po = match *op {
                Op::Pulse { carbon, flip, phase } => {
                    let iso = if carbon { Isotope::C13 } else { Isotope::H1 };
                    if sys.has_isotope(iso) { po_pulse(&sys, &po, iso, flip, phase).unwrap() } else { po }
                }
                Op::Delay(t) => po_evolve(&sys, &po, t).unwrap(),
            };
            prop_assert!(po_from_density(&sys, &rho).unwrap().max_diff(&po) <= 1e-9);
        }
    }

    #[test]
    fn proton_echo_refocuses_offset(
        nu in -2000.0f64..2000.0,
        tau in 0.0f64..0.05,
        vals in prop::collection::vec(-1.0f64..1.0, 64),
    ) {
        let run = |offset: f64| {
            let sys = SpinSystem::new(
                "h",
                vec![Spin { id: "H".into(), isotope: Isotope::H1, offset_hz: offset }],
                vec![],
            )
            .unwrap();
            let ev = Evolver::new(&hamiltonian(&sys, &HamiltonianSpec::full()).unwrap());
            let rho = po_to_density(&state_for(1, &vals));
            let a = ev.evolve(&rho, tau).unwrap();
            let b = apply_pulse(&sys, &a, Isotope::H1, 180.0, 0.0).unwrap();
            ev.evolve(&b, tau).unwrap()
        };
        prop_assert!(run(nu).max_diff(&run(0.0)) <= 1e-10);
    }

    #[test]
    fn dft_round_trip(v in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..300)) {
        let x: Vec<Complex64> = v.iter().map(|&(re, im)| Complex64::new(re, im)).collect();
        let mut y = x.clone();
        fft_forward(&mut y);
        let ex: f64 = x.iter().map(|z| z.norm_sqr()).sum();
        let ey: f64 = y.iter().map(|z| z.norm_sqr()).sum::<f64>() / x.len() as f64;
        prop_assert!((ex - ey).abs() <= 1e-9 * ex.max(1.0));
        fft_inverse(&mut y);
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a - b).norm() <= 1e-10);
        }
    }
}
